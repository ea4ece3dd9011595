"""Electrostatic fields and pseudopotentials of rf ion traps with dielectric cavity mirrors.

Modules:
    geometry        trap builders, mirror pairs and the CSG scene
    discretization  tensor grids, rasterisation and domain sizing
    solver          finite-volume Laplace/Poisson solves and field probes
    analysis        rf null, depths, secular frequencies, Taylor/anharmonicity
    config, runner  study configs, case pipeline, sweeps and presets
"""
from .analysis import (CALCIUM_40, IonSpecies, TrapReport, anharmonicity, find_rf_null, normalize_report,
                       null_shift, pseudopotential, secular_frequency, taylor_fit, trap_depth)
from .config import StudyConfig, parse_config
from .discretization import Grid3D, auto_domain, rasterize
from .geometry import (MirrorPairSpec, TrapAssembly, add_mirror_pair, build_blade_trap, build_endcap_trap,
                       build_stylus_trap, build_surface_trap, build_trap, build_wafer_trap, scale_assembly)
from .runner import preset, run_case, run_sweep
from .solver import FieldSolution, SolveSpec, assemble, field_probe, solve, solve_surface_charge

__version__ = "0.1.0"
