"""Solve-and-analyse pipeline shared by the runner and the domain sizing loop."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import analysis as an
from .discretization import Grid3D
from .geometry import TrapAssembly
from .solver import FieldSolution, SolveSpec, solve_assembly

log = logging.getLogger(__name__)

AXES = {"x": (1.0, 0.0, 0.0), "y": (0.0, 1.0, 0.0), "z": (0.0, 0.0, 1.0)}


def canonical_json(obj) -> str:
    """Stable serialization used for every content hash."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(f"cannot serialise {type(v).__name__}")


def content_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def geometry_hash(assembly: TrapAssembly) -> str:
    return content_hash(assembly.to_dict())


def grid_key(grid: Grid3D) -> str:
    return content_hash([f.tolist() for f in grid.faces])


@dataclass(frozen=True)
class AnalysisOptions:
    """Knobs of the observable extraction. Lengths are at scale a = 1."""

    parabola_half_range: float = 50e-6
    parabola_points: int = 41
    null_half_width: float = 0.3e-3
    depth_axes: tuple[str, ...] = ("x", "y")
    frequency_axes: tuple[str, ...] = ("x", "y")
    taylor_axis: str | None = None  # None: skip the Taylor fit
    temperature: float = 590e-6

    def to_dict(self) -> dict:
        return {"parabola_half_range": self.parabola_half_range, "parabola_points": self.parabola_points,
                "null_half_width": self.null_half_width, "depth_axes": list(self.depth_axes),
                "frequency_axes": list(self.frequency_axes), "taylor_axis": self.taylor_axis,
                "temperature": self.temperature}


def species_of(assembly: TrapAssembly) -> an.IonSpecies:
    return an.IonSpecies.from_units(assembly.ion.mass_amu, assembly.ion.charge_e)


def locate_null(pseudo: an.PseudoMap, assembly: TrapAssembly, options: AnalysisOptions,
                hint=None) -> np.ndarray:
    """rf null near ``hint`` (default the nominal centre).

    Linear and surface traps have a null line along z, so the search is done in
    the plane through the hint perpendicular to z.
    """
    c = np.asarray(assembly.nominal_center if hint is None else hint, float)
    w = options.null_half_width * assembly.scale
    region = (c - w, c + w)
    if assembly.family in ("linear", "surface"):
        return an.find_rf_null(pseudo, region, plane_axis=2, plane_value=float(c[2]))
    return an.find_rf_null(pseudo, region)


def analyze(assembly: TrapAssembly, solution: FieldSolution, options: AnalysisOptions | None = None,
            hint=None) -> an.TrapReport:
    options = options or AnalysisOptions()
    species = species_of(assembly)
    ghash = geometry_hash(assembly)
    pseudo = an.pseudopotential(solution, species, assembly.drive.omega, ghash)
    null = locate_null(pseudo, assembly, options, hint)
    depths = {k: an.trap_depth(pseudo, null, AXES[k]) for k in options.depth_axes}
    half = options.parabola_half_range * assembly.scale
    freqs = {k: an.secular_frequency(pseudo, null, AXES[k], half, options.parabola_points)
             for k in options.frequency_axes}
    taylor = anharm = None
    if options.taylor_axis is not None:
        taylor = an.taylor_fit(pseudo, null, AXES[options.taylor_axis], start=10e-6 * assembly.scale,
                               step=10e-6 * assembly.scale, strict=False)
        f_x = freqs.get("x") or an.curvature_to_frequency(taylor.coefficients[2], species)
        anharm = an.anharmonicity(taylor.coefficients, species, options.temperature, f_x)
    return an.TrapReport(assembly.name, null, depths, freqs, taylor, anharm, geometry_hash=ghash)


def solve_and_analyze(assembly: TrapAssembly, grid: Grid3D, spec: SolveSpec | None = None,
                      options: AnalysisOptions | None = None, hint=None) -> tuple[an.TrapReport, FieldSolution]:
    solution = solve_assembly(assembly, grid, spec)
    return analyze(assembly, solution, options, hint), solution


def baseline_observables(assembly: TrapAssembly, grid: Grid3D) -> dict[str, float]:
    """Depths and secular frequencies used to judge domain convergence."""
    report, _ = solve_and_analyze(assembly, grid)
    out = {f"depth_{k}": d.depth for k, d in report.depths.items() if math.isfinite(d.depth)}
    out.update({f"freq_{k}": f for k, f in report.frequencies.items()})
    return out
