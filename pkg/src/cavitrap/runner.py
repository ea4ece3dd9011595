"""Case execution, baseline caching, sweeps, presets and report emission."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis as an
from .config import (AnalysisConfig, CavityConfig, ConfigError, GridConfig, StudyConfig, SurfaceChargeConfig,
                     SweepConfig, expand_cases)
from .discretization import DomainError, DomainLog, Grid3D, auto_domain, grid_for
from .geometry import Coating, Misalignment, TrapAssembly, add_mirror_pair, build_trap
from .pipeline import AnalysisOptions, analyze, content_hash, geometry_hash, grid_key
from .solver import SolveSpec, SolverError, dump_field, solve_assembly, solve_surface_charge

log = logging.getLogger(__name__)

WORKERS_ENV = "CAVITRAP_WORKERS"
MM = 1e-3


class CaseError(RuntimeError):
    def __init__(self, case: str, cause: Exception):
        super().__init__(f"case {case}: {cause}")
        self.case = case
        self.cause = cause


@dataclass
class CaseResult:
    index: int
    label: str
    config: StudyConfig
    config_hash: str
    report: an.TrapReport | None
    baseline: an.TrapReport | None
    sweep_value: float | None = None
    efield: np.ndarray | None = None  # static field at the null (surface-charge study)
    solve: dict = field(default_factory=dict)
    wall_time: float = 0.0
    error: str | None = None
    domain: DomainLog | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self, deterministic: bool = True) -> dict:
        out = {
            "index": self.index,
            "label": self.label,
            "config_hash": self.config_hash,
            "config": self.config.to_dict(),
            "sweep_value": self.sweep_value,
            "status": "ok" if self.ok else "failed",
            "error": self.error,
            "report": None if self.report is None else self.report.to_dict(),
            "baseline": None if self.baseline is None else self.baseline.to_dict(),
            "solve": {k: v for k, v in self.solve.items() if not (deterministic and k == "wall_time")},
        }
        if self.domain is not None:
            out["domain"] = {"half_widths_m": self.domain.half_widths, "observables": self.domain.observables,
                             "converged": self.domain.converged}
        if self.efield is not None:
            out["efield_V_per_m"] = [float(v) for v in self.efield]
            out["efield_abs_V_per_m"] = float(np.linalg.norm(self.efield))
        if not deterministic:
            out["wall_time_s"] = self.wall_time
        return out


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def build_assembly(config: StudyConfig) -> TrapAssembly:
    asm = build_trap(config.trap, config.scale)
    return dataclasses.replace(asm, drive=config.drive, ion=config.ion)


def analysis_options(config: StudyConfig) -> AnalysisOptions:
    a = config.analysis
    axis = a.taylor_axis
    if axis == "cavity":
        axis = config.cavity.axis if config.cavity is not None else "x"
    return AnalysisOptions(parabola_half_range=a.parabola_half_range, null_half_width=a.null_half_width,
                           taylor_axis=axis, temperature=a.temperature)


def solve_spec(config: StudyConfig) -> SolveSpec:
    return SolveSpec(rf_amplitude=config.drive.v_rf, omega=config.drive.omega,
                     tolerance=config.solver.tolerance, max_iterations=config.solver.max_iterations)


def _grid_settings_key(config: StudyConfig, asm: TrapAssembly) -> str:
    return content_hash({"geometry": geometry_hash(asm), "grid": dataclasses.asdict(config.grid),
                         "solver": dataclasses.asdict(config.solver)})


class BaselineCache:
    """No-cavity grids and reports keyed by content hash.

    Keys cover the assembly, grid settings, solver settings and analysis
    options, so a cached entry is only reused for an identical baseline.
    """

    def __init__(self):
        self.grids: dict[str, tuple[Grid3D, DomainLog | None]] = {}
        self.reports: dict[str, an.TrapReport] = {}
        self.solves: dict[str, dict] = {}  # solver statistics of each baseline report
        self.hits = 0

    def grid(self, config: StudyConfig, asm: TrapAssembly) -> tuple[Grid3D, DomainLog | None]:
        key = _grid_settings_key(config, asm)
        if key in self.grids:
            self.hits += 1
            return self.grids[key]
        g = config.grid
        h = g.spacing * config.scale
        spec = solve_spec(config)
        if g.half_width is not None:
            out = (grid_for(asm, h, g.half_width * config.scale, g.ratio), None)
        else:
            def evaluate(assembly, grid):
                sol = solve_assembly(assembly, grid, spec)
                rep = analyze(assembly, sol, AnalysisOptions(
                    parabola_half_range=config.analysis.parabola_half_range,
                    null_half_width=config.analysis.null_half_width))
                obs = {f"depth_{k}": d.depth for k, d in rep.depths.items() if d.bounded}
                obs.update({f"freq_{k}": f for k, f in rep.frequencies.items()})
                return obs
            try:
                out = auto_domain(asm, g.auto_domain_tolerance, h, g.ratio, evaluate=evaluate)
            except DomainError as exc:
                if g.strict_domain:
                    raise
                log.warning("%s: %s; using the largest box", asm.name, exc)
                out = (exc.grid, exc.log)
        self.grids[key] = out
        return out

    def _report_key(self, config: StudyConfig, asm: TrapAssembly, grid: Grid3D) -> str:
        return content_hash({"settings": _grid_settings_key(config, asm), "grid": grid_key(grid),
                             "analysis": analysis_options(config).to_dict()})

    def report(self, config: StudyConfig, asm: TrapAssembly, grid: Grid3D) -> an.TrapReport:
        key = self._report_key(config, asm, grid)
        if key in self.reports:
            self.hits += 1
            return self.reports[key]
        sol = solve_assembly(asm, grid, solve_spec(config))
        rep = analyze(asm, sol, analysis_options(config))
        self.reports[key] = rep
        self.solves[key] = _solve_stats(sol)
        return rep

    def solve_stats(self, config: StudyConfig, asm: TrapAssembly, grid: Grid3D) -> dict:
        return self.solves.get(self._report_key(config, asm, grid), {})


_DEFAULT_CACHE = BaselineCache()


def _solve_stats(sol) -> dict:
    return {"mode": sol.mode, "iterations": sol.iterations, "residual": sol.residual, "wall_time": sol.wall_time}


def case_label(config: StudyConfig) -> str:
    parts = [config.trap]
    if config.scale != 1.0:
        parts.append(f"a={config.scale:g}")
    c = config.cavity
    if c is None:
        parts.append("no-cavity")
    else:
        parts.append(f"{c.axis}-cavity L={c.length / MM:g}mm")
        m = c.misalignment
        for k in ("longitudinal", "transverse", "skew"):
            v = getattr(m, k)
            if v:
                parts.append(f"{k}={v / MM:g}mm")
        if c.eps_r != 3.8:
            parts.append(f"eps={c.eps_r:g}")
        if c.coating is not None:
            co = c.coating
            parts.append(f"coating {co.thickness * 1e6:g}um eps={co.eps_r:g}"
                         + (f" sigma={co.sigma:g}" if co.sigma else "") + (" grounded" if co.grounded else ""))
        if c.metalized:
            parts.append("metalized")
        if c.sigma:
            parts.append(f"sigma={c.sigma:g}")
    if config.study == "surface_charge":
        parts.append(f"charge {config.surface_charge.density:g} C/m2 on {config.surface_charge.facet}")
    return " ".join(parts)


def _half_width(grid: Grid3D) -> float:
    return float(np.max(grid.upper - grid.origin)) / 2


def config_hash(config: StudyConfig) -> str:
    return content_hash(config.to_dict())


def run_case(config: StudyConfig, cache: BaselineCache | None = None, index: int = 0,
             sweep_value: float | None = None, out_dir: Path | None = None,
             baseline: an.TrapReport | None = None) -> CaseResult:
    """geometry -> rasterize -> solve -> analyse for one case, normalised to its baseline.

    Failures are raised as :class:`CaseError` carrying the case label.
    """
    cache = _DEFAULT_CACHE if cache is None else cache
    label = config.name or case_label(config)
    t0 = time.perf_counter()
    try:
        asm = build_assembly(config)
        grid, domain = cache.grid(config, asm)
        if baseline is None:
            baseline = cache.report(config, asm, grid)
        result = CaseResult(index, label, config, config_hash(config), None, baseline, sweep_value, domain=domain)
        if config.cavity is None:
            report = baseline
            result.solve = {"grid": list(grid.dims), "h_m": grid.h, "half_width_m": _half_width(grid),
                            **cache.solve_stats(config, asm, grid)}
        else:
            cav = config.cavity
            center = tuple(float(v) for v in baseline.null) if cav.center == "null" else None
            spec = cav.mirror_spec(center)
            spec = spec.scaled(config.scale) if center is None else dataclasses.replace(
                spec.scaled(config.scale), center=center)
            full = add_mirror_pair(asm, spec)
            lo, hi = full.bounds()
            if np.any(lo < grid.origin) or np.any(hi > grid.upper):
                raise ConfigError("mirrors extend beyond the baseline domain; set grid.half_width larger")
            if config.study == "surface_charge":
                facet = _charged_facet(full, config.surface_charge)
                E, sol = solve_surface_charge(full, grid, facet, config.surface_charge.density, at=baseline.null,
                                              spec=dataclasses.replace(solve_spec(config), mode="dc_surface_charge"))
                result.efield = np.asarray(E, float)
                report = None
            else:
                sol = solve_assembly(full, grid, solve_spec(config))
                report = an.normalize_report(analyze(full, sol, analysis_options(config), hint=baseline.null),
                                             baseline)
            result.solve = {"grid": list(grid.dims), "h_m": grid.h, "half_width_m": _half_width(grid),
                            **_solve_stats(sol)}
            if out_dir is not None and config.output.dumps:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                dump_field(Path(out_dir) / f"case{index:03d}.field", sol)
        result.report = report
    except (SolverError, an.AnalysisError, ValueError, RuntimeError) as exc:
        raise CaseError(label, exc) from exc
    result.wall_time = time.perf_counter() - t0
    return result


def _run_case_safe(config: StudyConfig, cache: BaselineCache, index: int, value, out_dir, baseline=None):
    """run_case, turning a failure into a failed CaseResult."""
    try:
        return run_case(config, cache, index, value, out_dir, baseline)
    except CaseError as exc:
        log.error("%s", exc)
        return CaseResult(index, exc.case, config, config_hash(config), None, baseline, value,
                          error=f"{type(exc.cause).__name__}: {exc.cause}")


def _charged_facet(assembly: TrapAssembly, charge: SurfaceChargeConfig) -> str:
    labels = [d.label for d in assembly.dielectrics if d.facet is not None and d.label.endswith(charge.facet)]
    if not labels:
        raise ConfigError(f"no mirror facet on the {charge.facet!r} side")
    return labels[0]


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


@dataclass
class SweepResult:
    cases: list[CaseResult]

    @property
    def completed(self) -> list[CaseResult]:
        return [c for c in self.cases if c.ok]

    @property
    def failures(self) -> list[CaseResult]:
        return [c for c in self.cases if not c.ok]

    def csv(self) -> str:
        return cases_csv(self.completed)


def _worker(args):
    config, index, value, out_dir, baseline, grids = args
    cache = BaselineCache()
    cache.grids.update(grids)
    return _run_case_safe(config, cache, index, value, out_dir, baseline)


def run_configs(configs: list[tuple[StudyConfig, float | None]], workers: int | None = None,
                cache: BaselineCache | None = None, out_dir: Path | None = None) -> SweepResult:
    """Run independent cases; results come back in input order whatever the worker count."""
    cache = _DEFAULT_CACHE if cache is None else cache
    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1 or len(configs) == 1:
        return SweepResult([_run_case_safe(c, cache, i, v, out_dir) for i, (c, v) in enumerate(configs)])
    # baselines first, in this process, so workers never repeat them
    jobs = []
    for i, (c, v) in enumerate(configs):
        grids = {}
        try:
            asm = build_assembly(c)
            grid, domain = cache.grid(c, asm)
            # hand over the sized grid so workers skip the domain search
            grids[_grid_settings_key(c, asm)] = (grid, domain)
            base = cache.report(c, asm, grid)
        except Exception as exc:  # reported per case below
            log.error("baseline for case %d failed: %s", i, exc)
            base = None
        jobs.append((c, i, v, out_dir, base, grids))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(_worker, jobs))
    return SweepResult(sorted(results, key=lambda r: r.index))


def run_sweep(config: StudyConfig, workers: int | None = None, cache: BaselineCache | None = None,
              out_dir: Path | None = None) -> SweepResult:
    if config.sweep is not None and not config.sweep.values:
        raise ConfigError("sweep has no values")
    return run_configs(expand_cases(config), workers, cache, out_dir)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

CSV_COLUMNS = (
    "case", "label", "trap", "scale", "study", "cavity_axis", "cavity_length_m", "misalignment_longitudinal_m",
    "misalignment_transverse_m", "misalignment_skew_m", "eps_r", "coating", "coating_sigma_S_per_m", "metalized",
    "sweep_value",
    "null_x_m", "null_y_m", "null_z_m", "null_shift_x_m", "null_shift_y_m", "null_shift_z_m",
    "depth_x_eV", "depth_y_eV", "freq_x_Hz", "freq_y_Hz",
    "norm_depth_x", "norm_depth_y", "norm_depth_min", "norm_freq_x", "norm_freq_y",
    "A3", "A4", "A5", "A6", "l0_m", "fit_range_m", "fit_converged",
    "efield_x_V_per_m", "efield_y_V_per_m", "efield_z_V_per_m", "efield_abs_V_per_m",
    "iterations", "residual", "domain_half_width_m", "domain_converged", "config_hash", "geometry_hash", "baseline_hash",
)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        if not math.isfinite(v):
            return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
        return repr(v)
    return str(v)


def case_row(case: CaseResult) -> dict:
    c = case.config
    cav = c.cavity
    row = {k: None for k in CSV_COLUMNS}
    row.update(case=case.index, label=case.label, trap=c.trap, scale=c.scale, study=c.study,
               sweep_value=case.sweep_value, config_hash=case.config_hash,
               iterations=case.solve.get("iterations"), residual=case.solve.get("residual"))
    if case.solve.get("half_width_m") is not None:
        row.update(domain_half_width_m=case.solve["half_width_m"],
                   domain_converged=None if case.domain is None else case.domain.converged)
    if cav is not None:
        m = cav.misalignment
        row.update(cavity_axis=cav.axis, cavity_length_m=cav.length, misalignment_longitudinal_m=m.longitudinal,
                   misalignment_transverse_m=m.transverse, misalignment_skew_m=m.skew, eps_r=cav.eps_r,
                   coating=cav.coating is not None, metalized=cav.metalized,
                   coating_sigma_S_per_m=None if cav.coating is None else cav.coating.sigma)
    r, b = case.report, case.baseline
    if b is not None:
        row["baseline_hash"] = b.geometry_hash
    if r is not None:
        row.update(null_x_m=float(r.null[0]), null_y_m=float(r.null[1]), null_z_m=float(r.null[2]),
                   geometry_hash=r.geometry_hash)
        if b is not None:
            s = an.null_shift(r, b)
            row.update(null_shift_x_m=float(s[0]), null_shift_y_m=float(s[1]), null_shift_z_m=float(s[2]))
        for k in ("x", "y"):
            if k in r.depths:
                row[f"depth_{k}_eV"] = r.depths[k].depth
            if k in r.frequencies:
                row[f"freq_{k}_Hz"] = r.frequencies[k]
        n = r.normalized
        row.update(norm_depth_x=n.get("depth_x"), norm_depth_y=n.get("depth_y"), norm_depth_min=n.get("depth_min"),
                   norm_freq_x=n.get("freq_x"), norm_freq_y=n.get("freq_y"))
        if case.config.cavity is None:
            row.update(norm_depth_x=1.0, norm_depth_y=1.0, norm_depth_min=1.0, norm_freq_x=1.0, norm_freq_y=1.0)
        if r.anharmonic is not None:
            row.update({f"A{n_}": r.anharmonic.A[n_] for n_ in range(3, 7)})
            row["l0_m"] = r.anharmonic.l0
        if r.taylor is not None:
            row["fit_range_m"] = r.taylor.fit_range
            row["fit_converged"] = int(r.taylor.converged)
    if case.efield is not None:
        row.update(efield_x_V_per_m=float(case.efield[0]), efield_y_V_per_m=float(case.efield[1]),
                   efield_z_V_per_m=float(case.efield[2]), efield_abs_V_per_m=float(np.linalg.norm(case.efield)))
    return row


def cases_csv(cases: list[CaseResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for case in cases:
        row = case_row(case)
        w.writerow([_fmt(row[k]) for k in CSV_COLUMNS])
    return buf.getvalue()


def write_outputs(result: SweepResult, out_dir: Path, deterministic: bool = True, name: str = "study") -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out_dir / f"{name}.csv", "reports": []}
    paths["csv"].write_text(result.csv())
    for case in result.cases:
        p = out_dir / f"{name}_case{case.index:03d}.json"
        p.write_text(json.dumps(case.to_dict(deterministic), indent=2, sort_keys=True, default=_json_default) + "\n")
        paths["reports"].append(p)
    return paths


def _json_default(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return None
    raise TypeError(type(v).__name__)


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

PRESET_LENGTHS = tuple(v * MM for v in (0.5, 0.75, 1, 1.5, 2, 3, 4, 5))
TRAP_AXES = {"blade": ("x", "y", "z"), "wafer": ("x", "y", "z"), "endcap": ("x", "y"), "stylus": ("x", "y"),
             "surface": ("x", "y", "z")}
PRESETS = ("table1", "fig3", "fig4", "fig5", "fig6", "fig7", "fig8")

# rough single-core wall time at the default 25 um spacing
PRESET_WALL_TIME = {"table1": "5-8 min", "fig3": "40-60 min", "fig4": "40-60 min", "fig5": "4-6 min",
                    "fig6": "3-5 min", "fig7": "10-15 min", "fig8": "5-8 min"}


def _base(trap: str, grid: GridConfig | None = None, **kw) -> StudyConfig:
    return StudyConfig(trap=trap, grid=grid or GridConfig(), **kw)


def preset(name: str, grid: GridConfig | None = None) -> list[StudyConfig]:
    """Case matrix for a named study. Sweeps are returned as configs with a sweep section."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}")
    if name == "table1":
        return [_base(t, grid, name=f"table1 {t}") for t in TRAP_AXES]
    if name in ("fig3", "fig4"):
        out = []
        for trap, axes in TRAP_AXES.items():
            for ax in axes:
                out.append(_base(trap, grid, name="", cavity=CavityConfig(axis=ax, length=1 * MM,
                                                                          single_mirror=(trap == "surface" and ax == "y")),
                                 sweep=SweepConfig("cavity_length", PRESET_LENGTHS)))
        return out
    if name == "fig5":
        out = []
        for ax in ("x", "y", "z"):
            for mode in ("longitudinal", "transverse", "skew"):
                mis = Misalignment(**{mode: 0.1 * MM})
                out.append(_base("blade", grid, cavity=CavityConfig(axis=ax, length=1 * MM, misalignment=mis)))
        return out
    if name == "fig6":
        cav = CavityConfig(axis="x", length=1 * MM, misalignment=Misalignment(longitudinal=0.1 * MM))
        return [_base("blade", grid, cavity=cav, analysis=AnalysisConfig(taylor_axis="cavity"),
                      sweep=SweepConfig("cavity_length", tuple(v * MM for v in (1, 2, 3, 4, 5))))]
    if name == "fig7":
        out = []
        for trap, axes in TRAP_AXES.items():
            for ax in axes:
                cav = CavityConfig(axis=ax, length=1 * MM, single_mirror=(trap == "surface" and ax == "y"))
                out.append(_base(trap, grid, study="surface_charge", cavity=cav,
                                 sweep=SweepConfig("cavity_length", tuple(v * MM for v in (1, 2, 3, 4, 5)))))
        return out
    # fig8: mirror materials on the blade trap with a 1 mm x-cavity
    cav = CavityConfig(axis="x", length=1 * MM)
    return [
        _base("blade", grid, cavity=cav, sweep=SweepConfig("epsilon", (2.1, 3.8, 4.5))),
        _base("blade", grid, name="blade x-cavity coated", cavity=dataclasses.replace(cav, coating=Coating(10e-6, 15.0))),
        _base("blade", grid, cavity=cav, sweep=SweepConfig("conductivity", (0.01, 0.1, 1.0, 10.0, 100.0))),
        _base("blade", grid, name="blade x-cavity metalized", cavity=dataclasses.replace(cav, metalized=True)),
    ]


def preset_cases(name: str, grid: GridConfig | None = None) -> list[tuple[StudyConfig, float | None]]:
    cases = []
    for cfg in preset(name, grid):
        cases.extend(expand_cases(cfg))
    return cases
