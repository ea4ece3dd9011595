"""Study configuration: TOML documents, defaults, validation and case expansion.

Lengths are in metres at scale a = 1 and are multiplied by ``scale`` when the
case is built, so a config describes the same trap at any scale. A minimal
document is just ``trap = "blade"``.

Example::

    trap = "blade"
    study = "rf"                  # or "surface_charge"

    [grid]
    spacing = 25e-6               # uniform core spacing
    auto_domain_tolerance = 0.01  # used when half_width is not given

    [cavity]
    axis = "x"
    length = 1e-3

    [sweep]
    parameter = "cavity_length"   # misalignment | epsilon | conductivity
    values = [1e-3, 2e-3, 3e-3]
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Any

import tomli
import tomli_w

from .geometry import BUILDERS, AXES, Coating, Drive, IonParams, Misalignment, MirrorPairSpec

SWEEP_PARAMETERS = ("cavity_length", "misalignment", "epsilon", "conductivity")
MISALIGNMENT_MODES = ("longitudinal", "transverse", "skew")
STUDIES = ("rf", "surface_charge")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GridConfig:
    spacing: float = 25e-6
    ratio: float = 1.15
    half_width: float | None = None
    auto_domain_tolerance: float = 0.01
    # when the box never converges: False keeps the largest box tried and
    # flags it in the outputs, True fails the case
    strict_domain: bool = False


@dataclass(frozen=True)
class CavityConfig:
    axis: str
    length: float
    diameter: float = 0.7e-3
    substrate_length: float = 3e-3
    eps_r: float = 3.8
    sigma: float = 0.0
    metalized: bool = False
    coating: Coating | None = None
    misalignment: Misalignment = Misalignment()
    single_mirror: bool = False
    # "null": centre the mirrors on the baseline rf null; "nominal": on the builder's nominal centre
    center: str = "null"

    def mirror_spec(self, center=None) -> MirrorPairSpec:
        return MirrorPairSpec(axis=self.axis, length=self.length, diameter=self.diameter,
                              substrate_length=self.substrate_length, eps_r=self.eps_r, sigma=self.sigma,
                              metalized=self.metalized, coating=self.coating, misalignment=self.misalignment,
                              single_mirror=self.single_mirror, center=center)


@dataclass(frozen=True)
class SweepConfig:
    parameter: str
    values: tuple[float, ...]
    mode: str = "longitudinal"  # which offset a misalignment sweep varies


@dataclass(frozen=True)
class AnalysisConfig:
    parabola_half_range: float = 50e-6
    null_half_width: float = 0.3e-3
    taylor_axis: str | None = None  # x | y | z | "cavity"
    temperature: float = 590e-6


@dataclass(frozen=True)
class SolverConfig:
    tolerance: float = 1e-8
    max_iterations: int = 500


@dataclass(frozen=True)
class SurfaceChargeConfig:
    density: float = 1e-6  # C/m^2
    facet: str = "+"  # which mirror carries the charge


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "results"
    dumps: bool = False


@dataclass(frozen=True)
class StudyConfig:
    trap: str
    name: str = ""
    study: str = "rf"
    scale: float = 1.0
    drive: Drive = Drive()
    ion: IonParams = IonParams()
    grid: GridConfig = GridConfig()
    cavity: CavityConfig | None = None
    sweep: SweepConfig | None = None
    analysis: AnalysisConfig = AnalysisConfig()
    solver: SolverConfig = SolverConfig()
    surface_charge: SurfaceChargeConfig = SurfaceChargeConfig()
    output: OutputConfig = OutputConfig()
    deterministic: bool = True
    notes: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return _to_plain(self)

    def to_toml(self) -> str:
        return tomli_w.dumps(_strip_none(self.to_dict()))

    def baseline(self) -> "StudyConfig":
        """The same trap and grid without any cavity."""
        return dataclasses.replace(self, cavity=None, sweep=None, study="rf", name=f"{self.trap} baseline")

    def replace(self, **kw) -> "StudyConfig":
        return dataclasses.replace(self, **kw)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


def _strip_none(d):
    if isinstance(d, dict):
        return {k: _strip_none(v) for k, v in d.items() if v is not None}
    if isinstance(d, list):
        return [_strip_none(v) for v in d]
    return d


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _take(table: dict, cls, where: str, **convert):
    """Build dataclass ``cls`` from ``table``, rejecting unknown keys."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ConfigError(f"[{where}] unknown keys {unknown}; allowed: {sorted(names)}")
    kw = {}
    for k, v in table.items():
        kw[k] = convert[k](v) if k in convert else v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def _length(name: str, value, allow_zero: bool = False) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {value!r}") from None
    if not math.isfinite(v) or v < 0 or (v == 0 and not allow_zero):
        raise ConfigError(f"{name} must be {'non-negative' if allow_zero else 'positive'}, got {value!r}")
    return v


def parse_config(text: str | dict) -> StudyConfig:
    """Parse a TOML document (or an already-parsed mapping) into a validated config."""
    if isinstance(text, dict):
        doc = text
    else:
        try:
            doc = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"malformed config: {exc}") from None
    doc = dict(doc)
    known = {f.name for f in dataclasses.fields(StudyConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    trap = doc.get("trap")
    if trap not in BUILDERS:
        raise ConfigError(f"unknown trap id {trap!r}; valid ids: {', '.join(sorted(BUILDERS))}")
    study = doc.get("study", "rf")
    if study not in STUDIES:
        raise ConfigError(f"study must be one of {STUDIES}, got {study!r}")
    notes = list(doc.get("notes", ()))
    scale = _length("scale", doc.get("scale", 1.0))

    drive = _take(doc.get("drive", {}), Drive, "drive")
    if not drive.frequency > 0:
        raise ConfigError("drive frequency must be positive")
    ion = _take(doc.get("ion", {}), IonParams, "ion")
    if not ion.mass_amu > 0 or ion.charge_e == 0:
        raise ConfigError("ion needs a positive mass and a non-zero charge")

    g = dict(doc.get("grid", {}))
    grid = _take(g, GridConfig, "grid")
    _length("grid.spacing", grid.spacing)
    if grid.half_width is not None:
        _length("grid.half_width", grid.half_width)
    if not 1.0 <= grid.ratio <= 2.0:
        raise ConfigError("grid.ratio must lie in [1, 2]")
    if not 0 < grid.auto_domain_tolerance <= 0.1:
        raise ConfigError("grid.auto_domain_tolerance must lie in (0, 0.1]")

    cavity = None
    if "cavity" in doc and doc["cavity"] not in (None, "none", False):
        cavity, note = _parse_cavity(dict(doc["cavity"]), trap)
        if note:
            notes.append(note)

    sweep = None
    if "sweep" in doc:
        sweep = _parse_sweep(dict(doc["sweep"]))
        if sweep.parameter in ("cavity_length", "misalignment", "epsilon", "conductivity") and cavity is None:
            raise ConfigError(f"a {sweep.parameter} sweep needs a [cavity] section")

    analysis = _take(doc.get("analysis", {}), AnalysisConfig, "analysis")
    _length("analysis.parabola_half_range", analysis.parabola_half_range)
    if analysis.taylor_axis not in (None, "x", "y", "z", "cavity"):
        raise ConfigError("analysis.taylor_axis must be x, y, z or cavity")
    solver = _take(doc.get("solver", {}), SolverConfig, "solver")
    if not 0 < solver.tolerance < 1:
        raise ConfigError("solver.tolerance must lie in (0, 1)")
    charge = _take(doc.get("surface_charge", {}), SurfaceChargeConfig, "surface_charge")
    if charge.facet not in ("+", "-"):
        raise ConfigError("surface_charge.facet must be '+' or '-'")
    if study == "surface_charge" and cavity is None:
        raise ConfigError("a surface-charge study needs a [cavity] section")
    if study == "surface_charge" and cavity.single_mirror and charge.facet == "-":
        raise ConfigError("single-mirror cavities only have the '+' facet")
    output = _take(doc.get("output", {}), OutputConfig, "output")
    return StudyConfig(trap=trap, name=str(doc.get("name", "")), study=study, scale=scale, drive=drive, ion=ion,
                       grid=grid, cavity=cavity, sweep=sweep, analysis=analysis, solver=solver,
                       surface_charge=charge, output=output, deterministic=bool(doc.get("deterministic", True)),
                       notes=tuple(notes))


def _parse_cavity(c: dict, trap: str) -> tuple[CavityConfig, str | None]:
    note = None
    axis = c.get("axis")
    if axis not in AXES:
        raise ConfigError(f"cavity.axis must be x, y or z, got {axis!r}")
    if trap in ("endcap", "stylus") and axis == "z":
        c["axis"] = "x"
        note = f"{trap}: cavity axis z is equivalent to x for a cylindrical trap; using x"
    if "length" not in c:
        raise ConfigError("cavity.length is required")
    for key in ("length", "diameter", "substrate_length"):
        if key in c:
            c[key] = _length(f"cavity.{key}", c[key])
    if "eps_r" in c and not float(c["eps_r"]) >= 1:
        raise ConfigError("cavity.eps_r must be at least 1")
    if "sigma" in c:
        c["sigma"] = _length("cavity.sigma", c["sigma"], allow_zero=True)
    if c.get("center", "null") not in ("null", "nominal"):
        raise ConfigError("cavity.center must be 'null' or 'nominal'")
    convert = {}
    if "coating" in c:
        co = dict(c["coating"])
        if "thickness" in co:
            co["thickness"] = _length("cavity.coating.thickness", co["thickness"])
        if "sigma" in co:
            co["sigma"] = _length("cavity.coating.sigma", co["sigma"], allow_zero=True)
        convert["coating"] = lambda v, co=co: _take(co, Coating, "cavity.coating")
    if "misalignment" in c:
        mis = dict(c["misalignment"])
        for k in ("longitudinal", "transverse", "skew"):
            if k in mis:
                mis[k] = float(mis[k])
        convert["misalignment"] = lambda v, mis=mis: _take(mis, Misalignment, "cavity.misalignment")
    if "single_mirror" not in c and trap == "surface" and c["axis"] == "y":
        # the second mirror would sit below the chip
        c["single_mirror"] = True
    cav = _take(c, CavityConfig, "cavity", **convert)
    try:
        cav.mirror_spec()
    except ValueError as exc:
        raise ConfigError(f"[cavity] {exc}") from None
    return cav, note


def _parse_sweep(s: dict) -> SweepConfig:
    param = s.get("parameter")
    if param not in SWEEP_PARAMETERS:
        raise ConfigError(f"sweep.parameter must be one of {SWEEP_PARAMETERS}, got {param!r}")
    values = s.get("values")
    if not values:
        raise ConfigError("sweep.values must list at least one value")
    if param == "misalignment":
        vals = tuple(float(v) for v in values)
        if any(not math.isfinite(v) for v in vals):
            raise ConfigError("sweep values must be finite")
    elif param == "epsilon":
        vals = tuple(float(v) for v in values)
        if any(v < 1 for v in vals):
            raise ConfigError("epsilon sweep values must be at least 1")
    elif param == "conductivity":
        vals = tuple(_length("sweep value", v, allow_zero=True) for v in values)
    else:
        vals = tuple(_length("sweep value", v) for v in values)
    mode = s.get("mode", "longitudinal")
    if mode not in MISALIGNMENT_MODES:
        raise ConfigError(f"sweep.mode must be one of {MISALIGNMENT_MODES}")
    extra = sorted(set(s) - {"parameter", "values", "mode"})
    if extra:
        raise ConfigError(f"[sweep] unknown keys {extra}")
    return SweepConfig(param, vals, mode)


def load_config(path) -> StudyConfig:
    with open(path, "rb") as fh:
        raw = fh.read()
    return parse_config(raw.decode())


# ---------------------------------------------------------------------------
# Case expansion
# ---------------------------------------------------------------------------


def apply_sweep_value(config: StudyConfig, parameter: str, value: float, mode: str = "longitudinal") -> StudyConfig:
    """Config for a single sweep point (the sweep section is dropped)."""
    cav = config.cavity
    if parameter == "cavity_length":
        cav = dataclasses.replace(cav, length=value)
    elif parameter == "misalignment":
        cav = dataclasses.replace(cav, misalignment=dataclasses.replace(cav.misalignment, **{mode: value}))
    elif parameter == "epsilon":
        cav = dataclasses.replace(cav, eps_r=value)
    elif parameter == "conductivity":
        # a conductive film on the facets; made from the substrate material unless a coating is given
        coat = cav.coating or Coating(thickness=10e-6, eps_r=cav.eps_r)
        cav = dataclasses.replace(cav, coating=dataclasses.replace(coat, sigma=value))
    else:
        raise ConfigError(f"unknown sweep parameter {parameter!r}")
    return dataclasses.replace(config, cavity=cav, sweep=None)


def expand_cases(config: StudyConfig) -> list[tuple[StudyConfig, float | None]]:
    """(case config, sweep value) pairs, ordered by sweep value."""
    if config.sweep is None:
        return [(config, None)]
    s = config.sweep
    return [(apply_sweep_value(config, s.parameter, v, s.mode), v) for v in sorted(s.values)]


def config_from_dict(d: dict[str, Any]) -> StudyConfig:
    """Inverse of :meth:`StudyConfig.to_dict` (used for canonical round trips)."""
    return parse_config(_strip_none(d))
