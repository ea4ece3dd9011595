"""Parametric trap geometries built from a small constructive-solid-geometry kit.

All lengths are in metres. Shapes answer vectorised point-membership queries
(``contains``) and know how to scale and translate themselves, which is all the
rasteriser needs.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

MM = 1e-3

Role = Literal["rf", "ground"]
AxisName = Literal["x", "y", "z"]

AXES: dict[str, int] = {"x": 0, "y": 1, "z": 2}


class GeometryError(ValueError):
    """Raised for invalid or self-intersecting scenes."""


def _vec(v) -> tuple[float, float, float]:
    a = np.asarray(v, dtype=float).reshape(3)
    return (float(a[0]), float(a[1]), float(a[2]))


def _check_unit(v: tuple[float, float, float], what: str) -> None:
    n = math.sqrt(sum(c * c for c in v))
    if abs(n - 1.0) > 1e-12:
        raise GeometryError(f"{what} must be a unit vector (norm {n!r})")


def _check_positive(**kw: float) -> None:
    for name, val in kw.items():
        if not val > 0:
            raise GeometryError(f"{name} must be strictly positive, got {val!r}")


def unit(axis: AxisName | int) -> tuple[float, float, float]:
    i = AXES[axis] if isinstance(axis, str) else int(axis)
    v = [0.0, 0.0, 0.0]
    v[i] = 1.0
    return (v[0], v[1], v[2])


# ---------------------------------------------------------------------------
# CSG shapes
# ---------------------------------------------------------------------------


class Shape:
    """Base class of the CSG tree."""

    kind: str = "shape"

    def contains(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def scaled(self, a: float) -> "Shape":
        raise NotImplementedError

    def translated(self, offset) -> "Shape":
        raise NotImplementedError

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounding box (lo, hi); conservative for booleans."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        for f in dataclasses.fields(self):  # type: ignore[arg-type]
            val = getattr(self, f.name)
            if isinstance(val, tuple) and val and isinstance(val[0], Shape):
                d[f.name] = [c.to_dict() for c in val]
            else:
                d[f.name] = val
        return d

    def __or__(self, other: "Shape") -> "Union":
        return Union((self, other))

    def __and__(self, other: "Shape") -> "Intersection":
        return Intersection((self, other))

    def __sub__(self, other: "Shape") -> "Difference":
        return Difference(self, other)


def _axial_radial(points: np.ndarray, center, axis):
    p = np.asarray(points, dtype=float) - np.asarray(center)
    ax = np.asarray(axis)
    t = p @ ax
    r2 = np.einsum("ij,ij->i", p, p) - t * t
    return t, np.sqrt(np.maximum(r2, 0.0))


def _cyl_bounds(center, axis, radius, half_length):
    c = np.asarray(center)
    ax = np.abs(np.asarray(axis))
    ext = ax * half_length + radius * np.sqrt(np.maximum(1.0 - ax * ax, 0.0))
    return c - ext, c + ext


@dataclass(frozen=True)
class Cylinder(Shape):
    center: tuple[float, float, float]
    axis: tuple[float, float, float]
    radius: float
    half_length: float
    kind = "cylinder"

    def __post_init__(self):
        object.__setattr__(self, "center", _vec(self.center))
        object.__setattr__(self, "axis", _vec(self.axis))
        _check_unit(self.axis, "cylinder axis")
        _check_positive(radius=self.radius, half_length=self.half_length)

    def contains(self, points):
        t, r = _axial_radial(points, self.center, self.axis)
        return (np.abs(t) <= self.half_length) & (r <= self.radius)

    def scaled(self, a):
        return Cylinder(tuple(a * c for c in self.center), self.axis, a * self.radius, a * self.half_length)

    def translated(self, offset):
        return Cylinder(tuple(np.add(self.center, offset)), self.axis, self.radius, self.half_length)

    def bounds(self):
        return _cyl_bounds(self.center, self.axis, self.radius, self.half_length)


@dataclass(frozen=True)
class AnnularCylinder(Shape):
    center: tuple[float, float, float]
    axis: tuple[float, float, float]
    inner_radius: float
    outer_radius: float
    half_length: float
    kind = "annular_cylinder"

    def __post_init__(self):
        object.__setattr__(self, "center", _vec(self.center))
        object.__setattr__(self, "axis", _vec(self.axis))
        _check_unit(self.axis, "annulus axis")
        _check_positive(inner_radius=self.inner_radius, half_length=self.half_length,
                        wall=self.outer_radius - self.inner_radius)

    def contains(self, points):
        t, r = _axial_radial(points, self.center, self.axis)
        return (np.abs(t) <= self.half_length) & (r >= self.inner_radius) & (r <= self.outer_radius)

    def scaled(self, a):
        return AnnularCylinder(tuple(a * c for c in self.center), self.axis, a * self.inner_radius,
                               a * self.outer_radius, a * self.half_length)

    def translated(self, offset):
        return AnnularCylinder(tuple(np.add(self.center, offset)), self.axis, self.inner_radius,
                               self.outer_radius, self.half_length)

    def bounds(self):
        return _cyl_bounds(self.center, self.axis, self.outer_radius, self.half_length)


@dataclass(frozen=True)
class Box(Shape):
    """Axis-aligned box."""

    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]
    kind = "box"

    def __post_init__(self):
        object.__setattr__(self, "center", _vec(self.center))
        object.__setattr__(self, "half_extents", _vec(self.half_extents))
        for i, v in enumerate(self.half_extents):
            if not v > 0:
                raise GeometryError(f"box half extent {i} must be strictly positive, got {v!r}")

    @classmethod
    def from_bounds(cls, lo, hi) -> "Box":
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        return cls(tuple((lo + hi) / 2), tuple((hi - lo) / 2))

    def contains(self, points):
        p = np.abs(np.asarray(points, dtype=float) - np.asarray(self.center))
        return np.all(p <= np.asarray(self.half_extents), axis=1)

    def scaled(self, a):
        return Box(tuple(a * c for c in self.center), tuple(a * c for c in self.half_extents))

    def translated(self, offset):
        return Box(tuple(np.add(self.center, offset)), self.half_extents)

    def bounds(self):
        c, e = np.asarray(self.center), np.asarray(self.half_extents)
        return c - e, c + e


@dataclass(frozen=True)
class WedgePrism(Shape):
    """Prism whose cross-section is an isosceles triangle.

    The sharp edge runs through ``tip`` along ``edge_dir``; the triangle opens
    along ``bisector`` with full opening ``angle`` and extends ``depth`` from
    the edge. The prism is ``length`` long, centred on ``tip``.
    """

    tip: tuple[float, float, float]
    edge_dir: tuple[float, float, float]
    bisector: tuple[float, float, float]
    angle: float
    depth: float
    length: float
    kind = "wedge"

    def __post_init__(self):
        for name in ("tip", "edge_dir", "bisector"):
            object.__setattr__(self, name, _vec(getattr(self, name)))
        _check_unit(self.edge_dir, "wedge edge direction")
        _check_unit(self.bisector, "wedge bisector")
        if abs(float(np.dot(self.edge_dir, self.bisector))) > 1e-12:
            raise GeometryError("wedge bisector must be perpendicular to its edge")
        _check_positive(angle=self.angle, depth=self.depth, length=self.length)
        if self.angle >= math.pi:
            raise GeometryError("wedge angle must be below pi")

    def _frame(self):
        e = np.asarray(self.edge_dir)
        b = np.asarray(self.bisector)
        return e, b, np.cross(e, b)

    def contains(self, points):
        e, b, n = self._frame()
        p = np.asarray(points, dtype=float) - np.asarray(self.tip)
        t, s, u = p @ e, p @ b, p @ n
        return ((np.abs(t) <= self.length / 2) & (s >= 0) & (s <= self.depth)
                & (np.abs(u) <= s * math.tan(self.angle / 2)))

    def scaled(self, a):
        return dataclasses.replace(self, tip=tuple(a * c for c in self.tip), depth=a * self.depth,
                                   length=a * self.length)

    def translated(self, offset):
        return dataclasses.replace(self, tip=tuple(np.add(self.tip, offset)))

    def bounds(self):
        e, b, n = self._frame()
        w = self.depth * math.tan(self.angle / 2)
        tip = np.asarray(self.tip)
        corners = []
        for te in (-self.length / 2, self.length / 2):
            corners.append(tip + te * e)
            corners.append(tip + te * e + self.depth * b + w * n)
            corners.append(tip + te * e + self.depth * b - w * n)
        c = np.array(corners)
        return c.min(axis=0), c.max(axis=0)


@dataclass(frozen=True)
class Union(Shape):
    children: tuple[Shape, ...]
    kind = "union"

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if not self.children:
            raise GeometryError("union needs at least one child")

    def contains(self, points):
        out = self.children[0].contains(points)
        for c in self.children[1:]:
            out |= c.contains(points)
        return out

    def scaled(self, a):
        return Union(tuple(c.scaled(a) for c in self.children))

    def translated(self, offset):
        return Union(tuple(c.translated(offset) for c in self.children))

    def bounds(self):
        bs = [c.bounds() for c in self.children]
        return np.min([b[0] for b in bs], axis=0), np.max([b[1] for b in bs], axis=0)


@dataclass(frozen=True)
class Intersection(Shape):
    children: tuple[Shape, ...]
    kind = "intersection"

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if not self.children:
            raise GeometryError("intersection needs at least one child")

    def contains(self, points):
        out = self.children[0].contains(points)
        for c in self.children[1:]:
            out &= c.contains(points)
        return out

    def scaled(self, a):
        return Intersection(tuple(c.scaled(a) for c in self.children))

    def translated(self, offset):
        return Intersection(tuple(c.translated(offset) for c in self.children))

    def bounds(self):
        bs = [c.bounds() for c in self.children]
        return np.max([b[0] for b in bs], axis=0), np.min([b[1] for b in bs], axis=0)


@dataclass(frozen=True)
class Difference(Shape):
    base: Shape
    cut: Shape
    kind = "difference"

    def contains(self, points):
        return self.base.contains(points) & ~self.cut.contains(points)

    def scaled(self, a):
        return Difference(self.base.scaled(a), self.cut.scaled(a))

    def translated(self, offset):
        return Difference(self.base.translated(offset), self.cut.translated(offset))

    def bounds(self):
        return self.base.bounds()

    def to_dict(self):
        return {"kind": self.kind, "base": self.base.to_dict(), "cut": self.cut.to_dict()}


# ---------------------------------------------------------------------------
# Scene objects
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Electrode:
    shape: Shape
    role: Role
    label: str

    def __post_init__(self):
        if self.role not in ("rf", "ground"):
            raise GeometryError(f"electrode role must be 'rf' or 'ground', got {self.role!r}")

    def scaled(self, a: float) -> "Electrode":
        return Electrode(self.shape.scaled(a), self.role, self.label)


@dataclass(frozen=True)
class Facet:
    """Flat circular face of a body, with the outward normal facing the trap."""

    center: tuple[float, float, float]
    normal: tuple[float, float, float]
    radius: float

    def scaled(self, a: float) -> "Facet":
        return Facet(tuple(a * c for c in self.center), self.normal, a * self.radius)


@dataclass(frozen=True)
class DielectricBody:
    """Dielectric (optionally lossy) body, or a grounded metal body.

    A ``layer_thickness`` marks a thin coating whose normal is ``layer_axis``;
    the rasteriser widens such layers to one cell when they are thinner.
    """

    shape: Shape
    eps_r: float = 1.0
    sigma: float = 0.0
    grounded_metal: bool = False
    label: str = ""
    facet: Facet | None = None
    layer_thickness: float | None = None
    layer_axis: int | None = None

    def __post_init__(self):
        if self.grounded_metal:
            return
        if self.eps_r < 1:
            raise GeometryError(f"relative permittivity must be >= 1, got {self.eps_r!r}")
        if self.sigma < 0:
            raise GeometryError(f"conductivity must be >= 0, got {self.sigma!r}")

    def scaled(self, a: float) -> "DielectricBody":
        return dataclasses.replace(
            self, shape=self.shape.scaled(a),
            facet=None if self.facet is None else self.facet.scaled(a),
            layer_thickness=None if self.layer_thickness is None else a * self.layer_thickness)


@dataclass(frozen=True)
class Drive:
    v_rf: float = 200.0
    frequency: float = 10e6

    @property
    def omega(self) -> float:
        return 2 * math.pi * self.frequency


@dataclass(frozen=True)
class IonParams:
    mass_amu: float = 40.0
    charge_e: float = 1.0


@dataclass(frozen=True)
class TrapAssembly:
    name: str
    electrodes: tuple[Electrode, ...]
    dielectrics: tuple[DielectricBody, ...] = ()
    drive: Drive = Drive()
    ion: IonParams = IonParams()
    scale: float = 1.0
    symmetry_axis: AxisName = "z"
    nominal_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    # half-widths (x, y, z) of the region that needs the fine grid, about the centre
    core_half: tuple[float, float, float] = (1 * MM, 1 * MM, 1 * MM)
    core_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    # mirrors are cut off below this height when given (keeps them off a chip surface)
    mirror_floor: float | None = None
    family: Literal["linear", "cylindrical", "surface"] = "linear"

    def __post_init__(self):
        if not self.scale > 0:
            raise GeometryError("scale factor must be positive")
        object.__setattr__(self, "electrodes", tuple(self.electrodes))
        object.__setattr__(self, "dielectrics", tuple(self.dielectrics))
        object.__setattr__(self, "nominal_center", _vec(self.nominal_center))

    @property
    def rf_electrodes(self) -> list[Electrode]:
        return [e for e in self.electrodes if e.role == "rf"]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        bs = [e.shape.bounds() for e in self.electrodes] + [d.shape.bounds() for d in self.dielectrics]
        if not bs:
            c = np.asarray(self.nominal_center)
            return c, c
        return np.min([b[0] for b in bs], axis=0), np.max([b[1] for b in bs], axis=0)

    def electrode_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        bs = [e.shape.bounds() for e in self.electrodes]
        return np.min([b[0] for b in bs], axis=0), np.max([b[1] for b in bs], axis=0)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "electrodes": [{"label": e.label, "role": e.role, "shape": e.shape.to_dict()} for e in self.electrodes],
            "dielectrics": [{
                "label": d.label, "eps_r": d.eps_r, "sigma": d.sigma, "grounded_metal": d.grounded_metal,
                "layer_thickness": d.layer_thickness, "layer_axis": d.layer_axis,
                "shape": d.shape.to_dict()} for d in self.dielectrics],
            "drive": dataclasses.asdict(self.drive),
            "ion": dataclasses.asdict(self.ion),
            "scale": self.scale,
            "nominal_center": list(self.nominal_center),
        }

    def find_facet(self, label: str) -> DielectricBody:
        for d in self.dielectrics:
            if d.label == label and d.facet is not None:
                return d
        known = [d.label for d in self.dielectrics if d.facet is not None]
        raise GeometryError(f"no facet labelled {label!r}; known facets: {known}")


# ---------------------------------------------------------------------------
# Trap builders (lengths for a = 1, i.e. 1 mm electrode separation)
# ---------------------------------------------------------------------------

BLADE_EDGE_ANGLE = math.radians(45.0)
BLADE_DEPTH = 3.0 * MM
LINEAR_LENGTH = 6.0 * MM
WAFER_THICKNESS = 0.25 * MM
WAFER_WIDTH = 3.0 * MM
CYL_WALL = 0.1 * MM
CYL_LENGTH = 3.0 * MM
STYLUS_PLATE = (4.0 * MM, 0.1 * MM, 4.0 * MM)
SURFACE_RAIL_WIDTH = 0.2125 * MM
SURFACE_RAIL_GAP = 0.05 * MM
SURFACE_RAIL_HEIGHT = 0.1 * MM
MIRROR_DIAMETER = 0.7 * MM
MIRROR_LENGTH = 3.0 * MM
MIRROR_EPS = 3.8


def _finish(assembly: TrapAssembly, a: float) -> TrapAssembly:
    return assembly if a == 1.0 else scale_assembly(assembly, a)


def _linear_roles(sx: int, sy: int) -> Role:
    # diagonally opposing electrodes (+,+) and (-,-) carry the rf
    return "rf" if sx * sy > 0 else "ground"


def build_blade_trap(a: float = 1.0) -> TrapAssembly:
    """Four 45-degree blades with tips at (+-0.5, +-0.5) mm.

    Each blade's inner face is vertical, so the electrodes form two 1 mm wide
    slots: horizontally between the tips and vertically between the faces.
    """
    half = 0.5 * MM
    tilt = BLADE_EDGE_ANGLE / 2
    electrodes = []
    for sx in (1, -1):
        for sy in (1, -1):
            bis = (sx * math.sin(tilt), sy * math.cos(tilt), 0.0)
            n = math.hypot(bis[0], bis[1])
            bis = (bis[0] / n, bis[1] / n, 0.0)
            wedge = WedgePrism(tip=(sx * half, sy * half, 0.0), edge_dir=(0.0, 0.0, 1.0), bisector=bis,
                               angle=BLADE_EDGE_ANGLE, depth=BLADE_DEPTH, length=LINEAR_LENGTH)
            electrodes.append(Electrode(wedge, _linear_roles(sx, sy), f"blade{'+' if sx > 0 else '-'}{'+' if sy > 0 else '-'}"))
    asm = TrapAssembly("blade", tuple(electrodes), symmetry_axis="z", family="linear")
    return _finish(asm, a)


def build_wafer_trap(a: float = 1.0) -> TrapAssembly:
    """Four 0.25 mm thick planar electrodes, edges 1 mm apart both ways."""
    half = 0.5 * MM
    electrodes = []
    for sx in (1, -1):
        for sy in (1, -1):
            lo = (half if sx > 0 else -half - WAFER_THICKNESS, half if sy > 0 else -half - WAFER_WIDTH, -LINEAR_LENGTH / 2)
            hi = (half + WAFER_THICKNESS if sx > 0 else -half, half + WAFER_WIDTH if sy > 0 else -half, LINEAR_LENGTH / 2)
            electrodes.append(Electrode(Box.from_bounds(lo, hi), _linear_roles(sx, sy),
                                        f"wafer{'+' if sx > 0 else '-'}{'+' if sy > 0 else '-'}"))
    asm = TrapAssembly("wafer", tuple(electrodes), symmetry_axis="z", family="linear")
    return _finish(asm, a)


def _tube(y0: float, y1: float, r_in: float) -> AnnularCylinder:
    return AnnularCylinder(center=(0.0, (y0 + y1) / 2, 0.0), axis=(0.0, 1.0, 0.0), inner_radius=r_in,
                           outer_radius=r_in + CYL_WALL, half_length=abs(y1 - y0) / 2)


def build_endcap_trap(a: float = 1.0) -> TrapAssembly:
    """Two coaxial pairs of tubes along y; the inner (rf) pair has a 1 mm gap."""
    r_in, r_out = 0.5 * MM, 1.0 * MM
    gap_in, gap_out = 1.0 * MM, 2.0 * MM
    top = gap_in / 2 + CYL_LENGTH
    electrodes = []
    for s, tag in ((1, "+"), (-1, "-")):
        y_in, y_out = s * gap_in / 2, s * gap_out / 2
        electrodes.append(Electrode(_tube(y_in, s * top, r_in), "rf", f"inner{tag}"))
        electrodes.append(Electrode(_tube(y_out, s * top, r_out), "ground", f"outer{tag}"))
    asm = TrapAssembly("endcap", tuple(electrodes), symmetry_axis="y", family="cylindrical",
                       core_half=(1.2 * MM, 1.2 * MM, 1.2 * MM))
    return _finish(asm, a)


STYLUS_INNER_TOP = 1.0 * MM
STYLUS_OUTER_TOP = 0.5 * MM
STYLUS_NULL_HEIGHT = 0.87 * MM
STYLUS_SLOT_CLEARANCE = 0.1 * MM


def build_stylus_trap(a: float = 1.0) -> TrapAssembly:
    """One endcap half standing on a grounded plate (top face at y = 0).

    The outer tube rises 0.5 mm above the plate and the inner tube protrudes a
    further 0.5 mm, as in one half of the endcap trap. The plate has a bore the
    size of the inner tube's opening so a mirror can pass through.
    """
    r_in, r_out = 0.5 * MM, 1.0 * MM
    px, py, pz = STYLUS_PLATE
    bottom = -py
    # the inner tube runs through a hole in the plate, leaving its bore open;
    # an annular slot under the rf tube insulates it from the plate
    slab = Box.from_bounds((-px / 2, bottom, -pz / 2), (px / 2, 0.0, pz / 2))
    hole = Cylinder((0.0, bottom / 2, 0.0), (0.0, 1.0, 0.0), r_in + CYL_WALL, py)
    slot = AnnularCylinder((0.0, bottom / 2, 0.0), (0.0, 1.0, 0.0), r_out - STYLUS_SLOT_CLEARANCE,
                           r_out + CYL_WALL + STYLUS_SLOT_CLEARANCE, py)
    plate = Difference(Difference(slab, hole), slot)
    electrodes = (
        Electrode(_tube(bottom, STYLUS_INNER_TOP, r_in), "ground", "inner"),
        Electrode(_tube(0.0, STYLUS_OUTER_TOP, r_out), "rf", "outer"),
        Electrode(plate, "ground", "plate"),
    )
    center = (0.0, STYLUS_INNER_TOP + STYLUS_NULL_HEIGHT, 0.0)
    asm = TrapAssembly("stylus", electrodes, symmetry_axis="y", family="cylindrical",
                       nominal_center=center, core_center=(0.0, 1.4 * MM, 0.0),
                       core_half=(1.2 * MM, 1.5 * MM, 1.2 * MM))
    return _finish(asm, a)


SURFACE_NULL_HEIGHT = 0.30 * MM


def build_surface_trap(a: float = 1.0) -> TrapAssembly:
    """Four rails on the y = 0 plane, each 0.2125 mm wide with 0.05 mm gaps.

    rf goes to the first and third rail (interleaved with the grounded ones),
    so the null sits slightly off the centre line, above the second rail.
    """
    w, g, hgt = SURFACE_RAIL_WIDTH, SURFACE_RAIL_GAP, SURFACE_RAIL_HEIGHT
    total = 4 * w + 3 * g
    electrodes = []
    x = -total / 2
    roles: tuple[Role, ...] = ("rf", "ground", "rf", "ground")
    for i, role in enumerate(roles):
        electrodes.append(Electrode(Box.from_bounds((x, 0.0, -LINEAR_LENGTH / 2), (x + w, hgt, LINEAR_LENGTH / 2)),
                                    role, f"rail{i + 1}"))
        x += w + g
    center = (0.0, hgt + SURFACE_NULL_HEIGHT, 0.0)
    asm = TrapAssembly("surface", tuple(electrodes), symmetry_axis="z", family="surface",
                       nominal_center=center, core_center=(0.0, 0.3 * MM, 0.0),
                       core_half=(0.9 * MM, 0.9 * MM, 0.9 * MM), mirror_floor=hgt)
    return _finish(asm, a)


BUILDERS = {
    "blade": build_blade_trap,
    "wafer": build_wafer_trap,
    "endcap": build_endcap_trap,
    "stylus": build_stylus_trap,
    "surface": build_surface_trap,
}


def build_trap(name: str, a: float = 1.0) -> TrapAssembly:
    try:
        builder = BUILDERS[name]
    except KeyError:
        raise GeometryError(f"unknown trap {name!r}; valid ids: {sorted(BUILDERS)}") from None
    return builder(a)


# ---------------------------------------------------------------------------
# Mirrors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Coating:
    thickness: float = 10e-6
    eps_r: float = 15.0
    sigma: float = 0.0
    grounded: bool = False


@dataclass(frozen=True)
class Misalignment:
    longitudinal: float = 0.0
    transverse: float = 0.0
    skew: float = 0.0
    # transverse direction; defaults to y for an x-cavity and x otherwise
    transverse_axis: AxisName | None = None


@dataclass(frozen=True)
class MirrorPairSpec:
    axis: AxisName
    length: float
    diameter: float = MIRROR_DIAMETER
    substrate_length: float = MIRROR_LENGTH
    eps_r: float = MIRROR_EPS
    sigma: float = 0.0
    metalized: bool = False
    coating: Coating | None = None
    misalignment: Misalignment = Misalignment()
    single_mirror: bool = False
    center: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.axis not in AXES:
            raise GeometryError(f"cavity axis must be x, y or z, got {self.axis!r}")
        _check_positive(cavity_length=self.length, diameter=self.diameter, substrate_length=self.substrate_length)

    def scaled(self, a: float) -> "MirrorPairSpec":
        m = self.misalignment
        return dataclasses.replace(
            self, length=a * self.length, diameter=a * self.diameter, substrate_length=a * self.substrate_length,
            coating=None if self.coating is None else dataclasses.replace(self.coating, thickness=a * self.coating.thickness),
            misalignment=dataclasses.replace(m, longitudinal=a * m.longitudinal, transverse=a * m.transverse, skew=a * m.skew),
            center=None if self.center is None else tuple(a * c for c in self.center))

    def transverse_axis(self) -> int:
        t = self.misalignment.transverse_axis
        if t is None:
            t = "y" if self.axis == "x" else "x"
        if t == self.axis:
            raise GeometryError("transverse misalignment axis must differ from the cavity axis")
        return AXES[t]


def mirror_bodies(spec: MirrorPairSpec, center) -> list[DielectricBody]:
    """Dielectric bodies for a mirror pair centred on ``center`` (no checks)."""
    k = AXES[spec.axis]
    ax = np.asarray(unit(k))
    tr = np.asarray(unit(spec.transverse_axis()))
    m = spec.misalignment
    r = spec.diameter / 2
    c0 = np.asarray(center, dtype=float) + m.longitudinal * ax + m.transverse * tr
    sides = (1,) if spec.single_mirror else (1, -1)
    bodies: list[DielectricBody] = []
    for s in sides:
        c = c0 + s * m.skew * tr
        tag = "+" if s > 0 else "-"
        facet_pos = c + s * (spec.length / 2) * ax
        facet = Facet(tuple(facet_pos), tuple(-s * ax), r)
        t = spec.coating.thickness if spec.coating is not None else 0.0
        sub_center = facet_pos + s * (t + spec.substrate_length / 2) * ax
        sub = Cylinder(tuple(sub_center), tuple(ax), r, spec.substrate_length / 2)
        sub_body = DielectricBody(sub, eps_r=spec.eps_r, sigma=spec.sigma, grounded_metal=spec.metalized,
                                  label=f"mirror{tag}", facet=None if spec.coating else facet)
        bodies.append(sub_body)
        if spec.coating is not None:
            co = spec.coating
            disk = Cylinder(tuple(facet_pos + s * (t / 2) * ax), tuple(ax), r, t / 2)
            bodies.append(DielectricBody(disk, eps_r=co.eps_r, sigma=co.sigma, grounded_metal=co.grounded or spec.metalized,
                                         label=f"coating{tag}", facet=facet, layer_thickness=t, layer_axis=k))
    return bodies


def _overlap_points(shape: Shape, n: int = 24) -> np.ndarray:
    lo, hi = shape.bounds()
    axes = [np.linspace(lo[i], hi[i], n) for i in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return pts[shape.contains(pts)]


def add_mirror_pair(assembly: TrapAssembly, spec: MirrorPairSpec) -> TrapAssembly:
    """Append one or two mirror substrates (and optional facet coatings)."""
    if assembly.family == "cylindrical" and spec.axis == "z":
        raise GeometryError("cylindrical traps take x or y cavities (z is equivalent to x)")
    center = spec.center if spec.center is not None else assembly.nominal_center
    bodies = mirror_bodies(spec, center)
    if assembly.mirror_floor is not None:
        bodies = [_clip_above(b, assembly.mirror_floor) for b in bodies]
    for b in bodies:
        pts = _overlap_points(b.shape)
        for e in assembly.electrodes:
            hit = e.shape.contains(pts)
            if hit.any():
                p = pts[hit][0]
                raise GeometryError(f"{b.label} overlaps electrode {e.label} "
                                    f"({int(hit.sum())} sample points, e.g. at {np.round(p * 1e3, 4).tolist()} mm)")
    return dataclasses.replace(assembly, dielectrics=assembly.dielectrics + tuple(bodies))


def scale_assembly(assembly: TrapAssembly, a: float) -> TrapAssembly:
    """Multiply every length of the scene by ``a``."""
    if not a > 0:
        raise GeometryError(f"scale factor must be positive, got {a!r}")
    return dataclasses.replace(
        assembly,
        electrodes=tuple(e.scaled(a) for e in assembly.electrodes),
        dielectrics=tuple(d.scaled(a) for d in assembly.dielectrics),
        scale=assembly.scale * a,
        nominal_center=tuple(a * c for c in assembly.nominal_center),
        core_half=tuple(a * c for c in assembly.core_half),
        core_center=tuple(a * c for c in assembly.core_center),
        mirror_floor=None if assembly.mirror_floor is None else a * assembly.mirror_floor,
    )


def _clip_above(body: DielectricBody, floor: float) -> DielectricBody:
    lo, hi = body.shape.bounds()
    if lo[1] >= floor:
        return body
    pad = 1e-6 + 0.01 * float(np.max(hi - lo))
    slab = Box.from_bounds((lo[0] - pad, floor, lo[2] - pad), (hi[0] + pad, hi[1] + pad, hi[2] + pad))
    return dataclasses.replace(body, shape=Intersection((body.shape, slab)))


def union_of(shapes: Sequence[Shape]) -> Shape:
    return shapes[0] if len(shapes) == 1 else Union(tuple(shapes))
