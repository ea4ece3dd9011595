"""Structured-grid representation of a trap scene.

The grid is a tensor product of per-axis face coordinates. ``Grid3D.uniform``
gives the plain isotropic lattice; ``Grid3D.graded`` keeps a uniform core of
spacing ``h`` around the trap and lets cells grow geometrically towards the
grounded outer box, which is what makes large domains affordable.

Arrays are indexed ``[ix, iy, iz]``. Binary dumps are written x-fastest.
"""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.constants import epsilon_0

from .geometry import DielectricBody, TrapAssembly

log = logging.getLogger(__name__)

VACUUM, DIELECTRIC, CONDUCTOR = 0, 1, 2
ROLE_NONE, ROLE_RF, ROLE_GROUND = 0, 1, 2


class RasterizeError(ValueError):
    pass


class DomainError(RasterizeError):
    """auto_domain gave up; ``log`` and the largest ``grid`` tried are attached."""

    def __init__(self, message: str, log: "DomainLog", grid: "Grid3D"):
        super().__init__(message)
        self.log = log
        self.grid = grid


def _graded_axis(center: float, core_half: float, h: float, half_width: float, ratio: float) -> np.ndarray:
    n_core = max(1, int(math.ceil(core_half / h - 1e-9)))
    pos = [k * h for k in range(n_core + 1)]
    w = h
    while pos[-1] < half_width - 1e-15:
        w *= ratio
        pos.append(pos[-1] + w)
    pos = np.asarray(pos)
    return center + np.concatenate([-pos[:0:-1], pos])


@dataclass(frozen=True, eq=False)
class Grid3D:
    """Cell-centred tensor grid described by its face coordinates."""

    faces: tuple[np.ndarray, np.ndarray, np.ndarray]

    def __post_init__(self):
        faces = tuple(np.asarray(f, dtype=float) for f in self.faces)
        for i, f in enumerate(faces):
            if f.ndim != 1 or f.size < 17:
                raise ValueError(f"axis {i}: need at least 16 cells, got {f.size - 1}")
            if np.any(np.diff(f) <= 0):
                raise ValueError(f"axis {i}: face coordinates must increase")
        object.__setattr__(self, "faces", faces)

    @classmethod
    def uniform(cls, origin, h: float, dims) -> "Grid3D":
        if not h > 0:
            raise ValueError("grid spacing must be positive")
        origin = np.asarray(origin, dtype=float)
        return cls(tuple(origin[i] + h * np.arange(int(dims[i]) + 1) for i in range(3)))

    @classmethod
    def graded(cls, center, core_half, h: float, half_width, ratio: float = 1.15) -> "Grid3D":
        if not h > 0:
            raise ValueError("grid spacing must be positive")
        if ratio < 1:
            raise ValueError("growth ratio must be >= 1")
        core_half = np.broadcast_to(np.asarray(core_half, float), (3,))
        half_width = np.broadcast_to(np.asarray(half_width, float), (3,))
        return cls(tuple(_graded_axis(float(center[i]), float(core_half[i]), h, float(half_width[i]), ratio)
                         for i in range(3)))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(f.size - 1 for f in self.faces)  # type: ignore[return-value]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dims

    @property
    def size(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def origin(self) -> np.ndarray:
        return np.array([f[0] for f in self.faces])

    @property
    def upper(self) -> np.ndarray:
        return np.array([f[-1] for f in self.faces])

    @property
    def h(self) -> float:
        """Finest spacing (the core spacing of a graded grid)."""
        return float(min(np.diff(f).min() for f in self.faces))

    @property
    def widths(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(np.diff(f) for f in self.faces)  # type: ignore[return-value]

    @property
    def centers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(0.5 * (f[1:] + f[:-1]) for f in self.faces)  # type: ignore[return-value]

    @property
    def is_uniform(self) -> bool:
        w = np.concatenate(self.widths)
        return bool(np.allclose(w, w[0], rtol=1e-9, atol=0))

    def cell_volumes(self) -> np.ndarray:
        wx, wy, wz = self.widths
        return wx[:, None, None] * wy[None, :, None] * wz[None, None, :]

    def points(self, sl: tuple[slice, slice, slice] = (slice(None),) * 3) -> np.ndarray:
        cx, cy, cz = (c[s] for c, s in zip(self.centers, sl))
        g = np.stack(np.meshgrid(cx, cy, cz, indexing="ij"), axis=-1)
        return g.reshape(-1, 3)

    def index_range(self, lo, hi) -> tuple[slice, slice, slice]:
        """Slices of cells whose centres fall inside [lo, hi]."""
        out = []
        for c, a, b in zip(self.centers, lo, hi):
            i0 = int(np.searchsorted(c, a, side="left"))
            i1 = int(np.searchsorted(c, b, side="right"))
            out.append(slice(i0, max(i0, i1)))
        return tuple(out)  # type: ignore[return-value]

    def locate(self, point) -> tuple[int, int, int]:
        """Index of the cell containing ``point`` (raises outside the box)."""
        idx = []
        for f, p in zip(self.faces, np.asarray(point, float)):
            if p < f[0] or p > f[-1]:
                raise ValueError(f"point {np.asarray(point).tolist()} is outside the grid")
            idx.append(min(int(np.searchsorted(f, p, side="right")) - 1, f.size - 2))
        return tuple(idx)  # type: ignore[return-value]

    def contains_box(self, lo, hi) -> bool:
        return bool(np.all(self.origin < np.asarray(lo)) and np.all(self.upper > np.asarray(hi)))

    def to_dict(self) -> dict:
        return {"faces": [f.tolist() for f in self.faces]}


@dataclass(eq=False)
class MaterialMap:
    """Per-cell material classification and per-axis cell permittivities.

    ``eps_r[k]`` and ``sigma[k]`` are the values a flux along axis ``k`` sees;
    they only differ between axes for widened thin coatings.
    """

    grid: Grid3D
    kind: np.ndarray
    eps_r: np.ndarray  # (3, nx, ny, nz)
    sigma: np.ndarray  # (3, nx, ny, nz)
    body: np.ndarray  # index into the assembly dielectrics, -1 for none

    @property
    def lossy(self) -> bool:
        return bool(np.any(self.sigma > 0))

    def cell_permittivity(self, axis: int, omega: float | None = None) -> np.ndarray:
        if omega is None or not self.lossy:
            return self.eps_r[axis]
        return self.eps_r[axis] - 1j * self.sigma[axis] / (omega * epsilon_0)

    def face_permittivity(self, axis: int, omega: float | None = None) -> np.ndarray:
        """Harmonic mean (width weighted) across each interior face along ``axis``."""
        eps = self.cell_permittivity(axis, omega)
        w = self.grid.widths[axis]
        shp = [1, 1, 1]
        shp[axis] = -1
        w = w.reshape(shp)
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        wa = np.broadcast_to(w, eps.shape)[tuple(lo)]
        wb = np.broadcast_to(w, eps.shape)[tuple(hi)]
        ea, eb = eps[tuple(lo)], eps[tuple(hi)]
        return (wa + wb) / (wa / ea + wb / eb)


@dataclass(eq=False)
class DirichletMask:
    mask: np.ndarray
    value: np.ndarray
    role: np.ndarray

    def values_for(self, rf_amplitude: float) -> np.ndarray:
        """Fixed potentials with rf cells at ``rf_amplitude``; others keep ``value``."""
        return np.where(self.role == ROLE_RF, rf_amplitude, self.value)


def _apply_body(grid: Grid3D, body: DielectricBody, idx: int, kind, eps, sigma, bodyarr, role, omega):
    lo, hi = body.shape.bounds()
    h = grid.h
    sl = grid.index_range(lo - h, hi + h)
    if any(s.stop <= s.start for s in sl):
        return
    thin = body.layer_thickness is not None and body.layer_axis is not None
    k = body.layer_axis
    if thin:
        wk = grid.widths[k]
        mid = 0.5 * (lo[k] + hi[k])
        try:
            ik = int(np.searchsorted(grid.faces[k], mid, side="right")) - 1
        except Exception:  # pragma: no cover
            ik = -1
        if 0 <= ik < wk.size and body.layer_thickness < wk[ik]:
            _apply_thin_layer(grid, body, idx, ik, sl, kind, eps, sigma, bodyarr, role, omega)
            return
    pts = grid.points(sl)
    inside = body.shape.contains(pts).reshape(tuple(s.stop - s.start for s in sl))
    sub_kind = kind[sl]
    if body.grounded_metal:
        put = inside & (sub_kind != CONDUCTOR)
        sub_kind[put] = CONDUCTOR
        role[sl][put] = ROLE_GROUND
        bodyarr[sl][put] = idx
        return
    put = inside & (sub_kind != CONDUCTOR)
    sub_kind[put] = DIELECTRIC
    bodyarr[sl][put] = idx
    for a in range(3):
        eps[a][sl][put] = body.eps_r
        sigma[a][sl][put] = body.sigma


def _apply_thin_layer(grid, body, idx, ik, sl, kind, eps, sigma, bodyarr, role, omega):
    # one cell thick along the layer normal; normal flux sees the layer in
    # series with the rest of the cell, tangential flux the volume-weighted mix
    k = body.layer_axis
    t = body.layer_thickness
    w = grid.widths[k][ik]
    lo, hi = body.shape.bounds()
    mid = 0.5 * (lo[k] + hi[k])
    sl = list(sl)
    sl[k] = slice(ik, ik + 1)
    sl = tuple(sl)
    pts = grid.points(sl)
    pts[:, k] = mid
    inside = body.shape.contains(pts).reshape(tuple(s.stop - s.start for s in sl))
    sub_kind = kind[sl]
    put = inside & (sub_kind != CONDUCTOR)
    if body.grounded_metal:
        sub_kind[put] = CONDUCTOR
        role[sl][put] = ROLE_GROUND
        bodyarr[sl][put] = idx
        return
    frac = t / w
    # the rest of the cell is filled as the uncoated mirror would fill it: if
    # the cell centre lies behind the facet, with the material of the next cell
    # inward (the substrate behind the layer need not reach the centre)
    rest = [(eps[a][sl].copy(), sigma[a][sl].copy()) for a in range(3)]
    if body.facet is not None:
        nk = float(body.facet.normal[k])
        ib = ik - int(np.sign(nk))
        if nk != 0 and (grid.centers[k][ik] - body.facet.center[k]) * nk < 0 and 0 <= ib < grid.shape[k]:
            sb = list(sl)
            sb[k] = slice(ib, ib + 1)
            sb = tuple(sb)
            fill = (sub_kind == VACUUM) & (kind[sb] == DIELECTRIC)
            for a in range(3):
                rest[a][0][fill] = eps[a][sb][fill]
                rest[a][1][fill] = sigma[a][sb][fill]
    for a in range(3):
        e_sub, s_sub = eps[a][sl], sigma[a][sl]
        e_rest, s_rest = rest[a]
        if a == k:
            # complex series composition at the drive frequency, split back into
            # (eps_r, sigma) so the map stays frequency independent in form
            s0 = omega * epsilon_0
            e_layer = body.eps_r - 1j * body.sigma / s0
            e_ser = w / (t / e_layer + (w - t) / (e_rest - 1j * s_rest / s0))
            e_new = e_ser.real
            s_new = np.maximum(-e_ser.imag * s0, 0.0)
        else:
            e_new = body.eps_r * frac + e_rest * (1 - frac)
            s_new = body.sigma * frac + s_rest * (1 - frac)
        e_sub[put] = e_new[put]
        s_sub[put] = s_new[put]
    sub_kind[put] = DIELECTRIC
    bodyarr[sl][put] = idx


def rasterize(assembly: TrapAssembly, grid: Grid3D, rf_amplitude: float | None = None
              ) -> tuple[MaterialMap, DirichletMask]:
    """Classify cells by centre-point membership (conductor > dielectric > vacuum)."""
    if assembly.electrodes or assembly.dielectrics:
        lo, hi = assembly.bounds()
        if not grid.contains_box(lo, hi):
            raise RasterizeError("grid does not strictly contain the assembly")
    shape = grid.shape
    kind = np.zeros(shape, dtype=np.int8)
    role = np.zeros(shape, dtype=np.int8)
    eps = np.ones((3,) + shape)
    sigma = np.zeros((3,) + shape)
    bodyarr = np.full(shape, -1, dtype=np.int16)

    h = grid.h
    for e in assembly.electrodes:
        lo, hi = e.shape.bounds()
        sl = grid.index_range(lo - h, hi + h)
        if any(s.stop <= s.start for s in sl):
            continue
        inside = e.shape.contains(grid.points(sl)).reshape(tuple(s.stop - s.start for s in sl))
        kind[sl][inside] = CONDUCTOR
        role[sl][inside] = ROLE_RF if e.role == "rf" else ROLE_GROUND

    for i, body in enumerate(assembly.dielectrics):
        _apply_body(grid, body, i, kind, eps, sigma, bodyarr, role, assembly.drive.omega)

    _check_shorts(grid, role)

    mask = kind == CONDUCTOR
    for a in range(3):
        sl0 = [slice(None)] * 3
        sl1 = [slice(None)] * 3
        sl0[a] = 0
        sl1[a] = -1
        mask[tuple(sl0)] = True
        mask[tuple(sl1)] = True
    boundary = mask & (kind != CONDUCTOR)
    role = np.where(boundary, ROLE_GROUND, role).astype(np.int8)
    amp = assembly.drive.v_rf if rf_amplitude is None else rf_amplitude
    value = np.where(role == ROLE_RF, amp, 0.0)
    return MaterialMap(grid, kind, eps, sigma, bodyarr), DirichletMask(mask, value, role)


def _check_shorts(grid: Grid3D, role: np.ndarray) -> None:
    for a in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        ra, rb = role[tuple(lo)], role[tuple(hi)]
        bad = ((ra == ROLE_RF) & (rb == ROLE_GROUND)) | ((ra == ROLE_GROUND) & (rb == ROLE_RF))
        if bad.any():
            i = np.argwhere(bad)[0]
            p = [grid.centers[d][i[d]] for d in range(3)]
            raise RasterizeError(f"rf conductor touches a grounded conductor near "
                                 f"{np.round(np.array(p) * 1e3, 4).tolist()} mm ({int(bad.sum())} faces)")


# ---------------------------------------------------------------------------
# Domain sizing
# ---------------------------------------------------------------------------


@dataclass
class DomainLog:
    half_widths: list[float]
    observables: list[dict]
    converged: bool


def grid_for(assembly: TrapAssembly, h: float, half_width: float, ratio: float = 1.15) -> Grid3D:
    """Graded grid: uniform core around the trap and a cubic outer box."""
    center = np.asarray(assembly.core_center)
    lo, hi = assembly.bounds()
    need = float(np.max(np.maximum(np.abs(lo - center), np.abs(hi - center))))
    hw = max(half_width, need * 1.05 + 2 * h)
    return Grid3D.graded(center, assembly.core_half, h, hw, ratio)


def auto_domain(assembly: TrapAssembly, tolerance: float, h: float, ratio: float = 1.15,
                max_doublings: int = 3, evaluate=None) -> tuple[Grid3D, DomainLog]:
    """Grow the grounded box until the trap observables stop changing.

    Starts from a box four times the largest electrode extent and doubles it.
    ``evaluate(assembly, grid) -> dict of floats`` defaults to the trap depths
    and secular frequencies at the rf null.
    """
    if not (0 < tolerance <= 0.1):
        raise ValueError("tolerance must lie in (0, 0.1]")
    if evaluate is None:
        from .pipeline import baseline_observables as evaluate
    lo, hi = assembly.electrode_bounds()
    extent = float(np.max(hi - lo))
    half = 2.0 * extent  # box edge = 4 x extent
    widths, obs = [], []
    prev = None
    for _ in range(max_doublings + 1):
        grid = grid_for(assembly, h, half, ratio)
        cur = evaluate(assembly, grid)
        widths.append(half)
        obs.append(cur)
        if prev is not None:
            change = max(abs(cur[k] - prev[k]) / max(abs(prev[k]), 1e-300) for k in prev)
            log.info("auto_domain %s: half width %.1f mm, max change %.3g", assembly.name, half * 1e3, change)
            if change < tolerance:
                smaller = grid_for(assembly, h, half / 2, ratio)
                return smaller, DomainLog(widths, obs, True)
        prev = cur
        half *= 2
    raise DomainError(f"domain did not converge after {max_doublings} doublings "
                      f"(half widths {[round(w * 1e3, 2) for w in widths]} mm)",
                      DomainLog(widths, obs, False), grid)


# ---------------------------------------------------------------------------
# Binary dumps
# ---------------------------------------------------------------------------

MAGIC = "CAVITRAP-DUMP 1"


def write_dump(path: str | Path, grid: Grid3D, arrays: dict[str, np.ndarray]) -> None:
    """Write named cell arrays as x-fastest little-endian binary after a text header."""
    path = Path(path)
    lines = [MAGIC, "dims " + " ".join(str(d) for d in grid.dims),
             "origin " + " ".join(repr(float(o)) for o in grid.origin),
             f"spacing {grid.h!r}", f"uniform {int(grid.is_uniform)}"]
    for a, f in zip("xyz", grid.faces):
        lines.append(f"faces_{a} " + " ".join(repr(float(v)) for v in f))
    for name, arr in arrays.items():
        dt = "complex128" if np.iscomplexobj(arr) else "float64"
        lines.append(f"array {name} {dt}")
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode())
        for arr in arrays.values():
            dt = "<c16" if np.iscomplexobj(arr) else "<f8"
            fh.write(np.asarray(arr).astype(dt).ravel(order="F").tobytes())


def read_dump(path: str | Path) -> tuple[Grid3D, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    header_end = raw.index(b"\nend\n") + len(b"\nend\n")
    header = raw[:header_end].decode().splitlines()
    if header[0] != MAGIC:
        raise ValueError(f"{path}: not a cavitrap dump")
    faces = {}
    dims = None
    names = []
    for line in header[1:]:
        key, _, rest = line.partition(" ")
        if key == "dims":
            dims = tuple(int(v) for v in rest.split())
        elif key.startswith("faces_"):
            faces[key[-1]] = np.array([float(v) for v in rest.split()])
        elif key == "array":
            n, dt = rest.split()
            names.append((n, dt))
    grid = Grid3D((faces["x"], faces["y"], faces["z"]))
    assert grid.dims == dims
    buf = io.BytesIO(raw[header_end:])
    out = {}
    n = grid.size
    for name, dt in names:
        npdt = np.dtype("<c16" if dt == "complex128" else "<f8")
        data = np.frombuffer(buf.read(n * npdt.itemsize), dtype=npdt)
        out[name] = data.reshape(grid.dims, order="F").copy()
    return grid, out


def dump_material(path: str | Path, material: MaterialMap, mask: DirichletMask) -> None:
    write_dump(path, material.grid, {
        "kind": material.kind.astype(float), "eps_r": material.eps_r[0], "sigma": material.sigma[0],
        "mask": mask.mask.astype(float), "value": mask.value})
