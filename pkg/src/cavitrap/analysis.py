"""Pseudopotential observables: rf null, trap depth, secular frequency, anharmonicity."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import constants
from scipy.ndimage import map_coordinates

from .solver import FieldSolution, trilinear

AMU = 1.66e-27
ELEMENTARY_CHARGE = 1.60e-19
K_B = constants.k


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class IonSpecies:
    mass: float  # kg
    charge: float  # C

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError("ion mass must be positive")
        if self.charge == 0:
            raise ValueError("ion charge must be non-zero")

    @classmethod
    def from_units(cls, mass_amu: float = 40.0, charge_e: float = 1.0) -> "IonSpecies":
        return cls(mass_amu * AMU, charge_e * ELEMENTARY_CHARGE)


CALCIUM_40 = IonSpecies.from_units(40.0, 1.0)


def pseudopotential_energy(E2, species: IonSpecies, omega: float):
    """Ponderomotive energy in eV for squared field amplitude ``E2`` (V^2/m^2)."""
    return species.charge ** 2 * E2 / (4 * species.mass * omega ** 2) / ELEMENTARY_CHARGE


def _extend_into_mask(E: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Copy neighbouring free-cell values into the first layer of masked cells."""
    E = E.copy()
    free = ~mask
    acc = np.zeros_like(E)
    cnt = np.zeros(mask.shape)
    for axis in range(3):
        for shift in (1, -1):
            f = np.roll(free, shift, axis=axis)
            v = np.roll(E, shift, axis=axis + 1)
            acc += np.where(f, v, 0)
            cnt += f
    fill = mask & (cnt > 0)
    E[:, fill] = acc[:, fill] / cnt[fill]
    return E


@dataclass(eq=False)
class PseudoMap:
    """Pseudopotential (eV) at cell centres, with interpolating samplers."""

    values: np.ndarray
    solution: FieldSolution
    species: IonSpecies
    omega: float
    geometry_hash: str = ""
    _E_ext: np.ndarray | None = field(default=None, repr=False)

    @property
    def grid(self):
        return self.solution.grid

    @property
    def E_ext(self) -> np.ndarray:
        if self._E_ext is None:
            self._E_ext = _extend_into_mask(self.solution.E, self.solution.mask)
        return self._E_ext

    def masked(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        grid = self.grid
        idx = []
        for a in range(3):
            f = grid.faces[a]
            i = np.clip(np.searchsorted(f, pts[:, a], side="right") - 1, 0, f.size - 2)
            idx.append(i)
        return self.solution.mask[idx[0], idx[1], idx[2]]

    def inside(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        lo = np.array([c[0] for c in self.grid.centers])
        hi = np.array([c[-1] for c in self.grid.centers])
        return np.all((pts >= lo) & (pts <= hi), axis=1)

    def sample(self, points, method: str = "linear") -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if method == "linear":
            E = trilinear(self.grid, self.E_ext, pts)
        elif method == "cubic":
            E = self._cubic(pts)
        else:
            raise ValueError(f"unknown interpolation {method!r}")
        return pseudopotential_energy(np.sum(np.abs(E) ** 2, axis=0), self.species, self.omega)

    def _cubic(self, pts: np.ndarray) -> np.ndarray:
        # cubic spline in index space on a local block (avoids ringing from far conductors)
        grid = self.grid
        fidx = np.empty_like(pts)
        for a in range(3):
            c = grid.centers[a]
            fidx[:, a] = np.interp(pts[:, a], c, np.arange(c.size))
        lo = np.maximum(np.floor(fidx.min(axis=0)).astype(int) - 6, 0)
        hi = np.minimum(np.ceil(fidx.max(axis=0)).astype(int) + 7, np.array(grid.shape))
        block = self.E_ext[:, lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        coords = (fidx - lo).T
        out = []
        for comp in block:
            if np.iscomplexobj(comp):
                v = (map_coordinates(comp.real, coords, order=3, mode="nearest")
                     + 1j * map_coordinates(comp.imag, coords, order=3, mode="nearest"))
            else:
                v = map_coordinates(comp, coords, order=3, mode="nearest")
            out.append(v)
        return np.array(out)


def pseudopotential(solution: FieldSolution, species: IonSpecies = CALCIUM_40, omega: float | None = None,
                    geometry_hash: str = "") -> PseudoMap:
    """Time-averaged ponderomotive potential Q^2 |E|^2 / (4 M Omega^2), in eV."""
    if solution.mode == "dc_surface_charge":
        raise AnalysisError("pseudopotential needs an rf solution, not a static one")
    omega = solution.omega if omega is None else omega
    if not omega > 0:
        raise AnalysisError("drive angular frequency must be positive")
    vals = pseudopotential_energy(solution.E_squared(), species, omega)
    return PseudoMap(vals, solution, species, omega, geometry_hash)


# ---------------------------------------------------------------------------
# rf null
# ---------------------------------------------------------------------------


def _quadric_design(d: np.ndarray, ndim: int) -> np.ndarray:
    cols = [np.ones(len(d))]
    cols += [d[:, i] for i in range(ndim)]
    for i in range(ndim):
        for j in range(i, ndim):
            cols.append(d[:, i] * d[:, j])
    return np.column_stack(cols)


def _quadric_stationary(d: np.ndarray, f: np.ndarray, ndim: int) -> np.ndarray:
    X = _quadric_design(d, ndim)
    coef, *_ = np.linalg.lstsq(X, f, rcond=None)
    g = coef[1:1 + ndim]
    H = np.zeros((ndim, ndim))
    k = 1 + ndim
    for i in range(ndim):
        for j in range(i, ndim):
            if i == j:
                H[i, i] = 2 * coef[k]
            else:
                H[i, j] = H[j, i] = coef[k]
            k += 1
    return np.linalg.solve(H, -g)


def find_rf_null(pseudo: PseudoMap, region: tuple[Sequence[float], Sequence[float]],
                 plane_axis: int | None = None, plane_value: float | None = None,
                 refinements: int = 3) -> np.ndarray:
    """Locate the pseudopotential minimum inside ``region`` = (lo, hi).

    The coarse minimum over cell-centre samples is refined with a least-squares
    quadric through its 3x3x3 neighbourhood. With ``plane_axis`` the search is
    restricted to the plane ``x[plane_axis] = plane_value`` (use this for the
    rf-null line of a linear trap).
    """
    grid = pseudo.grid
    lo, hi = np.asarray(region[0], float), np.asarray(region[1], float)
    free_axes = [a for a in range(3) if a != plane_axis]
    axes = []
    for a in range(3):
        if a == plane_axis:
            axes.append(np.array([plane_value]))
        else:
            c = grid.centers[a]
            axes.append(c[(c >= lo[a]) & (c <= hi[a])])
            if axes[-1].size < 3:
                raise AnalysisError("search region is too small for the grid")
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = pseudo.sample(pts)
    vals = np.where(pseudo.masked(pts), np.inf, vals)
    shape = tuple(len(a) for a in axes)
    i = np.unravel_index(int(np.argmin(vals)), shape)
    for a in free_axes:
        if i[a] == 0 or i[a] == shape[a] - 1:
            raise AnalysisError("no interior null: the minimum lies on the search-region boundary")
    x = pts[np.ravel_multi_index(i, shape)].copy()
    h = np.array([grid.widths[a][min(max(np.searchsorted(grid.faces[a], x[a]) - 1, 0), grid.dims[a] - 1)]
                  for a in range(3)])
    ndim = len(free_axes)
    offs = np.stack(np.meshgrid(*([np.array([-1.0, 0.0, 1.0])] * ndim), indexing="ij"), axis=-1).reshape(-1, ndim)
    # a +-h stencil is biased by the cubic term (about C3 h^2 / 2 C2), so the last
    # passes shrink the stencil on the cubic interpolant
    # passes shrink the stencil on the cubic interpolant; steps stay within a cell
    hf = h[free_axes]
    stages = [(1.0, "linear", refinements), (1 / 8, "cubic", 6), (1 / 64, "cubic", 6)]
    for frac, method, passes in stages:
        d = offs * frac * hf
        for _ in range(passes):
            p = np.tile(x, (len(d), 1))
            p[:, free_axes] += d
            step = np.clip(_quadric_stationary(d, pseudo.sample(p, method), ndim), -hf, hf)
            x[free_axes] += step
            if np.all(np.abs(step) < 1e-3 * frac * hf):
                break
    if np.any(x < lo) or np.any(x > hi):
        raise AnalysisError("no interior null: refinement left the search region")
    return x


# ---------------------------------------------------------------------------
# Depth and frequency
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RayResult:
    barrier: float | None  # eV, absolute
    position: np.ndarray | None
    status: str  # "maximum" | "electrode" | "unbounded"


@dataclass(frozen=True)
class DepthResult:
    depth: float  # eV, inf when unbounded
    barrier_position: np.ndarray | None
    plus: RayResult
    minus: RayResult

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.depth)


def _ray(pseudo: PseudoMap, origin: np.ndarray, direction: np.ndarray, step: float,
         prominence: float) -> RayResult:
    grid = pseudo.grid
    span = float(np.max(grid.upper - grid.origin))
    n = int(span / step) + 2
    s = np.arange(n) * step
    pts = origin + s[:, None] * direction
    ok = pseudo.inside(pts)
    n_ok = int(np.argmin(ok)) if not ok.all() else n
    pts, s = pts[:n_ok], s[:n_ok]
    hit = pseudo.masked(pts)
    n_hit = int(np.argmax(hit)) if hit.any() else len(pts)
    pts, s = pts[:n_hit], s[:n_hit]
    phi = pseudo.sample(pts)
    phi0 = phi[0]
    i = 1
    while i < len(phi) - 1:
        if phi[i] >= phi[i - 1] and phi[i] > phi[i + 1]:
            # accept the maximum only if the profile really turns over
            thresh = phi[i] - prominence * max(phi[i] - phi0, 1e-300)
            j = i + 1
            while j < len(phi) and phi[j] <= phi[i] and phi[j] > thresh:
                j += 1
            if j == len(phi) or phi[j] <= thresh:
                a, b, c = phi[i - 1], phi[i], phi[i + 1]
                denom = a - 2 * b + c
                off = 0.5 * (a - c) / denom if denom != 0 else 0.0
                off = float(np.clip(off, -1, 1))
                peak = b - 0.25 * (a - c) * off
                return RayResult(float(peak), origin + (s[i] + off * step) * direction, "maximum")
            i = j
            continue
        i += 1
    if n_hit < n_ok and len(phi):
        k = int(np.argmax(phi))
        return RayResult(float(phi[k]), pts[k], "electrode")
    return RayResult(None, None, "unbounded")


def trap_depth(pseudo: PseudoMap, null, direction, step: float | None = None,
               prominence: float = 0.01) -> DepthResult:
    """Smallest barrier between the null and escape along +direction and -direction."""
    null = np.asarray(null, float)
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    step = pseudo.grid.h / 2 if step is None else step
    phi0 = float(pseudo.sample(null)[0])
    plus = _ray(pseudo, null, d, step, prominence)
    minus = _ray(pseudo, null, -d, step, prominence)
    best = None
    for r in (plus, minus):
        if r.barrier is not None and (best is None or r.barrier < best.barrier):
            best = r
    if best is None:
        return DepthResult(math.inf, None, plus, minus)
    return DepthResult(best.barrier - phi0, best.position, plus, minus)


def _line_samples(pseudo: PseudoMap, null, direction, half_range: float, n: int, method: str):
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    s = np.linspace(-half_range, half_range, n)
    pts = np.asarray(null, float) + s[:, None] * d
    if not pseudo.inside(pts).all():
        raise AnalysisError("fit window leaves the domain")
    return s, pseudo.sample(pts, method)


def curvature_to_frequency(c2: float, species: IonSpecies) -> float:
    """Secular frequency (Hz) of a well U = c2 x^2 with c2 in eV/m^2."""
    return math.sqrt(2 * ELEMENTARY_CHARGE * c2 / species.mass) / (2 * math.pi)


def secular_frequency(pseudo: PseudoMap, null, direction, half_range: float = 50e-6, n: int = 41,
                      method: str = "cubic") -> float:
    """Harmonic frequency from a least-squares parabola over +-half_range."""
    s, phi = _line_samples(pseudo, null, direction, half_range, n, method)
    c2 = np.polyfit(s / half_range, phi, 2)[0] / half_range ** 2
    if not c2 > 0:
        raise AnalysisError("negative curvature: not a trapping direction")
    return curvature_to_frequency(float(c2), pseudo.species)


# ---------------------------------------------------------------------------
# Taylor expansion and anharmonicity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaylorFit:
    coefficients: dict[int, float]  # n -> C_n in eV/m^n, n = 2..6
    offset: float
    fit_range: float  # half range (m)
    residual: float
    history: tuple = ()
    converged: bool = True


def fit_polynomial(s: np.ndarray, phi: np.ndarray, scale: float) -> tuple[float, dict[int, float], float]:
    """Least squares of phi = P0 + sum_{n=2..6} C_n s^n (no linear term)."""
    u = s / scale
    X = np.column_stack([np.ones_like(u)] + [u ** n for n in range(2, 7)])
    coef, *_ = np.linalg.lstsq(X, phi, rcond=None)
    fit = X @ coef
    dev = phi - coef[0]
    rms_dev = float(np.sqrt(np.mean(dev ** 2)))
    rel = float(np.sqrt(np.mean((phi - fit) ** 2))) / rms_dev if rms_dev > 0 else 0.0
    coeffs = {n: float(coef[n - 1] / scale ** n) for n in range(2, 7)}
    return float(coef[0]), coeffs, rel


def taylor_fit(pseudo: PseudoMap, null, axis, start: float = 10e-6, step: float = 10e-6,
               residual_tol: float = 1e-6, change_tol: float = 0.01, max_range: float | None = None,
               n: int = 61, method: str = "cubic", negligible: float = 1e-4,
               strict: bool = True) -> TaylorFit:
    """Grow the fit range until the fit is accurate and the coefficients settle.

    A coefficient counts as settled when it changes by less than ``change_tol``
    relative, or when its change is negligible next to the quadratic term over
    the current range (``|dC_n| R^(n-2) / C_2 < negligible``).

    If the residual never drops below ``residual_tol`` (interpolation noise on a
    coarse grid), ``strict=False`` returns the first range where the
    coefficients settled, flagged ``converged=False``.
    """
    max_range = 40 * start if max_range is None else max_range
    prev = fallback = None
    history = []
    R = start
    while R <= max_range + 1e-15:
        try:
            s, phi = _line_samples(pseudo, null, axis, R, n, method)
        except AnalysisError:
            break
        off, coeffs, rel = fit_polynomial(s, phi, R)
        history.append((R, rel, coeffs))
        if prev is not None:
            c2 = coeffs[2]
            settled = all(
                abs(coeffs[k] - prev[k]) <= change_tol * abs(coeffs[k])
                or abs(coeffs[k] - prev[k]) * R ** (k - 2) <= negligible * abs(c2)
                for k in coeffs)
            if settled and rel < residual_tol:
                return TaylorFit(coeffs, off, R, rel, tuple(history), True)
            if settled and fallback is None:
                fallback = (coeffs, off, R, rel)
        prev = coeffs
        R += step
    if not strict and fallback is not None:
        return TaylorFit(*fallback, tuple(history), False)
    raise AnalysisError("fit range reached the limit before the coefficients stabilised")


def fit_synthetic(s: np.ndarray, phi: np.ndarray) -> TaylorFit:
    scale = float(np.max(np.abs(s)))
    off, coeffs, rel = fit_polynomial(s, phi, scale)
    return TaylorFit(coeffs, off, scale, rel)


@dataclass(frozen=True)
class Anharmonicity:
    A: dict[int, float]  # n = 3..6
    l0: float


def thermal_length(species: IonSpecies, temperature: float, frequency: float) -> float:
    omega = 2 * math.pi * frequency
    return math.sqrt(K_B * temperature / (species.mass * omega ** 2))


def anharmonicity(coefficients: dict[int, float], species: IonSpecies = CALCIUM_40,
                  temperature: float = 590e-6, f_x: float = 1.23e6) -> Anharmonicity:
    """A_n = C_n l0^(n-2) / C_2 with l0 the 1-sigma thermal width."""
    c2 = coefficients[2]
    if not c2 > 0:
        raise AnalysisError("C2 must be positive")
    l0 = thermal_length(species, temperature, f_x)
    return Anharmonicity({n: coefficients[n] * l0 ** (n - 2) / c2 for n in range(3, 7)}, l0)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

AXIS_NAMES = ("x", "y", "z")


@dataclass
class TrapReport:
    trap: str
    null: np.ndarray
    depths: dict[str, DepthResult]
    frequencies: dict[str, float]
    taylor: TaylorFit | None = None
    anharmonic: Anharmonicity | None = None
    normalized: dict[str, float] = field(default_factory=dict)
    baseline_hash: str = ""
    geometry_hash: str = ""

    def depth(self, axis: str) -> float:
        return self.depths[axis].depth

    @property
    def overall_depth(self) -> float:
        vals = [d.depth for d in self.depths.values() if d.bounded]
        return min(vals) if vals else math.inf

    def to_dict(self) -> dict:
        def ray(r: RayResult):
            return {"barrier_eV": r.barrier, "status": r.status,
                    "position_m": None if r.position is None else [float(v) for v in r.position]}

        out = {
            "trap": self.trap,
            "geometry_hash": self.geometry_hash,
            "null_m": [float(v) for v in self.null],
            "depth_eV": {k: (d.depth if d.bounded else None) for k, d in self.depths.items()},
            "barrier_m": {k: (None if d.barrier_position is None else [float(v) for v in d.barrier_position])
                          for k, d in self.depths.items()},
            "rays": {k: {"plus": ray(d.plus), "minus": ray(d.minus)} for k, d in self.depths.items()},
            "frequency_Hz": dict(self.frequencies),
            "normalized": dict(self.normalized),
            "baseline_hash": self.baseline_hash,
        }
        if self.taylor is not None:
            out["taylor"] = {"C": {str(k): v for k, v in self.taylor.coefficients.items()},
                             "fit_range_m": self.taylor.fit_range, "residual": self.taylor.residual,
                             "converged": self.taylor.converged}
        if self.anharmonic is not None:
            out["anharmonicity"] = {"A": {str(k): v for k, v in self.anharmonic.A.items()},
                                    "l0_m": self.anharmonic.l0}
        return out


def normalize_report(report: TrapReport, baseline: TrapReport) -> TrapReport:
    """Depth and frequency ratios against a no-cavity baseline of the same trap."""
    if report.trap != baseline.trap:
        raise AnalysisError("baseline must be the same trap family")
    ratios = {}
    for k, d in report.depths.items():
        b = baseline.depths.get(k)
        if b is None or not d.bounded or not b.bounded:
            continue
        if b.depth == 0:
            raise AnalysisError(f"baseline depth along {k} is zero")
        ratios[f"depth_{k}"] = d.depth / b.depth
    for k, f in report.frequencies.items():
        b = baseline.frequencies.get(k)
        if b:
            ratios[f"freq_{k}"] = f / b
    bo, ro = baseline.overall_depth, report.overall_depth
    if math.isfinite(bo) and math.isfinite(ro):
        ratios["depth_min"] = ro / bo
    return dataclasses.replace(report, normalized=ratios, baseline_hash=baseline.geometry_hash)


def null_shift(perturbed: TrapReport, baseline: TrapReport) -> np.ndarray:
    return np.asarray(perturbed.null, float) - np.asarray(baseline.null, float)
