"""Small scenes with hand-set boundary values for the analytic solver checks."""
from __future__ import annotations

import numpy as np

from cavitrap.discretization import (CONDUCTOR, DIELECTRIC, ROLE_GROUND, ROLE_NONE, DirichletMask,
                                     Grid3D, MaterialMap)

# criterion number -> printed PASS/FAIL line, filled by the acceptance suite
ACCEPTANCE: dict[int, str] = {}


def boundary_shell(shape) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    m[0], m[-1] = True, True
    m[:, 0], m[:, -1] = True, True
    m[:, :, 0], m[:, :, -1] = True, True
    return m


def material(grid: Grid3D, eps=None, sigma=None) -> MaterialMap:
    """Isotropic material map from per-cell eps_r and sigma (default vacuum)."""
    shape = grid.shape
    eps = np.ones(shape) if eps is None else np.broadcast_to(eps, shape).astype(float)
    sigma = np.zeros(shape) if sigma is None else np.broadcast_to(sigma, shape).astype(float)
    kind = np.where((eps != 1) | (sigma != 0), DIELECTRIC, 0).astype(np.int8)
    return MaterialMap(grid, kind, np.stack([eps] * 3), np.stack([sigma] * 3), np.full(shape, -1, np.int16))


def fixed(mask: np.ndarray, value: np.ndarray) -> DirichletMask:
    """Dirichlet cells holding arbitrary potentials (no rf role)."""
    role = np.where(mask, ROLE_GROUND, ROLE_NONE).astype(np.int8)
    return DirichletMask(mask, np.where(mask, value, 0.0), role)


def plate_grid(gap: float, n_gap: int, n_side: int = 16) -> Grid3D:
    """Uniform grid whose z-boundary layers are the plates; inner faces bound the gap."""
    h = gap / n_gap
    return Grid3D.uniform((0.0, 0.0, -h), h, (n_side, n_side, n_gap + 2))


def plate_problem(grid: Grid3D, potential_at_z) -> DirichletMask:
    """Boundary shell set to a prescribed 1-D profile phi(z).

    The plates' values sit on their inner faces (z = 0 and z = gap); side cells
    share faces with interior cells at their own centre height.
    """
    mask = boundary_shell(grid.shape)
    zc = grid.centers[2]
    zf = grid.faces[2]
    z = zc.copy()
    z[0], z[-1] = zf[1], zf[-2]
    value = np.broadcast_to(potential_at_z(z)[None, None, :], grid.shape)
    return fixed(mask, value)


def face_points(grid: Grid3D):
    """Cell centres with boundary cells moved onto the face they share with the interior."""
    c = [np.clip(grid.centers[a], grid.faces[a][1], grid.faces[a][-2]) for a in range(3)]
    return np.meshgrid(*c, indexing="ij")


def analytic_solution(grid: Grid3D, field, omega: float = 2 * np.pi * 10e6, mode: str = "rf_quasistatic_real",
                      mask=None):
    """FieldSolution whose E is ``field(X, Y, Z) -> (Ex, Ey, Ez)`` at the cell centres."""
    from cavitrap.solver import FieldSolution
    X, Y, Z = np.meshgrid(*grid.centers, indexing="ij")
    E = np.array([np.broadcast_to(c, grid.shape) for c in field(X, Y, Z)], dtype=float)
    mask = np.zeros(grid.shape, bool) if mask is None else mask
    return FieldSolution(grid, np.zeros(grid.shape), E, mask, mode, 0, 0.0, omega=omega)


def quadrupole(V: float, r0: float):
    """E of phi = V (x^2 - y^2) / (2 r0^2)."""
    return lambda X, Y, Z: (-V * X / r0**2, V * Y / r0**2, 0 * Z)
