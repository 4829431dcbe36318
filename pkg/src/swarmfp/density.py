"""Belief densities and the semi-discrete Fokker-Planck dynamics.

The density rate is ``rho_t = A(rho) @ u + T * B @ rho`` with the advection
operator ``A(rho) = -[Dx diag(rho), Dy diag(rho)]``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import Boundary, GridSpec, Operators

DENSITY_FLOOR = 1e-12
# spread constant: 99% of a zero-mean Gaussian inside +-c*u_max gives 0.3**2 / 2
NOISE_SPREAD = 0.045


class DomainError(ValueError):
    """A position lies outside the grid's spatial domain."""


class CancellationConsistencyError(ValueError):
    """The cancellation system ``A u = -T B rho`` cannot be solved exactly."""


class CancellationConsistencyWarning(UserWarning):
    pass


@dataclass
class SwarmState:
    true_pos: np.ndarray
    meas_pos: np.ndarray
    precision: float

    def __post_init__(self):
        self.true_pos = np.atleast_2d(np.asarray(self.true_pos, dtype=float))
        self.meas_pos = np.atleast_2d(np.asarray(self.meas_pos, dtype=float))
        if self.true_pos.shape != self.meas_pos.shape or self.true_pos.shape[1] != 2:
            raise ValueError("true and measured positions must both be (N, 2)")
        if not self.precision > 0:
            raise ValueError("precision must be positive")

    @property
    def n_robots(self) -> int:
        return len(self.true_pos)


@dataclass(frozen=True)
class DiffusionModel:
    """Motion-noise model; the diffusion constant is ``0.045 * c * u_max``."""

    c: float
    u_max: float

    def __post_init__(self):
        if self.c < 0:
            raise ValueError("noise scale c must be >= 0")
        if not self.u_max > 0:
            raise ValueError("u_max must be positive")

    @property
    def T(self) -> float:
        return NOISE_SPREAD * self.c * self.u_max


def _check_inside(positions: np.ndarray, grid: GridSpec) -> None:
    inside = grid.contains(positions)
    if not inside.all():
        bad = np.flatnonzero(~inside)
        raise DomainError(f"positions {positions[bad].tolist()} lie outside the domain {grid.bounds}")


def robot_densities(positions, lam: float, grid: GridSpec) -> np.ndarray:
    """Per-robot kernels ``exp(-lam |r - x_i|^2 / 2)``, shape ``(N, n_points)``."""
    x = np.atleast_2d(np.asarray(positions, dtype=float))
    if not lam > 0:
        raise ValueError("precision lambda must be positive")
    _check_inside(x, grid)
    pts = grid.points()
    d2 = (pts[None, :, 0] - x[:, None, 0]) ** 2 + (pts[None, :, 1] - x[:, None, 1]) ** 2
    return np.exp(-0.5 * lam * d2)


def gaussian_density(positions, lam: float, grid: GridSpec) -> np.ndarray:
    """Swarm belief density: sum of unnormalized isotropic Gaussian kernels."""
    return robot_densities(positions, lam, grid).sum(axis=0)


def target_density(
    grid: GridSpec, mean, std: float, mass: float | None = None, peak: float | None = None
) -> np.ndarray:
    """Gaussian target on the grid.

    The unscaled bump has peak 1. ``mass`` rescales it to that total grid
    mass, ``peak`` to that maximum value; at most one may be given.
    """
    if mass is not None and peak is not None:
        raise ValueError("give at most one of mass and peak")
    if not std > 0:
        raise ValueError("target std must be positive")
    pts = grid.points()
    d2 = ((pts - np.asarray(mean, dtype=float)) ** 2).sum(axis=1)
    rho_d = np.exp(-0.5 * d2 / std**2)
    if mass is not None:
        rho_d *= mass / (rho_d.sum() * grid.cell_area)
    elif peak is not None:
        rho_d *= peak
    return rho_d


def build_advection(rho: np.ndarray, dx: sp.spmatrix, dy: sp.spmatrix, grid: GridSpec | None = None):
    """Sparse ``N_d x 2N_d`` operator mapping ``u`` to ``-div(u rho)``."""
    if grid is not None and not grid.is_odd:
        warnings.warn(
            f"{grid.nx}x{grid.ny} grid has an even dimension: stride-2 central-difference cycles "
            "are broken and the cancellation system is generally inconsistent; use odd sizes",
            CancellationConsistencyWarning,
            stacklevel=2,
        )
    r = sp.diags(np.asarray(rho, dtype=float))
    return -sp.hstack([dx @ r, dy @ r]).tocsr()


def fp_rhs(rho: np.ndarray, u: np.ndarray, T: float, ops: Operators) -> np.ndarray:
    n = ops.grid.n_points
    rho = np.asarray(rho, dtype=float)
    u = np.asarray(u, dtype=float)
    if rho.shape != (n,) or u.shape != (2 * n,):
        raise ValueError(f"expected rho of length {n} and u of length {2 * n}")
    return -(ops.dx @ (rho * u[:n]) + ops.dy @ (rho * u[n:])) + T * (ops.lap @ rho)


def _left_null_vector(grid: GridSpec) -> np.ndarray:
    # kernel of [Dx; Dy]^T on odd grids: constants (periodic), or the
    # even-index indicator (Neumann, where the wrap couplings are absent)
    if grid.boundary is Boundary.PERIODIC:
        return np.ones(grid.n_points)
    vx = (np.arange(grid.nx) % 2 == 0).astype(float)
    vy = (np.arange(grid.ny) % 2 == 0).astype(float)
    return np.outer(vy, vx).ravel()


@dataclass
class CancellationResult:
    u: np.ndarray
    residual: float
    rhs_norm: float
    refinements: int

    @property
    def relative_residual(self) -> float:
        return self.residual / self.rhs_norm if self.rhs_norm > 0 else self.residual


def cancellation_control(
    rho: np.ndarray, T: float, ops: Operators, rtol: float = 1e-8, atol: float = 1e-12, max_refine: int = 8
) -> CancellationResult:
    """Minimum-norm ``u`` with ``A(rho) u = -T B rho``; never raises on accuracy."""
    grid = ops.grid
    rho = np.asarray(rho, dtype=float)
    if not grid.is_odd:
        raise CancellationConsistencyError(
            f"{grid.nx}x{grid.ny} grid: even dimensions break the i -> i+2 cycles of the central "
            "difference, so diffusion is not in the image of the advection operator; adjust the grid size"
        )
    if rho.shape != (grid.n_points,) or not np.all(rho > 0):
        raise ValueError("cancellation control needs a strictly positive density on every grid point")
    b = -T * (ops.lap @ rho)
    nb = float(np.linalg.norm(b))
    if nb <= atol:
        return CancellationResult(np.zeros(2 * grid.n_points), nb, nb, 0)

    a = build_advection(rho, ops.dx, ops.dy)
    m = (a @ a.T).tocsc()
    z = _left_null_vector(grid)
    # least-squares part: project onto the image before solving the singular system
    b_img = b - z * (z @ b) / (z @ z)
    pin = int(np.argmax(np.where(z != 0, rho, -np.inf)))
    keep = np.r_[0:pin, pin + 1 : grid.n_points]
    mr = m[keep][:, keep]
    scale = np.sqrt(mr.diagonal())
    s_inv = sp.diags(1.0 / scale)
    lu = spla.splu((s_inv @ mr @ s_inv).tocsc())

    y = np.zeros(grid.n_points)
    best_y, best_res = y.copy(), np.inf
    k = 0
    for k in range(max_refine):
        r = b_img - a @ (a.T @ y)
        res = float(np.linalg.norm(r))
        if res < best_res:
            best_y, best_res = y.copy(), res
        if res <= max(rtol * nb * 1e-2, atol):
            break
        y[keep] += lu.solve(r[keep] / scale) / scale
    u = a.T @ best_y
    residual = float(np.linalg.norm(a @ u - b))
    return CancellationResult(u, residual, nb, k)


def min_norm_control(rho: np.ndarray, T: float, ops: Operators, rtol: float = 1e-8, atol: float = 1e-12):
    """Diffusion-cancelling control of minimum Euclidean norm.

    Raises :class:`CancellationConsistencyError` on even grids and whenever the
    residual ``||A u + T B rho||`` exceeds ``max(rtol * ||T B rho||, atol)``.
    """
    res = cancellation_control(rho, T, ops, rtol=rtol, atol=atol)
    if res.residual > max(rtol * res.rhs_norm, atol):
        raise CancellationConsistencyError(
            f"cancellation residual {res.residual:.3e} exceeds tolerance "
            f"(relative {res.relative_residual:.3e}, boundary {ops.grid.boundary.value})"
        )
    return res.u


def control_bounds(u_star: np.ndarray, pad: float = 0.1, u_max: float | None = None) -> tuple[float, float]:
    """Scalar box ``[lo, hi]`` containing every component of ``u_star`` with a relative pad.

    With ``u_max`` the box is widened to at least ``[-u_max, u_max]``.
    """
    lo, hi = float(np.min(u_star)), float(np.max(u_star))
    width = max(abs(lo), abs(hi))
    lo, hi = lo - pad * width, hi + pad * width
    if u_max is not None:
        lo, hi = min(lo, -u_max), max(hi, u_max)
    return lo, hi
