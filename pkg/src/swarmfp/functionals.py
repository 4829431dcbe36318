"""Lyapunov and barrier functionals, their control-affine derivatives, and safety monitors.

All integrals are rectangle-rule sums over grid points with weight ``l**2``.
Robot-velocity controls are laid out per robot, ``u = [u1x, u1y, u2x, u2y, ...]``.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .density import DiffusionModel, build_advection, gaussian_density, robot_densities
from .grid import GridSpec, Operators
from .voronoi import Partition


@dataclass(frozen=True)
class SafetyRegion:
    """Circular restricted area; grid points within ``radius`` of ``center`` belong to it."""

    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("region radius must be positive")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    def mask(self, grid: GridSpec) -> np.ndarray:
        return _region_mask(self, grid)

    def check_inside(self, grid: GridSpec) -> None:
        xmin, xmax, ymin, ymax = grid.bounds
        cx, cy = self.center
        r = self.radius
        if not (xmin < cx - r and cx + r < xmax and ymin < cy - r and cy + r < ymax):
            raise ValueError(f"region {self} must lie strictly inside the domain {grid.bounds}")


@functools.lru_cache(maxsize=64)
def _region_mask(region: SafetyRegion, grid: GridSpec) -> np.ndarray:
    pts = grid.points()
    d2 = ((pts - np.asarray(region.center)) ** 2).sum(axis=1)
    m = d2 <= region.radius**2
    m.flags.writeable = False
    return m


@dataclass(frozen=True)
class GainSet:
    alpha_v: float = 1.0
    alpha_h: float = 1.0
    gamma: float = 100.0
    epsilon: float = 0.01

    def __post_init__(self):
        for name in ("alpha_v", "alpha_h", "gamma", "epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


class Sense(str, enum.Enum):
    LESS_EQ = "<="
    GREATER_EQ = ">="


@dataclass
class ConstraintForm:
    """Affine form ``gradient @ u + constant`` compared against the slack (<=) or zero (>=)."""

    gradient: np.ndarray
    constant: float
    sense: Sense

    def value(self, u) -> float:
        return float(self.gradient @ np.ravel(u) + self.constant)

    def scaled(self, factor: float) -> "ConstraintForm":
        return ConstraintForm(self.gradient * factor, self.constant * factor, self.sense)


def lyapunov_v(rho, rho_d, grid: GridSpec) -> float:
    diff = np.asarray(rho_d) - np.asarray(rho)
    return 0.5 * float(diff @ diff) * grid.cell_area


def barrier_h(rho, region: SafetyRegion, epsilon: float, grid: GridSpec) -> float:
    inside = np.asarray(rho)[region.mask(grid)]
    return epsilon - float(inside @ inside) * grid.cell_area


def _adjoint_advection(rho: np.ndarray, w: np.ndarray, ops: Operators) -> np.ndarray:
    # A(rho)^T w without assembling A
    return -np.concatenate([rho * (ops.dx.T @ w), rho * (ops.dy.T @ w)])


def clf_form_sv(rho, rho_d, ops: Operators, T: float, gains: GainSet) -> ConstraintForm:
    """``alpha_v V + Vdot`` for the grid control field, as an affine form in ``u``."""
    grid = ops.grid
    area = grid.cell_area
    rho = np.asarray(rho, dtype=float)
    w = np.asarray(rho_d, dtype=float) - rho
    grad = -area * _adjoint_advection(rho, w, ops)
    const = gains.alpha_v * lyapunov_v(rho, rho_d, grid) - area * float(w @ (T * (ops.lap @ rho)))
    return ConstraintForm(grad, const, Sense.LESS_EQ)


def cbf_form_sv(rho, region: SafetyRegion, ops: Operators, T: float, gains: GainSet) -> ConstraintForm:
    """``alpha_h h + hdot`` for the grid control field."""
    grid = ops.grid
    area = grid.cell_area
    rho = np.asarray(rho, dtype=float)
    m = np.where(region.mask(grid), rho, 0.0)
    grad = -2.0 * area * _adjoint_advection(rho, m, ops)
    h = barrier_h(rho, region, gains.epsilon, grid)
    const = gains.alpha_h * h - 2.0 * area * float(m @ (T * (ops.lap @ rho)))
    return ConstraintForm(grad, const, Sense.GREATER_EQ)


def sv_forms_direct(rho, rho_d, region, ops: Operators, T, gains, u) -> tuple[float, float]:
    """Evaluate both SV constraint sums literally at ``u`` (reference for the affine forms)."""
    grid = ops.grid
    area = grid.cell_area
    a = build_advection(rho, ops.dx, ops.dy)
    rho_t = a @ u + T * (ops.lap @ rho)
    diff = rho_d - rho
    clf = float(np.sum(0.5 * gains.alpha_v * diff**2 - diff * rho_t) * area)
    mask = region.mask(grid)
    cbf = gains.alpha_h * gains.epsilon + float(
        np.sum(-gains.alpha_h * rho[mask] ** 2 - 2.0 * rho[mask] * rho_t[mask]) * area
    )
    return clf, cbf


@dataclass
class RobotForms:
    """Both robot-velocity constraint forms plus the functional values they were built from."""

    clf: ConstraintForm
    cbf: ConstraintForm
    V: float
    h: float


def rv_forms(
    positions,
    lam: float,
    rho_d,
    region: SafetyRegion,
    grid: GridSpec,
    T: float,
    gains: GainSet,
    partition: Partition | None = None,
) -> RobotForms:
    """Constraint forms over per-robot velocities.

    Without a partition every robot integrates its kernel over the whole domain
    against the swarm density. With one, robot ``i`` only sees its own kernel
    inside its cell, which costs one kernel evaluation per grid point overall.
    """
    x = np.atleast_2d(np.asarray(positions, dtype=float))
    n = len(x)
    area = grid.cell_area
    pts = grid.points()
    mask = region.mask(grid)
    rho_d = np.asarray(rho_d, dtype=float)

    if partition is None:
        ex = pts[None, :, 0] - x[:, None, 0]
        ey = pts[None, :, 1] - x[:, None, 1]
        d2 = ex**2 + ey**2
        rho_i = np.exp(-0.5 * lam * d2)
        rho = rho_i.sum(axis=0)
        lap_sum = (rho_i * (lam**2 * d2 - 2.0 * lam)).sum(axis=0)

        w_v = (rho_d - rho) * area
        q = rho_i * w_v
        g_v = -lam * np.column_stack([q @ pts[:, 0] - x[:, 0] * q.sum(1), q @ pts[:, 1] - x[:, 1] * q.sum(1)])
        V = 0.5 * float((rho_d - rho) @ (rho_d - rho)) * area

        rho_a = rho[mask]
        w_h = 2.0 * rho_a * area
        qh = rho_i[:, mask] * w_h
        pa = pts[mask]
        g_h = -lam * np.column_stack([qh @ pa[:, 0] - x[:, 0] * qh.sum(1), qh @ pa[:, 1] - x[:, 1] * qh.sum(1)])
        h = gains.epsilon - float(rho_a @ rho_a) * area
        k_v = gains.alpha_v * V - T * float(w_v @ lap_sum)
        k_h = gains.alpha_h * h - T * float(w_h @ lap_sum[mask])
    else:
        own = partition.owner
        ex = pts[:, 0] - x[own, 0]
        ey = pts[:, 1] - x[own, 1]
        d2 = ex**2 + ey**2
        rho_o = np.exp(-0.5 * lam * d2)
        lap_o = rho_o * (lam**2 * d2 - 2.0 * lam)

        diff = rho_d - rho_o
        w_v = diff * area
        q = -lam * w_v * rho_o
        g_v = np.column_stack(
            [np.bincount(own, q * ex, minlength=n), np.bincount(own, q * ey, minlength=n)]
        )
        V = 0.5 * float(diff @ diff) * area

        own_a = own[mask]
        rho_a = rho_o[mask]
        w_h = 2.0 * rho_a * area
        qh = -lam * w_h * rho_a
        g_h = np.column_stack(
            [np.bincount(own_a, qh * ex[mask], minlength=n), np.bincount(own_a, qh * ey[mask], minlength=n)]
        )
        h = gains.epsilon - float(rho_a @ rho_a) * area
        k_v = gains.alpha_v * V - T * float(w_v @ lap_o)
        k_h = gains.alpha_h * h - T * float(w_h @ lap_o[mask])

    clf = ConstraintForm(g_v.ravel(), k_v, Sense.LESS_EQ)
    cbf = ConstraintForm(g_h.ravel(), k_h, Sense.GREATER_EQ)
    return RobotForms(clf, cbf, V, h)


def clf_form_rv(positions, lam, rho_d, grid, T, gains, partition=None, region=None) -> ConstraintForm:
    region = region or SafetyRegion((0.0, 0.0), grid.spacing)
    return rv_forms(positions, lam, rho_d, region, grid, T, gains, partition).clf


def cbf_form_rv(positions, lam, region, grid, T, gains, partition=None) -> ConstraintForm:
    rho_d = np.zeros(grid.n_points)
    return rv_forms(positions, lam, rho_d, region, grid, T, gains, partition).cbf


def voronoi_lyapunov(positions, lam, rho_d, partition: Partition, grid: GridSpec) -> float:
    x = np.atleast_2d(np.asarray(positions, dtype=float))
    pts = grid.points()
    d2 = ((pts - x[partition.owner]) ** 2).sum(axis=1)
    diff = np.asarray(rho_d) - np.exp(-0.5 * lam * d2)
    return 0.5 * float(diff @ diff) * grid.cell_area


def voronoi_barrier(positions, lam, region, epsilon, partition: Partition, grid: GridSpec) -> float:
    x = np.atleast_2d(np.asarray(positions, dtype=float))
    mask = region.mask(grid)
    pts = grid.points()[mask]
    d2 = ((pts - x[partition.owner[mask]]) ** 2).sum(axis=1)
    rho_a = np.exp(-0.5 * lam * d2)
    return epsilon - float(rho_a @ rho_a) * grid.cell_area


class BoundValue(NamedTuple):
    bound: float
    actual: float


def _cell_sup_and_mass(rho_i: np.ndarray, owner: np.ndarray, area: float):
    n = len(rho_i)
    outside = owner[None, :] != np.arange(n)[:, None]
    sup_out = np.where(outside, rho_i, 0.0).max(axis=1)
    mass_out = np.where(outside, rho_i, 0.0).sum(axis=1) * area
    return sup_out, mass_out, ~outside


def vc_minus_v_bound(positions, lam, rho_d, partition: Partition, grid: GridSpec) -> BoundValue:
    """Upper bound ``sum_i sum_{k!=i} s_k E_i`` on ``V_c - V`` and the actual gap."""
    area = grid.cell_area
    rho_i = robot_densities(positions, lam, grid)
    rho_d = np.asarray(rho_d, dtype=float)
    own = partition.owner
    rho = rho_i.sum(axis=0)
    rho_own = rho_i[own, np.arange(grid.n_points)]
    actual = 0.5 * area * float(np.sum((rho_d - rho_own) ** 2) - np.sum((rho_d - rho) ** 2))

    sup_out, _, inside = _cell_sup_and_mass(rho_i, own, area)
    err = np.where(inside, np.abs(rho_d[None, :] - rho_i), 0.0).sum(axis=1) * area
    others = sup_out.sum() - sup_out
    return BoundValue(float(others @ err), actual)


def hc_minus_h_bound(positions, lam, region: SafetyRegion, partition: Partition, grid: GridSpec) -> BoundValue:
    """Upper bound on ``h_c - h`` in terms of cross-cell kernel sups and masses."""
    area = grid.cell_area
    rho_i = robot_densities(positions, lam, grid)
    own = partition.owner
    mask = region.mask(grid)
    rho = rho_i.sum(axis=0)
    rho_own = rho_i[own, np.arange(grid.n_points)]
    actual = area * float(np.sum(rho[mask] ** 2) - np.sum(rho_own[mask] ** 2))

    sup_out, mass_out, inside = _cell_sup_and_mass(rho_i, own, area)
    own_in_a = np.where(inside & mask[None, :], rho_i, 0.0).sum(axis=1) * area
    s_others = sup_out.sum() - sup_out
    m_others = mass_out.sum() - mass_out
    return BoundValue(float(np.sum(s_others * m_others + 2.0 * s_others * own_in_a)), actual)


@dataclass
class BackstepCheck:
    lhs: float
    rhs: float
    holds: bool
    kappa: float
    directions: np.ndarray
    moments: tuple[float, float, float]
    betas: tuple[float, float, float]


def worst_case_directions(positions, lam, region: SafetyRegion, grid: GridSpec) -> np.ndarray:
    """Unit directions along which each robot lowers the barrier fastest."""
    x = np.atleast_2d(np.asarray(positions, dtype=float))
    pa = grid.points()[region.mask(grid)]
    e = pa[None, :, :] - x[:, None, :]
    rho_i = np.exp(-0.5 * lam * (e**2).sum(axis=2))
    rho = rho_i.sum(axis=0)
    pull = ((rho * rho_i)[:, :, None] * e).sum(axis=1)
    norms = np.linalg.norm(pull, axis=1)
    toward = np.asarray(region.center) - x
    tn = np.linalg.norm(toward, axis=1)
    fallback = np.where(tn[:, None] > 0, toward / np.where(tn > 0, tn, 1.0)[:, None], np.array([1.0, 0.0]))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(norms[:, None] > 0, pull / norms[:, None], fallback)


def backstep_bound_check(
    positions, lam: float, region: SafetyRegion, model: DiffusionModel, gains: GainSet, dt: float, grid: GridSpec
) -> BackstepCheck:
    """Worst-case one-step safety condition for robot-velocity control.

    Every robot is assumed to have moved ``kappa = (1 + c) dt u_max`` along its
    worst-case direction, and the condition checks that the reversed command
    restores ``alpha_h h + hdot >= 0``. Weighted kernel moments over the
    region are taken at the current positions.
    """
    x = np.atleast_2d(np.asarray(positions, dtype=float))
    area = grid.cell_area
    T, u_max = model.T, model.u_max
    n_hat = worst_case_directions(x, lam, region, grid)
    kappa = (1.0 + model.c) * dt * u_max

    pa = grid.points()[region.mask(grid)]
    e = pa[None, :, :] - x[:, None, :]
    e2 = (e**2).sum(axis=2)
    proj = (e * n_hat[:, None, :]).sum(axis=2)
    rho_i = np.exp(-0.5 * lam * e2)
    rho = rho_i.sum(axis=0)
    # kernel shift factor when the centre moves by kappa * n_hat
    beta = np.exp(lam * kappa * proj - 0.5 * lam * kappa**2)
    rho_i_next = rho_i * beta
    rho_next = rho_i_next.sum(axis=0)

    w = rho * rho_i
    w_next = rho_next * rho_i_next
    m0, m1, m2 = (area * float(np.sum(w * f)) for f in (1.0, proj, e2))
    q0, q1, q2 = (area * float(np.sum(w_next * f)) for f in (1.0, proj, e2))

    ah = gains.alpha_h / (2.0 * lam)
    lhs = u_max * (q1 + m1)
    rhs = (
        T * lam * (q2 - m2)
        - 2.0 * T * lam * kappa * q1
        + q0 * (T * lam * kappa**2 + u_max * kappa - 2.0 * T + ah)
        + m0 * (2.0 * T - ah)
    )

    def ratio(q, m):
        return q / m if m != 0 else 1.0

    return BackstepCheck(
        lhs=lhs,
        rhs=rhs,
        holds=bool(lhs >= rhs),
        kappa=kappa,
        directions=n_hat,
        moments=(m0, m1, m2),
        betas=(ratio(q0, m0), ratio(q1, m1), ratio(q2, m2)),
    )


def noise_free_first_order(check: BackstepCheck, gains: GainSet, dt: float, u_max: float) -> tuple[float, float]:
    """First-order form of the zero-noise condition, both sides divided by ``u_max``.

    ``(b1 + 1) M1 >= alpha_h dt M1 + b0 dt u_max M0``
    """
    m0, m1, _ = check.moments
    b0, b1, _ = check.betas
    return (b1 + 1.0) * m1, gains.alpha_h * dt * m1 + b0 * dt * u_max * m0


def small_step_condition(check: BackstepCheck) -> tuple[float, float]:
    """Limit of the condition as every shift factor tends to one: ``2 M1 >= kappa M0``."""
    m0, m1, _ = check.moments
    return 2.0 * m1, check.kappa * m0


def calibrate_epsilon(region: SafetyRegion, lam: float, grid: GridSpec, d_safe: float, direction=(1.0, 0.0)) -> float:
    """Squared belief mass inside the region of one robot standing ``d_safe`` outside its edge."""
    u = np.asarray(direction, dtype=float)
    u = u / np.linalg.norm(u)
    pos = np.asarray(region.center) + (region.radius + d_safe) * u
    rho = gaussian_density(pos[None, :], lam, grid)
    inside = rho[region.mask(grid)]
    return float(inside @ inside) * grid.cell_area
