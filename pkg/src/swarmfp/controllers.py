"""One-step controllers (grid field, per-robot, per-cell) and the open-loop optimal-control baseline."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .density import (
    DENSITY_FLOOR,
    DiffusionModel,
    DomainError,
    cancellation_control,
    control_bounds,
    gaussian_density,
)
from .functionals import (
    GainSet,
    SafetyRegion,
    barrier_h,
    cbf_form_sv,
    clf_form_sv,
    hc_minus_h_bound,
    rv_forms,
    vc_minus_v_bound,
)
from .grid import Boundary, GridSpec, Operators
from .qp import InfeasibleError, QpProblem, Status, feasibility_certificate, solve
from .voronoi import partition_grid


class UnsafeStateError(ValueError):
    """The controller was handed a state with a negative barrier value."""


@dataclass
class ControlCommand:
    per_robot: np.ndarray
    clf_value: float
    cbf_value: float
    slack: float
    solver_status: str
    step_time: float = 0.0
    clamped: bool = False
    extra: dict = field(default_factory=dict)


def _check_safe(h: float, allow_unsafe: bool) -> None:
    if h < 0 and not allow_unsafe:
        raise UnsafeStateError(f"barrier value {h:.3e} < 0 at controller input")


def _solve_guarded(problem: QpProblem, warm, fallback=None):
    """Solve and map failures onto a flagged command.

    Infeasible barrier: the box corner maximizing the barrier form.
    Iteration cap: ``fallback`` when given (the cancellation field for the grid controller).
    """
    try:
        sol = solve(problem, warm_start=warm)
    except InfeasibleError:
        u, _ = feasibility_certificate(problem)
        return u, 0.0, "infeasible", None
    if sol.status is not Status.OPTIMAL and fallback is not None:
        return fallback, 0.0, "fallback", sol.duals
    return sol.u, sol.s, sol.status.value, sol.duals


def interpolate_command(u_field: np.ndarray, pos, grid: GridSpec) -> np.ndarray:
    """Bilinear interpolation of both field components at ``pos`` (one point or ``(N, 2)``)."""
    p = np.atleast_2d(np.asarray(pos, dtype=float))
    if not grid.contains(p).all():
        raise DomainError(f"interpolation point outside the domain {grid.bounds}")
    n = grid.n_points
    gx, gy = (p[:, 0] - grid.origin[0]) / grid.spacing, (p[:, 1] - grid.origin[1]) / grid.spacing
    ix = np.clip(np.floor(gx).astype(int), 0, grid.nx - 2)
    iy = np.clip(np.floor(gy).astype(int), 0, grid.ny - 2)
    fx, fy = gx - ix, gy - iy
    i00 = iy * grid.nx + ix
    corners = (i00, i00 + 1, i00 + grid.nx, i00 + grid.nx + 1)
    weights = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    out = np.zeros((len(p), 2))
    for idx, w in zip(corners, weights):
        out[:, 0] += w * u_field[idx]
        out[:, 1] += w * u_field[n + idx]
    return out


def _clamp_commands(cmd: np.ndarray, u_max: float) -> tuple[np.ndarray, bool]:
    clipped = np.clip(cmd, -u_max, u_max)
    return clipped, bool(np.any(clipped != cmd))


@dataclass
class SvResult:
    u_field: np.ndarray
    clf_value: float
    cbf_value: float
    slack: float
    solver_status: str
    cancellation_residual: float
    bounds: tuple[float, float]
    duals: tuple[float, float] | None


def sv_obc_step(
    rho,
    rho_d,
    region: SafetyRegion,
    gains: GainSet,
    model: DiffusionModel,
    ops: Operators,
    pad: float = 0.1,
    warm=None,
    allow_unsafe: bool = False,
) -> SvResult:
    """Grid control field from the CLF-CBF program over every grid point.

    The box comes from the diffusion-cancelling field, which always satisfies
    the barrier form with margin ``alpha_h h``, so the program is feasible
    whenever the input is safe.
    """
    grid = ops.grid
    rho = np.maximum(np.asarray(rho, dtype=float), DENSITY_FLOOR)
    h = barrier_h(rho, region, gains.epsilon, grid)
    _check_safe(h, allow_unsafe)
    T = model.T
    canc = cancellation_control(rho, T, ops)
    lo, hi = control_bounds(canc.u, pad=pad, u_max=model.u_max)
    clf = clf_form_sv(rho, rho_d, ops, T, gains)
    cbf = cbf_form_sv(rho, region, ops, T, gains)
    problem = QpProblem.from_forms(clf, cbf, gains.gamma, lo, hi, weight=grid.cell_area)
    u, s, status, duals = _solve_guarded(problem, warm, fallback=canc.u)
    return SvResult(u, clf.value(u), cbf.value(u), s, status, canc.relative_residual, (lo, hi), duals)


def rv_obc_step(
    meas_pos,
    lam: float,
    rho_d,
    region: SafetyRegion,
    gains: GainSet,
    model: DiffusionModel,
    grid: GridSpec,
    warm=None,
    allow_unsafe: bool = False,
    voronoi: bool = False,
    with_bounds: bool = False,
) -> ControlCommand:
    """Per-robot velocities from the CLF-CBF program (box ``+-u_max`` per component).

    With ``voronoi`` the functionals are restricted to the nearest-robot cells
    of the measured positions.
    """
    x = np.atleast_2d(np.asarray(meas_pos, dtype=float))
    if not grid.contains(x).all():
        raise DomainError("measured positions outside the domain")
    part = partition_grid(x, grid) if voronoi else None
    forms = rv_forms(x, lam, rho_d, region, grid, model.T, gains, part)
    _check_safe(forms.h, allow_unsafe)
    problem = QpProblem.from_forms(forms.clf, forms.cbf, gains.gamma, -model.u_max, model.u_max)
    u, s, status, duals = _solve_guarded(problem, warm)
    extra = {"duals": duals, "V_model": forms.V, "h_model": forms.h}
    if voronoi and with_bounds:
        extra["vc_bound"] = vc_minus_v_bound(x, lam, rho_d, part, grid)
        extra["hc_bound"] = hc_minus_h_bound(x, lam, region, part, grid)
    return ControlCommand(
        u.reshape(-1, 2), forms.clf.value(u), forms.cbf.value(u), s, status, extra=extra
    )


def rv_obc_v_step(meas_pos, lam, rho_d, region, gains, model, grid, warm=None, allow_unsafe=False, with_bounds=False):
    return rv_obc_step(
        meas_pos, lam, rho_d, region, gains, model, grid, warm, allow_unsafe, voronoi=True, with_bounds=with_bounds
    )


# ---------------------------------------------------------------------------
# optimal-control baseline


class OcDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class OcParams:
    alpha: float = 200.0
    penalty_step: float = 200.0
    relaxation: float = 0.5
    max_sweeps: int = 40
    tol: float = 1e-4
    blowup: float = 1e6


@dataclass
class OcSolution:
    grid: GridSpec
    dt: float
    u_field_t: np.ndarray  # (K + 1, 2 * n_points)
    w_t: np.ndarray  # (K + 1, n_points)
    nu_t: np.ndarray  # (K + 1,)
    eta: float
    converged: bool
    sweep_count: int
    change_history: list = field(default_factory=list)

    @property
    def t_f(self) -> float:
        return self.dt * (len(self.u_field_t) - 1)


def _shift(img: np.ndarray, step: int, axis: int, boundary: Boundary) -> np.ndarray:
    """Neighbour values ``img[i + step]`` along ``axis`` with the grid's closure."""
    if boundary is Boundary.PERIODIC:
        return np.roll(img, -step, axis=axis)
    out = np.roll(img, -step, axis=axis)
    edge = [slice(None)] * 2
    edge[axis] = -1 if step > 0 else 0
    out[tuple(edge)] = img[tuple(edge)]
    return out


def _upwind_divergence(rho_img, ux_img, uy_img, grid: GridSpec) -> np.ndarray:
    """Donor-cell ``div(u rho)``; zero flux through Neumann walls."""
    b = grid.boundary
    div = np.zeros_like(rho_img)
    for axis, u in ((1, ux_img), (0, uy_img)):
        u_face = 0.5 * (u + _shift(u, 1, axis, b))
        rho_next = _shift(rho_img, 1, axis, b)
        flux = np.maximum(u_face, 0.0) * rho_img + np.minimum(u_face, 0.0) * rho_next
        if b is Boundary.NEUMANN:
            edge = [slice(None)] * 2
            edge[axis] = -1
            flux[tuple(edge)] = 0.0
        div += (flux - _shift(flux, -1, axis, b) * _mask_first(flux.shape, axis, b)) / grid.spacing
    return div


def _mask_first(shape, axis, boundary):
    # the flux entering the first cell is zero under Neumann
    if boundary is Boundary.PERIODIC:
        return 1.0
    m = np.ones(shape)
    edge = [slice(None)] * 2
    edge[axis] = 0
    m[tuple(edge)] = 0.0
    return m


def _godunov_grad_sq(w_img, grid: GridSpec) -> np.ndarray:
    b = grid.boundary
    out = np.zeros_like(w_img)
    for axis in (0, 1):
        back = (w_img - _shift(w_img, -1, axis, b)) / grid.spacing
        fwd = (_shift(w_img, 1, axis, b) - w_img) / grid.spacing
        out += np.maximum(np.maximum(back, 0.0) ** 2, np.minimum(fwd, 0.0) ** 2)
    return out


def _fp_forward(rho0, u_t, T, ops: Operators, dt) -> np.ndarray:
    grid = ops.grid
    n = grid.n_points
    k = len(u_t)
    rho_t = np.empty((k, n))
    rho_t[0] = rho0
    for i in range(k - 1):
        r = grid.to_image(rho_t[i])
        div = _upwind_divergence(r, grid.to_image(u_t[i, :n]), grid.to_image(u_t[i, n:]), grid).ravel()
        rho_t[i + 1] = np.maximum(rho_t[i] + dt * (-div + T * (ops.lap @ rho_t[i])), 0.0)
    return rho_t


def oc_solve(
    rho_0,
    rho_d,
    region: SafetyRegion,
    epsilon: float,
    model: DiffusionModel,
    ops: Operators,
    t_f: float,
    dt: float,
    params: OcParams = OcParams(),
) -> OcSolution:
    """Forward-backward sweep on the constrained optimality system.

    Each sweep integrates the density forward under the current field, raises
    the constraint multipliers where the region holds too much squared mass,
    integrates the adjoint backward from its terminal condition and relaxes
    the field towards ``-grad(w) / alpha``.
    """
    grid = ops.grid
    n = grid.n_points
    k = int(round(t_f / dt)) + 1
    mask = region.mask(grid).astype(float)
    area = grid.cell_area
    T = model.T
    rho_d = np.asarray(rho_d, dtype=float)

    u_t = np.zeros((k, 2 * n))
    w_t = np.zeros((k, n))
    nu_t = np.zeros(k)
    eta = 0.0
    converged = False
    history = []
    sweep = 0
    for sweep in range(1, params.max_sweeps + 1):
        rho_t = _fp_forward(rho_0, u_t, T, ops, dt)
        psi = (rho_t**2 @ mask) * area - epsilon
        nu_t = np.maximum(0.0, nu_t + params.penalty_step * psi)
        eta = max(0.0, eta + params.penalty_step * psi[-1])

        w_t[-1] = 2.0 * eta * rho_t[-1] * mask - (rho_d - rho_t[-1])
        for i in range(k - 1, 0, -1):
            w = w_t[i]
            src = 2.0 * nu_t[i] * rho_t[i] * mask - (rho_d - rho_t[i])
            ham = _godunov_grad_sq(grid.to_image(w), grid).ravel() / (2.0 * params.alpha)
            w_t[i - 1] = w + dt * (src - ham + T * (ops.lap @ w))
        u_new = -np.hstack([(ops.dx @ w_t.T).T, (ops.dy @ w_t.T).T]) / params.alpha
        u_new = np.clip(u_new, -model.u_max, model.u_max)

        if not np.all(np.isfinite(w_t)) or np.abs(w_t).max() > params.blowup:
            raise OcDivergenceError(
                f"adjoint sweep {sweep} diverged (max |w| = {np.nanmax(np.abs(w_t)):.3e}); "
                "reduce dt or raise alpha"
            )
        change = np.linalg.norm(u_new - u_t) / max(np.linalg.norm(u_t), 1e-12)
        history.append(float(change))
        u_t = (1.0 - params.relaxation) * u_t + params.relaxation * u_new
        if change <= params.tol or np.linalg.norm(u_new) == 0.0:
            converged = True
            break
    return OcSolution(grid, dt, u_t, w_t, nu_t, eta, converged, sweep, history)


def oc_lookup(solution: OcSolution, pos, t: float) -> tuple[np.ndarray, bool]:
    """Field value at ``pos`` from the nearest stored time index; ``t`` clamped into range."""
    k = len(solution.u_field_t) - 1
    clamped = not (0.0 <= t <= solution.t_f)
    idx = int(np.clip(np.rint(t / solution.dt), 0, k))
    return interpolate_command(solution.u_field_t[idx], pos, solution.grid), clamped


# ---------------------------------------------------------------------------
# stateful wrappers driven by the simulator


class Controller:
    name = "base"
    uses_partition = False

    def __init__(self, grid, lam, rho_d, region, gains, model, dt):
        self.grid, self.lam, self.rho_d = grid, lam, rho_d
        self.region, self.gains, self.model, self.dt = region, gains, model, dt
        self._warm = None

    def reset(self, meas_pos) -> None:
        self._warm = None

    def step(self, meas_pos, t: float) -> ControlCommand:
        raise NotImplementedError


class RvObcController(Controller):
    name = "RvObc"

    def step(self, meas_pos, t):
        t0 = time.perf_counter()
        cmd = rv_obc_step(
            meas_pos, self.lam, self.rho_d, self.region, self.gains, self.model, self.grid,
            warm=self._warm, allow_unsafe=True, voronoi=self.uses_partition,
        )
        self._warm = cmd.extra.get("duals")
        cmd.per_robot, cmd.clamped = _clamp_commands(cmd.per_robot, self.model.u_max)
        cmd.step_time = time.perf_counter() - t0
        return cmd


class RvObcVController(RvObcController):
    name = "RvObcV"
    uses_partition = True


class SvObcController(Controller):
    name = "SvObc"

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        from .grid import operators

        self.ops = operators(self.grid)

    def step(self, meas_pos, t):
        t0 = time.perf_counter()
        rho = gaussian_density(meas_pos, self.lam, self.grid)
        res = sv_obc_step(rho, self.rho_d, self.region, self.gains, self.model, self.ops,
                          warm=self._warm, allow_unsafe=True)
        self._warm = res.duals
        cmd, clamped = _clamp_commands(interpolate_command(res.u_field, meas_pos, self.grid), self.model.u_max)
        return ControlCommand(
            cmd, res.clf_value, res.cbf_value, res.slack, res.solver_status,
            time.perf_counter() - t0, clamped, {"cancellation_residual": res.cancellation_residual},
        )


class OcController(Controller):
    """Solves the optimality system once from the first measured density, then reads the table."""

    name = "OC"

    def __init__(self, *args, t_f: float = 4.0, params: OcParams = OcParams(), **kw):
        super().__init__(*args, **kw)
        from .grid import operators

        self.ops = operators(self.grid)
        self.t_f, self.params = t_f, params
        self.solution: OcSolution | None = None

    def reset(self, meas_pos):
        rho0 = gaussian_density(meas_pos, self.lam, self.grid)
        self.solution = oc_solve(
            rho0, self.rho_d, self.region, self.gains.epsilon, self.model, self.ops, self.t_f, self.dt, self.params
        )

    def step(self, meas_pos, t):
        t0 = time.perf_counter()
        cmd, t_clamped = oc_lookup(self.solution, meas_pos, t)
        cmd, clamped = _clamp_commands(cmd, self.model.u_max)
        status = "open_loop" if self.solution.converged else "open_loop_unconverged"
        return ControlCommand(cmd, float("nan"), float("nan"), 0.0, status, time.perf_counter() - t0,
                              clamped or t_clamped)


CONTROLLERS = {c.name: c for c in (OcController, SvObcController, RvObcController, RvObcVController)}
