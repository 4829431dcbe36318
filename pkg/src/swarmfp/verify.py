"""Runnable invariant suites behind ``swarmfp verify``.

Each suite returns a list of :class:`Check` records holding the measured
value next to its threshold, so a failing property reports by how much.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .density import (
    DiffusionModel,
    CancellationConsistencyError,
    CancellationConsistencyWarning,
    build_advection,
    cancellation_control,
    gaussian_density,
    target_density,
)
from .functionals import (
    GainSet,
    SafetyRegion,
    backstep_bound_check,
    barrier_h,
    calibrate_epsilon,
    hc_minus_h_bound,
    vc_minus_v_bound,
)
from .grid import Boundary, GridSpec, operators
from .qp import InfeasibleError, QpProblem, feasibility_certificate, solve
from .sim import SimConfig, ring_positions, run_sim
from .voronoi import partition_grid

BOUND_SLACK = 1e-9
# robots this many kernel standard deviations apart count as disjoint supports
DISJOINT_SIGMAS = 12.0


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    threshold: float
    info: bool = False  # reported but never counted as a failure

    def line(self) -> str:
        tag = "INFO" if self.info else ("PASS" if self.passed else "FAIL")
        return f"{tag}  {self.name}: {self.value:.3e} (threshold {self.threshold:.3e})"


def _grid(n: int, boundary=Boundary.PERIODIC) -> GridSpec:
    return GridSpec(n, n, 4.0 / (n - 1), (-2.0, -2.0), boundary)


def random_positive_density(grid: GridSpec, rng: np.random.Generator) -> np.ndarray:
    """A floor plus one to three broad bumps; strictly positive everywhere."""
    pts = grid.points()
    x0, x1, y0, y1 = grid.bounds
    rho = np.full(grid.n_points, 10 ** rng.uniform(-3, -1))
    for _ in range(rng.integers(1, 4)):
        c = rng.uniform((x0, y0), (x1, y1))
        lam = rng.uniform(0.5, 8.0)
        rho += rng.uniform(0.5, 2.0) * np.exp(-0.5 * lam * ((pts - c) ** 2).sum(axis=1))
    return rho


def operators_suite(sizes=(5, 9, 21, 41)) -> list[Check]:
    out = []
    eps = np.finfo(float).eps
    for n in sizes:
        for bc in Boundary:
            ops = operators(_grid(n, bc))
            tag = f"{n}x{n} {bc.value}"
            for name, d in (("Dx", ops.dx), ("Dy", ops.dy)):
                skew = abs(d + d.T).max()
                out.append(Check(f"{tag} skew {name}", skew == 0.0, float(skew), 0.0))
            b = ops.lap
            tol = 16 * eps * abs(b).max()
            ones = np.ones(ops.grid.n_points)
            col = float(np.abs(ones @ b).max())
            row = float(np.abs(b @ ones).max())
            out.append(Check(f"{tag} 1^T B", col <= tol, col, tol))
            out.append(Check(f"{tag} B 1", row <= tol, row, tol))
            if bc is Boundary.PERIODIC:
                rng = np.random.default_rng(n)
                f = rng.standard_normal(ops.grid.n_points)
                comm = float(np.abs(ops.dx @ (ops.dy @ f) - ops.dy @ (ops.dx @ f)).max())
                ctol = 16 * eps * abs(ops.dx).max() ** 2 * np.abs(f).max()
                out.append(Check(f"{tag} DxDy - DyDx", comm <= ctol, comm, ctol))
    return out


def _left_null_dim(a, tol_rel: float = 1e-10) -> tuple[int, np.ndarray]:
    u, s, _ = np.linalg.svd(a.toarray(), full_matrices=True)
    rank = int(np.sum(s > tol_rel * s[0]))
    return u.shape[0] - rank, u[:, rank:]


def cancellation_suite(sizes=(9, 15, 21, 31, 41), n_densities: int = 50, T: float = 0.01, seed: int = 0,
                 rtol: float = 1e-8) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []
    per = [n_densities // len(sizes) + (i < n_densities % len(sizes)) for i in range(len(sizes))]
    worst = 0.0
    for n, k in zip(sizes, per):
        ops = operators(_grid(n))
        for _ in range(k):
            res = cancellation_control(random_positive_density(ops.grid, rng), T, ops)
            worst = max(worst, res.relative_residual)
    out.append(Check(f"cancellation residual, {n_densities} densities", worst <= rtol, worst, rtol))

    for n in (s for s in range(9, 16, 2)):
        g = _grid(n)
        ops = operators(g)
        a = build_advection(random_positive_density(g, rng), ops.dx, ops.dy)
        dim, basis = _left_null_dim(a)
        v = basis[:, 0] if dim else np.zeros(g.n_points)
        spread = float(np.ptp(v / v[np.argmax(np.abs(v))])) if dim else 1.0
        out.append(Check(f"{n}x{n} ker A^T dimension", dim == 1, dim, 1))
        out.append(Check(f"{n}x{n} ker A^T is constant", dim == 1 and spread < 1e-8, spread, 1e-8))

    g = _grid(9, Boundary.NEUMANN)
    ops = operators(g)
    a = build_advection(random_positive_density(g, rng), ops.dx, ops.dy)
    dim, _ = _left_null_dim(a)
    out.append(Check("9x9 neumann ker A^T dimension", True, dim, 1, info=True))

    g = _grid(10)
    ops = operators(g)
    rho = random_positive_density(g, rng)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        build_advection(rho, ops.dx, ops.dy, g)
    warned = any(issubclass(w.category, CancellationConsistencyWarning) for w in caught)
    out.append(Check("10x10 advection warns", warned, float(warned), 1.0))
    try:
        cancellation_control(rho, T, ops)
        rejected = False
    except CancellationConsistencyError:
        rejected = True
    out.append(Check("10x10 cancellation rejected", rejected, float(rejected), 1.0))
    return out


def _pairwise_min(x: np.ndarray) -> float:
    d = np.linalg.norm(x[:, None] - x[None, :], axis=2)
    return float(d[np.triu_indices(len(x), 1)].min())


def bounds_suite(n_configs: int = 1000, n_disjoint: int = 20, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    grid = _grid(41)
    region = SafetyRegion((-0.5, 0.5), 0.6)
    v_bad = h_bad = 0
    v_gap = h_gap = -np.inf
    for _ in range(n_configs):
        n = int(rng.integers(2, 11))
        lam = float(rng.choice([4.0, 16.0, 64.0]))
        x = rng.uniform(-1.8, 1.8, size=(n, 2))
        if rng.random() < 0.3:  # clustered swarms make the bounds work hardest
            x = np.clip(x[0] + 0.3 * rng.standard_normal((n, 2)), -1.9, 1.9)
        rho_d = target_density(grid, (0.5, -0.5), 1.5, peak=float(n))
        part = partition_grid(x, grid)
        bv = vc_minus_v_bound(x, lam, rho_d, part, grid)
        bh = hc_minus_h_bound(x, lam, region, part, grid)
        v_gap = max(v_gap, bv.actual - bv.bound)
        h_gap = max(h_gap, bh.actual - bh.bound)
        v_bad += bv.actual > bv.bound + BOUND_SLACK
        h_bad += bh.actual > bh.bound + BOUND_SLACK
    out = [
        Check(f"V_c - V bound violations / {n_configs}", v_bad == 0, v_bad, 0),
        Check("max (V_c - V) - bound", v_gap <= BOUND_SLACK, v_gap, BOUND_SLACK),
        Check(f"h_c - h bound violations / {n_configs}", h_bad == 0, h_bad, 0),
        Check("max (h_c - h) - bound", h_gap <= BOUND_SLACK, h_gap, BOUND_SLACK),
    ]
    lam = 400.0
    sep = DISJOINT_SIGMAS / np.sqrt(lam)
    worst = 0.0
    for _ in range(n_disjoint):
        n = int(rng.integers(2, 6))
        while True:
            x = rng.uniform(-1.5, 1.5, size=(n, 2))
            if _pairwise_min(x) >= sep:
                break
        rho_d = target_density(grid, (0.5, -0.5), 1.5, peak=float(n))
        worst = max(worst, abs(vc_minus_v_bound(x, lam, rho_d, partition_grid(x, grid), grid).actual))
    out.append(Check(f"disjoint supports |V_c - V|, {n_disjoint} swarms", worst <= 1e-9, worst, 1e-9))
    return out


def adversarial_backstep(grid: GridSpec | None = None):
    """Robots 0.1 m off the region edge, 1 s step, c = 3: the monitor must flag this."""
    grid = grid or _grid(41)
    region = SafetyRegion((-0.5, 0.5), 0.6)
    lam = 16.0
    gains = GainSet(1.0, 100.0, 1e3, calibrate_epsilon(region, lam, grid, 0.1))
    x = ring_positions(6, region.radius + 0.1, center=region.center)
    return backstep_bound_check(x, lam, region, DiffusionModel(3.0, 0.25), gains, 1.0, grid)


def backstep_suite(n_states: int = 50, seed: int = 0, nominal: SimConfig | None = None) -> list[Check]:
    rng = np.random.default_rng(seed)
    grid = _grid(41)
    region = SafetyRegion((-0.5, 0.5), 0.6)
    lam = 16.0
    gains = GainSet(1.0, 100.0, 1e3, calibrate_epsilon(region, lam, grid, 0.1))
    fails = 0
    for _ in range(n_states):
        while True:
            x = rng.uniform(-1.8, 1.8, size=(int(rng.integers(1, 8)), 2))
            if barrier_h(gaussian_density(x, lam, grid), region, gains.epsilon, grid) >= 0:
                break
        fails += not backstep_bound_check(x, lam, region, DiffusionModel(0.0, 0.25), gains, 1e-4, grid).holds
    out = [Check(f"dt = 1e-4, c = 0: failures over {n_states} safe states", fails == 0, fails, 0)]

    cfg = nominal or SimConfig(grid, backstep=True)
    cfg = replace(cfg, backstep=True)
    tr = run_sim(cfg)
    frac = float(np.mean(tr.backstep_holds))
    out.append(Check(f"nominal {cfg.n_robots}-robot {cfg.controller} run: fraction of steps holding", frac == 1.0,
                     frac, 1.0))
    adv = adversarial_backstep(grid)
    out.append(Check("adversarial construction flagged (lhs - rhs < 0)", not adv.holds, adv.lhs - adv.rhs, 0.0))
    return out


def random_rv_problem(rng: np.random.Generator, max_robots: int = 6) -> QpProblem:
    n = 2 * int(rng.integers(1, max_robots + 1))

    def mag():
        return 10 ** rng.uniform(-3, 1)

    return QpProblem(
        g_v=rng.standard_normal(n) * mag(),
        k_v=float(rng.standard_normal() * mag()),
        g_h=rng.standard_normal(n) * mag(),
        k_h=float(rng.standard_normal() * mag()),
        gamma=10 ** rng.uniform(0, 3),
        lo=-1.0,
        hi=1.0,
        weight=10 ** rng.uniform(-2, 1),
    )


def barrier_reference(p: QpProblem, gap: float = 1e-10) -> tuple[np.ndarray, float]:
    """Dense log-barrier Newton method on ``(u, s)``; a solver independent of :func:`qp.solve`."""
    n = p.dim
    m = 2 * n + 3
    hess = np.zeros((n + 1, n + 1))
    hess[:n, :n] = 2.0 * p.weight * np.eye(n)
    c = np.zeros(n + 1)
    c[n] = p.gamma
    # every constraint as G z <= h
    G = np.zeros((m, n + 1))
    h = np.zeros(m)
    G[0, :n], G[0, n], h[0] = p.g_v, -1.0, -p.k_v
    G[1, :n], h[1] = -p.g_h, p.k_h
    G[2, n] = -1.0
    G[3 : 3 + n, :n], h[3 : 3 + n] = np.eye(n), p.hi
    G[3 + n :, :n], h[3 + n :] = -np.eye(n), -p.lo

    corner, margin = feasibility_certificate(p)
    if margin <= 0:
        raise InfeasibleError(margin)
    mid = 0.5 * (p.lo + p.hi)
    m0 = float(p.g_h @ mid + p.k_h)
    # strictly feasible start on the segment from the box centre to the best corner
    theta = 0.0 if m0 > 0 else 0.5 * (-m0 / (margin - m0) + 1.0)
    u = mid + theta * (corner - mid)
    z = np.r_[u, max(0.0, float(p.g_v @ u + p.k_v)) + 1.0]

    def f(z):
        return 0.5 * z @ hess @ z + c @ z

    def phi(z, t):
        sl = h - G @ z
        return t * f(z) - np.sum(np.log(sl)) if np.all(sl > 0) else np.inf

    t = 1.0 / max(1.0, abs(f(z)))
    while True:
        for _ in range(100):
            sl = h - G @ z
            g = t * (hess @ z + c) + G.T @ (1.0 / sl)
            K = t * hess + G.T @ ((1.0 / sl**2)[:, None] * G)
            dz = -np.linalg.solve(K, g)
            dec = -g @ dz
            if dec / 2 < 1e-14:
                break
            a = 1.0
            Gd = G @ dz
            while np.any(a * Gd >= sl) and a > 1e-16:
                a *= 0.5
            p0 = phi(z, t)
            while not phi(z + a * dz, t) <= p0 - 0.25 * a * dec and a > 1e-16:
                a *= 0.5
            if a <= 1e-16:
                break
            z = z + a * dz
        if m / t < gap:
            return z[:n], float(z[n])
        t *= 20.0


def qp_oracle_suite(n_problems: int = 200, seed: int = 0, tol: float = 1e-6) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst_obj = worst_warm = 0.0
    count = skipped = 0
    while count < n_problems:
        p = random_rv_problem(rng)
        try:
            sol = solve(p)
        except InfeasibleError:
            skipped += 1
            continue
        count += 1
        u_ref, s_ref = barrier_reference(p)
        worst_obj = max(worst_obj, abs(sol.objective - p.objective(u_ref, s_ref)))
        warm = solve(p, warm_start=(rng.uniform(0, p.gamma), 10 ** rng.uniform(-3, 3)))
        worst_warm = max(worst_warm, float(np.max(np.abs(warm.u - sol.u))))
    return [
        Check(f"objective vs barrier reference, {n_problems} problems", worst_obj <= tol, worst_obj, tol),
        Check("argmin change under warm start", worst_warm <= tol, worst_warm, tol),
        Check("infeasible draws skipped", True, skipped, 0, info=True),
    ]


SUITES = {
    "Operators": operators_suite,
    "Cancellation": cancellation_suite,
    "Bounds": bounds_suite,
    "Backstep": backstep_suite,
    "QpOracle": qp_oracle_suite,
}
