"""Single-CLF, single-CBF quadratic program with a box on the control.

    minimize    w ||u||^2 + gamma s
    subject to  g_v @ u + k_v <= s,   s >= 0
                g_h @ u + k_h >= 0
                lo <= u <= hi

With only two coupling constraints the Lagrange dual lives on the rectangle
``mu in [0, gamma], nu >= 0`` and the inner minimization over the box is a
componentwise clip. The dual is concave and piecewise quadratic; it is
maximized exactly over ``mu`` for each ``nu`` and by bracketed root finding
over ``nu``, at a cost linear in the control dimension per evaluation.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .functionals import ConstraintForm


class InfeasibleError(RuntimeError):
    """No control in the box satisfies the barrier constraint."""

    def __init__(self, margin: float):
        super().__init__(f"barrier constraint unattainable within the control box (best margin {margin:.3e})")
        self.margin = margin


class Status(str, enum.Enum):
    OPTIMAL = "optimal"
    MAX_ITER = "max_iter"


@dataclass
class QpProblem:
    g_v: np.ndarray
    k_v: float
    g_h: np.ndarray
    k_h: float
    gamma: float
    lo: np.ndarray | float
    hi: np.ndarray | float
    weight: float = 1.0

    def __post_init__(self):
        self.g_v = np.asarray(self.g_v, dtype=float).ravel()
        self.g_h = np.asarray(self.g_h, dtype=float).ravel()
        if self.g_v.shape != self.g_h.shape:
            raise ValueError("CLF and CBF gradients must have the same length")
        self.lo = np.broadcast_to(np.asarray(self.lo, dtype=float), self.g_v.shape)
        self.hi = np.broadcast_to(np.asarray(self.hi, dtype=float), self.g_v.shape)
        if np.any(self.lo > self.hi):
            raise ValueError("control box has lo > hi")
        if not (self.gamma > 0 and self.weight > 0):
            raise ValueError("gamma and weight must be positive")

    @classmethod
    def from_forms(cls, clf: ConstraintForm, cbf: ConstraintForm, gamma, lo, hi, weight=1.0) -> "QpProblem":
        return cls(clf.gradient, clf.constant, cbf.gradient, cbf.constant, gamma, lo, hi, weight)

    @property
    def dim(self) -> int:
        return self.g_v.size

    def objective(self, u, s) -> float:
        return self.weight * float(u @ u) + self.gamma * s


@dataclass
class QpSolution:
    u: np.ndarray
    s: float
    objective: float
    status: Status
    iterations: int
    kkt_residual: float
    duals: tuple[float, float] = field(default=(0.0, 0.0))


def feasibility_certificate(problem: QpProblem) -> tuple[np.ndarray, float]:
    """Box corner maximizing the barrier form and the resulting margin ``g_h @ u + k_h``."""
    u = np.where(problem.g_h >= 0, problem.hi, problem.lo).astype(float)
    return u, float(problem.g_h @ u + problem.k_h)


def _clip_control(p: QpProblem, mu: float, nu: float) -> np.ndarray:
    return np.clip((nu * p.g_h - mu * p.g_v) / (2.0 * p.weight), p.lo, p.hi)


def _best_mu(p: QpProblem, nu: float) -> float:
    """Exact maximizer over ``mu in [0, gamma]`` of the dual at fixed ``nu``.

    The partial derivative ``g_v @ u(mu) + k_v`` is piecewise linear and
    nonincreasing in ``mu``; its root is located by bisection over the sorted
    clipping breakpoints and linear interpolation inside the final piece.
    """

    def phi(mu):
        return float(p.g_v @ _clip_control(p, mu, nu)) + p.k_v

    f0 = phi(0.0)
    if f0 <= 0.0:
        return 0.0
    fg = phi(p.gamma)
    if fg >= 0.0:
        return p.gamma
    nz = p.g_v != 0
    c0 = nu * p.g_h[nz]
    gv = p.g_v[nz]
    w2 = 2.0 * p.weight
    bps = np.concatenate([(c0 - w2 * p.lo[nz]) / gv, (c0 - w2 * p.hi[nz]) / gv])
    bps = np.unique(bps[(bps > 0.0) & (bps < p.gamma)])
    a, fa, b, fb = 0.0, f0, p.gamma, fg
    lo_i, hi_i = 0, len(bps)
    while lo_i < hi_i:
        mid = (lo_i + hi_i) // 2
        fm = phi(bps[mid])
        if fm > 0.0:
            a, fa = bps[mid], fm
            lo_i = mid + 1
        else:
            b, fb = bps[mid], fm
            hi_i = mid
    if fb == 0.0:
        return float(b)
    return float(a + fa * (b - a) / (fa - fb))


def solve(
    problem: QpProblem,
    warm_start: tuple[float, float] | None = None,
    tol: float = 1e-9,
    max_iter: int = 200,
) -> QpSolution:
    """Solve the QP; raises :class:`InfeasibleError` if the barrier cannot be met in the box.

    ``warm_start`` is a previous ``(mu, nu)`` pair and only seeds the search
    bracket, so the returned minimizer does not depend on it.
    """
    p = problem
    _, margin = feasibility_certificate(p)
    if margin < 0:
        raise InfeasibleError(margin)

    evals = 0

    def chi(nu):
        # derivative of the partially maximized dual with respect to nu
        nonlocal evals
        evals += 1
        mu = _best_mu(p, nu)
        return -(float(p.g_h @ _clip_control(p, mu, nu)) + p.k_h)

    nu = 0.0
    if chi(0.0) > 0.0:
        lo_nu = 0.0
        hi_nu = max(float(warm_start[1]) if warm_start is not None else 0.0, 1e-6 * (1.0 + abs(p.k_h)))
        while chi(hi_nu) > 0.0:
            lo_nu, hi_nu = hi_nu, 2.0 * hi_nu
            if hi_nu > 1e300:
                raise InfeasibleError(margin)
        nu = brentq(chi, lo_nu, hi_nu, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=max_iter, disp=False)

    mu = _best_mu(p, nu)
    u = _clip_control(p, mu, nu)
    clf = float(p.g_v @ u + p.k_v)
    cbf = float(p.g_h @ u + p.k_h)
    s = max(0.0, clf)
    scale = 1.0 + abs(p.k_v) + abs(p.k_h)
    kkt = max(max(0.0, -cbf), nu * abs(cbf) / (1.0 + nu), mu * max(0.0, -clf) / (1.0 + mu), (p.gamma - mu) * s / p.gamma)
    status = Status.OPTIMAL if kkt <= tol * scale else Status.MAX_ITER
    return QpSolution(u, s, p.objective(u, s), status, evals, kkt, (mu, nu))
