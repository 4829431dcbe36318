"""Monte-Carlo simulation: noisy measurement, controller step, noisy motion, metrics."""

from __future__ import annotations

import csv
import gc
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .controllers import CONTROLLERS, OcParams
from .density import DiffusionModel, DomainError, gaussian_density, target_density
from .functionals import (
    GainSet,
    SafetyRegion,
    backstep_bound_check,
    barrier_h,
    calibrate_epsilon,
    lyapunov_v,
    voronoi_barrier,
    voronoi_lyapunov,
)
from .grid import GridSpec
from .voronoi import partition_grid

METRIC_COLUMNS = ("t", "u_norm", "h_true", "h_meas", "V", "V_c", "h_c", "s", "solver_status")
SCHEMA_VERSION = 1
# min h below -VIOLATION_TOL counts as a safety violation
VIOLATION_TOL = 1e-6


class UnsafeInitialStateError(ValueError):
    """The configured start already violates the barrier."""


def ring_positions(n: int, radius: float = 1.5, center=(0.0, 0.0), phase: float = 0.0) -> np.ndarray:
    ang = phase + 2.0 * np.pi * np.arange(n) / n
    return np.column_stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)])


@dataclass(frozen=True)
class SimConfig:
    grid: GridSpec
    t_f: float = 4.0
    dt: float = 0.01
    n_robots: int = 6
    init_true_pos: tuple | None = None
    target_mean: tuple[float, float] = (0.5, -0.5)
    target_std: float = 1.5
    target_mass: float | None = None
    target_peak: float | None = None  # None: peak equal to n_robots (unless target_mass is set)
    region: SafetyRegion = SafetyRegion((-0.5, 0.5), 0.6)
    gains: GainSet = GainSet(alpha_v=1.0, alpha_h=100.0, gamma=1e3)
    # when set, gains.epsilon is replaced by the belief level of a robot d_safe outside the region
    d_safe: float | None = 0.1
    model: DiffusionModel = DiffusionModel(0.05, 0.25)
    lam: float = 16.0
    controller: str = "RvObc"
    seed: int = 0
    n_runs: int = 1
    measurement_noise: bool = True
    motion_noise: bool = True
    init_jitter: float = 0.05
    ring_radius: float = 1.5
    ring_phase: float = 7 * np.pi / 12
    on_exit: str = "clamp"
    oc: OcParams = OcParams()
    backstep: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_f >= self.dt:
            raise ValueError("t_f must be at least dt")
        if self.n_robots < 1:
            raise ValueError("n_robots must be >= 1")
        if self.controller not in CONTROLLERS:
            raise ValueError(f"unknown controller {self.controller!r}; valid: {sorted(CONTROLLERS)}")
        if self.on_exit not in ("clamp", "abort"):
            raise ValueError("on_exit must be 'clamp' or 'abort'")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        if self.init_true_pos is not None and np.shape(self.init_true_pos) != (self.n_robots, 2):
            raise ValueError(f"init_true_pos must have shape ({self.n_robots}, 2)")
        if self.target_mass is not None and self.target_peak is not None:
            raise ValueError("give at most one of target_mass and target_peak")
        self.region.check_inside(self.grid)
        if self.d_safe is not None:
            if not self.d_safe >= 0:
                raise ValueError("d_safe must be nonnegative")
            eps = calibrate_epsilon(self.region, self.lam, self.grid, self.d_safe)
            object.__setattr__(self, "gains", replace(self.gains, epsilon=eps))

    @property
    def n_steps(self) -> int:
        return int(round(self.t_f / self.dt))

    @property
    def measurement_std(self) -> float:
        return 1.0 / math.sqrt(self.lam) if self.measurement_noise else 0.0

    @property
    def motion_std(self) -> float:
        return math.sqrt(2.0 * self.model.T * self.dt) if self.motion_noise else 0.0

    def target(self) -> np.ndarray:
        peak = None
        if self.target_mass is None:
            peak = float(self.n_robots) if self.target_peak is None else self.target_peak
        return target_density(self.grid, self.target_mean, self.target_std, self.target_mass, peak)

    def base_positions(self) -> np.ndarray:
        if self.init_true_pos is not None:
            return np.asarray(self.init_true_pos, dtype=float)
        return ring_positions(self.n_robots, self.ring_radius, phase=self.ring_phase)


@dataclass
class MetricsTrace:
    t: np.ndarray
    u_norm: np.ndarray
    h_true: np.ndarray
    h_meas: np.ndarray
    V: np.ndarray
    V_meas: np.ndarray  # same functional on the measured swarm, pairs with V_c
    V_c: np.ndarray
    h_c: np.ndarray
    s: np.ndarray
    solver_status: list
    step_time: np.ndarray
    clamped: np.ndarray
    positions: np.ndarray | None = None
    backstep_holds: np.ndarray | None = None
    seed: int = 0

    @property
    def min_h(self) -> float:
        return float(np.min(self.h_true))

    @property
    def violated(self) -> bool:
        return self.min_h < -VIOLATION_TOL

    @property
    def final_V(self) -> float:
        return float(self.V[-1])

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "violated": self.violated,
            "min_h": self.min_h,
            "final_V": self.final_V,
            "initial_V": float(self.V[0]),
            "clamped_steps": int(self.clamped.sum()),
            "non_optimal_steps": int(sum(s not in ("optimal", "open_loop") for s in self.solver_status)),
        }


def _clamp(grid: GridSpec, pos: np.ndarray, on_exit: str):
    out, moved = grid.clamp(pos)
    if moved.any() and on_exit == "abort":
        raise DomainError(f"robots {np.flatnonzero(moved).tolist()} left the domain")
    return out, bool(moved.any())


def run_sim(config: SimConfig, run_index: int = 0, record_positions: bool = False) -> MetricsTrace:
    """One closed-loop rollout; deterministic for a given ``(config, run_index)``."""
    cfg = config
    grid = cfg.grid
    seed = cfg.seed + run_index
    rng = np.random.default_rng(seed)
    rho_d = cfg.target()
    region, gains, model = cfg.region, cfg.gains, cfg.model

    true = cfg.base_positions() + cfg.init_jitter * rng.uniform(-1.0, 1.0, size=(cfg.n_robots, 2))
    true, _ = _clamp(grid, true, "abort")
    h0 = barrier_h(gaussian_density(true, cfg.lam, grid), region, gains.epsilon, grid)
    if h0 < 0:
        raise UnsafeInitialStateError(f"initial state is unsafe (h = {h0:.3e}); move the robots away from the region")

    kw = {"t_f": cfg.t_f, "params": cfg.oc} if cfg.controller == "OC" else {}
    ctrl = CONTROLLERS[cfg.controller](grid, cfg.lam, rho_d, region, gains, model, cfg.dt, **kw)
    voronoi = ctrl.uses_partition

    k = cfg.n_steps + 1
    cols = {c: np.full(k, np.nan) for c in ("u_norm", "h_true", "h_meas", "V", "V_meas", "V_c", "h_c", "s", "step_time")}
    status = []
    clamped = np.zeros(k, dtype=bool)
    holds = np.zeros(k, dtype=bool) if cfg.backstep else None
    traj = np.zeros((k, cfg.n_robots, 2)) if record_positions else None
    sm, sw = cfg.measurement_std, cfg.motion_std

    for i in range(k):
        t = i * cfg.dt
        meas, flag_m = _clamp(grid, true + sm * rng.standard_normal(true.shape), "clamp")
        if i == 0:
            ctrl.reset(meas)
        cmd = ctrl.step(meas, t)
        u = cmd.per_robot

        rho_true = gaussian_density(true, cfg.lam, grid)
        rho_meas = gaussian_density(meas, cfg.lam, grid)
        cols["u_norm"][i] = float(np.linalg.norm(u))
        cols["h_true"][i] = barrier_h(rho_true, region, gains.epsilon, grid)
        cols["h_meas"][i] = barrier_h(rho_meas, region, gains.epsilon, grid)
        cols["V"][i] = lyapunov_v(rho_true, rho_d, grid)
        cols["V_meas"][i] = lyapunov_v(rho_meas, rho_d, grid)
        if voronoi:
            part = partition_grid(meas, grid)
            cols["V_c"][i] = voronoi_lyapunov(meas, cfg.lam, rho_d, part, grid)
            cols["h_c"][i] = voronoi_barrier(meas, cfg.lam, region, gains.epsilon, part, grid)
        cols["s"][i] = cmd.slack
        cols["step_time"][i] = cmd.step_time
        status.append(cmd.solver_status)
        if holds is not None:
            holds[i] = backstep_bound_check(meas, cfg.lam, region, model, gains, cfg.dt, grid).holds
        if traj is not None:
            traj[i] = true

        true, flag_t = _clamp(grid, true + u * cfg.dt + sw * rng.standard_normal(true.shape), cfg.on_exit)
        clamped[i] = flag_m or flag_t or cmd.clamped

    return MetricsTrace(
        t=cfg.dt * np.arange(k),
        u_norm=cols["u_norm"],
        h_true=cols["h_true"],
        h_meas=cols["h_meas"],
        V=cols["V"],
        V_meas=cols["V_meas"],
        V_c=cols["V_c"],
        h_c=cols["h_c"],
        s=cols["s"],
        solver_status=status,
        step_time=cols["step_time"],
        clamped=clamped,
        positions=traj,
        backstep_holds=holds,
        seed=seed,
    )


@dataclass
class BatchResult:
    traces: list
    mean: MetricsTrace

    @property
    def violations(self) -> int:
        return sum(tr.violated for tr in self.traces)

    def summary(self) -> dict:
        return {
            "n_runs": len(self.traces),
            "violations": self.violations,
            "min_h": min(tr.min_h for tr in self.traces),
            "mean_final_V": float(np.mean([tr.final_V for tr in self.traces])),
            "runs": [tr.summary() for tr in self.traces],
        }


def _mean_trace(traces: list) -> MetricsTrace:
    if len(traces) == 1:
        return traces[0]

    def avg(name):
        return np.mean([getattr(tr, name) for tr in traces], axis=0)

    first = traces[0]
    status = []
    for i in range(len(first.t)):
        vals = {tr.solver_status[i] for tr in traces}
        status.append(vals.pop() if len(vals) == 1 else "mixed")
    return MetricsTrace(
        t=first.t,
        u_norm=avg("u_norm"),
        h_true=avg("h_true"),
        h_meas=avg("h_meas"),
        V=avg("V"),
        V_meas=avg("V_meas"),
        V_c=avg("V_c"),
        h_c=avg("h_c"),
        s=avg("s"),
        solver_status=status,
        step_time=avg("step_time"),
        clamped=np.any([tr.clamped for tr in traces], axis=0),
        seed=first.seed,
    )


def run_batch(config: SimConfig, n_runs: int | None = None, threads: int = 1) -> BatchResult:
    """Runs with seeds ``seed + run_index``; results are ordered and independent of ``threads``."""
    n = config.n_runs if n_runs is None else n_runs
    if n < 1:
        raise ValueError("n_runs must be >= 1")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            traces = list(pool.map(lambda i: run_sim(config, i), range(n)))
    else:
        traces = [run_sim(config, i) for i in range(n)]
    return BatchResult(traces, _mean_trace(traces))


@dataclass
class ScalingRow:
    n_robots: int
    controller: str
    mean_step_ms: float
    std_step_ms: float
    steps: int


def run_scaling_bench(
    base: SimConfig, robot_counts=(6, 10, 15, 20), controllers=("RvObc", "RvObcV"), steps: int = 20, warmup: int = 2,
    bench_radius: float = 0.3, rounds: int = 5,
) -> list[ScalingRow]:
    """Mean controller step time per swarm size, timed inside closed-loop rollouts.

    Each of ``rounds`` passes runs every (size, controller) pair once for
    ``steps`` timed steps with seed ``base.seed + round``. Interleaving the
    pairs spreads slow spells of a shared machine over all of them instead of
    letting one pair absorb a burst. An extra untimed pass goes first so
    allocator and cache warm-up is not charged to the first pair.
    """
    if not robot_counts:
        raise ValueError("robot_counts must be nonempty")
    if steps < 1 or rounds < 1:
        raise ValueError("steps and rounds must be >= 1")
    pairs = [(n, name) for n in robot_counts for name in controllers]
    samples: dict = {p: [] for p in pairs}
    for r in range(-1, rounds):
        for n, name in pairs:
            # ring around the target so every swarm size starts safe
            pos = ring_positions(n, bench_radius, center=base.target_mean)
            cfg = replace(
                base,
                n_robots=n,
                controller=name,
                init_true_pos=tuple(map(tuple, pos)),
                t_f=(steps + warmup - 1) * base.dt,
                seed=base.seed + max(r, 0),
                backstep=False,
            )
            # collector pauses land on arbitrary steps and dominate the spread
            gc.collect()
            gc.disable()
            try:
                tr = run_sim(cfg)
            finally:
                gc.enable()
            if r >= 0:
                samples[n, name].append(tr.step_time[warmup:] * 1e3)
    rows = []
    for n, name in pairs:
        times = np.concatenate(samples[n, name])
        rows.append(ScalingRow(n, name, float(times.mean()), float(times.std()), len(times)))
    return rows


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def write_metrics_csv(trace: MetricsTrace, path: Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for i in range(len(trace.t)):
            w.writerow(
                [
                    _fmt(trace.t[i]),
                    _fmt(trace.u_norm[i]),
                    _fmt(trace.h_true[i]),
                    _fmt(trace.h_meas[i]),
                    _fmt(trace.V[i]),
                    _fmt(trace.V_c[i]),
                    _fmt(trace.h_c[i]),
                    _fmt(trace.s[i]),
                    trace.solver_status[i],
                ]
            )


def write_timings_csv(trace: MetricsTrace, path: Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("t", "step_ms"))
        for t, st in zip(trace.t, trace.step_time):
            w.writerow((_fmt(t), f"{st * 1e3:.4f}"))


def read_metrics_csv(path: Path) -> dict:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for c in METRIC_COLUMNS:
        if c == "solver_status":
            out[c] = [r[c] for r in rows]
        else:
            out[c] = np.array([float(r[c]) if r[c] != "" else np.nan for r in rows])
    return out


def write_snapshot(path: Path, field: np.ndarray, grid: GridSpec, step: int) -> None:
    """Flat binary field dump: 16-byte header (nx, ny, step as int32, dtype code) then float64 data."""
    arr = np.ascontiguousarray(field, dtype="<f8")
    header = np.array([grid.nx, grid.ny, step, 8], dtype="<i4")
    with Path(path).open("wb") as fh:
        fh.write(header.tobytes())
        fh.write(arr.tobytes())


def read_snapshot(path: Path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    nx, ny, step, code = np.frombuffer(raw[:16], dtype="<i4")
    if code != 8:
        raise ValueError(f"unsupported snapshot dtype code {code}")
    data = np.frombuffer(raw[16:], dtype="<f8")
    return data.copy(), {"nx": int(nx), "ny": int(ny), "step": int(step)}


def write_scaling_csv(rows: list[ScalingRow], path: Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("n_robots", "controller", "mean_step_ms", "std_step_ms", "steps"))
        for r in rows:
            w.writerow((r.n_robots, r.controller, f"{r.mean_step_ms:.4f}", f"{r.std_step_ms:.4f}", r.steps))


COMPARE_FIELDS = ("u_norm", "h_true", "h_meas", "V")


def write_compare_csv(means: dict[str, MetricsTrace], path: Path) -> None:
    """Aligned mean curves, columns ``<controller>__<metric>``.

    Controllers with a partition add ``V_c_minus_V``, both functionals taken
    on the measured swarm.
    """
    names = list(means)
    t = means[names[0]].t
    header = ["t"]
    series = []
    for n in names:
        tr = means[n]
        if len(tr.t) != len(t):
            raise ValueError("compared runs must share the time grid")
        for f in COMPARE_FIELDS:
            header.append(f"{n}__{f}")
            series.append(getattr(tr, f))
        if not np.all(np.isnan(tr.V_c)):
            header.append(f"{n}__V_c_minus_V")
            series.append(tr.V_c - tr.V_meas)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(t)):
            w.writerow([_fmt(t[i])] + [_fmt(s[i]) for s in series])
