import numpy as np
import pytest

from swarmfp.controllers import (
    CONTROLLERS,
    OcParams,
    UnsafeStateError,
    _fp_forward,
    interpolate_command,
    oc_lookup,
    oc_solve,
    rv_obc_step,
    rv_obc_v_step,
    sv_obc_step,
)
from swarmfp.density import DiffusionModel, DomainError, gaussian_density, target_density
from swarmfp.functionals import GainSet, SafetyRegion, barrier_h, calibrate_epsilon, lyapunov_v, sv_forms_direct
from swarmfp.grid import GridSpec, operators

REGION = SafetyRegion((-0.5, 0.5), 0.6)
G21 = GridSpec(21, 21, 0.2, (-2.0, -2.0))


@pytest.fixture(scope="module")
def ops41(grid41):
    return operators(grid41)


@pytest.fixture(scope="module")
def ops21():
    return operators(G21)


def _gains(grid, alpha_h=100.0, lam=16.0):
    return GainSet(1.0, alpha_h, 1e3, calibrate_epsilon(REGION, lam, grid, 0.1))


# ---- interpolation


def test_interpolation_at_grid_point_and_constant(grid41):
    rng = np.random.default_rng(0)
    u = rng.standard_normal(2 * grid41.n_points)
    i = grid41.index(7, 30)
    p = grid41.points()[i]
    assert np.allclose(interpolate_command(u, p, grid41)[0], [u[i], u[grid41.n_points + i]], atol=1e-14)
    const = np.r_[np.full(grid41.n_points, 0.3), np.full(grid41.n_points, -0.2)]
    pts = rng.uniform(-2, 2, (20, 2))
    assert np.allclose(interpolate_command(const, pts, grid41), [0.3, -0.2])


def test_interpolation_of_bilinear_field_is_exact(grid41):
    pts = grid41.points()
    f = 1.0 + 2.0 * pts[:, 0] - pts[:, 1] + 0.5 * pts[:, 0] * pts[:, 1]
    u = np.r_[f, -f]
    q = np.array([[0.05, -0.35], [1.23, 0.77]])
    exact = 1.0 + 2.0 * q[:, 0] - q[:, 1] + 0.5 * q[:, 0] * q[:, 1]
    out = interpolate_command(u, q, grid41)
    assert np.allclose(out[:, 0], exact, atol=1e-12) and np.allclose(out[:, 1], -exact, atol=1e-12)


def test_interpolation_outside_domain(grid41):
    with pytest.raises(DomainError):
        interpolate_command(np.zeros(2 * grid41.n_points), [2.5, 0.0], grid41)


# ---- grid-field controller


def test_sv_step_at_target_without_diffusion(ops21):
    rho_d = target_density(G21, (0.5, -0.5), 1.5)
    gains = GainSet(1.0, 2.0, 100.0, epsilon=10.0)
    res = sv_obc_step(rho_d, rho_d, REGION, gains, DiffusionModel(0.0, 0.25), ops21)
    assert np.abs(res.u_field).max() < 1e-10 and res.slack < 1e-12


def test_sv_step_field_concentrates_around_robot(ops41, grid41):
    x = np.array([[0.6, -0.3]])
    rho = gaussian_density(x, 16.0, grid41)
    rho_d = target_density(grid41, (0.5, -0.5), 1.5, peak=1.0)
    res = sv_obc_step(rho, rho_d, REGION, _gains(grid41), DiffusionModel(0.05, 0.25), ops41)
    speed = np.hypot(*res.u_field.reshape(2, -1))
    far = np.linalg.norm(grid41.points() - x[0], axis=1) > 1.5  # six kernel widths
    assert speed[far].max() < 1e-3 * speed.max()


def test_sv_step_one_step_safety(ops41, grid41):
    rng = np.random.default_rng(3)
    gains = _gains(grid41)
    model = DiffusionModel(0.05, 0.25)
    rho_d = target_density(grid41, (0.5, -0.5), 1.5, peak=3.0)
    done = 0
    while done < 5:
        x = rng.uniform(-1.8, 1.8, (3, 2))
        rho = gaussian_density(x, 16.0, grid41)
        if barrier_h(rho, REGION, gains.epsilon, grid41) < 0:
            continue
        done += 1
        res = sv_obc_step(rho, rho_d, REGION, gains, model, ops41)
        _, cbf = sv_forms_direct(np.maximum(rho, 1e-12), rho_d, REGION, ops41, model.T, gains, res.u_field)
        assert cbf >= -1e-8 and res.cbf_value >= -1e-8


def test_sv_step_rejects_unsafe_state(ops41, grid41):
    rho = gaussian_density([REGION.center], 16.0, grid41)
    with pytest.raises(UnsafeStateError):
        sv_obc_step(rho, rho, REGION, _gains(grid41), DiffusionModel(0.05, 0.25), ops41)


# ---- per-robot controllers


def test_rv_step_on_matched_target_is_still(grid41):
    lam = 16.0
    rho_d = target_density(grid41, (0.5, -0.5), 1 / np.sqrt(lam), peak=1.0)
    cmd = rv_obc_step([[0.5, -0.5]], lam, rho_d, REGION, _gains(grid41), DiffusionModel(0.05, 0.25), grid41)
    assert np.linalg.norm(cmd.per_robot) < 1e-6


def test_rv_step_skirts_region(grid41):
    rho_d = target_density(grid41, (0.5, -0.5), 1.5, peak=1.0)
    gains, model = _gains(grid41, alpha_h=1.0), DiffusionModel(0.0, 1.0)
    tang = []
    for x in ([-1.1, 1.0], [-1.0, 1.1]):
        cmd = rv_obc_step([x], 16.0, rho_d, REGION, gains, model, grid41)
        d = np.array([0.5, -0.5]) - x
        d /= np.linalg.norm(d)
        u = cmd.per_robot[0]
        assert abs(cmd.cbf_value) < 1e-8  # barrier active
        tang.append(u[0] * d[1] - u[1] * d[0])
    # mirrored starts detour to mirrored sides
    assert tang[0] > 0.5 and tang[1] == pytest.approx(-tang[0], rel=1e-6)


def test_rv_step_one_step_safety_and_box(grid41):
    rng = np.random.default_rng(5)
    gains, model = _gains(grid41), DiffusionModel(0.05, 0.25)
    rho_d = target_density(grid41, (0.5, -0.5), 1.5, peak=4.0)
    done = 0
    while done < 20:
        x = rng.uniform(-1.8, 1.8, (4, 2))
        if barrier_h(gaussian_density(x, 16.0, grid41), REGION, gains.epsilon, grid41) < 0:
            continue
        done += 1
        for step in (rv_obc_step, rv_obc_v_step):
            cmd = step(x, 16.0, rho_d, REGION, gains, model, grid41)
            assert cmd.cbf_value >= -1e-8
            assert np.abs(cmd.per_robot).max() <= model.u_max + 1e-15


def test_rv_step_rejects_unsafe_and_outside(grid41):
    rho_d = target_density(grid41, (0.5, -0.5), 1.5)
    with pytest.raises(UnsafeStateError):
        rv_obc_step([REGION.center], 16.0, rho_d, REGION, _gains(grid41), DiffusionModel(0.05, 0.25), grid41)
    with pytest.raises(DomainError):
        rv_obc_step([[3.0, 0.0]], 16.0, rho_d, REGION, _gains(grid41), DiffusionModel(0.05, 0.25), grid41)


def test_voronoi_step_matches_global_when_far_apart(grid41):
    x = np.array([[-1.5, -1.5], [0.0, -1.5], [1.5, -1.5], [1.5, 0.0], [1.5, 1.5]])
    rho_d = target_density(grid41, (0.5, -0.5), 1.5, peak=5.0)
    # 12 sigma apart with the box inactive: agreement is limited by the kernel tails only
    lam = 64.0
    gains = GainSet(1.0, 100.0, 0.01, calibrate_epsilon(REGION, lam, grid41, 0.1))
    model = DiffusionModel(0.05, 50.0)
    a = rv_obc_step(x, lam, rho_d, REGION, gains, model, grid41)
    b = rv_obc_v_step(x, lam, rho_d, REGION, gains, model, grid41, with_bounds=True)
    assert np.abs(a.per_robot).max() < model.u_max
    assert np.abs(a.per_robot - b.per_robot).max() <= 1e-6 * np.abs(a.per_robot).max()
    assert b.extra["vc_bound"].bound < 1e-6
    # 6 sigma apart in the default saturated regime: identical commands
    lam = 16.0
    gains, model = _gains(grid41, lam=lam), DiffusionModel(0.05, 0.25)
    a = rv_obc_step(x, lam, rho_d, REGION, gains, model, grid41)
    b = rv_obc_v_step(x, lam, rho_d, REGION, gains, model, grid41)
    assert np.abs(a.per_robot - b.per_robot).max() < 1e-6


@pytest.mark.parametrize("step", [rv_obc_step, rv_obc_v_step])
def test_swapped_measurements_swap_commands(grid41, step):
    x = np.array([[0.8, -1.0], [0.85, -1.02], [-1.2, -1.3]])
    rho_d = target_density(grid41, (0.5, -0.5), 1.5, peak=3.0)
    gains, model = _gains(grid41), DiffusionModel(0.05, 0.25)
    a = step(x, 16.0, rho_d, REGION, gains, model, grid41)
    b = step(x[[1, 0, 2]], 16.0, rho_d, REGION, gains, model, grid41)
    assert np.allclose(b.per_robot, a.per_robot[[1, 0, 2]], atol=1e-10)


def test_sv_and_rv_commands_agree_in_direction(grid41, ops41):
    # single robot, both constraints and the box inactive
    lam = 16.0
    gains, model = GainSet(1.0, 100.0, 1e3, 0.05), DiffusionModel(0.0, 50.0)
    rho_d = target_density(grid41, (0.5, -0.5), 1.5, peak=1.0)
    rng = np.random.default_rng(0)
    hits = total = 0
    while total < 100:
        x = rng.uniform(-1.5, 1.5, (1, 2))
        if np.linalg.norm(x[0] - REGION.center) < 1.2:
            continue
        total += 1
        rho = gaussian_density(x, lam, grid41)
        a = interpolate_command(sv_obc_step(rho, rho_d, REGION, gains, model, ops41).u_field, x, grid41)[0]
        b = rv_obc_step(x, lam, rho_d, REGION, gains, model, grid41).per_robot[0]
        hits += a @ b >= np.cos(np.radians(30)) * np.linalg.norm(a) * np.linalg.norm(b)
    assert hits >= 90


# ---- optimal-control baseline


@pytest.fixture(scope="module")
def oc_case(ops21):
    rho_d = target_density(G21, (0.5, -0.5), 1.5, peak=1.0)
    rho_0 = gaussian_density([[-1.2, 1.2], [-1.0, 1.4]], 4.0, G21)
    return rho_0, rho_d


def test_oc_at_target_is_idle(ops21, oc_case):
    _, rho_d = oc_case
    sol = oc_solve(rho_d, rho_d, REGION, 100.0, DiffusionModel(0.0, 0.25), ops21, 1.0, 0.01)
    assert sol.converged and np.abs(sol.u_field_t).max() == 0.0
    assert sol.nu_t.max() == 0.0 and sol.eta == 0.0
    assert len(sol.u_field_t) == 101 and sol.t_f == pytest.approx(1.0)


def test_oc_rollout_decreases_v(ops21, oc_case):
    rho_0, rho_d = oc_case
    sol = oc_solve(rho_0, rho_d, REGION, 1e3, DiffusionModel(0.0, 0.5), ops21, 1.0, 0.01, OcParams(alpha=20.0))
    rho_t = _fp_forward(rho_0, sol.u_field_t, 0.0, ops21, 0.01)
    assert lyapunov_v(rho_t[-1], rho_d, G21) < 0.9 * lyapunov_v(rho_0, rho_d, G21)


def test_oc_active_constraint_has_positive_multiplier(ops21, oc_case):
    rho_0, rho_d = oc_case
    eps = 0.332  # just above the initial squared mass in the region
    assert -barrier_h(rho_0, REGION, 0.0, G21) < eps
    params = OcParams(alpha=20.0, penalty_step=2.0)
    sol = oc_solve(rho_0, rho_d, REGION, eps, DiffusionModel(0.0, 0.5), ops21, 1.0, 0.01, params)
    assert sol.converged
    assert np.all(sol.nu_t >= 0) and sol.eta >= 0
    assert sol.nu_t[0] == 0.0 and sol.nu_t.max() > 0.0
    active = np.flatnonzero(sol.nu_t > 0)
    assert np.all(np.diff(active) == 1)  # one contiguous window


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_oc_divergence_is_reported(ops21, oc_case):
    from swarmfp.controllers import OcDivergenceError

    rho_0, rho_d = oc_case
    with pytest.raises(OcDivergenceError, match="sweep"):
        oc_solve(rho_0, rho_d, REGION, 0.332, DiffusionModel(0.0, 0.5), ops21, 1.0, 0.01, OcParams(alpha=1.0))


def test_oc_lookup(ops21, oc_case):
    rho_0, rho_d = oc_case
    sol = oc_solve(rho_0, rho_d, REGION, 1e3, DiffusionModel(0.0, 0.5), ops21, 1.0, 0.01, OcParams(alpha=20.0))
    n = G21.n_points
    i = G21.index(4, 15)
    p = G21.points()[i]
    u0, flag = oc_lookup(sol, p, 0.0)
    assert not flag and np.allclose(u0[0], [sol.u_field_t[0, i], sol.u_field_t[0, n + i]])
    a, _ = oc_lookup(sol, p, 0.304)
    assert np.array_equal(a, oc_lookup(sol, p, 0.30)[0])
    late, flag = oc_lookup(sol, p, 5.0)
    assert flag and np.array_equal(late, oc_lookup(sol, p, 1.0)[0])
    rng = np.random.default_rng(0)
    for _ in range(5):
        q, t = rng.uniform(-1.9, 1.7, 2), rng.uniform(0, 1)
        k = int(round(t / 0.01))
        gx, gy = (q - G21.origin) / G21.spacing
        ix, iy = int(gx), int(gy)
        fx, fy = gx - ix, gy - iy
        ux = sol.u_field_t[k, :n].reshape(G21.ny, G21.nx)
        ref = (ux[iy, ix] * (1 - fx) * (1 - fy) + ux[iy, ix + 1] * fx * (1 - fy)
               + ux[iy + 1, ix] * (1 - fx) * fy + ux[iy + 1, ix + 1] * fx * fy)
        assert oc_lookup(sol, q, t)[0][0, 0] == pytest.approx(ref, abs=1e-14)


def test_oc_controller_ignores_runtime_density(grid41):
    cls = CONTROLLERS["OC"]
    rho_d = target_density(grid41, (0.5, -0.5), 1.5, peak=2.0)
    ctl = cls(grid41, 16.0, rho_d, REGION, _gains(grid41), DiffusionModel(0.05, 0.25), 0.01, t_f=0.2,
              params=OcParams(max_sweeps=3))
    x0 = np.array([[1.0, -1.4], [1.4, -1.0]])
    ctl.reset(x0)
    q = np.array([[0.2, 0.1], [-1.0, -1.0]])
    first = ctl.step(q, 0.1).per_robot
    ctl.step(x0, 0.05)
    assert np.array_equal(ctl.step(q, 0.1).per_robot, first)


def test_controller_registry():
    assert set(CONTROLLERS) == {"OC", "SvObc", "RvObc", "RvObcV"}
