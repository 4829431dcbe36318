import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from swarmfp.density import (
    DENSITY_FLOOR,
    DiffusionModel,
    DomainError,
    CancellationConsistencyError,
    CancellationConsistencyWarning,
    build_advection,
    cancellation_control,
    control_bounds,
    fp_rhs,
    gaussian_density,
    min_norm_control,
    robot_densities,
    target_density,
)
from swarmfp.grid import Boundary, GridSpec, operators

G9 = GridSpec(9, 9, 0.5, (-2.0, -2.0))
G11 = GridSpec(11, 11, 0.4, (-2.0, -2.0))


def test_diffusion_constant():
    m = DiffusionModel(2.0, 0.5)
    assert m.T == 0.045 * 2.0 * 0.5
    with pytest.raises(ValueError):
        DiffusionModel(-1.0, 1.0)
    with pytest.raises(ValueError):
        DiffusionModel(1.0, 0.0)


def test_kernel_peak_is_one_at_grid_point(grid41):
    rho = gaussian_density([[0.3, -0.7]], 5.0, grid41)
    assert rho.max() == pytest.approx(1.0, abs=1e-15)


def test_coincident_robots_double_the_field(grid41):
    one = gaussian_density([[0.3, 0.2]], 3.0, grid41)
    assert np.array_equal(gaussian_density([[0.3, 0.2], [0.3, 0.2]], 3.0, grid41), 2 * one)


def test_neighbour_value_matches_scalar_formula(grid41):
    rho = gaussian_density([[0.0, 0.0]], 4.0, grid41)
    assert rho[grid41.index(21, 20)] == pytest.approx(math.exp(-4 * 0.01 / 2), rel=1e-14)
    assert rho[grid41.index(21, 20)] == pytest.approx(0.9801986733067553, rel=1e-14)


def test_density_rejects_out_of_domain(grid41):
    with pytest.raises(DomainError):
        gaussian_density([[2.5, 0.0]], 1.0, grid41)
    with pytest.raises(ValueError):
        gaussian_density([[0.0, 0.0]], 0.0, grid41)


@given(st.permutations(range(5)))
def test_density_is_permutation_invariant(perm):
    x = np.random.default_rng(3).uniform(-1.5, 1.5, (5, 2))
    a = gaussian_density(x, 2.0, G11)
    b = gaussian_density(x[list(perm)], 2.0, G11)
    assert np.allclose(a, b, rtol=1e-14, atol=0)


def test_density_translation_equivariant_on_grid_shifts(grid41):
    a = grid41.to_image(gaussian_density([[0.0, 0.0]], 4.0, grid41))
    b = grid41.to_image(gaussian_density([[0.3, -0.2]], 4.0, grid41))
    # shift of (3, -2) cells
    assert np.allclose(np.roll(np.roll(a, 3, axis=1), -2, axis=0)[5:-5, 5:-5], b[5:-5, 5:-5], atol=1e-13)


def test_target_density_scalings(grid41):
    base = target_density(grid41, (0.5, -0.5), 1.5)
    assert base.max() == pytest.approx(1.0)
    assert target_density(grid41, (0.5, -0.5), 1.5, peak=6.0).max() == pytest.approx(6.0)
    m = target_density(grid41, (0.5, -0.5), 1.5, mass=2.0)
    assert m.sum() * grid41.cell_area == pytest.approx(2.0)
    with pytest.raises(ValueError):
        target_density(grid41, (0.0, 0.0), 1.0, mass=1.0, peak=1.0)


def random_positive(grid, seed):
    rng = np.random.default_rng(seed)
    return 0.05 + rng.uniform(0.0, 1.0, grid.n_points)


def test_zero_density_gives_zero_advection():
    ops = operators(G9)
    assert build_advection(np.zeros(G9.n_points), ops.dx, ops.dy).nnz == 0


def test_advection_conserves_mass_matches_dense():
    ops = operators(G11)
    rng = np.random.default_rng(0)
    rho = random_positive(G11, 1)
    u = rng.standard_normal(2 * G11.n_points)
    a = build_advection(rho, ops.dx, ops.dy)
    dense = -np.hstack([ops.dx.toarray() @ np.diag(rho), ops.dy.toarray() @ np.diag(rho)])
    assert np.allclose(a.toarray(), dense, atol=0)
    assert abs(np.ones(G11.n_points) @ (a @ u)) < 1e-10


def test_left_kernel_of_advection_is_constants_on_odd_grid():
    ops = operators(G9)
    a = build_advection(random_positive(G9, 2), ops.dx, ops.dy).toarray()
    u, s, _ = np.linalg.svd(a)
    rank = int(np.sum(s > 1e-10 * s[0]))
    assert a.shape[0] - rank == 1
    v = u[:, -1]
    assert np.ptp(v / v[0]) < 1e-10


def test_even_grid_warns_and_cancellation_rejects():
    g = GridSpec(10, 10, 0.4)
    ops = operators(g)
    rho = random_positive(g, 3)
    with pytest.warns(CancellationConsistencyWarning):
        build_advection(rho, ops.dx, ops.dy, g)
    with pytest.raises(CancellationConsistencyError, match="grid size"):
        min_norm_control(rho, 0.01, ops)


def test_fp_rhs_matches_dense_and_conserves_mass():
    ops = operators(G11)
    rng = np.random.default_rng(5)
    rho = random_positive(G11, 4)
    u = rng.standard_normal(2 * G11.n_points)
    T = 0.02
    dense = -np.hstack([ops.dx.toarray() @ np.diag(rho), ops.dy.toarray() @ np.diag(rho)]) @ u + T * (
        ops.lap.toarray() @ rho
    )
    got = fp_rhs(rho, u, T, ops)
    assert np.abs(got - dense).max() <= 1e-12 * np.abs(dense).max()
    assert abs(got.sum()) * G11.cell_area <= 1e-10


@given(arrays(float, 2 * 49, elements=st.floats(-5, 5)), st.floats(0, 1), st.integers(0, 2**31))
def test_mass_conservation_property(u, T, seed):
    g = GridSpec(7, 7, 0.3)
    rho = random_positive(g, seed)
    assert abs(fp_rhs(rho, u, T, operators(g)).sum()) * g.cell_area <= 1e-10


def test_constant_density_zero_control_is_stationary():
    ops = operators(G9)
    assert np.abs(fp_rhs(np.full(G9.n_points, 2.0), np.zeros(2 * G9.n_points), 0.3, ops)).max() < 1e-12


def test_min_norm_control_zero_diffusion():
    ops = operators(G9)
    assert np.array_equal(min_norm_control(random_positive(G9, 0), 0.0, ops), np.zeros(2 * G9.n_points))


def test_min_norm_control_matches_dense_pseudoinverse():
    # single-robot kernel floored at 1e-6 on 9x9, T = 0.01
    ops = operators(G9)
    rho = np.maximum(gaussian_density([[0.2, -0.4]], 1.0, G9), 1e-6)
    T = 0.01
    u = min_norm_control(rho, T, ops)
    b = -T * (ops.lap @ rho)
    a = build_advection(rho, ops.dx, ops.dy)
    assert np.linalg.norm(a @ u - b) <= 1e-8 * np.linalg.norm(b)
    ref = np.linalg.pinv(a.toarray(), rcond=1e-13) @ b
    assert np.abs(u - ref).max() <= 1e-6
    # cancelled dynamics are frozen
    assert np.abs(fp_rhs(rho, u, T, ops)).max() <= 1e-8


def test_min_norm_is_minimal_among_solutions():
    ops = operators(G9)
    rho = random_positive(G9, 7)
    T = 0.05
    u = min_norm_control(rho, T, ops)
    a = build_advection(rho, ops.dx, ops.dy).toarray()
    # add a null-space direction of A: still a solution, never shorter
    _, _, vt = np.linalg.svd(a)
    for k in range(1, 6):
        other = u + 0.3 * vt[-k]
        assert np.linalg.norm(a @ other - a @ u) < 1e-9
        assert np.linalg.norm(other) >= np.linalg.norm(u)


def test_min_norm_control_rejects_nonpositive_density():
    ops = operators(G9)
    rho = random_positive(G9, 8)
    rho[4] = 0.0
    with pytest.raises(ValueError):
        min_norm_control(rho, 0.01, ops)


@pytest.mark.parametrize("n", [9, 15, 21, 41])
def test_cancellation_residual_on_floored_swarm_density(n):
    g = GridSpec(n, n, 4.0 / (n - 1), (-2.0, -2.0))
    rho = np.maximum(gaussian_density([[-1.0, 1.2], [0.5, -0.3]], 1.0, g), DENSITY_FLOOR)
    res = cancellation_control(rho, 0.045, operators(g))
    assert res.relative_residual <= 1e-8


def test_neumann_cancellation_is_not_exact():
    # the even-index indicator is in ker A^T under the skew Neumann closure
    g = GridSpec(9, 9, 0.5, boundary=Boundary.NEUMANN)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = cancellation_control(random_positive(g, 9), 0.05, operators(g))
    assert res.relative_residual > 1e-8


def test_control_bounds_pad_and_widen():
    u = np.array([-0.5, 0.1, 1.0])
    lo, hi = control_bounds(u, pad=0.1)
    assert (lo, hi) == pytest.approx((-0.6, 1.1))
    lo, hi = control_bounds(u, pad=0.1, u_max=2.0)
    assert lo <= -2.0 and hi >= 2.0


def test_robot_densities_shape(grid41):
    assert robot_densities([[0, 0], [1, 1], [-1, 0.5]], 2.0, grid41).shape == (3, grid41.n_points)
