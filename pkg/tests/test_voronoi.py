import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from swarmfp.grid import GridSpec
from swarmfp.voronoi import partition_grid

G = GridSpec(21, 21, 0.2, (-2.0, -2.0))
METHODS = ("brute", "sweep", "compiled")


def test_single_robot_owns_everything():
    p = partition_grid([[0.3, -0.7]], G)
    assert np.all(p.owner == 0) and p.counts.tolist() == [G.n_points]


def test_two_robots_split_at_bisector():
    p = partition_grid([[-1.0, 0.0], [1.0, 0.1]], G)
    x = G.points()[:, 0]
    assert np.all(p.owner[x < -0.1] == 0)
    assert np.all(p.owner[x > 0.1] == 1)


@pytest.mark.parametrize("method", METHODS)
def test_ties_go_to_lowest_index(method):
    # symmetric about x = 0; the column x = 0 is equidistant
    p = partition_grid([[-1.0, 0.0], [1.0, 0.0]], G, method=method)
    mid = np.isclose(G.points()[:, 0], 0.0)
    assert mid.sum() == 21 and np.all(p.owner[mid] == 0)
    dup = partition_grid([[0.5, 0.5], [0.5, 0.5]], G, method=method)
    assert dup.counts.tolist() == [G.n_points, 0]


@given(arrays(float, st.tuples(st.integers(1, 12), st.just(2)), elements=st.floats(-2, 2)))
def test_methods_agree(x):
    ref = partition_grid(x, G, method="brute").owner
    for m in ("sweep", "compiled"):
        assert np.array_equal(partition_grid(x, G, method=m).owner, ref)


@given(st.integers(0, 2**31))
def test_nearest_and_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, (int(rng.integers(2, 9)), 2))
    p = partition_grid(x, G)
    d2 = ((G.points()[:, None] - x[None]) ** 2).sum(2)
    assert np.allclose(d2[np.arange(G.n_points), p.owner], d2.min(1))
    perm = rng.permutation(len(x))
    q = partition_grid(x[perm], G)
    assert np.array_equal(perm[q.owner], p.owner)
    assert p.counts.sum() == G.n_points


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        partition_grid(np.zeros((0, 2)), G)
    with pytest.raises(ValueError):
        partition_grid([[0, 0]], G, method="kd")
