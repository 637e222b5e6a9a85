import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pomdp_ope.data import FbarBatch, HistoryBatch, WindowConfig
from pomdp_ope.errors import ConfigurationError
from pomdp_ope.features import (current_observation_features, custom_feature_map, fit_kernel, gaussian_kernel,
                                gram_matrix, linear_kernel, median_bandwidth, one_hot, one_hot_fbar, one_hot_history,
                                one_hot_index, quadratic_feature_map, quadratic_features)


def _all_fbars(n_obs=2, n_act=2):
    """Every F_bar for M=1, M_F=2: (z_o, z_a, f_o0, f_o1, f_a0)."""
    grid = np.array(np.meshgrid(*[range(n_obs), range(n_act), range(n_obs), range(n_obs), range(n_act)],
                                indexing="ij")).reshape(5, -1).T
    return FbarBatch(grid[:, [0]], grid[:, [1]], grid[:, 2:4], grid[:, [4]])


def test_one_hot_small_example():
    assert one_hot((2, 2), [1, 0]).tolist() == [0, 0, 1, 0]
    assert one_hot((), []).tolist() == [1.0]


def test_one_hot_index_ordering_and_range():
    assert one_hot_index((3, 2), [[2], [1]]).tolist() == [5]
    with pytest.raises(ConfigurationError):
        one_hot_index((3, 2), [[3], [0]])
    with pytest.raises(ConfigurationError):
        one_hot_index((3, 2), [[0]])


def test_one_hot_fbar_rows_are_orthonormal_basis():
    fm = one_hot_fbar(WindowConfig(1, 2, 2), 2, 2)
    batch = _all_fbars()
    x = fm.dense(batch)
    assert fm.dim == 32 and x.shape == (32, 32)
    assert np.allclose(x.sum(axis=1), 1.0)
    # distinct F_bar values map to orthogonal unit vectors
    assert np.allclose(x @ x.T, np.eye(32))


def test_one_hot_fbar_component_order():
    fm = one_hot_fbar(WindowConfig(1, 2, 2), 2, 2)
    batch = FbarBatch(np.array([[1]]), np.array([[0]]), np.array([[0, 1]]), np.array([[1]]))
    # sizes (z_o, z_a, f_o, f_o, f_a): index 1*16 + 0*8 + 0*4 + 1*2 + 1
    assert fm.index(batch).tolist() == [19]


def test_one_hot_history_and_current_observation():
    fm = one_hot_history(WindowConfig(0, 2, 1), 3, 2)
    hb = HistoryBatch(np.array([[2, 1]]), np.array([[0, 1]]), np.array([0]))
    assert fm.dim == 36
    assert fm.index(hb).tolist() == [np.ravel_multi_index((2, 1, 0, 1), (3, 3, 2, 2))]
    co = current_observation_features(3)
    assert co.dense(hb).tolist() == [[1.0, 0.0, 0.0]]


def test_memoryless_zero_width_history_is_constant():
    fm = one_hot_fbar(WindowConfig(0, 1, 1), 3, 2)
    batch = FbarBatch(np.zeros((2, 0), int), np.zeros((2, 0), int), np.array([[0], [2]]), np.zeros((2, 0), int))
    assert fm.dim == 3 and fm.dense(batch).tolist() == [[1, 0, 0], [0, 0, 1]]


def test_feature_map_validation():
    with pytest.raises(ConfigurationError):
        custom_feature_map("bogus", 1, lambda b: np.zeros((len(b), 1)))
    fm = custom_feature_map("fbar", 2, lambda b: np.zeros((len(b), 3)))
    with pytest.raises(ConfigurationError):
        fm.transform(_all_fbars())
    with pytest.raises(ConfigurationError):
        fm.index(_all_fbars())


def test_quadratic_features_examples():
    assert quadratic_features([0.0, 0.0]).tolist() == [1, 0, 0, 0, 0]
    assert quadratic_features([1.0, 0.0]).tolist() == [1, 1, 0, 0, 0]
    assert quadratic_features([1.0, 2.0]).tolist() == [1, 1, 2, 2, 4]
    with pytest.raises(ConfigurationError):
        quadratic_features([np.nan, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.permutations([0, 1, 2]))
def test_quadratic_permutation_equivariance(x, perm):
    x = np.array(x)
    perm = np.array(perm)
    base = quadratic_features(x)[1:].reshape(3, 3)
    moved = quadratic_features(x[perm])[1:].reshape(3, 3)
    assert np.allclose(moved, base[np.ix_(perm, perm)])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=2, max_size=2))
def test_quadratic_box_scaling_bounds_norm(x):
    assert np.linalg.norm(quadratic_features(x, box=2.0)) <= 1 + 1e-12


def test_quadratic_feature_map_on_batch():
    fm = quadratic_feature_map("history", 2)
    hb = HistoryBatch(np.array([[[1.0]]]), np.array([[[2.0]]]), np.zeros((1, 1)))
    assert fm.dim == 5 and np.allclose(fm.dense(hb), [[1, 1, 2, 2, 4]])


def test_gaussian_gram_properties():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(30, 3))
    g = gram_matrix(gaussian_kernel("fbar", 1.3), pts)
    assert np.allclose(np.diag(g), 1.0)
    assert np.max(np.abs(g - g.T)) < 1e-12
    assert np.linalg.eigvalsh(g).min() > -1e-10


def test_linear_kernel_is_inner_product():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(10, 4))
    assert np.allclose(gram_matrix(linear_kernel("fbar"), pts), pts @ pts.T)
    fm = one_hot_fbar(WindowConfig(1, 2, 2), 2, 2)
    batch = _all_fbars()
    assert np.allclose(gram_matrix(linear_kernel("fbar", fm), batch), np.eye(32))


def test_gram_of_empty_input_raises():
    with pytest.raises(ConfigurationError):
        gram_matrix(linear_kernel("fbar"), np.zeros((0, 2)))


def test_median_bandwidth_and_fit():
    pts = np.array([[0.0], [1.0], [3.0]])
    assert median_bandwidth(pts) == 2.0
    assert median_bandwidth(np.zeros((3, 2))) == 1.0
    k = fit_kernel(gaussian_kernel("fbar"), pts)
    assert k.params["bandwidth"] == 2.0
    assert np.isclose(k([0.0], [2.0]), np.exp(-0.5))
    with pytest.raises(ConfigurationError):
        gaussian_kernel("fbar")([0.0], [1.0])
    with pytest.raises(ConfigurationError):
        gaussian_kernel("fbar", -1.0)
