import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advimmu import regularizers as R
from advimmu.regularizers import ContrastSet
from advimmu.tensor import finite_diff_grad, relative_error


def random_probmap(rng, c=4, h=3, w=3):
    # softmax of unit-normal logits keeps entries well above the FD step
    z = rng.normal(size=(c, h, w))
    e = np.exp(z - z.max(axis=0))
    return R.to_probmap(e / e.sum(axis=0))


def test_bd_identical_is_zero():
    p = random_probmap(np.random.default_rng(0))
    assert abs(R.bd_loss(p, p)) <= 1e-9


def test_bd_half_vs_onehot():
    py = R.smooth_onehot(np.array([[0]]), 2, eps=1e-15)
    px = np.array([0.5, 0.5]).reshape(2, 1, 1)
    assert abs(R.bd_loss(px, py) - (-math.log(math.sqrt(0.5)))) < 1e-6
    assert abs(-math.log(math.sqrt(0.5)) - 0.34657) < 1e-5


def test_bd_eps_floor_finite():
    eps = 1e-8
    py = R.smooth_onehot(np.array([[0]]), 3)
    px = R.to_probmap(np.array([0.0, 0.5, 0.5]).reshape(3, 1, 1), eps)
    val = R.bd_loss(px, py)
    bc = sum(math.sqrt(a * b) for a, b in zip(px.ravel(), py.ravel()))
    assert np.isfinite(val) and val > 8
    assert abs(val + math.log(bc)) < 1e-12


def test_bd_grad_uniform_equal():
    h, w = 2, 3
    p = np.full((2, h, w), 0.5)
    np.testing.assert_allclose(R.bd_grad(p, p), -0.5 / (h * w), rtol=1e-14)


def test_bd_grad_vanishes_where_py_tiny():
    rng = np.random.default_rng(1)
    px = np.full((4, 3, 3), 0.25)
    py = R.smooth_onehot(rng.integers(0, 4, size=(3, 3)), 4)
    g = R.bd_grad(px, py)
    off = py < 1e-6
    assert np.all(np.abs(g[off]) < 1e-3 * np.abs(g[~off]).min())


def test_bd_grad_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        c, h, w = rng.integers(2, 6), rng.integers(1, 4), rng.integers(1, 4)
        px = random_probmap(rng, c, h, w)
        py = random_probmap(rng, c, h, w)
        fd = finite_diff_grad(lambda a: R.bd_loss(a, py), px)
        assert relative_error(R.bd_grad(px, py), fd) < 1e-5


def test_bd_shape_mismatch():
    with pytest.raises(ValueError):
        R.bd_loss(np.full((2, 2, 2), 0.5), np.full((2, 2, 3), 0.5))


def test_smooth_onehot():
    y = R.smooth_onehot(np.array([[1, 0]]), 3)
    np.testing.assert_allclose(y.sum(axis=0), 1.0, atol=1e-15)
    assert y.min() >= 1e-8 * 0.99
    assert y[1, 0, 0] > 0.99 and y[0, 0, 1] > 0.99
    with pytest.raises(ValueError):
        R.smooth_onehot(np.array([[3]]), 3)


# ---------------------------------------------------------------------------
# contrastive term


def direct_con_loss(x, U, V, tau):
    """Oracle without max-shifting: -log(sum_U e^{x.u/t} / (sum_U + sum_V))."""
    a = sum(math.exp(float(np.dot(x, u)) / tau) for u in U)
    b = a + sum(math.exp(float(np.dot(x, v)) / tau) for v in V)
    return -math.log(a / b)


def test_con_no_negatives():
    cs = ContrastSet(np.array([0.2, 0.8]), [[0.3, 0.7]], np.zeros((0, 2)))
    assert R.con_loss(cs) == 0.0
    assert np.all(R.con_grad(cs) == 0.0)


def test_con_equal_similarities_ln2():
    cs = ContrastSet(np.array([0.5, 0.5]), [[1.0, 0.0]], [[0.0, 1.0]])
    assert abs(R.con_loss(cs) - math.log(2)) < 1e-12


def test_con_dominant_positive():
    cs = ContrastSet(np.array([1.0, 0.0]), [[1.0, 0.0]], [[0.0, 1.0]], tau=0.01)
    assert R.con_loss(cs) < 1e-30


def test_con_loss_matches_direct():
    rng = np.random.default_rng(3)
    for _ in range(50):
        c = rng.integers(2, 6)
        x = rng.dirichlet(np.ones(c))
        U = rng.dirichlet(np.ones(c), size=rng.integers(1, 5))
        V = rng.dirichlet(np.ones(c), size=rng.integers(0, 5))
        cs = ContrastSet(x, U, V, tau=0.1)
        assert abs(R.con_loss(cs) - direct_con_loss(x, U, V, 0.1)) < 1e-10


def test_con_grad_oracle():
    rng = np.random.default_rng(4)
    for _ in range(100):
        c = rng.integers(2, 7)
        x = rng.dirichlet(np.ones(c))
        U = rng.dirichlet(np.ones(c), size=rng.integers(1, 6))
        V = rng.dirichlet(np.ones(c), size=rng.integers(1, 6))
        tau = rng.uniform(0.05, 1.0)
        cs = ContrastSet(x, U, V, tau)
        fd = finite_diff_grad(lambda a: direct_con_loss(a, U, V, tau), x)
        assert relative_error(R.con_grad(cs), fd) < 1e-5


def test_con_grad_u_equals_v():
    # with u == v the gradient is (v - u)-weighted, i.e. zero; checked against the oracle
    x = np.array([0.1, 0.6, 0.3])
    u = np.array([[0.2, 0.2, 0.6]])
    cs = ContrastSet(x, u, u.copy(), tau=0.2)
    fd = finite_diff_grad(lambda a: direct_con_loss(a, u, u, 0.2), x)
    np.testing.assert_allclose(R.con_grad(cs), fd, atol=1e-9)


def test_con_set_validation():
    with pytest.raises(ValueError):
        ContrastSet(np.ones(2), np.zeros((0, 2)), np.ones((1, 2)))
    with pytest.raises(ValueError):
        ContrastSet(np.ones(2), np.ones((1, 2)), np.ones((1, 2)), tau=0)


def test_con_loss_average_over_sets():
    a = ContrastSet(np.array([0.5, 0.5]), [[1.0, 0.0]], [[0.0, 1.0]])
    b = ContrastSet(np.array([0.2, 0.8]), [[0.3, 0.7]], np.zeros((0, 2)))
    assert abs(R.con_loss([a, b]) - math.log(2) / 2) < 1e-12
    assert R.con_loss([]) == 0.0


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), tau=st.floats(0.01, 2.0))
def test_con_loss_non_negative(seed, tau):
    rng = np.random.default_rng(seed)
    c = 4
    cs = ContrastSet(rng.dirichlet(np.ones(c)), rng.dirichlet(np.ones(c), size=3), rng.dirichlet(np.ones(c), size=2), tau)
    assert R.con_loss(cs) >= 0.0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_bd_self_distance_property(seed):
    p = random_probmap(np.random.default_rng(seed), 5, 2, 4)
    assert R.bd_loss(p, p) <= 1e-9


# ---------------------------------------------------------------------------
# sampling


def test_single_class_no_negatives():
    labels = np.zeros((4, 4), dtype=int)
    state = random_probmap(np.random.default_rng(5), 3, 4, 4)
    sets = R.sample_contrast_sets(labels, state, anchors=5, seed=1)
    assert len(sets) == 5
    assert all(len(s.negatives) == 0 for s in sets)
    assert R.con_loss(sets) == 0.0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), a=st.integers(1, 20), sp=st.integers(1, 10), sn=st.integers(1, 10))
def test_sampling_caps_membership_determinism(seed, a, sp, sn):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=(5, 6))
    state = random_probmap(rng, 3, 5, 6)
    sets = R.sample_contrast_sets(labels, state, a, sp, sn, seed=seed)
    again = R.sample_contrast_sets(labels, state, a, sp, sn, seed=seed)
    flat = labels.ravel()
    vecs = state.reshape(3, -1).T
    anchors = [s.anchor_index for s in sets]
    assert len(set(anchors)) == len(anchors) <= a
    for s, t in zip(sets, again):
        assert len(s.positives) <= sp and len(s.negatives) <= sn
        assert s.anchor_index not in s.positive_index
        assert np.all(flat[s.positive_index] == flat[s.anchor_index])
        assert np.all(flat[s.negative_index] != flat[s.anchor_index])
        np.testing.assert_array_equal(s.x, vecs[s.anchor_index])
        np.testing.assert_array_equal(s.positive_index, t.positive_index)
        np.testing.assert_array_equal(s.negative_index, t.negative_index)


def test_sampling_ignores_state_values():
    rng = np.random.default_rng(6)
    labels = rng.integers(0, 3, size=(6, 6))
    s1 = R.sample_contrast_sets(labels, random_probmap(rng, 3, 6, 6), seed=9)
    s2 = R.sample_contrast_sets(labels, random_probmap(rng, 3, 6, 6), seed=9)
    assert [s.anchor_index for s in s1] == [s.anchor_index for s in s2]


def test_contrast_grad_map_oracle():
    rng = np.random.default_rng(7)
    labels = rng.integers(0, 3, size=(4, 4))
    state = random_probmap(rng, 3, 4, 4)
    sets = R.sample_contrast_sets(labels, state, anchors=4, s_pos=3, s_neg=3, seed=2)
    g = R.contrast_grad_map(state, sets)

    # loss as a function of the anchor vectors only, positives/negatives fixed
    def f(st_):
        moved = [s.with_anchor(st_.reshape(3, -1)[:, s.anchor_index]) for s in sets]
        return R.con_loss(moved)

    fd = finite_diff_grad(f, state)
    assert relative_error(g, fd) < 1e-5


def test_refresh_sets_reads_new_state():
    rng = np.random.default_rng(8)
    labels = rng.integers(0, 2, size=(3, 3))
    s0 = random_probmap(rng, 2, 3, 3)
    s1 = random_probmap(rng, 2, 3, 3)
    sets = R.sample_contrast_sets(labels, s0, seed=3)
    fresh = R.refresh_sets(s1, sets)
    direct = R.sample_contrast_sets(labels, s1, seed=3)
    for a, b in zip(fresh, direct):
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.positives, b.positives)
