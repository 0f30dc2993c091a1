import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advimmu import unfolding as U
from advimmu.tensor import finite_diff_grad, relative_error
from advimmu.unfolding import ContrastConfig, UnfoldParams

SMALL_CONTRAST = ContrastConfig(tau=0.5, anchors=6, s_pos=4, s_neg=4)


def random_state(rng, c=3, h=4, w=4):
    z = rng.normal(size=(c, h, w))
    e = np.exp(z - z.max(axis=0))
    return e / e.sum(axis=0)


def test_hand_computed_single_pixel():
    x0 = np.array([0.5, 0.5]).reshape(2, 1, 1)
    labels = np.array([[0]])
    params = UnfoldParams(np.array([1.0]), np.array([0.0]), np.array([0.1]))
    _, trace = U.unfold_forward(x0, labels, params)
    eps = U.EPS
    # BD gradient by hand at the eps-smoothed target
    py = np.maximum(np.array([1.0, 0.0]), eps)
    py = py / py.sum()
    bc = math.sqrt(0.5 * py[0]) + math.sqrt(0.5 * py[1])
    g = np.array([-0.5 / bc * math.sqrt(py[c] / 0.5) for c in range(2)])
    z = np.array([0.5, 0.5]) - 0.1 * g
    c = np.clip(z, eps, 1.0)
    expect = eps + (1 - 2 * eps) * c / c.sum()
    np.testing.assert_allclose(trace.states[1].ravel(), expect, rtol=0, atol=1e-15)
    # the eps -> 0 values
    np.testing.assert_allclose(expect, [0.6 / 1.1, 0.5 / 1.1], atol=1e-4)


@pytest.mark.parametrize("which", ["eta", "weights"])
def test_zero_step_is_identity(which):
    rng = np.random.default_rng(0)
    x0 = random_state(rng)
    labels = rng.integers(0, 3, size=(4, 4))
    k = 3
    if which == "eta":
        params = UnfoldParams(np.ones(k), np.ones(k), np.zeros(k))
    else:
        params = UnfoldParams(np.zeros(k), np.zeros(k), np.full(k, 0.05))
    x_out, trace = U.unfold_forward(x0, labels, params, seed=1, contrast=SMALL_CONTRAST)
    assert x_out.tobytes() == (2 * x0).tobytes()
    assert trace.states[-1].tobytes() == x0.tobytes()
    if which == "eta":
        grads = U.unfold_backward(trace, rng.normal(size=x0.shape))
        np.testing.assert_array_equal(grads.alpha, 0)
        np.testing.assert_array_equal(grads.gamma, 0)


def test_k_zero():
    x0 = random_state(np.random.default_rng(1))
    x_out, trace = U.unfold_forward(x0, np.zeros((4, 4), dtype=int), UnfoldParams.init(0))
    assert x_out.tobytes() == x0.tobytes()
    assert len(trace.states) == 1
    g = np.ones_like(x0)
    np.testing.assert_array_equal(U.unfold_backward(trace, g).x0, g)


def full_loss(x0, labels, params, seed):
    x_out, _ = U.unfold_forward(x0, labels, params, seed, SMALL_CONTRAST)
    return U.total_loss(x_out, labels)[0]


@pytest.mark.parametrize("k", [1, 2, 5])
def test_last_layer_partials_match_fd(k):
    rng = np.random.default_rng(10 + k)
    x0 = random_state(rng)
    labels = rng.integers(0, 3, size=(4, 4))
    params = UnfoldParams(rng.uniform(0.5, 1.5, k), rng.uniform(0.5, 1.5, k), rng.uniform(0.01, 0.05, k))
    x_out, trace = U.unfold_forward(x0, labels, params, 4, SMALL_CONTRAST)
    _, g_out = U.total_loss(x_out, labels)
    grads = U.unfold_backward(trace, g_out)
    last = k - 1
    for name in ("alpha", "gamma", "eta"):

        def f(v, name=name):
            p = params.copy()
            getattr(p, name)[last] = v[0]
            return full_loss(x0, labels, p, 4)

        fd = finite_diff_grad(f, np.array([getattr(params, name)[last]]))
        analytic = getattr(grads, name)[last]
        assert relative_error(np.array([analytic]), fd) < 1e-4, name


def test_k1_x0_gradient_with_zero_step_is_exact():
    # with a zero step the layer is an identity, so dL/dx0 = 2 grad_out exactly
    rng = np.random.default_rng(3)
    x0 = random_state(rng)
    labels = rng.integers(0, 3, size=(4, 4))
    params = UnfoldParams(np.ones(1), np.ones(1), np.zeros(1))
    x_out, trace = U.unfold_forward(x0, labels, params)
    g = rng.normal(size=x0.shape)
    np.testing.assert_array_equal(U.unfold_backward(trace, g).x0, 2 * g)


def test_projection_vjp_matches_fd():
    rng = np.random.default_rng(4)
    z = rng.uniform(0.05, 0.9, size=(4, 2, 3))
    g = rng.normal(size=z.shape)
    fd = finite_diff_grad(lambda a: float(np.sum(g * U.project_state(a))), z)
    assert relative_error(U.project_state_vjp(z, g), fd) < 1e-5


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 4), eta=st.floats(0.0, 2.0))
def test_states_stay_valid(seed, k, eta):
    rng = np.random.default_rng(seed)
    x0 = random_state(rng)
    labels = rng.integers(0, 3, size=(4, 4))
    params = UnfoldParams(np.ones(k), np.ones(k), np.full(k, eta))
    _, trace = U.unfold_forward(x0, labels, params, seed % 1000, SMALL_CONTRAST)
    assert len(trace.states) == k + 1
    for s in trace.states[1:]:
        np.testing.assert_allclose(s.sum(axis=0), 1.0, atol=1e-12)
        assert s.min() >= U.EPS * (1 - 1e-9)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 4))
def test_replay_and_determinism(seed, k):
    rng = np.random.default_rng(seed)
    x0 = random_state(rng)
    labels = rng.integers(0, 3, size=(4, 4))
    params = UnfoldParams.init(k, eta0=0.2)
    a, ta = U.unfold_forward(x0, labels, params, 7, SMALL_CONTRAST)
    b, _ = U.unfold_forward(x0, labels, params, 7, SMALL_CONTRAST)
    assert a.tobytes() == b.tobytes()
    assert U.replay(ta).tobytes() == ta.states[-1].tobytes()


def test_total_loss_examples():
    labels = np.array([[0, 1], [2, 0]])
    onehot = (np.arange(3)[:, None, None] == labels[None]).astype(float)
    assert U.total_loss(50.0 * onehot, labels)[0] < 1e-20
    assert abs(U.total_loss(np.full((3, 2, 2), 0.7), labels)[0] - math.log(3)) < 1e-12
    x = np.random.default_rng(5).normal(size=(3, 2, 2))
    fd = finite_diff_grad(lambda a: U.total_loss(a, labels)[0], x)
    assert relative_error(U.total_loss(x, labels)[1], fd) < 1e-5


def test_errors():
    x0 = random_state(np.random.default_rng(6))
    with pytest.raises(ValueError):
        U.unfold_forward(x0, np.zeros((3, 3), dtype=int), UnfoldParams.init(1))
    _, trace = U.unfold_forward(x0, np.zeros((4, 4), dtype=int), UnfoldParams.init(1))
    with pytest.raises(ValueError):
        U.unfold_backward(trace, np.zeros((3, 4, 5)))
    with pytest.raises(ValueError):
        UnfoldParams.init(-1)


def test_eta_projection():
    p = UnfoldParams(np.ones(2), np.ones(2), np.array([-0.1, 0.2]))
    p.project()
    np.testing.assert_array_equal(p.eta, [0.0, 0.2])


def test_batch_forward_backward_averages():
    rng = np.random.default_rng(7)
    xs = np.stack([random_state(rng) for _ in range(3)])
    ys = rng.integers(0, 3, size=(3, 4, 4))
    params = UnfoldParams.init(2)
    loss, dx0, grads, traces = U.batch_forward_backward(xs, ys, params, [1, 2, 3], SMALL_CONTRAST)
    single = [full_loss(xs[i], ys[i], params, i + 1) for i in range(3)]
    assert abs(loss - np.mean(single)) < 1e-12
    assert len(traces) == 3 and dx0.shape == xs.shape
