import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advimmu import sbicac as S
from advimmu.metrics import mapped_miou


def two_groups():
    return np.array([[1.0, 0.0]] * 5 + [[0.0, 1.0]] * 5)


def test_orthogonal_groups_fixed_point():
    x = two_groups()
    init = np.array([[1.0, 0.0], [0.0, 1.0]])
    res = S.sbicac_cluster(x, 2, init=init)
    assert res.iterations == 1 and res.converged
    np.testing.assert_array_equal(res.labels, [0] * 5 + [1] * 5)
    np.testing.assert_array_equal(res.centroids, init)
    truth = np.array([0] * 5 + [1] * 5)
    for mode in ("per-class-max", "bijective"):
        assert mapped_miou(res.labels, truth, mode).miou == 100.0


def test_identical_rows_reseed():
    x = np.ones((6, 3))
    with pytest.warns(RuntimeWarning):
        res = S.sbicac_cluster(x, 3, seed=0)
    # every row ties, so the lowest index wins the assignment
    np.testing.assert_array_equal(res.labels, 0)
    assert res.labels.max() < 3


def test_empty_cluster_reseeded_to_farthest_row():
    x = np.array([[1.0, 0.0], [0.9, 0.1], [0.1, 0.2]])
    labels = np.array([0, 0, 0])
    sim = x @ np.array([[1.0, 0.0], [5.0, 5.0]]).T
    new = S.update_centroids(x, labels, 2, sim)
    np.testing.assert_allclose(new[0], x.mean(axis=0))
    # row 2 has the smallest best similarity
    np.testing.assert_array_equal(new[1], x[2])


def test_determinism():
    x = np.random.default_rng(0).random((50, 4))
    a = S.sbicac_cluster(x, 4, seed=3)
    b = S.sbicac_cluster(x, 4, seed=3)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.centroids.tobytes() == b.centroids.tobytes()


def test_init_centroids_contract():
    x = np.random.default_rng(1).random((7, 3))
    full = S.init_centroids(x, 7, seed=2)
    assert sorted(map(tuple, full)) == sorted(map(tuple, x))
    np.testing.assert_array_equal(S.init_centroids(x, 3, seed=5), S.init_centroids(x, 3, seed=5))
    for row in S.init_centroids(x, 4, seed=9):
        assert any(np.array_equal(row, r) for r in x)


def test_errors():
    x = np.random.default_rng(2).random((3, 2))
    with pytest.raises(ValueError):
        S.sbicac_cluster(x, 4)
    bad = x.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        S.sbicac_cluster(bad, 2)
    with pytest.raises(ValueError):
        S.sbicac_cluster(x, 2, max_iter=0)
    with pytest.raises(ValueError):
        S.sbicac_restarts(x, 2, restarts=0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(5, 40), k=st.integers(1, 5), max_iter=st.integers(1, 30))
def test_iteration_properties(seed, n, k, max_iter):
    rng = np.random.default_rng(seed)
    x = rng.random((n, 3))
    res = S.sbicac_cluster(x, k, max_iter=max_iter, seed=seed, record=True)
    assert 1 <= res.iterations <= max_iter
    assert res.labels.min() >= 0 and res.labels.max() < k
    # every step assigns each row to a most-similar centroid, ties to the lowest index
    for cents, labels in res.history:
        sim = x @ cents.T
        best = sim.max(axis=1)
        np.testing.assert_array_equal(sim[np.arange(n), labels], best)
        for i in range(n):
            assert labels[i] == np.flatnonzero(sim[i] == best[i])[0]
    if res.converged:
        for j in np.unique(res.labels):
            np.testing.assert_allclose(res.centroids[j], x[res.labels == j].mean(axis=0), rtol=1e-5, atol=1e-8)


def test_restarts_single_equals_plain():
    x = np.random.default_rng(3).random((30, 3))
    a = S.sbicac_restarts(x, 3, restarts=1, seed=4)
    b = S.sbicac_cluster(x, 3, seed=4)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_restarts_pick_best_objective():
    x = np.random.default_rng(5).random((40, 3))
    best = S.sbicac_restarts(x, 4, restarts=5, seed=1)
    runs = [S.sbicac_cluster(x, 4, seed=[1, r]) for r in range(5)]
    assert S.objective(x, best) == max(S.objective(x, r) for r in runs)


def test_objective_identity():
    x = np.random.default_rng(6).random((25, 3))
    res = S.sbicac_cluster(x, 3, seed=0)
    assert res.converged
    # empty clusters hold a reseeded row and contribute nothing
    direct = 0.0
    for j in np.unique(res.labels):
        members = x[res.labels == j]
        m = members.mean(axis=0)
        direct += len(members) * m @ m
    assert abs(S.objective(x, res) - direct) < 1e-6


def test_features_examples():
    img = np.zeros((4, 4, 3))
    img[:, 2:] = 0.8
    inst = np.zeros((4, 4), dtype=int)
    inst[:, 2:] = 1
    f = S.segments_to_features(img, inst)
    assert f.shape == (16, 5)
    assert len(np.unique(f, axis=0)) == 2
    assert f.min() >= 0 and f.max() <= 1
    np.testing.assert_allclose(f[0], [0, 0, 0, 0.125, 0.375])
    # same colour, different position
    gray = np.full((4, 4, 3), 0.5)
    g = S.segments_to_features(gray, inst)
    assert len(np.unique(g, axis=0)) == 2
    np.testing.assert_array_equal(g[:, :3], 0.5)


def test_features_errors():
    with pytest.raises(ValueError):
        S.segments_to_features(np.zeros((4, 4, 3)), np.zeros((4, 5), dtype=int))
    with pytest.raises(ValueError):
        S.segments_to_features(np.zeros((2, 2, 3)), np.array([[0, -1], [0, 0]]))


def test_labels_to_classmap():
    labels = np.arange(12) % 3
    m = S.labels_to_classmap(labels, 3, 4)
    np.testing.assert_array_equal(m.reshape(-1), labels)
    assert m.max() < 3
    np.testing.assert_array_equal(S.labels_to_classmap(np.zeros(6), 2, 3), 0)
    with pytest.raises(ValueError):
        S.labels_to_classmap(labels, 5, 5)
