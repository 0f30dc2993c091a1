import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advimmu import metrics as M


def pixel_count_metrics(pred, gt, n):
    """Loop oracle: per-class counts straight from the pixels."""
    ious, pres, recs, f1s = [], [], [], []
    for c in range(n):
        tp = fp = fn = 0
        for p, g in zip(pred.ravel(), gt.ravel()):
            tp += p == c and g == c
            fp += p == c and g != c
            fn += p != c and g == c
        if tp + fp + fn == 0:
            continue
        pre = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        ious.append(tp / (tp + fp + fn))
        pres.append(pre)
        recs.append(rec)
        f1s.append(2 * pre * rec / (pre + rec) if pre + rec else 0.0)
    return {k: 100 * float(np.mean(v)) for k, v in zip(("mIoU", "mPre", "mRec", "mF1"), (ious, pres, recs, f1s))}


def brute_force_bijective(pred, gt):
    g_ids, p_ids = np.unique(gt), np.unique(pred)
    table = np.zeros((g_ids.size, p_ids.size))
    for i, g in enumerate(g_ids):
        for j, p in enumerate(p_ids):
            inter = np.sum((gt == g) & (pred == p))
            union = np.sum((gt == g) | (pred == p))
            table[i, j] = 100 * inter / union
    best = -1.0
    slots = list(range(p_ids.size)) + [None] * g_ids.size
    for perm in itertools.permutations(slots, g_ids.size):
        used = [c for c in perm if c is not None]
        if len(used) != len(set(used)):
            continue
        vals = [table[i, c] if c is not None else 0.0 for i, c in enumerate(perm)]
        best = max(best, float(np.mean(vals)))
    return best


def test_confusion_examples():
    gt = np.array([[0, 1], [1, 0]])
    cm = M.confusion_matrix(gt, gt, 2)
    np.testing.assert_array_equal(cm.counts, [[2, 0], [0, 2]])
    assert cm.total == 4
    cm = M.confusion_matrix(np.ones(5, dtype=int), np.zeros(5, dtype=int), 2)
    np.testing.assert_array_equal(cm.counts, [[0, 5], [0, 0]])


def test_confusion_errors():
    with pytest.raises(ValueError):
        M.confusion_matrix(np.zeros(3, dtype=int), np.zeros(4, dtype=int), 2)
    with pytest.raises(ValueError):
        M.confusion_matrix(np.array([2]), np.array([0]), 2)
    with pytest.raises(ValueError):
        M.confusion_matrix(np.array([0]), np.array([-1]), 2)


def test_perfect_prediction():
    gt = np.array([0, 0, 1, 1])
    assert M.seg_metrics(M.confusion_matrix(gt, gt, 2)).summary() == {"mIoU": 100.0, "mPre": 100.0, "mRec": 100.0, "mF1": 100.0}


def test_half_of_class_one_missed():
    gt = np.array([0] * 10 + [1] * 10)
    pred = np.array([0] * 10 + [0] * 5 + [1] * 5)
    m = M.seg_metrics(M.confusion_matrix(pred, gt, 2))
    np.testing.assert_allclose(m.iou, [100 * 10 / 15, 50.0])
    assert abs(m.miou - 58.3333333) < 1e-6


def test_absent_class_excluded():
    gt = np.array([0, 1, 1])
    m = M.seg_metrics(M.confusion_matrix(gt, gt, 4))
    assert m.miou == 100.0
    assert list(m.present) == [True, True, False, False]


def test_against_pixel_counting():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 6))
        shape = tuple(rng.integers(1, 7, size=2))
        gt, pred = rng.integers(0, n, size=shape), rng.integers(0, n, size=shape)
        got = M.seg_metrics(M.confusion_matrix(pred, gt, n)).summary()
        want = pixel_count_metrics(pred, gt, n)
        for k in want:
            assert abs(got[k] - want[k]) <= 1e-12


def test_mapped_identity_and_permutation():
    rng = np.random.default_rng(1)
    gt = rng.integers(0, 4, size=(6, 6))
    plain = M.seg_metrics(M.confusion_matrix(gt, gt, 4)).miou
    perm = np.array([2, 0, 3, 1])
    for mode in ("per-class-max", "bijective"):
        assert M.mapped_miou(gt, gt, mode).miou == plain
        assert M.mapped_miou(perm[gt], gt, mode).miou == plain


def test_bijective_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(100):
        g, k = int(rng.integers(1, 5)), int(rng.integers(1, 6))
        shape = tuple(rng.integers(2, 6, size=2))
        gt, pred = rng.integers(0, g, size=shape), rng.integers(0, k, size=shape)
        bij = M.mapped_miou(pred, gt, "bijective").miou
        assert abs(bij - brute_force_bijective(pred, gt)) <= 1e-9
        assert M.mapped_miou(pred, gt, "per-class-max").miou >= bij - 1e-12


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), g=st.integers(1, 5), k=st.integers(1, 6))
def test_mapping_invariants(seed, g, k):
    rng = np.random.default_rng(seed)
    gt, pred = rng.integers(0, g, size=(5, 5)), rng.integers(0, k, size=(5, 5))
    relabel = rng.permutation(k) + 10
    for mode in ("per-class-max", "bijective"):
        a = M.mapped_miou(pred, gt, mode).miou
        assert abs(a - M.mapped_miou(relabel[pred], gt, mode).miou) < 1e-9
        assert a >= 0
    assert M.mapped_miou(pred, gt).miou >= M.mapped_miou(pred, gt, "bijective").miou - 1e-12


def test_mapped_errors():
    with pytest.raises(ValueError):
        M.mapped_miou(np.zeros(3, dtype=int), np.zeros(4, dtype=int))
    with pytest.raises(ValueError):
        M.mapped_miou(np.zeros(3, dtype=int), np.zeros(3, dtype=int), "greedy")


def test_remap():
    pred = np.array([5, 7, 5, 9])
    np.testing.assert_array_equal(M.remap(pred, {0: 7, 1: 5}), [1, 0, 1, -1])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 6))
def test_diagonal_is_perfect(seed, n):
    counts = np.diag(np.random.default_rng(seed).integers(1, 50, size=n))
    m = M.seg_metrics(M.ConfusionMatrix(counts))
    assert m.summary() == {"mIoU": 100.0, "mPre": 100.0, "mRec": 100.0, "mF1": 100.0}


def test_csv_empty_and_round_trip(tmp_path):
    M.write_metrics_csv([], tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == "epoch,split,mIoU,mPre,mRec,mF1\n"
    recs = [
        M.summary_record(1, "train", {"mIoU": 12.5, "mPre": 1 / 3, "mRec": 0.0, "mF1": 99.0}, {"alpha_1": 1.0, "gamma_1": 0.5, "eta_1": 0.05}),
        M.summary_record(1, "val", {"mIoU": 10.0, "mPre": 2.0, "mRec": 3.0, "mF1": 4.0}, {"alpha_1": 1.0, "gamma_1": 0.5, "eta_1": 0.05}),
    ]
    M.write_metrics_csv(recs, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "epoch,split,mIoU,mPre,mRec,mF1,alpha_1,gamma_1,eta_1"
    assert lines[1] == "1,train,12.500000,0.333333,0.000000,99.000000,1.000000,0.500000,0.050000"
    back = M.read_metrics_csv(tmp_path / "m.csv")
    assert back[1] == recs[1]
    M.write_metrics_csv(recs, tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_bytes() == (tmp_path / "m.csv").read_bytes()


def test_csv_schema_mismatch(tmp_path):
    with pytest.raises(ValueError):
        M.write_metrics_csv([{"epoch": 1}], tmp_path / "x.csv")
