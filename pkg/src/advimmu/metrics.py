"""Confusion-matrix segmentation metrics and cluster-id mapped mIoU.

All metric values are percentages. A class that appears in neither the
ground truth nor the prediction is left out of every mean; a 0/0 cell for a
class that does appear evaluates to 0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

BASE_COLUMNS = ("epoch", "split", "mIoU", "mPre", "mRec", "mF1")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: ground truth, cols: prediction
    class_names: tuple[str, ...] = ()

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.class_names or other.class_names)


def confusion_matrix(pred, gt, n_gt: int, n_pred: int | None = None, class_names=()) -> ConfusionMatrix:
    pred, gt = np.asarray(pred), np.asarray(gt)
    n_pred = n_gt if n_pred is None else n_pred
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
    if gt.size and (gt.min() < 0 or gt.max() >= n_gt):
        raise ValueError(f"ground-truth id out of range [0, {n_gt})")
    if pred.size and (pred.min() < 0 or pred.max() >= n_pred):
        raise ValueError(f"predicted id out of range [0, {n_pred})")
    flat = gt.reshape(-1).astype(np.int64) * n_pred + pred.reshape(-1).astype(np.int64)
    counts = np.bincount(flat, minlength=n_gt * n_pred).reshape(n_gt, n_pred)
    return ConfusionMatrix(counts, tuple(class_names))


def _div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


@dataclass
class SegMetrics:
    iou: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    present: np.ndarray  # classes counted in the means

    def _mean(self, v: np.ndarray) -> float:
        return float(v[self.present].mean()) if self.present.any() else 0.0

    @property
    def miou(self) -> float:
        return self._mean(self.iou)

    @property
    def mpre(self) -> float:
        return self._mean(self.precision)

    @property
    def mrec(self) -> float:
        return self._mean(self.recall)

    @property
    def mf1(self) -> float:
        return self._mean(self.f1)

    def summary(self) -> dict[str, float]:
        return {"mIoU": self.miou, "mPre": self.mpre, "mRec": self.mrec, "mF1": self.mf1}


def seg_metrics(cm: ConfusionMatrix) -> SegMetrics:
    c = np.asarray(cm.counts, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"seg_metrics needs a square confusion matrix, got {c.shape}")
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    iou = _div(tp, tp + fp + fn)
    pre = _div(tp, tp + fp)
    rec = _div(tp, tp + fn)
    f1 = _div(2 * pre * rec, pre + rec)
    present = (c.sum(axis=0) + c.sum(axis=1)) > 0
    return SegMetrics(100 * iou, 100 * pre, 100 * rec, 100 * f1, present)


def iou_table(pred, gt) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """IoU (%) between every present gt class (rows) and every present cluster id (cols)."""
    pred, gt = np.asarray(pred).reshape(-1), np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: prediction {np.shape(pred)} vs ground truth {np.shape(gt)}")
    g_ids, g_inv = np.unique(gt, return_inverse=True)
    p_ids, p_inv = np.unique(pred, return_inverse=True)
    inter = np.bincount(g_inv * p_ids.size + p_inv, minlength=g_ids.size * p_ids.size)
    inter = inter.reshape(g_ids.size, p_ids.size).astype(np.float64)
    union = inter.sum(axis=1, keepdims=True) + inter.sum(axis=0, keepdims=True) - inter
    return 100 * _div(inter, union), g_ids, p_ids


@dataclass
class MappedResult:
    miou: float
    mapping: dict[int, int]  # gt class -> cluster id (absent when unmatched)
    per_class: dict[int, float]


def mapped_miou(pred, gt, mode: str = "per-class-max") -> MappedResult:
    """mIoU after aligning cluster ids with gt classes; mean over gt classes present.

    ``per-class-max`` gives every gt class its best cluster (many-to-one allowed).
    ``bijective`` finds the one-to-one matching with the largest summed IoU;
    unmatched gt classes score 0.
    """
    if np.shape(pred) != np.shape(gt):
        raise ValueError(f"shape mismatch: prediction {np.shape(pred)} vs ground truth {np.shape(gt)}")
    table, g_ids, p_ids = iou_table(pred, gt)
    per_class = {int(g): 0.0 for g in g_ids}
    mapping: dict[int, int] = {}
    if mode == "per-class-max":
        best = table.argmax(axis=1)
        for i, g in enumerate(g_ids):
            mapping[int(g)] = int(p_ids[best[i]])
            per_class[int(g)] = float(table[i, best[i]])
    elif mode == "bijective":
        rows, cols = linear_sum_assignment(table, maximize=True)
        for r, c in zip(rows, cols):
            mapping[int(g_ids[r])] = int(p_ids[c])
            per_class[int(g_ids[r])] = float(table[r, c])
    else:
        raise ValueError(f"unknown mapping mode {mode!r}")
    values = np.array([per_class[int(g)] for g in g_ids])
    return MappedResult(float(values.mean()) if values.size else 0.0, mapping, per_class)


def remap(pred, mapping: dict[int, int], fill: int = -1) -> np.ndarray:
    """Translate cluster ids to gt classes via ``mapping`` (gt -> cluster); unmapped ids get ``fill``."""
    pred = np.asarray(pred)
    lut = {c: g for g, c in mapping.items()}
    out = np.full(pred.shape, fill, dtype=np.int64)
    for c, g in lut.items():
        out[pred == c] = g
    return out


# ---------------------------------------------------------------------------
# CSV


def metric_columns(k_layers: int = 0) -> list[str]:
    cols = list(BASE_COLUMNS)
    for name in ("alpha", "gamma", "eta"):
        cols += [f"{name}_{k + 1}" for k in range(k_layers)]
    return cols


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def write_metrics_csv(records: Sequence[dict], path, columns: Iterable[str] | None = None) -> None:
    """Header plus one row per record; floats are written with 6 decimals.

    Columns default to the base schema extended by whatever per-layer
    ``alpha_k/gamma_k/eta_k`` keys the records carry.
    """
    if columns is None:
        k = 0
        for r in records:
            k = max(k, sum(1 for key in r if key.startswith("alpha_")))
        columns = metric_columns(k)
    columns = list(columns)
    for r in records:
        extra = set(r) - set(columns)
        missing = set(columns) - set(r)
        if extra or missing:
            raise ValueError(f"record schema mismatch: extra {sorted(extra)}, missing {sorted(missing)}")
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in records:
            w.writerow([_fmt(r[c]) for c in columns])


def read_metrics_csv(path) -> list[dict]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            rec = {}
            for k, v in row.items():
                if k == "split":
                    rec[k] = v
                elif k == "epoch":
                    rec[k] = int(v)
                else:
                    rec[k] = float(v)
            out.append(rec)
    return out


def summary_record(epoch: int, split: str, m: dict[str, float], extra: dict | None = None) -> dict:
    rec = {"epoch": int(epoch), "split": split, **{k: float(m[k]) for k in ("mIoU", "mPre", "mRec", "mF1")}}
    if extra:
        rec.update(extra)
    return rec


def ensure_parent(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p
