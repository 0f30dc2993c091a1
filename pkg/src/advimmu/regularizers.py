"""Bhattacharyya and InfoNCE regularizers with closed-form gradients.

Probability maps are C x H x W (class axis first). The Bhattacharyya term is
evaluated per pixel over the class distribution and averaged over pixels. The
contrastive term works on per-pixel class vectors: an anchor ``x``, positives
``U`` of the same label and negatives ``V`` of other labels, with inner-product
similarity and temperature ``tau``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

EPS = 1e-8


def to_probmap(p: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Clamp to ``eps`` and renormalize along the class axis (axis 0)."""
    q = np.maximum(np.asarray(p, dtype=np.float64), eps)
    return q / q.sum(axis=0, keepdims=True)


def smooth_onehot(labels: np.ndarray, n_classes: int, eps: float = EPS) -> np.ndarray:
    """One-hot C x H x W map floored at ``eps`` and renormalized."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    onehot = (np.arange(n_classes).reshape((-1,) + (1,) * labels.ndim) == labels[None]).astype(np.float64)
    return to_probmap(onehot, eps)


def _check_pair(px: np.ndarray, py: np.ndarray) -> None:
    if px.shape != py.shape:
        raise ValueError(f"shape mismatch {px.shape} vs {py.shape}")
    if np.any(px <= 0) or np.any(py < 0):
        raise ValueError("probabilities must be positive (P_X) / non-negative (P_Y)")


def bhattacharyya_coefficient(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    return np.sqrt(px * py).sum(axis=0)


def bd_loss(px: np.ndarray, py: np.ndarray) -> float:
    """Mean over pixels of ``-ln sum_c sqrt(P_X[c] P_Y[c])``."""
    px, py = np.asarray(px, dtype=np.float64), np.asarray(py, dtype=np.float64)
    _check_pair(px, py)
    return float(np.mean(-np.log(bhattacharyya_coefficient(px, py))))


def bd_grad(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """d bd_loss / d P_X, elementwise.

    Each entry is ``-1/2 * (1 / BC_p) * sqrt(P_Y / P_X)`` divided by the pixel
    count, ``BC_p`` being the pixel's Bhattacharyya coefficient.
    """
    px, py = np.asarray(px, dtype=np.float64), np.asarray(py, dtype=np.float64)
    _check_pair(px, py)
    n_pixels = px[0].size
    bc = bhattacharyya_coefficient(px, py)
    return -0.5 * (1.0 / bc)[None] * np.sqrt(py / px) / n_pixels


@dataclass
class ContrastSet:
    x: np.ndarray  # anchor, shape (C,)
    positives: np.ndarray  # (|U|, C)
    negatives: np.ndarray  # (|V|, C), may have zero rows
    tau: float = 0.1
    anchor_index: int = -1
    positive_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    negative_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        dim = self.x.shape[0]
        self.positives = np.asarray(self.positives, dtype=np.float64).reshape(-1, dim)
        self.negatives = np.asarray(self.negatives, dtype=np.float64).reshape(-1, dim)
        if len(self.positives) == 0:
            raise ValueError("contrast set needs at least one positive")
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")

    def with_anchor(self, x: np.ndarray) -> "ContrastSet":
        return ContrastSet(x, self.positives, self.negatives, self.tau,
                           self.anchor_index, self.positive_index, self.negative_index)


def con_terms(cs: ContrastSet):
    """``(A, B, grad A, grad B)`` for one anchor.

    A and B are both scaled by ``exp(-m)``, m being the largest logit
    ``sigma / tau``; every ratio used downstream is invariant to that factor.
    """
    su = cs.positives @ cs.x / cs.tau
    sv = cs.negatives @ cs.x / cs.tau
    m = max(su.max(), sv.max()) if sv.size else su.max()
    wu = np.exp(su - m)
    wv = np.exp(sv - m)
    a = wu.sum()
    b = a + wv.sum()
    grad_a = (wu @ cs.positives) / cs.tau
    grad_b = grad_a + (wv @ cs.negatives) / cs.tau
    return a, b, grad_a, grad_b


def _as_list(cs) -> list[ContrastSet]:
    return [cs] if isinstance(cs, ContrastSet) else list(cs)


def con_loss(cs: ContrastSet | Sequence[ContrastSet]) -> float:
    """``-log(A / B)``, averaged over anchors when given several sets."""
    sets = _as_list(cs)
    if not sets:
        return 0.0
    total = 0.0
    for s in sets:
        a, b, _, _ = con_terms(s)
        total += np.log(b) - np.log(a)
    return float(total / len(sets))


def con_grad(cs: ContrastSet) -> np.ndarray:
    """Gradient of the single-anchor loss w.r.t. the anchor: ``grad B / B - grad A / A``."""
    a, b, grad_a, grad_b = con_terms(cs)
    return grad_b / b - grad_a / a


def sample_contrast_sets(
    labels: np.ndarray,
    state: np.ndarray,
    anchors: int = 16,
    s_pos: int = 32,
    s_neg: int = 32,
    seed=0,
    tau: float = 0.1,
) -> list[ContrastSet]:
    """Sample anchors with positive/negative pixel sets from a label map.

    Anchors are drawn uniformly without replacement among pixels whose class
    has at least one other pixel (the anchor never counts as its own
    positive). Pixel vectors are read from ``state`` (C x H x W). Sampling
    depends on ``labels`` and ``seed`` only, never on the state values.
    """
    if min(anchors, s_pos, s_neg) < 1:
        raise ValueError("anchors, s_pos and s_neg must all be >= 1")
    flat = np.asarray(labels).reshape(-1)
    vecs = np.asarray(state, dtype=np.float64).reshape(state.shape[0], -1).T  # (HW, C)
    if vecs.shape[0] != flat.size:
        raise ValueError(f"state {state.shape} does not match labels {np.shape(labels)}")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(flat, return_counts=True)
    eligible = np.flatnonzero(np.isin(flat, classes[counts >= 2]))
    if eligible.size == 0:
        return []
    chosen = rng.choice(eligible, size=min(anchors, eligible.size), replace=False)
    chosen.sort()
    by_class = {int(c): np.flatnonzero(flat == c) for c in classes}
    sets = []
    for idx in chosen:
        c = int(flat[idx])
        same = by_class[c]
        same = same[same != idx]
        pos = np.sort(rng.choice(same, size=min(s_pos, same.size), replace=False))
        other = np.flatnonzero(flat != c)
        neg = np.sort(rng.choice(other, size=min(s_neg, other.size), replace=False)) if other.size else other
        sets.append(ContrastSet(vecs[idx], vecs[pos], vecs[neg], tau, int(idx), pos, neg))
    return sets


def contrast_grad_map(state: np.ndarray, sets: Sequence[ContrastSet]) -> np.ndarray:
    """Gradient of the anchor-averaged contrastive loss scattered into a C x H x W map.

    Only anchor pixels receive gradient; positives and negatives are held fixed.
    """
    grad = np.zeros((state.shape[0], state[0].size))
    if not sets:
        return grad.reshape(state.shape)
    n = len(sets)
    for s in sets:
        grad[:, s.anchor_index] += con_grad(s) / n
    return grad.reshape(state.shape)


def refresh_sets(state: np.ndarray, sets: Sequence[ContrastSet]) -> list[ContrastSet]:
    """Re-read every set's vectors from a new state, keeping the sampled pixel indices."""
    vecs = np.asarray(state, dtype=np.float64).reshape(state.shape[0], -1).T
    return [
        ContrastSet(vecs[s.anchor_index], vecs[s.positive_index], vecs[s.negative_index], s.tau,
                    s.anchor_index, s.positive_index, s.negative_index)
        for s in sets
    ]
