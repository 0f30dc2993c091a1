"""Temporal feature units, fusion preparation and globally shuffled batching.

Per frame ``t`` with history depth ``d``:

* instant unit      -- the current frame itself
* integral unit     -- per-pixel mean of the ``d`` previous frames
* derivative unit   -- per-pixel mean of ``F_t - F_{t-i}`` for ``i = 1..d``

History before the first frame is clamped to frame 0, so every frame yields a
segment and nothing is read outside the sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .synth import FrameSequence

FUSION_MODES = ("EF", "LF")


@dataclass(frozen=True)
class LsmConfig:
    depth: int = 1
    fusion: str = "EF"
    boundary: str = "clamp"

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError(f"LSM depth must be >= 1, got {self.depth}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.boundary != "clamp":
            raise ValueError("only the clamp-to-first-frame boundary policy is supported")


@dataclass
class LsmSegment:
    t: int
    insu: np.ndarray  # H x W x 3
    intu: np.ndarray
    du: np.ndarray
    sequence_id: str
    labels: np.ndarray | None = None  # H x W, carried along for training

    def channels_first(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(np.ascontiguousarray(a.transpose(2, 0, 1)) for a in (self.insu, self.intu, self.du))


def compute_insu(frame: np.ndarray) -> np.ndarray:
    return np.array(frame, dtype=np.float64, copy=True)


def compute_intu(past: Sequence[np.ndarray]) -> np.ndarray:
    """Mean of the past frames (any count >= 1).

    Computed as an offset from the first frame so identical frames average to
    exactly that frame.
    """
    if len(past) == 0:
        raise ValueError("integral unit needs at least one past frame")
    ref = np.asarray(past[0], dtype=np.float64)
    return ref + np.mean(np.stack([p - ref for p in past]), axis=0)


def compute_du(frame: np.ndarray, past: Sequence[np.ndarray]) -> np.ndarray:
    if len(past) == 0:
        raise ValueError("derivative unit needs at least one past frame")
    return np.mean(np.stack([frame - p for p in past]), axis=0)


def history(frames: np.ndarray, t: int, depth: int) -> list[np.ndarray]:
    """``[F_{t-1}, ..., F_{t-d}]`` with indices below 0 clamped to 0."""
    return [frames[max(t - i, 0)] for i in range(1, depth + 1)]


def build_segments(seq: FrameSequence, cfg: LsmConfig, labels: np.ndarray | None = None) -> list[LsmSegment]:
    """One segment per frame, in frame order.

    ``labels`` overrides the sequence's own labels (pseudo-label training).
    """
    cfg.validate()
    if len(seq) == 0:
        raise ValueError(f"sequence {seq.sequence_id!r} is empty")
    lab = seq.labels if labels is None else labels
    out = []
    for t in range(len(seq)):
        frame = seq.frames[t]
        past = history(seq.frames, t, cfg.depth)
        out.append(
            LsmSegment(
                t=t,
                insu=compute_insu(frame),
                intu=compute_intu(past),
                du=compute_du(frame, past),
                sequence_id=seq.sequence_id,
                labels=lab[t],
            )
        )
    return out


def fuse_ef(seg: LsmSegment) -> np.ndarray:
    """Channel concatenation (insu, intu, du) -> 9 x H x W."""
    if not (seg.insu.shape == seg.intu.shape == seg.du.shape):
        raise ValueError(
            f"segment {seg.sequence_id}:{seg.t} unit shapes differ: {seg.insu.shape}, {seg.intu.shape}, {seg.du.shape}"
        )
    return np.concatenate(seg.channels_first(), axis=0)


def gsm_shuffle(segments: Sequence, seed: int, batch_size: int, enabled: bool = True) -> list[list]:
    """Shuffle segments with a seeded uniform permutation and group into batches.

    With ``enabled=False`` the input order is kept (the ablation baseline).
    The last batch may be short.
    """
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    n = len(segments)
    if n == 0:
        raise ValueError("no segments to batch")
    order = np.random.default_rng(seed).permutation(n) if enabled else np.arange(n)
    items = [segments[i] for i in order]
    return [items[i * batch_size:(i + 1) * batch_size] for i in range(math.ceil(n / batch_size))]
