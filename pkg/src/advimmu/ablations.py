"""Desk-scale ablation protocols.

Every protocol trains small networks on freshly generated synthetic data and
compares final-epoch validation mIoU between variants. Variants are plain
config overrides on top of ``base_config``; runs are memoized per
(overrides, seed), so protocols sharing a variant (the default URs run is the
GSM-on arm, the K=5 arm and the depth-1 arm) train it once.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import runs
from .config import RunConfig, apply_overrides, derive_seed
from .synth import dataset_weather, generate_sequence, with_weather

log = logging.getLogger(__name__)

SEEDS = (0, 1, 2)


def base_config(epochs: int = 12) -> dict:
    return {
        "dataset": {"sequences": 10, "weather": "mixed"},
        "mode": "URs",
        "unfold": {"K": 5},
        "lsm": {"depth": 1, "fusion": "EF"},
        "gsm": True,
        "epochs": epochs,
        "batch_size": 8,
    }


@dataclass
class Harness:
    """Trains and memoizes variants; ``results[(key, seed)]`` is the final val mIoU."""

    epochs: int = 12
    seeds: tuple[int, ...] = SEEDS
    results: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)
    _data: dict = field(default_factory=dict)

    def config(self, overrides: dict, seed: int) -> RunConfig:
        d = copy.deepcopy(base_config(self.epochs))
        d = _merge(d, overrides)
        d["seed"] = seed
        return RunConfig.from_dict(d).validate()

    def dataset(self, cfg: RunConfig):
        key = (json.dumps(cfg.scene, sort_keys=True), cfg.dataset.weather, cfg.dataset.sequences, cfg.data_seed)
        if key not in self._data:
            scene = cfg.scene_config
            tags = dataset_weather(cfg.dataset.weather, cfg.dataset.sequences, cfg.data_seed)
            self._data[key] = [
                generate_sequence(with_weather(scene, tags[i]), derive_seed(cfg.data_seed, "data", i), f"seq_{i:03d}")
                for i in range(cfg.dataset.sequences)
            ]
        return self._data[key]

    def run(self, overrides: dict, seed: int) -> float:
        key = (json.dumps(overrides, sort_keys=True), seed)
        if key not in self.results:
            cfg = self.config(overrides, seed)
            t0 = time.perf_counter()
            res = runs.train(cfg, seqs=self.dataset(cfg), write=False)
            self.seconds[key] = time.perf_counter() - t0
            self.results[key] = res.val_metrics["mIoU"]
            log.info("%s seed %d: val mIoU %.2f (%.0fs)", key[0], seed, self.results[key], self.seconds[key])
        return self.results[key]

    def arm(self, overrides: dict) -> np.ndarray:
        return np.array([self.run(overrides, s) for s in self.seeds])


def _merge(base: dict, over: dict) -> dict:
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = copy.deepcopy(v)
    return base


def overrides_from_strings(items: list[str]) -> dict:
    """``["unfold.K=2", ...]`` -> nested override dict."""
    return apply_overrides({}, items)


# ---------------------------------------------------------------------------
# protocols


def gsm_ablation(h: Harness) -> dict:
    on = h.arm({})
    off = h.arm({"gsm": False})
    wins = int(np.sum(on > off))
    return {"on": on, "off": off, "wins": wins, "margin": float(np.mean(on - off)),
            "passed": wins >= 2 and float(np.mean(on - off)) > 0}


def regularizer_ablation(h: Harness) -> dict:
    arms = {
        "URs-K5": h.arm({}),
        "URs-K2": h.arm({"unfold": {"K": 2}}),
        "VRs": h.arm({"mode": "VRs"}),
        "CE": h.arm({"mode": "CE"}),
    }
    wins = int(np.sum(arms["URs-K5"] > arms["CE"]))
    means = {k: float(v.mean()) for k, v in arms.items()}
    return {
        "arms": arms,
        "means": means,
        "wins_vs_ce": wins,
        "passed": wins >= 2,
        # reported only
        "k5_ge_k2": means["URs-K5"] >= means["URs-K2"],
        "k2_ge_vrs": means["URs-K2"] >= means["VRs"],
    }


def depth_sweep(h: Harness, depths=(1, 2, 3, 4)) -> dict:
    arms = {d: h.arm({"lsm": {"depth": d}} if d != 1 else {}) for d in depths}
    means = {d: float(v.mean()) for d, v in arms.items()}
    band = max(means.values()) - min(means.values())
    return {"arms": arms, "means": means, "band": band, "passed": band <= 5.0}


# colour-separable classes under clear skies; fog and darkness merge the class colours
SEPARABLE = {"scene": {"palette": "separable"}, "dataset": {"weather": "clear"}, "sbicac": {"restarts": 8}}


def pseudo_label_study(h: Harness, mode: str = "URs") -> dict:
    gt = h.arm(_merge(copy.deepcopy(SEPARABLE), {"mode": mode}))
    pl = h.arm(_merge(copy.deepcopy(SEPARABLE), {"mode": mode, "label_source": "sbicac"}))
    ratio = float(pl.mean() / gt.mean()) if gt.mean() > 0 else 0.0
    return {"ground_truth": gt, "pseudo": pl, "ratio": ratio, "passed": ratio >= 0.8}
