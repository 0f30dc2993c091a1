"""Run configuration and seed streams.

Every random stream in a run descends from the master seed via
``numpy.random.SeedSequence([master, purpose_id, *extra])``. Purpose ids are
fixed below, so toggling one ablation flag never shifts another stream.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from .synth import ConfigError, SceneConfig

PURPOSES = {
    "data": 1,
    "init": 2,
    "gsm": 3,
    "contrast": 4,
    "sbicac": 5,
    "split": 6,
}

MODES = ("CE", "VRs", "URs")
LABEL_SOURCES = ("ground-truth", "sbicac")


def derive_seed(master: int, purpose: str, *extra: int) -> int:
    """A 32-bit seed for ``purpose`` (and optional indices) under ``master``."""
    ss = np.random.SeedSequence([int(master), PURPOSES[purpose], *(int(e) for e in extra)])
    return int(ss.generate_state(1)[0])


@dataclass
class Paths:
    dataset: str = "data"
    run_dir: str = "runs/default"
    checkpoint: str | None = None
    output: str | None = None


@dataclass
class DatasetSpec:
    sequences: int = 10
    weather: str = "mixed"
    seed: int | None = None  # defaults to the master seed


@dataclass
class LsmSpec:
    depth: int = 1
    fusion: str = "EF"


@dataclass
class UnfoldSpec:
    K: int = 5
    alpha0: float = 1.0
    gamma0: float = 1.0
    eta0: float = 0.05


@dataclass
class ContrastSpec:
    tau: float = 0.1
    anchors: int = 16
    s_pos: int = 32
    s_neg: int = 32


@dataclass
class VrsSpec:
    alpha: float = 1.0
    gamma: float = 1.0


@dataclass
class SbicacSpec:
    n_clusters: int | None = None  # defaults to the class count
    max_iter: int = 100
    jitter: float = 0.15
    restarts: int = 1


@dataclass
class OptimSpec:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


@dataclass
class NetworkSpec:
    channels: list[int] = field(default_factory=lambda: [16, 32, 32])


@dataclass
class EvalSpec:
    per_frame: bool = False


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    scene: dict = field(default_factory=dict)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    lsm: LsmSpec = field(default_factory=LsmSpec)
    gsm: bool = True
    mode: str = "URs"
    unfold: UnfoldSpec = field(default_factory=UnfoldSpec)
    contrast: ContrastSpec = field(default_factory=ContrastSpec)
    vrs: VrsSpec = field(default_factory=VrsSpec)
    sbicac: SbicacSpec = field(default_factory=SbicacSpec)
    optim: OptimSpec = field(default_factory=OptimSpec)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    label_source: str = "ground-truth"
    val_fraction: float = 0.2

    @property
    def scene_config(self) -> SceneConfig:
        return SceneConfig.from_dict(self.scene)

    @property
    def classes(self) -> int:
        return self.scene_config.classes

    @property
    def n_clusters(self) -> int:
        return self.sbicac.n_clusters or self.classes

    @property
    def data_seed(self) -> int:
        return self.seed if self.dataset.seed is None else self.dataset.seed

    def validate(self) -> "RunConfig":
        self.scene_config.validate()
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.label_source not in LABEL_SOURCES:
            raise ConfigError(f"label_source must be one of {LABEL_SOURCES}, got {self.label_source!r}")
        if self.lsm.depth < 1:
            raise ConfigError(f"lsm.depth must be >= 1, got {self.lsm.depth}")
        if self.lsm.fusion not in ("EF", "LF"):
            raise ConfigError(f"lsm.fusion must be EF or LF, got {self.lsm.fusion!r}")
        if self.unfold.K < 0:
            raise ConfigError("unfold.K must be >= 0")
        if self.unfold.eta0 < 0:
            raise ConfigError("unfold.eta0 must be >= 0")
        if self.contrast.tau <= 0 or min(self.contrast.anchors, self.contrast.s_pos, self.contrast.s_neg) < 1:
            raise ConfigError("contrast: tau must be > 0 and anchors/s_pos/s_neg >= 1")
        if self.sbicac.max_iter < 1 or (self.sbicac.n_clusters is not None and self.sbicac.n_clusters < 1):
            raise ConfigError("sbicac: max_iter and n_clusters must be >= 1")
        if self.sbicac.restarts < 1:
            raise ConfigError("sbicac.restarts must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        if self.dataset.sequences < 1:
            raise ConfigError("dataset.sequences must be >= 1")
        if self.optim.lr <= 0 or not (0 <= self.optim.beta1 < 1 and 0 <= self.optim.beta2 < 1):
            raise ConfigError("optim: lr must be > 0 and betas in [0, 1)")
        if not self.network.channels or min(self.network.channels) < 1:
            raise ConfigError("network.channels must be a non-empty list of positive ints")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    kw = {}
    for key, value in d.items():
        if key not in known:
            raise ConfigError(f"unknown config key {where + key!r}")
        default = getattr(cls(), key)
        if is_dataclass(default):
            kw[key] = _build(type(default), value, f"{where}{key}.")
        else:
            kw[key] = value
    return cls(**kw)


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``key.sub=value`` strings to a nested dict (values parsed as JSON when possible)."""
    d = copy.deepcopy(d)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
        node[parts[-1]] = parse_value(raw)
    return d


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path}: {e}") from None
    data = apply_overrides(data, overrides or [])
    try:
        cfg = RunConfig.from_dict(data)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    return cfg.validate()
