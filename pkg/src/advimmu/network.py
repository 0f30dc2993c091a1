"""Tiny convolutional segmentation network and Adam.

EF: one backbone over the 9-channel fused input. LF: one backbone per temporal
unit (3 channels each); branch outputs are concatenated before a shared 1x1
head. All convolutions are 3x3, stride 1, same padding, so the logits keep
the input's spatial size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

BRANCHES = ("insu", "intu", "du")


class ChannelError(ValueError):
    pass


class SegNetwork:
    def __init__(
        self,
        mode: str = "EF",
        classes: int = 6,
        channels: tuple[int, ...] = (16, 32, 32),
        unit_channels: int = 3,
        kernel: int = 3,
        seed: int = 0,
    ):
        if mode not in ("EF", "LF"):
            raise ValueError(f"mode must be EF or LF, got {mode!r}")
        self.mode = mode
        self.classes = int(classes)
        self.channels = tuple(int(c) for c in channels)
        self.unit_channels = int(unit_channels)
        self.kernel = int(kernel)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        if mode == "EF":
            self._add_backbone("ef", 3 * self.unit_channels, rng)
            head_in = self.channels[-1]
        else:
            for b in BRANCHES:
                self._add_backbone(b, self.unit_channels, rng)
            head_in = 3 * self.channels[-1]
        self._add_conv("head", head_in, self.classes, 1, rng)

    def _add_conv(self, name: str, cin: int, cout: int, k: int, rng: np.random.Generator) -> None:
        s = 1.0 / np.sqrt(cin * k * k)
        self.params[f"{name}.weight"] = Tensor(rng.uniform(-s, s, (cout, cin, k, k)), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)

    def _add_backbone(self, prefix: str, cin: int, rng: np.random.Generator) -> None:
        for i, cout in enumerate(self.channels):
            self._add_conv(f"{prefix}.conv{i}", cin, cout, self.kernel, rng)
            cin = cout

    def spec(self) -> dict:
        return {
            "mode": self.mode,
            "classes": self.classes,
            "channels": list(self.channels),
            "unit_channels": self.unit_channels,
            "kernel": self.kernel,
            "seed": self.seed,
        }

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _backbone(self, prefix: str, x: Tensor) -> Tensor:
        for i in range(len(self.channels)):
            x = T.relu(T.conv2d(x, self.params[f"{prefix}.conv{i}.weight"], self.params[f"{prefix}.conv{i}.bias"]))
        return x

    def forward(self, inputs) -> Tensor:
        """Logits N x C x H x W.

        EF takes one N x 9 x H x W array/Tensor; LF takes a triple of
        N x 3 x H x W inputs ordered (insu, intu, du).
        """
        if self.mode == "EF":
            x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
            if x.ndim != 4 or x.shape[1] != 3 * self.unit_channels:
                raise ChannelError(f"EF network expects N x {3 * self.unit_channels} x H x W input, got {x.shape}")
            feats = self._backbone("ef", x)
        else:
            if isinstance(inputs, (Tensor, np.ndarray)) or len(inputs) != 3:
                raise ChannelError("LF network expects three inputs (insu, intu, du)")
            branch_out = []
            for name, u in zip(BRANCHES, inputs):
                u = u if isinstance(u, Tensor) else Tensor(u)
                if u.ndim != 4 or u.shape[1] != self.unit_channels:
                    raise ChannelError(f"LF branch {name} expects N x {self.unit_channels} x H x W, got {u.shape}")
                branch_out.append(self._backbone(name, u))
            feats = T.concat_channels(branch_out)
        return T.conv2d(feats, self.params["head.weight"], self.params["head.bias"])

    __call__ = forward


def batch_inputs(segments, mode: str):
    """Stack segments into the network input for ``mode``."""
    units = [np.stack(u) for u in zip(*(s.channels_first() for s in segments))]
    if mode == "EF":
        return np.concatenate(units, axis=1)
    return tuple(units)


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    no_decay: frozenset = frozenset()


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """One Adam update, in place on ``params``; returns ``(params, state)``.

    Decay is decoupled: ``p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``.
    Names in ``state.no_decay`` skip the decay term. Parameters missing from
    ``grads`` are left untouched.
    """
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name in sorted(params):
        if name not in grads:
            continue
        p, g = params[name], np.asarray(grads[name], dtype=np.float64)
        if p.shape != g.shape:
            raise ValueError(f"adam: shape mismatch for {name}: param {p.shape} vs grad {g.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay and name not in state.no_decay:
            update = update + state.weight_decay * p
        p -= state.lr * update
    return params, state


# ---------------------------------------------------------------------------
# checkpoints: directory of ADVT tensors plus header.json

HEADER = "header.json"


def save_checkpoint(directory, arrays: dict[str, np.ndarray], header: dict) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, arr in arrays.items():
        T.save_array(d / f"{name}.advt", arr)
    header = dict(header)
    header["tensors"] = sorted(arrays)
    (d / HEADER).write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    hp = d / HEADER
    if not hp.is_file():
        raise FileNotFoundError(f"{d}: no checkpoint header ({HEADER})")
    header = json.loads(hp.read_text())
    arrays = {name: T.load_array(d / f"{name}.advt") for name in header["tensors"]}
    return arrays, header


def network_arrays(net: SegNetwork) -> dict[str, np.ndarray]:
    return {f"net.{k}": p.data for k, p in net.params.items()}


def network_from_checkpoint(arrays: dict[str, np.ndarray], header: dict) -> SegNetwork:
    spec = header["network"]
    net = SegNetwork(
        mode=spec["mode"],
        classes=spec["classes"],
        channels=tuple(spec["channels"]),
        unit_channels=spec["unit_channels"],
        kernel=spec["kernel"],
        seed=spec["seed"],
    )
    for k, p in net.params.items():
        arr = arrays.get(f"net.{k}")
        if arr is None or arr.shape != p.shape:
            raise ValueError(f"checkpoint does not match network: parameter {k}")
        p.data = np.array(arr)
    return net
