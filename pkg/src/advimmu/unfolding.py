"""K unrolled regularizer-descent layers over a per-pixel probability state.

Layer k maps the state ``x`` (C x H x W) to

    z = x - eta_k * (alpha_k * grad_BD(x) + gamma_k * grad_con(x))
    x' = eps + (1 - C*eps) * c / sum_c(c),   c = clip(z, eps, 1)

so every state is a distribution with entries >= eps. A layer whose step is
exactly zero passes its input through untouched. The block returns
``x0 + xK`` (or ``x0`` when K = 0).

Backward is first order: the regularizer gradients inside a layer are held
constant w.r.t. the state, the clamp/renormalize Jacobian is applied exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import regularizers as R
from .tensor import Tensor, backward, cross_entropy

EPS = R.EPS


@dataclass
class ContrastConfig:
    tau: float = 0.1
    anchors: int = 16
    s_pos: int = 32
    s_neg: int = 32


@dataclass
class UnfoldParams:
    alpha: np.ndarray
    gamma: np.ndarray
    eta: np.ndarray

    @classmethod
    def init(cls, k: int, alpha0: float = 1.0, gamma0: float = 1.0, eta0: float = 0.05) -> "UnfoldParams":
        if k < 0:
            raise ValueError(f"layer count must be >= 0, got {k}")
        return cls(np.full(k, float(alpha0)), np.full(k, float(gamma0)), np.full(k, float(eta0)))

    @property
    def K(self) -> int:
        return int(self.alpha.shape[0])

    def copy(self) -> "UnfoldParams":
        return UnfoldParams(self.alpha.copy(), self.gamma.copy(), self.eta.copy())

    def project(self) -> None:
        np.maximum(self.eta, 0.0, out=self.eta)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"unfold.alpha": self.alpha, "unfold.gamma": self.gamma, "unfold.eta": self.eta}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "UnfoldParams":
        return cls(*(np.array(arrays[f"unfold.{n}"]).reshape(-1) for n in ("alpha", "gamma", "eta")))


@dataclass
class UnfoldTrace:
    states: list[np.ndarray]
    pre: list[np.ndarray]  # z per layer, before clamp/renormalize
    skipped: list[bool]
    g_bd: list[np.ndarray]
    g_con: list[np.ndarray]
    sets: list[list]
    params: UnfoldParams
    eps: float = EPS
    bd_values: list[float] = field(default_factory=list)
    con_values: list[float] = field(default_factory=list)


@dataclass
class UnfoldGrads:
    x0: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    eta: np.ndarray


def project_state(z: np.ndarray, eps: float = EPS) -> np.ndarray:
    c = np.clip(z, eps, 1.0)
    n_classes = z.shape[0]
    return eps + (1.0 - n_classes * eps) * c / c.sum(axis=0, keepdims=True)


def project_state_vjp(z: np.ndarray, g: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Vector-Jacobian product of ``project_state`` at ``z``."""
    c = np.clip(z, eps, 1.0)
    s = c.sum(axis=0, keepdims=True)
    scale = 1.0 - z.shape[0] * eps
    dc = scale * (g / s - (g * c).sum(axis=0, keepdims=True) / (s * s))
    return dc * ((z > eps) & (z < 1.0))


def layer_seed(seed: int, k: int) -> list[int]:
    return [int(seed), int(k)]


def regularizer_grads(x: np.ndarray, py: np.ndarray, labels: np.ndarray, contrast: ContrastConfig, seed, eps=EPS):
    """BD and contrastive gradient maps at state ``x`` plus the sets used and loss values."""
    px = np.maximum(x, eps)
    g_bd = R.bd_grad(px, py)
    sets = R.sample_contrast_sets(labels, x, contrast.anchors, contrast.s_pos, contrast.s_neg, seed, contrast.tau)
    g_con = R.contrast_grad_map(x, sets)
    return g_bd, g_con, sets, R.bd_loss(px, py), R.con_loss(sets)


def unfold_forward(
    x0: np.ndarray,
    labels: np.ndarray,
    params: UnfoldParams,
    seed: int = 0,
    contrast: ContrastConfig | None = None,
    eps: float = EPS,
):
    """Run the K layers from ``x0`` (C x H x W probabilities). Returns ``(x_out, trace)``."""
    contrast = contrast or ContrastConfig()
    x0 = np.asarray(x0, dtype=np.float64)
    n_classes = x0.shape[0]
    if labels.shape != x0.shape[1:]:
        raise ValueError(f"labels {labels.shape} do not match state {x0.shape}")
    py = R.smooth_onehot(labels, n_classes, eps)
    trace = UnfoldTrace([x0], [], [], [], [], [], params.copy(), eps)
    x = x0
    for k in range(params.K):
        g_bd, g_con, sets, bd_val, con_val = regularizer_grads(x, py, labels, contrast, layer_seed(seed, k), eps)
        step = params.eta[k] * (params.alpha[k] * g_bd + params.gamma[k] * g_con)
        z = x - step
        if not np.any(step):
            x_next = x
            skipped = True
        else:
            x_next = project_state(z, eps)
            skipped = False
        if not np.all(np.isfinite(x_next)):
            raise FloatingPointError(f"unfolding layer {k + 1}: non-finite state (step size exploded?)")
        trace.pre.append(z)
        trace.skipped.append(skipped)
        trace.g_bd.append(g_bd)
        trace.g_con.append(g_con)
        trace.sets.append(sets)
        trace.bd_values.append(bd_val)
        trace.con_values.append(con_val)
        trace.states.append(x_next)
        x = x_next
    x_out = x0 if params.K == 0 else x0 + x
    return x_out, trace


def replay(trace: UnfoldTrace) -> np.ndarray:
    """Recompute x^(K) from x^(0) and the stored layer gradients."""
    p = trace.params
    x = trace.states[0]
    for k in range(p.K):
        step = p.eta[k] * (p.alpha[k] * trace.g_bd[k] + p.gamma[k] * trace.g_con[k])
        x = x if not np.any(step) else project_state(x - step, trace.eps)
    return x


def unfold_backward(trace: UnfoldTrace, grad_out: np.ndarray) -> UnfoldGrads:
    """First-order reverse pass through the layers.

    Skipped (zero-step) layers are exact identities for the state; their
    scalar partials are the one-sided derivatives through the projection.
    """
    p = trace.params
    x0 = trace.states[0]
    if grad_out.shape != x0.shape:
        raise ValueError(f"grad_out {grad_out.shape} does not match state {x0.shape}")
    k_layers = p.K
    d_alpha, d_gamma, d_eta = np.zeros(k_layers), np.zeros(k_layers), np.zeros(k_layers)
    if k_layers == 0:
        return UnfoldGrads(grad_out.copy(), d_alpha, d_gamma, d_eta)
    g = grad_out
    for k in reversed(range(k_layers)):
        z = trace.pre[k]
        dz = project_state_vjp(z, g, trace.eps)
        d_alpha[k] = np.sum(dz * (-p.eta[k] * trace.g_bd[k]))
        d_gamma[k] = np.sum(dz * (-p.eta[k] * trace.g_con[k]))
        d_eta[k] = np.sum(dz * -(p.alpha[k] * trace.g_bd[k] + p.gamma[k] * trace.g_con[k]))
        if not trace.skipped[k]:
            g = dz
    return UnfoldGrads(g + grad_out, d_alpha, d_gamma, d_eta)


def total_loss(x_out: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy over the class axis of ``x_out``; returns (loss, d loss / d x_out)."""
    t = Tensor(x_out, requires_grad=True)
    loss = cross_entropy(t, labels)
    backward(loss)
    return loss.item(), t.grad


def batch_forward_backward(x0_batch, labels_batch, params: UnfoldParams, seeds, contrast=None, eps=EPS):
    """Unfold each image of a batch, average the loss, and return all gradients.

    Returns ``(loss, dL/dx0 batch, UnfoldGrads summed over images, traces)``.
    """
    n = len(x0_batch)
    dx0 = np.empty_like(x0_batch)
    d_alpha, d_gamma, d_eta = np.zeros(params.K), np.zeros(params.K), np.zeros(params.K)
    loss = 0.0
    traces = []
    for i in range(n):
        x_out, tr = unfold_forward(x0_batch[i], labels_batch[i], params, seeds[i], contrast, eps)
        li, gi = total_loss(x_out, labels_batch[i])
        gi = gi / n
        grads = unfold_backward(tr, gi)
        loss += li / n
        dx0[i] = grads.x0
        d_alpha += grads.alpha
        d_gamma += grads.gamma
        d_eta += grads.eta
        traces.append(tr)
    return loss, dx0, UnfoldGrads(dx0, d_alpha, d_gamma, d_eta), traces
