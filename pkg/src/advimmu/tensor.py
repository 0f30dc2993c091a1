"""Minimal float64 tensor with reverse-mode gradients.

The op vocabulary is deliberately closed: it holds exactly what the
segmentation network, the softmax/cross-entropy head and the surrogate
products used to inject hand-derived gradients need.

Class-axis convention (softmax, cross-entropy, concat): rank 1 and rank 3
tensors carry classes/channels on axis 0 (``C`` or ``C x H x W``); rank 2 and
rank 4 tensors carry them on axis 1 (``N x C`` or ``N x C x H x W``).
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

OP_KINDS = (
    "add",
    "sub",
    "mul",
    "scalar-mul",
    "matmul",
    "conv2d",
    "relu",
    "mean",
    "sum",
    "concat-channels",
    "softmax-over-classes",
    "cross-entropy",
    "bilinear-upsample",
)


class TensorError(Exception):
    pass


class ShapeError(TensorError, ValueError):
    pass


class NonFiniteError(TensorError, ArithmeticError):
    pass


class GraphError(TensorError, RuntimeError):
    pass


class OpNode:
    """One recorded operation: kind, inputs and the closure computing input grads."""

    __slots__ = ("kind", "inputs", "backward_fn", "consumed")

    def __init__(self, kind: str, inputs: Sequence["Tensor"], backward_fn):
        self.kind = kind
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64, order="C")
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: OpNode | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def relu(self):
        return relu(self)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=np.float64), like.shape))


def _check_finite(kind: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"{kind}: non-finite values in input")


def _make(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{kind}: produced non-finite output")
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = OpNode(kind, inputs, backward_fn)
    return out


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def class_axis(ndim: int) -> int:
    if ndim in (1, 3):
        return 0
    if ndim in (2, 4):
        return 1
    raise ShapeError(f"no class axis defined for rank {ndim}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    _check_finite("add", a.data, b.data)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    _check_finite("sub", a.data, b.data)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    _check_finite("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    _check_finite("scalar-mul", a.data, np.asarray(s))
    return _make("scalar-mul", a.data * s, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    _check_finite("relu", a.data)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    _check_finite("matmul", a.data, b.data)
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# ---------------------------------------------------------------------------
# reductions


def mean(a: Tensor) -> Tensor:
    _check_finite("mean", a.data)
    n = a.data.size
    shape = a.shape
    return _make("mean", np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def tsum(a: Tensor) -> Tensor:
    _check_finite("sum", a.data)
    shape = a.shape
    return _make("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


# ---------------------------------------------------------------------------
# channel ops


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat-channels: no inputs")
    ax = class_axis(tensors[0].ndim)
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or other[:ax] + other[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat-channels: shape mismatch {tensors[0].shape} vs {t.shape}")
    _check_finite("concat-channels", *(t.data for t in tensors))
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make("concat-channels", np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def softmax(a: Tensor) -> Tensor:
    _check_finite("softmax-over-classes", a.data)
    ax = class_axis(a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return _make("softmax-over-classes", s, (a,), bw)


def log_softmax_array(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over every pixel (and batch item).

    ``labels`` is an integer array shaped like ``logits`` without its class axis.
    """
    _check_finite("cross-entropy", logits.data)
    ax = class_axis(logits.ndim)
    labels = np.asarray(labels)
    expect = logits.shape[:ax] + logits.shape[ax + 1:]
    if labels.shape != expect:
        raise ShapeError(f"cross-entropy: shape mismatch {logits.shape} vs labels {labels.shape}")
    n_classes = logits.shape[ax]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ShapeError(f"cross-entropy: label out of range [0, {n_classes})")
    labels = labels.astype(np.int64)
    logp = log_softmax_array(logits.data, ax)
    picked = np.take_along_axis(logp, np.expand_dims(labels, ax), axis=ax)
    count = labels.size
    loss = -picked.sum() / count

    def bw(g):
        grad = np.exp(logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, np.expand_dims(labels, ax), 1.0, axis=ax)
        return ((grad - onehot) * (float(g) / count),)

    return _make("cross-entropy", np.asarray(loss), (logits,), bw)


# ---------------------------------------------------------------------------
# spatial ops


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding="same") -> Tensor:
    """2-D cross-correlation, ``x`` is N x Cin x H x W, ``w`` is Cout x Cin x kh x kw.

    ``padding="same"`` means zero padding of ``k // 2`` and needs stride 1 and an odd
    kernel; an integer gives explicit symmetric padding. Output spatial size is
    ``(H + 2p - k) // stride + 1``.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    cout, cin, kh, kw = w.shape
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: shape mismatch {w.shape} vs bias {b.shape}")
    if padding == "same":
        if stride != 1 or kh % 2 == 0 or kw % 2 == 0 or kh != kw:
            raise ShapeError(f"conv2d: 'same' padding needs stride 1 and odd square kernel, got {w.shape}")
        pad = kh // 2
    else:
        pad = int(padding)
    n, _, h, wd = x.shape
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(wd, kw, stride, pad)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: shape mismatch {x.shape} vs {w.shape} gives empty output")
    _check_finite("conv2d", x.data, w.data, *(() if b is None else (b.data,)))

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    xshape = xp.shape

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dw = (g2.T @ cols).reshape(w.shape)
        if not x.requires_grad:
            dx = None
        elif stride == 1:
            # full correlation of g with the flipped kernel, then crop the padding
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
            gcols = gwin.transpose(0, 2, 3, 1, 4, 5).reshape(-1, cout * kh * kw)
            wflip = w.data[:, :, ::-1, ::-1].transpose(0, 2, 3, 1).reshape(cout * kh * kw, cin)
            dxp = (gcols @ wflip).reshape(n, xshape[2], xshape[3], cin).transpose(0, 3, 1, 2)
            dx = dxp[:, :, pad:pad + h, pad:pad + wd]
        else:
            dcols = (g2 @ wmat).reshape(n, ho, wo, cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros(xshape)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        grads = [dx, dw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return _make("conv2d", np.ascontiguousarray(out), inputs, bw)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres (align_corners=False)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), i0] += 1.0 - lam
    m[np.arange(n_out), i1] += lam
    return m


def bilinear_upsample(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Resize the two trailing axes of a rank-3/4 tensor to ``size`` bilinearly."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"bilinear-upsample: needs rank 3 or 4, got {x.shape}")
    ho, wo = int(size[0]), int(size[1])
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"bilinear-upsample: shape mismatch {x.shape} vs target {size}")
    _check_finite("bilinear-upsample", x.data)
    ah = _interp_matrix(x.shape[-2], ho)
    aw = _interp_matrix(x.shape[-1], wo)
    out = np.einsum("oh,...hw,pw->...op", ah, x.data, aw)

    def bw(g):
        return (np.einsum("oh,...op,pw->...hw", ah, g, aw),)

    return _make("bilinear-upsample", out, (x,), bw)


_DISPATCH = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar-mul": scalar_mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "mean": mean,
    "sum": tsum,
    "concat-channels": lambda *ts: concat_channels(ts),
    "softmax-over-classes": softmax,
    "cross-entropy": cross_entropy,
    "bilinear-upsample": bilinear_upsample,
}


def forward(op: str, *inputs, **kwargs) -> Tensor:
    """Apply the op named ``op`` (one of ``OP_KINDS``)."""
    try:
        fn = _DISPATCH[op]
    except KeyError:
        raise ValueError(f"unknown op kind {op!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in reversed(t.node.inputs):
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Nodes are visited once each in reverse topological order; the order is a
    pure function of graph structure, so repeated runs are bit-identical. A
    graph can be walked only once.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    for t in order:
        if t.node is not None and t.node.consumed:
            raise GraphError(f"graph already consumed at op {t.node.kind}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        node = t.node
        in_grads = node.backward_fn(g)
        node.consumed = True
        node.backward_fn = None
        for inp, ig in zip(node.inputs, in_grads):
            if not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = ig if key not in grads else grads[key] + ig


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_grad(f: Callable, x, h: float = 1e-5):
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` receives the same kind of object as ``x`` (ndarray or Tensor) and may
    return a float or a single-element Tensor. The result has ``x``'s kind.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    is_tensor = isinstance(x, Tensor)
    base = np.array(x.data if is_tensor else x, dtype=np.float64, order="C")

    def call(arr):
        val = f(Tensor(arr) if is_tensor else arr)
        val = val.item() if isinstance(val, Tensor) else float(val)
        if not np.isfinite(val):
            raise NonFiniteError("finite_diff_grad: f evaluated to a non-finite value")
        return val

    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = call(base.copy())
        flat[i] = old - h
        fm = call(base.copy())
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad) if is_tensor else grad


def relative_error(a, b) -> float:
    """``||a - b|| / max(||a||, ||b||)``; 0 when both are zero."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


# ---------------------------------------------------------------------------
# ADVT binary format

MAGIC = b"ADVT"
FORMAT_VERSION = 1


def save_array(path, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array.data if isinstance(array, Tensor) else array, dtype="<f8"))
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def load_array(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    dims = struct.unpack_from(f"<{rank}I", raw, 12)
    offset = 12 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(raw) - offset != 8 * count:
        raise ValueError(f"{path}: payload size {len(raw) - offset} does not match dims {dims}")
    return np.frombuffer(raw, dtype="<f8", offset=offset, count=count).astype(np.float64).reshape(dims)
