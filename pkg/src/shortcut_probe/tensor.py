"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active, and with at least one
input that requires gradients, are recorded on that tape. ``backward(loss,
tape)`` replays the tape in reverse and accumulates ``.grad`` on every leaf
tensor with ``requires_grad=True``.

Usage::

    w = Tensor(np.ones((2, 3)), requires_grad=True)
    with Tape() as tape:
        loss = tsum(relu(matmul(x, transpose(w))))
    backward(loss, tape)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import DomainError, ShapeError, UsageError


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str


@dataclass
class Tape:
    nodes: list = field(default_factory=list)

    def record(self, node: Node):
        self.nodes.append(node)

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False


_ACTIVE: list = []


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, out_data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = track
    out.grad = None
    out.name = None
    if track:
        tape.record(Node(out, inputs, backward_fn, op))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if loss.data.ndim != 0:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(node.out) for node in tape.nodes}
    if id(loss) not in produced:
        raise UsageError("loss was not produced on this tape")
    grads = {id(loss): np.ones((), dtype=np.float64)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key not in produced:
                leaves[key] = t
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    for key, t in leaves.items():
        g = grads[key]
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------- elementwise

def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def channel_affine(x: Tensor, shift, factor) -> Tensor:
    """(x - shift[c]) * factor[c] over axis 1 with constant per-channel shift and factor."""
    shift = np.asarray(shift, dtype=np.float64)
    factor = np.asarray(factor, dtype=np.float64)
    if x.ndim < 2 or shift.shape != (x.shape[1],) or factor.shape != (x.shape[1],):
        raise ShapeError(f"channel_affine: tensor {x.shape} vs shift {shift.shape}, factor {factor.shape}")
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    s, f = shift.reshape(bshape), factor.reshape(bshape)
    return _emit("channel_affine", (x.data - s) * f, (x,), lambda g: (g * f,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # gradient at exactly 0 is 0
    return _emit("relu", x.data * mask, (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _emit("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise DomainError(f"log of non-positive value (min {xd.min():.3g})")
    return _emit("log", np.log(xd), (x,), lambda g: (g / xd,))


def clamp_min(x: Tensor, lo: float) -> Tensor:
    """max(x, lo); gradient is zero wherever the clamp is active."""
    keep = x.data >= lo
    return _emit("clamp_min", np.where(keep, x.data, lo), (x,), lambda g: (g * keep,))


# ------------------------------------------------------------------ reductions

def tsum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    shape = x.shape
    if axis is None:
        return _emit("sum", np.asarray(x.data.sum()), (x,),
                     lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % x.ndim

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _emit("sum", x.data.sum(axis=ax), (x,), bw)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis), 1.0 / n)


# -------------------------------------------------------------- shape helpers

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from e
    return _emit("reshape", y, (x,), lambda g: (g.reshape(old),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.shape}")
    return _emit("transpose", x.data.T, (x,), lambda g: (g.T,))


def pick(x: Tensor, labels) -> Tensor:
    """Row-wise gather ``x[i, labels[i]]`` from an [N, K] tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise ShapeError(f"pick: tensor {x.shape} vs labels {labels.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[rows, labels] = g
        return (out,)

    return _emit("pick", x.data[rows, labels], (x,), bw)


# ----------------------------------------------------------------- linear ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x[N, I] @ w[O, I]^T + b[O]; one tape node for a dense layer."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"linear: input {x.shape}, weight {w.shape}, bias {b.shape} are incompatible")
    xd, wd = x.data, w.data

    def bw(g):
        return (g @ wd if x.requires_grad else None, g.T @ xd, g.sum(axis=0))

    return _emit("linear", xd @ wd.T + b.data, (x, w, b), bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[N, F] + b[F] broadcast over rows."""
    if x.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: tensor {x.shape} vs bias {b.shape}")
    return _emit("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def conv2d(x: Tensor, kernels_: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1, plus per-filter bias."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    if kernels_.ndim != 4 or kernels_.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d kernels must be F x C x 3 x 3, got {kernels_.shape}")
    f = kernels_.shape[0]
    if kernels_.shape[1] != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels_.shape}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d bias must have shape ({f},), got {bias.shape}")
    cols = kernels.im2col3x3(np.ascontiguousarray(x.data))
    wmat = kernels_.data.reshape(f, c * 9)
    out2d = cols @ wmat.T + bias.data
    out = np.ascontiguousarray(out2d.reshape(n, h, w, f).transpose(0, 3, 1, 2))
    kshape = kernels_.shape

    def bw(g):
        g2d = g.transpose(0, 2, 3, 1).reshape(n * h * w, f)
        dk = (g2d.T @ cols).reshape(kshape)
        db = g2d.sum(axis=0)
        dx = None
        if x.requires_grad:
            dx = kernels.col2im3x3(np.ascontiguousarray(g2d @ wmat), n, c, h, w)
        return (dx, dk, db)

    return _emit("conv2d", out, (x, kernels_, bias), bw)


def avgpool2(x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"avgpool2 needs N x C x H x W with even H, W; got {x.shape}")
    h, w = x.shape[2:]
    y = kernels.avgpool2x2(np.ascontiguousarray(x.data))
    return _emit("avgpool2", y, (x,),
                 lambda g: (kernels.avgpool2x2_backward(np.ascontiguousarray(g), h, w),))


# -------------------------------------------------------------------- softmax

def softmax(x: Tensor) -> Tensor:
    if x.shape[-1] < 2:
        raise ShapeError(f"softmax needs at least 2 classes on the last axis, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", p, (x,), bw)


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
