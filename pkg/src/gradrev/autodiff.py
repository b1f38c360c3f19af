"""Dense float64 tensors with tape-based reverse-mode differentiation.

Differentiable leaves are created on a :class:`Tape`; every operation whose
inputs include a recorded tensor appends one record to that tape.  Tensors
built from plain arrays are constants and never record anything, which is
also how evaluation runs without paying for a graph.

Only the operator set needed by the model is provided.  Convolution is
fixed to 3x3 kernels with padding 1 and stride 1, pooling to 2x2 windows
with stride 2.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, LabelError

Gradients = dict[str, np.ndarray]


@dataclass(frozen=True)
class Record:
    op: str
    inputs: tuple[int, ...]
    output: int
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered log of recorded operations.

    Records are appended in execution order, so the list is topologically
    sorted by construction.  A tape belongs to a single computation and is
    not meant to be shared between threads while recording.
    """

    def __init__(self):
        self.records: list[Record] = []
        self.leaves: dict[str, Tensor] = {}
        self._next_id = 0

    def __len__(self):
        return len(self.records)

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id - 1

    def leaf(self, data, name: str) -> "Tensor":
        if name in self.leaves:
            raise ContractError(f"leaf {name!r} already registered on this tape")
        t = Tensor(data, requires_grad=True, name=name)
        t.tape = self
        t.node = self._new_id()
        self.leaves[name] = t
        return t

    def _record(self, op, inputs, out_data, backward) -> "Tensor":
        out = Tensor(out_data, requires_grad=True)
        out.tape = self
        out.node = self._new_id()
        ids = tuple(t.node if t.tape is self else -1 for t in inputs)
        self.records.append(Record(op, ids, out.node, backward))
        return out


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.tape: Tape | None = None
        self.node = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward) -> Tensor:
    tape = None
    for t in inputs:
        if t.requires_grad and t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError(f"{op}: inputs recorded on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(out_data)
    return tape._record(op, inputs, out_data, backward)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    sa, sb = a.shape, b.shape
    return _apply("add", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _apply("mul", (a, b), out, backward)


def neg(a: Tensor) -> Tensor:
    return _apply("neg", (a,), -a.data, lambda g: (-g,))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _apply("reshape", (a,), out, lambda g: (g.reshape(src),))


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis after the first."""
    return reshape(a, (a.shape[0], -1))


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _apply("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise DimensionError("mean of an empty tensor")
    shape = a.shape
    return _apply("mean", (a,), np.asarray(a.data.sum() / n),
                  lambda g: (np.full(shape, g / n),))


def clamp_max(a: Tensor, ceiling: float) -> Tensor:
    """Elementwise ``min(a, ceiling)``; gradient passes where ``a <= ceiling``."""
    keep = a.data <= ceiling
    out = np.where(keep, a.data, ceiling)
    return _apply("clamp_max", (a,), out, lambda g: (g * keep,))


def grad_reverse(x: Tensor) -> Tensor:
    """Identity on the forward pass; the backward pass negates the gradient."""
    return _apply("grad_reverse", (x,), x.data, lambda g: (-g,))


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# network ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _apply("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight, bias) -> Tensor:
    return add(matmul(x, weight), bias)


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ContractError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    scale = np.where(x.data >= 0, 1.0, slope)
    return _apply("leaky_relu", (x,), x.data * scale, lambda g: (g * scale,))


def concat(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat needs at least one part")
    batch = parts[0].shape[0]
    for p in parts:
        if p.ndim != 2 or p.shape[0] != batch:
            raise DimensionError(
                f"concat: batch extents differ {[q.shape for q in parts]}")
    edges = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(edges[:-1], edges[1:]))

    return _apply("concat", parts, np.concatenate([p.data for p in parts], axis=1), backward)


def log_softmax(x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] < 2:
        raise DimensionError(f"log_softmax expects (batch, k>=2), got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)
    return _apply("log_softmax", (x,), out,
                  lambda g: (g - probs * g.sum(axis=1, keepdims=True),))


def nll_loss(log_probs: Tensor, targets, mask=None) -> Tensor:
    """Per-sample negative log-likelihood, zero where ``mask`` is false.

    The result is left unreduced so callers can clamp individual terms
    before averaging.
    """
    if log_probs.ndim != 2:
        raise DimensionError(f"nll_loss expects (batch, k), got {log_probs.shape}")
    b, k = log_probs.shape
    targets = np.asarray(targets)
    if targets.shape != (b,):
        raise DimensionError(f"nll_loss: {targets.shape[0] if targets.ndim else 0} targets for batch {b}")
    if not np.issubdtype(targets.dtype, np.integer):
        if not np.all(targets == np.round(targets)):
            raise LabelError("nll_loss targets must be integers")
        targets = targets.astype(np.int64)
    if b and (targets.min() < 0 or targets.max() >= k):
        raise LabelError(f"nll_loss targets must lie in [0, {k}), got range "
                         f"[{targets.min()}, {targets.max()}]")
    mask = np.ones(b, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    rows = np.arange(b)
    out = np.where(mask, -log_probs.data[rows, targets], 0.0)

    def backward(g):
        grad = np.zeros((b, k))
        grad[rows, targets] = np.where(mask, -g, 0.0)
        return (grad,)

    return _apply("nll_loss", (log_probs,), out, backward)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation with zero padding 1 and stride 1, plus bias."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d: expected x (b,c,h,w) and kernel (o,c,3,3), "
                             f"got {x.shape} and {kernel.shape}")
    b, c, h, w = x.shape
    o = kernel.shape[0]
    if kernel.shape[1] != c:
        raise DimensionError(f"conv2d: input has {c} channels but kernel {kernel.shape} expects {kernel.shape[1]}")
    if bias.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    if h < 3 or w < 3:
        raise DimensionError(f"conv2d: spatial extent {h}x{w} below 3x3")

    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # (b, c, h, w, 3, 3) -> rows of (c*3*3) patches, one per output pixel
    cols = sliding_window_view(padded, (3, 3), axis=(2, 3))
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * 9)
    kmat = kernel.data.reshape(o, c * 9)
    out = (cols @ kmat.T + bias.data).reshape(b, h, w, o).transpose(0, 3, 1, 2)

    def backward(g):
        g_rows = g.transpose(0, 2, 3, 1).reshape(b * h * w, o)
        dk = (g_rows.T @ cols).reshape(kernel.shape)
        db = g_rows.sum(axis=0)
        dcols = (g_rows @ kmat).reshape(b, h, w, c, 3, 3)
        dpad = np.zeros((b, c, h + 2, w + 2))
        for i in range(3):
            for j in range(3):
                dpad[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dpad[:, :, 1:-1, 1:-1], dk, db

    return _apply("conv2d", (x, kernel, bias), out, backward)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2.

    On ties the gradient goes to the first maximum in row-major order
    within the window.
    """
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects (b,c,h,w), got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2d needs even spatial extents, got {h}x{w}")
    windows = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(b, c, h // 2, w // 2, 4)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dwin = np.zeros((b, c, h // 2, w // 2, 4))
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (dx.reshape(b, c, h, w),)

    return _apply("maxpool2d", (x,), out, backward)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor, tape: Tape) -> Gradients:
    """Gradients of a scalar ``loss`` for every leaf registered on ``tape``.

    Leaves the loss does not depend on receive zero arrays.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not None and loss.tape is not tape:
        raise ContractError("loss was recorded on a different tape")

    grads: dict[int, np.ndarray] = {}
    if loss.tape is tape:
        grads[loss.node] = np.ones_like(loss.data)
        for rec in reversed(tape.records):
            if rec.output > loss.node:
                continue
            g = grads.pop(rec.output, None)
            if g is None:
                continue
            for node, dg in zip(rec.inputs, rec.backward(g)):
                if node < 0 or dg is None:
                    continue
                if node in grads:
                    grads[node] = grads[node] + dg
                else:
                    grads[node] = dg

    out = {}
    for name, leaf in tape.leaves.items():
        g = grads.get(leaf.node)
        out[name] = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=np.float64).reshape(leaf.shape)
    return out
