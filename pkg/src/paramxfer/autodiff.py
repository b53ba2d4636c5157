"""Dense tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`GradTape` when at least one
input requires a gradient. Outside a tape nothing is recorded, which is how
inference and in-place parameter writes stay cheap.

Broadcasting is deliberately absent: elementwise ops need equal shapes, and the
only mixed-shape products are tensor-times-scalar and the explicit
:func:`add_bias` row add.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

# 32-bit storage is opt-in; gradient-check tolerances assume 64-bit.
DTYPE = np.float32 if os.environ.get("PARAMXFER_FLOAT32") == "1" else np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class TapeError(RuntimeError):
    """Misuse of a gradient tape (non-scalar loss, replay, foreign tensor)."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: GradTape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise TapeError("tensor was not produced on a gradient tape")
        self._tape.backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradTape:
    """Ordered record of differentiable operations.

    Use as a context manager; :meth:`backward` replays the record once, in
    reverse execution order, accumulating into ``.grad`` of leaf tensors.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        out._tape = self
        self.nodes.append(_Node(out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("tape already replayed")
        if loss._tape is not self:
            if loss.is_leaf and loss.requires_grad:
                loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
                return
            raise TapeError("loss was not recorded on this tape")
        self.consumed = True
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    pending[key] = gi if key not in pending else pending[key] + gi
        # drop references so intermediate arrays can be freed
        self.nodes.clear()


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._tape = None
    out.name = None
    tape = active_tape()
    out.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape.record(out, inputs, vjp)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and scalar ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may also be a one-element scalar tensor."""
    if b.size == 1 and a.shape != b.shape:
        s = b.data.reshape(())
        return _make(
            a.data * s,
            (a, b),
            lambda g: (g * s, np.asarray(np.sum(g * a.data)).reshape(b.shape)),
        )
    _same_shape("mul", a, b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


# ---------------------------------------------------------------------------
# shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inverse),),
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def take(a: Tensor, index: int) -> Tensor:
    """Scalar element ``a.flat[index]`` as a 0-d tensor."""

    def vjp(g):
        full = np.zeros(a.size, dtype=g.dtype)
        full[index] = g
        return (full.reshape(a.shape),)

    return _make(np.asarray(a.data.reshape(-1)[index]), (a,), vjp)


def sum(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    out = np.asarray(np.sum(a.data, axis=axis))

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), vjp)


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[k] for k in axes]))
    return scale(sum(a, axis), 1.0 / n)


def vdot(a: Tensor, b: Tensor) -> Tensor:
    """Frobenius inner product as a 0-d tensor."""
    return sum(mul(a, b))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-q vector to every row of a p x q matrix."""
    if x.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: bias {b.shape} does not fit rows of {x.shape}")
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


# ---------------------------------------------------------------------------
# row-wise normalizers and losses


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _make(y, (x,), vjp)


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"log_softmax_rows expects a 2-D tensor, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(y, (x,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def nll_rows(logp: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row log-probs."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logp.shape[0]
    rows = np.arange(n)

    def vjp(g):
        out = np.zeros_like(logp.data)
        out[rows, labels] = -g / n
        return (out,)

    return _make(np.asarray(-logp.data[rows, labels].mean()), (logp,), vjp)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    return nll_rows(log_softmax_rows(logits), labels)


# ---------------------------------------------------------------------------
# convolution helpers


def unfold(x: Tensor, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    """im2col: (b, c, h, w) -> (b * oh * ow, c * kh * kw).

    Column order is channel-major then kernel row then kernel column, matching
    a flattened ``(out, in, kh, kw)`` kernel row.
    """
    if x.ndim != 4:
        raise ShapeError(f"unfold expects (b, c, h, w), got {x.shape}")
    b, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    out = cols.transpose(0, 4, 5, 1, 2, 3).reshape(b * oh * ow, c * kh * kw)

    def vjp(g):
        gc = g.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        gx = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gc[:, :, i, j]
        return (gx[:, :, pad : pad + h, pad : pad + w],)

    return _make(np.ascontiguousarray(out), (x,), vjp)


def conv2d(x: Tensor, kernel2d: Tensor, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Convolution with a kernel already in its (out, in*kh*kw) matrix view."""
    b, _, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = unfold(x, kh, kw, stride, pad)
    y = matmul(cols, transpose(kernel2d))
    return permute(reshape(y, (b, oh, ow, kernel2d.shape[0])), (0, 3, 1, 2))


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)


def numeric_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    base = x.data.copy()
    out = np.zeros_like(base)
    flat = out.reshape(-1)
    for i in range(base.size):
        probe = base.copy().reshape(-1)
        probe[i] += eps
        fp = f(Tensor(probe.reshape(base.shape))).item()
        probe[i] -= 2 * eps
        fm = f(Tensor(probe.reshape(base.shape))).item()
        flat[i] = (fp - fm) / (2 * eps)
    return out


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, tol: float = 1e-4, eps: float = 1e-5) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` to central differences.

    The error is the max-norm of the difference divided by the larger max-norm
    of the two gradients, so tiny entries do not dominate.
    """
    leaf = Tensor(x.data.copy(), requires_grad=True)
    with GradTape() as tape:
        y = f(leaf)
    if y.size != 1:
        raise TapeError(f"grad_check needs a scalar function, got shape {y.shape}")
    tape.backward(y)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    numeric = numeric_grad(f, x, eps)
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    denom = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-12)
    return GradCheckReport(float(diff / denom), tol, analytic, numeric)


def flatten_rows(a: Tensor) -> Tensor:
    """Row tokens: an r x m matrix is already r tokens of length m."""
    if a.ndim != 2:
        raise ShapeError(f"flatten_rows expects a 2-D tensor, got {a.shape}")
    return reshape(a, a.shape)


def flatten_cols(a: Tensor) -> Tensor:
    """Column tokens: m tokens of length r, i.e. the row tokens of the transpose."""
    if a.ndim != 2:
        raise ShapeError(f"flatten_cols expects a 2-D tensor, got {a.shape}")
    return flatten_rows(transpose(a))
