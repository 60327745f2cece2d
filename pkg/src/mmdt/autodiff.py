"""Dense f64 tensors with tape-based reverse-mode differentiation.

Primitives record onto the innermost active :class:`Tape` whenever one of
their inputs requires a gradient. Outside a tape nothing is recorded, so
the same model code doubles as the inference path.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> tape.backward(loss)
    >>> x.grad
    array([2., 4., 6.])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericalError, ParameterError, ShapeError, UsageError

_active = threading.local()


def _tape_stack() -> list:
    stack = getattr(_active, "stack", None)
    if stack is None:
        stack = _active.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple
    output: "Tensor"
    vjp: Callable


class Tape:
    """Ordered record of primitive applications (inputs always precede outputs)."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: "Tensor") -> None:
        backward(self, loss)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(np.array(data, dtype=np.float64))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"{op} produced non-finite values")
    t = Tensor._wrap(out)
    tape = current_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        node = Node(op, tuple(inputs), t, vjp)
        t.requires_grad = True
        t._node = node
        tape.nodes.append(node)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("mul", (a, b), a.data * b.data,
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot contract {a.shape} with {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", (a, b), a.data @ b.data, vjp)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if not axes else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", (a,), np.transpose(a.data, axes),
                   lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise UsageError("concat of an empty sequence")
    out = np.concatenate([t.data for t in ts], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record("concat", ts, out, vjp)


def split(a, sizes: Sequence[int], axis: int = 0) -> list:
    """Split along ``axis`` into consecutive pieces of the given sizes."""
    a = as_tensor(a)
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover extent {a.shape[axis]}")
    out, start = [], 0
    for n in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + n)
        out.append(index(a, tuple(sl)))
        start += n
    return out


def index(a, idx) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _record("index", (a,), np.ascontiguousarray(a.data[idx]), vjp)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def softmax_lastdim(x, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax over the last axis, max-subtracted.

    ``mask`` (boolean, broadcastable to ``x``) marks admissible entries;
    excluded entries get probability exactly zero.
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last axis, got {x.shape}")
    if mask is None:
        m = x.data.max(axis=-1, keepdims=True)
        e = np.exp(x.data - m)
    else:
        mask = np.broadcast_to(mask, x.shape)
        if not mask.any(axis=-1).all():
            raise UsageError("softmax row with no admissible entries")
        m = np.where(mask, x.data, -np.inf).max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, x.data - m, 0.0)), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (x,), p, vjp)


def layer_norm(x, gain=None, bias=None, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then ``* gain + bias``."""
    if not eps > 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    x = as_tensor(x)
    d = x.shape[-1]
    gain = None if gain is None else as_tensor(gain)
    bias = None if bias is None else as_tensor(bias)
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm {name} shape {p.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    inputs = (x,) + tuple(p for p in (gain, bias) if p is not None)

    def vjp(g):
        gx_hat = g * gain.data if gain is not None else g
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gain is not None:
            grads.append(_unbroadcast(g * xhat, (d,)))
        if bias is not None:
            grads.append(_unbroadcast(g, (d,)))
        return tuple(grads)

    return _record("layer_norm", inputs, out, vjp)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Tensor:
    """tanh-approximated GELU."""
    x = as_tensor(x)
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    th = np.tanh(u)
    out = 0.5 * x.data * (1.0 + th)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x.data * (1.0 - th * th) * du),)

    return _record("gelu", (x,), out, vjp)


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _record("silu", (x,), x.data * s,
                   lambda g: (g * (s + x.data * s * (1.0 - s)),))


def rotate_pairs(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive (even, odd) pairs of the last axis by fixed angles.

    ``cos``/``sin`` broadcast against ``x[..., ::2]``.
    """
    x = as_tensor(x)
    if x.shape[-1] % 2:
        raise ShapeError(f"rotate_pairs needs an even last extent, got {x.shape}")
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def vjp(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return _record("rotate_pairs", (x,), out, vjp)


PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "neg": neg, "matmul": matmul,
    "transpose": transpose, "reshape": reshape, "concat": concat, "split": split,
    "index": index, "sum": tsum, "mean": mean, "softmax": softmax_lastdim, "layer_norm": layer_norm,
    "gelu": gelu, "silu": silu, "rotate_pairs": rotate_pairs,
}


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf on ``tape``."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None or not any(n is loss._node for n in reversed(tape.nodes)):
        raise UsageError("loss was not recorded on this tape")
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                pending[key] = gi if key not in pending else pending[key] + gi


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               coords: Iterable[int] | None = None) -> float:
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``.

    ``x`` is perturbed in place and restored, so it may be a parameter that
    ``f`` reaches through a closure. ``coords`` restricts the flat indices
    probed (all by default).
    """
    if not 0 < h <= 1e-2:
        raise ParameterError(f"step h must lie in (0, 1e-2], got {h}")
    saved_grad, saved_flag = x.grad, x.requires_grad
    x.grad, x.requires_grad = None, True
    try:
        with Tape() as tape:
            y = f(x)
        if y.size != 1:
            raise UsageError(f"grad_check needs a scalar function, got shape {y.shape}")
        if y.requires_grad:
            tape.backward(y)
        analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    finally:
        x.grad, x.requires_grad = saved_grad, saved_flag

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in (range(x.size) if coords is None else coords):
        orig = flat[i]
        try:
            flat[i] = orig + h
            fp = float(f(x).data.reshape(-1)[0])
            flat[i] = orig - h
            fm = float(f(x).data.reshape(-1)[0])
        finally:
            flat[i] = orig
        fd = (fp - fm) / (2.0 * h)
        if not (np.isfinite(fd) and np.isfinite(analytic[i])):
            raise NumericalError(f"non-finite derivative at coordinate {i}")
        worst = max(worst, abs(analytic[i] - fd) / max(1.0, abs(analytic[i])))
    return worst
