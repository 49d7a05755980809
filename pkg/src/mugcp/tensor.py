"""Dense tensors recorded on an explicit tape, with reverse-mode gradients.

Operations only record themselves while a :class:`Tape` is active and at
least one input requires a gradient. Outside a tape every op is a plain
forward evaluation, which keeps inference cheap and reentrant.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

_DTYPES = {"f64": np.float64, "f32": np.float32}
_dtype_var: contextvars.ContextVar = contextvars.ContextVar("mugcp_dtype", default=np.float64)
_tape_var: contextvars.ContextVar = contextvars.ContextVar("mugcp_tape", default=None)


def set_precision(name: str) -> None:
    """Set the working precision ("f64" or "f32") for new tensors."""
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _dtype_var.set(_DTYPES[name])


def get_dtype() -> type:
    return _dtype_var.get()


def precision_name(dtype=None) -> str:
    dtype = np.dtype(dtype or get_dtype())
    return "f64" if dtype == np.float64 else "f32"


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the working precision."""
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}")
    token = _dtype_var.set(_DTYPES[name])
    try:
        yield
    finally:
        _dtype_var.reset(token)


def _check_finite(op: str, arr: np.ndarray) -> None:
    # a finite sum implies finite entries; overflow in the sum falls through to the full scan
    if arr.size and not math.isfinite(float(arr.sum())):
        if not np.isfinite(arr).all():
            raise NonFiniteError(op, f"output shape {arr.shape}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=get_dtype())
        _check_finite(name or "tensor", arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("out", "parents", "backward", "op")

    def __init__(self, out, parents, backward, op):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.op = op


class Tape:
    """Ordered record of executed primitives, replayed in reverse by :meth:`backward`."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._outputs: set[int] = set()
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _tape_var.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_var.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self._nodes]

    def _record(self, out: Tensor, parents: tuple, backward: Callable, op: str) -> None:
        self._nodes.append(_Node(out, parents, backward, op))
        self._outputs.add(id(out))

    def clear(self) -> None:
        self._nodes = []
        self._outputs = set()

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every leaf that requires a gradient.

        Gradients are overwritten, not accumulated, so replaying the same tape
        gives bit-identical results.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._outputs:
            raise ContractError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            for p in node.parents:
                if p.requires_grad and id(p) not in self._outputs:
                    leaves.setdefault(id(p), p)
            if g is None:
                continue
            pgs = node.backward(g)
            for p, pg in zip(node.parents, pgs):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for key, leaf in leaves.items():
            g = grads.get(key)
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.data.dtype)


def active_tape() -> Tape | None:
    return _tape_var.get()


def backward(loss: Tensor) -> None:
    """Backpropagate ``loss`` through the currently active tape."""
    tape = active_tape()
    if tape is None:
        raise ContractError("backward called with no active tape")
    tape.backward(loss)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=get_dtype()))


def _make(op: str, out: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    _check_finite(op, out)
    tape = _tape_var.get()
    if tape is not None and any(p.requires_grad for p in parents):
        t = Tensor._wrap(out, requires_grad=True)
        tape._record(t, parents, backward_fn, op)
        return t
    return Tensor._wrap(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make("div", out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make("sin", np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_np(x: np.ndarray) -> np.ndarray:
    """Tanh-approximated GELU on raw arrays."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _make("gelu", out, (a,), bw)


# -- linear algebra and shape ----------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} differ") from None

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _make("swapaxes", np.swapaxes(a.data, ax1, ax2), (a,),
                 lambda g: (np.swapaxes(g, ax1, ax2),))


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, tuple(shape)).copy()
    except ValueError:
        raise DimensionError(f"broadcast_to: {a.shape} -> {tuple(shape)}") from None
    return _make("broadcast_to", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def getitem(a, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] += g
        return (full,)

    return _make("getitem", np.array(out), (a,), bw)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat: empty input list")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(f"concat: shapes {[t.shape for t in ts]} disagree off axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make("concat", out, tuple(ts), bw)


# -- normalizations ----------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError(f"softmax: empty axis {axis} in shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError(f"log_softmax: empty axis {axis} in shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (a,), bw)


LN_EPS = 1e-5


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit population variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make("layer_norm", out, (x, gamma, beta), bw)


def l2_normalize(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    norm = sqrt(tsum(x * x, axis=axis, keepdims=True))
    return x / norm


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    """Cosine similarity along ``axis``; broadcasts over the remaining axes."""
    a, b = as_tensor(a), as_tensor(b)
    for t in (a, b):
        if np.any(np.sum(t.data * t.data, axis=axis) == 0):
            raise ContractError("cosine similarity of a zero-norm vector")
    return tsum(l2_normalize(a, axis) * l2_normalize(b, axis), axis=axis)
