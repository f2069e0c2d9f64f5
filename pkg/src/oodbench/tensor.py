"""Dense float64 arrays with reverse-mode automatic differentiation.

Every op builds a node holding its parents and a closure that pushes the
upstream gradient back to them. ``Tensor.backward`` walks the graph in reverse
topological order and then frees it.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NORM_EPS = 1e-12
_FREED = "<freed>"
PARAM_ROLES = ("conv-kernel", "bias", "fc-weight", "fc-bias")

_state = threading.local()


@contextlib.contextmanager
def no_grad():
    """Build no graph inside this block (per thread)."""
    prev = getattr(_state, "no_grad", False)
    _state.no_grad = True
    try:
        yield
    finally:
        _state.no_grad = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = _op

    # ------------------------------------------------------------------
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
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op or 'leaf'!r})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # ------------------------------------------------------------------
    def backward(self) -> None:
        """Back-propagate from this scalar, accumulating into leaf ``.grad``.

        The graph is released afterwards; calling ``backward`` twice on the same
        result is an error.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            if node._op == _FREED:
                raise RuntimeError("graph already freed by a previous backward()")
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

        for node in order:
            if node._parents:
                node.grad = None
                node._backward = None
                node._parents = ()
                node._op = _FREED

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


@dataclass
class Parameter:
    """A named trainable tensor; ``role`` is one of conv-kernel, bias, fc-weight, fc-bias."""

    name: str
    value: Tensor
    role: str

    def __post_init__(self):
        if self.role not in PARAM_ROLES:
            raise ValueError(f"unknown parameter role {self.role!r}; expected one of {PARAM_ROLES}")
        self.value.requires_grad = True
        if self.role == "fc-weight" and self.value.ndim != 2:
            raise ValueError(f"fc-weight {self.name!r} must be 2-D, got {self.value.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    req = not getattr(_state, "no_grad", False) and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (), _op=op)
    if req:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), "add", backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), "neg", lambda g: a._accumulate(-g))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), "scale", lambda g: a._accumulate(g * c))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), "div", backward)


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = a.data**exponent

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _result(out, (a,), "pow", backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), "exp", lambda g: a._accumulate(g * out))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), "log", lambda g: a._accumulate(g / a.data))


def tabs(a: Tensor) -> Tensor:
    return _result(np.abs(a.data), (a,), "abs", lambda g: a._accumulate(g * np.sign(a.data)))


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: a._accumulate(g * mask))


# ----------------------------------------------------------------------
# shape and reductions
# ----------------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), "reshape", lambda g: a._accumulate(g.reshape(a.shape)))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return _result(a.data.T.copy(), (a,), "transpose", lambda g: a._accumulate(g.T))


def _expand(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _result(out, (a,), "sum", lambda g: a._accumulate(_expand(g, a.shape, axis, keepdims)))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = a.data.mean(axis=axis, keepdims=keepdims)
    return _result(out, (a,), "mean", lambda g: a._accumulate(_expand(g, a.shape, axis, keepdims) / n))


def tmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        a._accumulate(full)

    return _result(out, (a,), "max", backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects N×C×H×W, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3))
    return _result(
        out,
        (x,),
        "global_avg_pool",
        lambda g: x._accumulate(np.broadcast_to(g[:, :, None, None] / hw, x.shape)),
    )


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), "matmul", backward)


def conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N×C×H×W) with kernels ``k`` (F×C×Kh×Kw)."""
    if x.ndim != 4 or k.ndim != 4:
        raise ValueError("conv2d expects 4-D input and kernel")
    n, c, h, w = x.shape
    f, kc, kh, kw = k.shape
    if kc != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {kc}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"kernel {kh}×{kw} larger than padded input {hp}×{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: N×C×Ho×Wo×Kh×Kw -> cols: (N·Ho·Wo)×(C·Kh·Kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = k.data.reshape(f, c * kh * kw)
    out = (cols @ kmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        if k.requires_grad:
            k._accumulate((gm.T @ cols).reshape(k.shape))
        if x.requires_grad:
            gcols = (gm @ kmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros((n, c, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            if padding:
                gxp = gxp[:, :, padding : padding + h, padding : padding + w]
            x._accumulate(gxp)

    return _result(np.ascontiguousarray(out), (x, k), "conv2d", backward)


# ----------------------------------------------------------------------
# norms and softmax family
# ----------------------------------------------------------------------
def lp_norm(x: Tensor, p: int = 2, axis: int = -1, keepdims: bool = False) -> Tensor:
    """(Σ|x|^p)^(1/p) along ``axis``. A zero vector gets a zero gradient."""
    if p not in (1, 2, 3, 4):
        raise ValueError(f"p must be one of 1, 2, 3, 4; got {p}")
    ax = np.abs(x.data)
    norm = (ax**p).sum(axis=axis, keepdims=True) ** (1.0 / p)
    out = norm if keepdims else np.squeeze(norm, axis=axis)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        if p == 1:
            local = np.sign(x.data)
        else:
            local = np.sign(x.data) * ax ** (p - 1) / np.maximum(norm, NORM_EPS) ** (p - 1)
        x._accumulate(gk * local)

    return _result(out, (x,), f"l{p}_norm", backward)


def logsumexp(z: Tensor, axis: int = -1) -> Tensor:
    if z.shape[axis] < 1:
        raise ValueError("logsumexp over an empty axis")
    m = z.data.max(axis=axis, keepdims=True)
    e = np.exp(z.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s
    return _result(out, (z,), "logsumexp", lambda g: z._accumulate(np.expand_dims(g, axis) * soft))


def softmax(z: Tensor, axis: int = -1) -> Tensor:
    e = np.exp(z.data - z.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        z._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (z,), "softmax", backward)


def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    m = z.data.max(axis=axis, keepdims=True)
    shifted = z.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        z._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _result(out, (z,), "log_softmax", backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``logsumexp(z) - z[label]``; 1-D logits are one sample."""
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = z.shape
    if c < 1:
        raise ValueError("cross_entropy needs at least one class")
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"label out of range for {c} classes")
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    rows = np.arange(n)
    out = np.mean(lse - z[rows, labels])
    soft = e / s

    def backward(g):
        d = soft.copy()
        d[rows, labels] -= 1.0
        d *= g / n
        logits._accumulate(d[0] if single else d)

    return _result(np.asarray(out), (logits,), "cross_entropy", backward)
