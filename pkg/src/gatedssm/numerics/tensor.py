"""Reverse-mode automatic differentiation on float64 tensors.

A ``Tensor`` wraps a numpy float64 array. Operations on tensors record
``TapeNode`` entries (operation id, input references, a backward rule
closing over saved intermediates); ``backward`` walks the recorded
graph once in reverse topological order and accumulates gradients into
the ``grad`` buffers of leaf tensors created with ``requires_grad``.

Rules of the house:
  - data buffers are treated as immutable after construction; only
    ``grad`` accumulates,
  - every backward rule is written out explicitly (no numerical
    differentiation, no higher-order support),
  - recording can be suspended with ``no_grad()`` for evaluation paths,
  - graphs are per-result and thread-local, so independent models can
    run on independent threads.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

from .fft import next_pow2 as _next_pow2
from .fft import transform as _fft_transform

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

_tls = threading.local()


def _grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


@contextmanager
def no_grad():
    """Suspend tape recording inside the context."""
    prev = _grad_enabled()
    _tls.grad_enabled = False
    try:
        yield
    finally:
        _tls.grad_enabled = prev


class TapeNode:
    """One recorded operation: id, inputs, and its backward rule."""

    __slots__ = ("op", "inputs", "backward_rule")

    def __init__(self, op: str, inputs: tuple, backward_rule: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_rule = backward_rule


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.node: TapeNode | None = None

    @classmethod
    def _result(cls, data: np.ndarray, node: TapeNode) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = True
        t.node = node
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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Arithmetic sugar; the module-level functions do the work.
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    """Wrap numbers/arrays as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _record(op: str, data: np.ndarray, inputs: Sequence[Tensor],
            backward_rule: Callable) -> Tensor:
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        return Tensor._result(data, TapeNode(op, tuple(inputs), backward_rule))
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate grads of all reachable leaf tensors with d(loss)/d(leaf).

    The loss must be scalar (size 1). Each recorded node is visited
    exactly once; leaves that do not appear on the tape keep whatever
    is already in their grad buffer (zeros after ``zero_grad``).
    """
    if loss.data.size != 1:
        raise ValueError(
            f"backward requires a scalar loss, got shape {loss.data.shape}"
        )
    if loss.node is None:
        if loss.requires_grad:
            loss.grad += np.ones_like(loss.data)
        return

    # Iterative post-order DFS over tensors that carry tape nodes.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, processed = stack.pop()
        if processed:
            topo.append(t)
            continue
        if t.node is None or id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        for inp in t.node.inputs:
            if inp.node is not None and id(inp) not in visited:
                stack.append((inp, False))

    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(topo):
        g = flowing.pop(id(t), None)
        if g is None:
            continue
        grads = t.node.backward_rule(g)
        for inp, gi in zip(t.node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi
            else:
                acc = flowing.get(id(inp))
                flowing[id(inp)] = gi if acc is None else acc + gi


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def rule(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record("add", data, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def rule(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record("sub", data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def rule(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _record("mul", data, (a, b), rule)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def rule(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _record("div", data, (a, b), rule)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    """Elementwise a**p for a constant (non-differentiated) exponent."""
    a = as_tensor(a)
    p = float(p)
    data = a.data ** p

    def rule(g):
        return (g * p * a.data ** (p - 1.0),)

    return _record("power", data, (a,), rule)


def texp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)
    return _record("exp", data, (a,), lambda g: (g * data,))


def tlog(a) -> Tensor:
    a = as_tensor(a)
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def tsqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)
    return _record("sqrt", data, (a,), lambda g: (g * 0.5 / data,))


def tsin(a) -> Tensor:
    a = as_tensor(a)
    return _record("sin", np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def tcos(a) -> Tensor:
    a = as_tensor(a)
    return _record("cos", np.cos(a.data), (a,),
                   lambda g: (-g * np.sin(a.data),))


def atan2(y, x) -> Tensor:
    y, x = as_tensor(y), as_tensor(x)
    data = np.arctan2(y.data, x.data)

    def rule(g):
        denom = x.data * x.data + y.data * y.data
        return (_unbroadcast(g * x.data / denom, y.data.shape),
                _unbroadcast(-g * y.data / denom, x.data.shape))

    return _record("atan2", data, (y, x), rule)


def gelu(a) -> Tensor:
    """Exact-erf GELU: x * Phi(x) with Phi the standard normal CDF.

    The erf form is used rather than the tanh approximation so that
    finite-difference checks hold to tight tolerances.
    """
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + _erf(a.data / _SQRT2))
    data = a.data * cdf

    def rule(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    return _record("gelu", data, (a,), rule)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return ((g - inner) * s,)

    return _record("softmax", s, (a,), rule)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.data.shape[-1]
    if d == 0:
        raise ValueError("layer_norm over an empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def rule(g):
        gg = g * gain.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gg - m1 - xhat * m2)
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        return gx, ggain, gbias

    return _record("layer_norm", data, (x, gain, bias), rule)


# ---------------------------------------------------------------------------
# shape and indexing


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)
    return _record("reshape", data, (a,),
                   lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def rule(g):
        return (np.transpose(g, inv),)

    return _record("transpose", data, (a,), rule)


def flip(a, axis: int) -> Tensor:
    """Reverse a tensor along one axis (the sequence-reversal primitive)."""
    a = as_tensor(a)
    data = np.flip(a.data, axis=axis)
    return _record("flip", data, (a,), lambda g: (np.flip(g, axis=axis),))


def getitem(a, key) -> Tensor:
    """Basic slicing only; integer-array lookup goes through embedding()."""
    a = as_tensor(a)
    data = a.data[key]

    def rule(g):
        gx = np.zeros_like(a.data)
        gx[key] += g
        return (gx,)

    return _record("getitem", data, (a,), rule)


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :], differentiable in table."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    n_rows = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise ValueError(
            f"embedding id out of range [0, {n_rows}): "
            f"min {int(ids.min())}, max {int(ids.max())}"
        )
    data = table.data[ids]

    def rule(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return _record("embedding", data, (table,), rule)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _record("sum", data, (a,), rule)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(data.size, 1)

    def rule(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape) / count,)

    return _record("mean", data, (a,), rule)


# ---------------------------------------------------------------------------
# contractions


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics (both operands >= 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(
            f"matmul needs >= 2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions differ: {a.data.shape} x {b.data.shape}"
        )
    data = np.matmul(a.data, b.data)

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.data.shape),
                _unbroadcast(gb, b.data.shape))

    return _record("matmul", data, (a, b), rule)


# ---------------------------------------------------------------------------
# sequence convolution


def _cconv(taps: np.ndarray, sig: np.ndarray) -> np.ndarray:
    """Causal truncation of linear convolution along the last axis.

    Both arguments broadcast over leading axes and share last-axis
    length L; the result keeps only output positions 0..L-1, so
    out[..., k] = sum_{l=0..k} taps[..., l] * sig[..., k-l]. Computed
    by FFT with zero padding to the next power of two >= 2L, which
    leaves no circular wrap-around inside the kept range.
    """
    L = sig.shape[-1]
    m = _next_pow2(2 * L)
    lead = np.broadcast_shapes(taps.shape[:-1], sig.shape[:-1])
    tp = np.zeros(lead + (m,), dtype=np.float64)
    sp = np.zeros(lead + (m,), dtype=np.float64)
    tp[..., :L] = taps
    sp[..., :L] = sig
    zeros = np.zeros_like(tp)
    kr, ki = _fft_transform(tp, zeros)
    ur, ui = _fft_transform(sp, zeros)
    pr = kr * ur - ki * ui
    pi = kr * ui + ki * ur
    yr, _ = _fft_transform(pr, pi, inverse=True)
    return yr[..., :L]


def causal_conv(taps, u) -> Tensor:
    """Differentiable causal convolution of u (..., L) with taps (L,)."""
    taps, u = as_tensor(taps), as_tensor(u)
    if taps.ndim != 1:
        raise ValueError(f"taps must be 1-D, got shape {taps.data.shape}")
    L = taps.data.shape[0]
    if u.data.shape[-1] != L:
        raise ValueError(
            f"kernel length {L} does not match sequence length "
            f"{u.data.shape[-1]}"
        )
    data = _cconv(taps.data, u.data)

    def rule(g):
        # Both adjoints are causal correlations, which reduce to the same
        # convolution primitive under a double flip of the last axis.
        gflip = g[..., ::-1]
        gu = _cconv(taps.data, gflip)[..., ::-1]
        gtaps_rows = _cconv(u.data, gflip)[..., ::-1]
        if gtaps_rows.ndim > 1:
            gtaps = gtaps_rows.reshape(-1, L).sum(axis=0)
        else:
            gtaps = gtaps_rows
        return gtaps, gu

    return _record("causal_conv", data, (taps, u), rule)


# ---------------------------------------------------------------------------
# loss


def masked_cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over labeled rows.

    logits: (rows, n_classes); labels: (rows,) integer ids with -1
    marking rows that do not contribute. Softmax is computed in a
    numerically stable shifted form.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"logits must be 2-D, got {logits.data.shape}")
    if labels.shape != (logits.data.shape[0],):
        raise ValueError(
            f"labels shape {labels.shape} does not match logits rows "
            f"{logits.data.shape[0]}"
        )
    sel = np.nonzero(labels >= 0)[0]
    if sel.size == 0:
        raise ValueError("masked_cross_entropy: no labeled positions")
    tgt = labels[sel]
    if tgt.max() >= logits.data.shape[1]:
        raise ValueError("label id out of vocabulary range")
    z = logits.data[sel]
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    data = np.array(-logp[np.arange(sel.size), tgt].mean())

    def rule(g):
        gl = np.zeros_like(logits.data)
        p = np.exp(logp)
        p[np.arange(sel.size), tgt] -= 1.0
        gl[sel] = p * (float(g) / sel.size)
        return (gl,)

    return _record("masked_cross_entropy", data, (logits,), rule)
