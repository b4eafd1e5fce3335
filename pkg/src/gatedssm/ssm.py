"""Diagonal state-space models: parameters, discretization, kernels.

A continuous-time linear system x'(t) = diag(Lambda) x(t) + B u(t),
y(t) = Re(C x(t)) + D u(t) is discretized by zero-order hold at step
dt and then applied to length-L sequences either as a stepwise
recurrence (``scan``, the reference path) or as a causal convolution
with the materialized impulse-response kernel (``convolve``, the
trained path). The two are numerically equivalent, which the tests
exploit heavily.

Storage convention: state entries come in conjugate pairs, and only
the upper half-plane member of each pair is stored. With that
convention both the kernel taps and the scan readout take twice the
real part of the stored half-sum (``conjugate_pairs=True``). Systems
built directly from real coefficients can opt out of the doubling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Rng, Tensor
from .numerics import tensor as T

DT_MIN_DEFAULT = 1e-3
DT_MAX_DEFAULT = 1e-1


@dataclass
class SsmParams:
    """Trainable continuous-time parameters of one directional SSM.

    The real part of Lambda is parameterized as -exp(log_neg_re) so the
    system is stable for every parameter value. B defaults to a frozen
    1+0i (its effect folds into C); the imaginary part of Lambda is
    trainable by default. All buffers have length n_state, which counts
    stored (half-pair) entries.
    """

    log_neg_re: Tensor
    im: Tensor
    b_re: Tensor
    b_im: Tensor
    c_re: Tensor
    c_im: Tensor
    log_dt: Tensor
    d: Tensor
    conjugate_pairs: bool = True

    def __post_init__(self):
        n = self.log_neg_re.shape[0]
        if n < 1:
            raise ValueError("SsmParams needs at least one state")
        for name in ("im", "b_re", "b_im", "c_re", "c_im"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"SsmParams field {name} must have shape ({n},)")

    @property
    def n_state(self) -> int:
        return self.log_neg_re.shape[0]


@dataclass
class DiscreteSsm:
    """Zero-order-hold discretization: recursion coefficients.

    a_bar/b_bar/c are split-complex pairs of length n_state; d is the
    scalar skip. |a_bar| < 1 whenever the parameters came from
    ``discretize`` (stability).
    """

    a_re: Tensor
    a_im: Tensor
    b_re: Tensor
    b_im: Tensor
    c_re: Tensor
    c_im: Tensor
    d: Tensor
    conjugate_pairs: bool = True

    @property
    def n_state(self) -> int:
        return self.a_re.shape[0]

    @classmethod
    def from_real(cls, a, b, c, d: float = 0.0,
                  conjugate_pairs: bool = False) -> "DiscreteSsm":
        """Build a real-coefficient system (no doubling by default)."""
        a = np.atleast_1d(np.asarray(a, dtype=np.float64))
        b = np.atleast_1d(np.asarray(b, dtype=np.float64))
        c = np.atleast_1d(np.asarray(c, dtype=np.float64))
        zeros = np.zeros_like(a)
        return cls(Tensor(a), Tensor(zeros.copy()), Tensor(b),
                   Tensor(zeros.copy()), Tensor(c), Tensor(zeros.copy()),
                   Tensor(float(d)), conjugate_pairs=conjugate_pairs)


@dataclass
class Kernel:
    """Materialized impulse response of a discrete SSM."""

    length: int
    taps: Tensor

    def __post_init__(self):
        if self.taps.shape != (self.length,):
            raise ValueError(
                f"kernel taps shape {self.taps.shape} does not match "
                f"length {self.length}"
            )


def hippo_matrix(n: int) -> np.ndarray:
    """Dense reference transition matrix with long-memory structure.

    entries[i, k] = -sqrt(2i+1)*sqrt(2k+1) below the diagonal, -(i+1)
    on it, 0 above. Provided as a tested reference object; the trained
    models use the diagonal parameterization instead.
    """
    if n <= 0:
        raise ValueError(f"hippo_matrix needs n >= 1, got {n}")
    i = np.arange(n, dtype=np.float64)
    root = np.sqrt(2.0 * i + 1.0)
    a = np.tril(np.outer(root, root), k=-1)
    a += np.diag(i + 1.0)
    return -a


def init_s4d(n_state: int, dt_min: float = DT_MIN_DEFAULT,
             dt_max: float = DT_MAX_DEFAULT, rng: Rng | None = None, *,
             trainable_b: bool = False, trainable_im: bool = True) -> SsmParams:
    """Diagonal-linear initialization.

    Stored (half-pair) entries are Lambda_n = -1/2 + i*pi*n for
    n = 0..n_state/2 - 1; B = 1; C has unit-normal re/im components;
    log_dt is uniform in [log dt_min, log dt_max]; the skip D starts
    at 1. n_state counts full conjugate pairs and must be even.
    """
    if n_state % 2 != 0 or n_state < 2:
        raise ValueError(f"n_state must be even and >= 2, got {n_state}")
    if not (0 < dt_min < dt_max):
        raise ValueError(f"need 0 < dt_min < dt_max, got [{dt_min}, {dt_max}]")
    if rng is None:
        rng = Rng(0)
    half = n_state // 2
    log_neg_re = Tensor(np.full(half, np.log(0.5)), requires_grad=True)
    im = Tensor(np.pi * np.arange(half, dtype=np.float64),
                requires_grad=trainable_im)
    b_re = Tensor(np.ones(half), requires_grad=trainable_b)
    b_im = Tensor(np.zeros(half), requires_grad=trainable_b)
    c_re = Tensor(rng.normal((half,)), requires_grad=True)
    c_im = Tensor(rng.normal((half,)), requires_grad=True)
    log_dt = Tensor(rng.uniform(None, np.log(dt_min), np.log(dt_max)),
                    requires_grad=True)
    d = Tensor(1.0, requires_grad=True)
    return SsmParams(log_neg_re, im, b_re, b_im, c_re, c_im, log_dt, d)


def discretize(p: SsmParams) -> DiscreteSsm:
    """Zero-order-hold: a_bar = exp(dt*Lambda), b_bar = (a_bar-1)/Lambda * B.

    Exact for a diagonal system, and differentiable with respect to
    every field of the parameters.
    """
    dt = T.texp(p.log_dt)
    lam_re = T.neg(T.texp(p.log_neg_re))
    lam_im = p.im
    dt_re = T.mul(dt, lam_re)
    dt_im = T.mul(dt, lam_im)
    mag = T.texp(dt_re)
    a_re = T.mul(mag, T.tcos(dt_im))
    a_im = T.mul(mag, T.tsin(dt_im))
    # (a_bar - 1) / Lambda, complex division by conjugate.
    num_re = T.sub(a_re, 1.0)
    num_im = a_im
    den = T.add(T.mul(lam_re, lam_re), T.mul(lam_im, lam_im))
    q_re = T.div(T.add(T.mul(num_re, lam_re), T.mul(num_im, lam_im)), den)
    q_im = T.div(T.sub(T.mul(num_im, lam_re), T.mul(num_re, lam_im)), den)
    b_re = T.sub(T.mul(q_re, p.b_re), T.mul(q_im, p.b_im))
    b_im = T.add(T.mul(q_re, p.b_im), T.mul(q_im, p.b_re))
    return DiscreteSsm(a_re, a_im, b_re, b_im, p.c_re, p.c_im, p.d,
                       conjugate_pairs=p.conjugate_pairs)


def materialize_kernel(d: DiscreteSsm, length: int) -> Kernel:
    """Impulse-response taps: taps[l] = (2x) Re sum_n c_n * a_n^l * b_n.

    Powers are evaluated in the diagonal (Vandermonde) form
    a^l = exp(l * log a) rather than by repeated multiplication; the
    principal branch of the complex log is exact here because l is an
    integer. The doubling factor applies under the conjugate-pair
    storage convention and is skipped for plain real systems.
    """
    if length < 1:
        raise ValueError(f"kernel length must be >= 1, got {length}")
    log_mag = T.mul(0.5, T.tlog(T.add(T.mul(d.a_re, d.a_re),
                                      T.mul(d.a_im, d.a_im))))
    arg = T.atan2(d.a_im, d.a_re)
    steps = np.arange(length, dtype=np.float64).reshape(1, length)
    n = d.n_state
    m_re = T.mul(T.reshape(log_mag, (n, 1)), steps)
    m_im = T.mul(T.reshape(arg, (n, 1)), steps)
    p_mag = T.texp(m_re)
    p_re = T.mul(p_mag, T.tcos(m_im))
    p_im = T.mul(p_mag, T.tsin(m_im))
    w_re = T.sub(T.mul(d.c_re, d.b_re), T.mul(d.c_im, d.b_im))
    w_im = T.add(T.mul(d.c_re, d.b_im), T.mul(d.c_im, d.b_re))
    taps = T.sub(T.matmul(T.reshape(w_re, (1, n)), p_re),
                 T.matmul(T.reshape(w_im, (1, n)), p_im))
    scale = 2.0 if d.conjugate_pairs else 1.0
    taps = T.reshape(T.mul(scale, taps), (length,))
    return Kernel(length=length, taps=taps)


def scan(d: DiscreteSsm, u: np.ndarray) -> np.ndarray:
    """Stepwise recurrence reference: x_k = a x_{k-1} + b u_k.

    Readout y_k = (2x) Re(c . x_k) + d_skip * u_k with the same
    doubling convention as the kernel. Pure numpy, not differentiable;
    this is the oracle the convolution path is checked against.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 1:
        raise ValueError("scan expects a 1-D sequence")
    a = d.a_re.data + 1j * d.a_im.data
    b = d.b_re.data + 1j * d.b_im.data
    c = d.c_re.data + 1j * d.c_im.data
    d_skip = float(d.d.data)
    scale = 2.0 if d.conjugate_pairs else 1.0
    x = np.zeros_like(a)
    y = np.zeros_like(u)
    for k in range(u.shape[0]):
        x = a * x + b * u[k]
        y[k] = scale * np.real(np.dot(c, x)) + d_skip * u[k]
    return y


def convolve(k: Kernel, d_skip, u) -> Tensor:
    """Causal convolution with the kernel plus the d_skip * u passthrough.

    Differentiable with respect to taps, skip, and input. The kernel
    length must equal the sequence length.
    """
    u = T.as_tensor(u)
    if u.shape[-1] != k.length:
        raise ValueError(
            f"kernel length {k.length} != sequence length {u.shape[-1]}"
        )
    d_skip = T.as_tensor(d_skip)
    return T.add(T.causal_conv(k.taps, u), T.mul(d_skip, u))


def ssm_apply(p: SsmParams, x: Tensor) -> Tensor:
    """Apply one SSM to every feature column of a sequence.

    x has shape (L, d) or (B, L, d); a single kernel is materialized at
    the sequence length and convolved independently with each column
    (all columns share the parameterization, so they share the kernel).
    """
    x = T.as_tensor(x)
    if x.ndim not in (2, 3):
        raise ValueError(f"ssm_apply expects (L, d) or (B, L, d), got {x.shape}")
    length = x.shape[-2]
    kern = materialize_kernel(discretize(p), length)
    axes = (1, 0) if x.ndim == 2 else (0, 2, 1)
    cols = T.transpose(x, axes)  # (..., d, L)
    y = T.causal_conv(kern.taps, cols)
    y = T.transpose(y, axes)
    return T.add(y, T.mul(p.d, x))
