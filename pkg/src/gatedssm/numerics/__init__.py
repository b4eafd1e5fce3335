"""Numeric substrate: tensors with reverse-mode autodiff, FFT, RNG."""

from .fft import ComplexVector, fft, ifft, next_pow2, transform
from .rng import Rng, derive_seed, mix64
from .tensor import (
    Tensor,
    TapeNode,
    add,
    as_tensor,
    atan2,
    backward,
    causal_conv,
    div,
    embedding,
    flip,
    gelu,
    getitem,
    layer_norm,
    masked_cross_entropy,
    matmul,
    mul,
    neg,
    no_grad,
    power,
    reshape,
    softmax,
    sub,
    tcos,
    texp,
    tlog,
    tmean,
    tsin,
    tsqrt,
    tsum,
    transpose,
)

__all__ = [
    "ComplexVector",
    "Rng",
    "TapeNode",
    "Tensor",
    "add",
    "as_tensor",
    "atan2",
    "backward",
    "causal_conv",
    "derive_seed",
    "div",
    "embedding",
    "fft",
    "flip",
    "gelu",
    "getitem",
    "ifft",
    "layer_norm",
    "masked_cross_entropy",
    "matmul",
    "mix64",
    "mul",
    "neg",
    "next_pow2",
    "no_grad",
    "power",
    "reshape",
    "softmax",
    "sub",
    "tcos",
    "texp",
    "tlog",
    "tmean",
    "transform",
    "transpose",
    "tsin",
    "tsqrt",
    "tsum",
]
