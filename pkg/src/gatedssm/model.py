"""Sequence model variants for masked-language-model pretraining.

Two block families share the same embedding and prediction head:

* gated blocks: a single entry LayerNorm feeds three gated branches; the
  forward and backward halves of the sequence are routed through shared
  one-dimensional kernels (or attention) and recombined multiplicatively
  before a residual add.
* stacked blocks: the familiar post-norm transformer layer, where the
  mixing sublayer is either multi-head attention or a pair of sequential
  directional state-space maps.

Either family accepts `routing` of "ssm" or "attention", giving four
variants in total. Dropout is driven by an explicit Rng so training runs
are replayable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple

import numpy as np

from . import ssm as S
from .numerics import Rng, Tensor
from .numerics import tensor as T

INIT_STD = 0.02

ARCHS = ("gated", "stacked")
ROUTINGS = ("ssm", "attention")


@dataclass
class ModelConfig:
    """Hyperparameters for one model instance.

    `n_layers`, `intermediate` and `use_position_embeddings` may be left
    None to pick the conventional default for the chosen architecture:
    23 layers for gated, 24 for stacked; inner width 3x the model width
    for gated and 4x for stacked; position embeddings only when routing
    is attention (state-space kernels already encode position).
    """

    arch: str = "gated"
    routing: str = "ssm"
    n_layers: Optional[int] = None
    d_model: int = 1024
    n_state: int = 64
    max_len: int = 128
    vocab_size: int = 30522
    n_heads: int = 16
    intermediate: Optional[int] = None
    dropout: float = 0.1
    use_position_embeddings: Optional[bool] = None
    use_bias: bool = False
    dt_min: float = S.DT_MIN_DEFAULT
    dt_max: float = S.DT_MAX_DEFAULT

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.routing not in ROUTINGS:
            raise ValueError(
                f"routing must be one of {ROUTINGS}, got {self.routing!r}"
            )
        if self.n_layers is None:
            self.n_layers = 23 if self.arch == "gated" else 24
        if self.intermediate is None:
            factor = 3 if self.arch == "gated" else 4
            self.intermediate = factor * self.d_model
        if self.use_position_embeddings is None:
            self.use_position_embeddings = self.routing == "attention"
        for name in ("n_layers", "d_model", "max_len", "vocab_size",
                     "intermediate"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.routing == "attention":
            if self.n_heads < 1 or self.d_model % self.n_heads:
                raise ValueError(
                    "d_model must be divisible by n_heads for attention"
                )
        if self.routing == "ssm" and self.n_state % 2:
            raise ValueError("n_state must be even")


@dataclass
class AttentionParams:
    """Projections for one self-attention sublayer.

    `w_out` is None when the surrounding block supplies its own output
    projection (the gated block's post-routing matrices play that role).
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_out: Optional[Tensor] = None
    b_q: Optional[Tensor] = None
    b_k: Optional[Tensor] = None
    b_v: Optional[Tensor] = None
    b_out: Optional[Tensor] = None


@dataclass
class GatedBlockParams:
    """One gated block: entry norm, three gated branches, recombination."""

    ln_gain: Tensor
    ln_bias: Tensor
    w_v: Tensor            # d x intermediate, value branch
    w_f: Tensor            # d x d, forward routing branch
    w_b: Tensor            # d x d, backward routing branch
    w_u1: Tensor           # d x d, after forward routing
    w_u2: Tensor           # d x d, after backward routing
    w_u: Tensor            # d x intermediate, recombination
    w_o: Tensor            # intermediate x d, output
    ssm_fwd: Optional[S.SsmParams] = None
    ssm_bwd: Optional[S.SsmParams] = None
    attn_fwd: Optional[AttentionParams] = None
    attn_bwd: Optional[AttentionParams] = None
    b_v: Optional[Tensor] = None
    b_f: Optional[Tensor] = None
    b_b: Optional[Tensor] = None
    b_u1: Optional[Tensor] = None
    b_u2: Optional[Tensor] = None
    b_u: Optional[Tensor] = None
    b_o: Optional[Tensor] = None


@dataclass
class StackedBlockParams:
    """One post-norm transformer layer with a pluggable mixing sublayer."""

    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    w_ffn1: Tensor         # d x intermediate
    w_ffn2: Tensor         # intermediate x d
    attn: Optional[AttentionParams] = None
    ssm_fwd: Optional[S.SsmParams] = None
    ssm_bwd: Optional[S.SsmParams] = None
    proj_fwd: Optional[Tensor] = None
    proj_bwd: Optional[Tensor] = None
    b_proj_fwd: Optional[Tensor] = None
    b_proj_bwd: Optional[Tensor] = None
    b_ffn1: Optional[Tensor] = None
    b_ffn2: Optional[Tensor] = None


@dataclass
class EmbeddingParams:
    """Token table, optional position table, and the tied prediction head.

    The output projection of the head reuses `token_table` itself, so the
    tied weights are one storage object, not a copy.
    """

    token_table: Tensor
    position_table: Optional[Tensor] = None
    head_transform: Tensor = None
    head_ln_gain: Tensor = None
    head_ln_bias: Tensor = None
    head_transform_bias: Optional[Tensor] = None
    head_output_bias: Optional[Tensor] = None


@dataclass
class ModelParams:
    config: ModelConfig
    embeddings: EmbeddingParams
    blocks: List[object] = field(default_factory=list)

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        """All parameter tensors in a stable order, tied weights once."""
        emb = self.embeddings
        yield "embeddings.token_table", emb.token_table
        if emb.position_table is not None:
            yield "embeddings.position_table", emb.position_table
        yield "embeddings.head_transform", emb.head_transform
        if emb.head_transform_bias is not None:
            yield "embeddings.head_transform_bias", emb.head_transform_bias
        yield "embeddings.head_ln_gain", emb.head_ln_gain
        yield "embeddings.head_ln_bias", emb.head_ln_bias
        if emb.head_output_bias is not None:
            yield "embeddings.head_output_bias", emb.head_output_bias
        for i, blk in enumerate(self.blocks):
            prefix = f"blocks.{i}."
            for name, t in _named_block_params(blk):
                yield prefix + name, t

    def trainable_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for name, t in self.named_parameters():
            if t.requires_grad:
                yield name, t


_SSM_FIELDS = ("log_neg_re", "im", "b_re", "b_im", "c_re", "c_im",
               "log_dt", "d")


def _named_ssm_params(p: S.SsmParams) -> Iterator[Tuple[str, Tensor]]:
    for f in _SSM_FIELDS:
        yield f, getattr(p, f)


def _named_attn_params(p: AttentionParams) -> Iterator[Tuple[str, Tensor]]:
    for f in ("w_q", "w_k", "w_v", "w_out", "b_q", "b_k", "b_v", "b_out"):
        t = getattr(p, f)
        if t is not None:
            yield f, t


def _named_block_params(blk) -> Iterator[Tuple[str, Tensor]]:
    if isinstance(blk, GatedBlockParams):
        simple = ("ln_gain", "ln_bias", "w_v", "w_f", "w_b", "w_u1",
                  "w_u2", "w_u", "w_o", "b_v", "b_f", "b_b", "b_u1",
                  "b_u2", "b_u", "b_o")
        nested = ("ssm_fwd", "ssm_bwd", "attn_fwd", "attn_bwd")
    elif isinstance(blk, StackedBlockParams):
        simple = ("ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
                  "w_ffn1", "w_ffn2", "proj_fwd", "proj_bwd",
                  "b_proj_fwd", "b_proj_bwd", "b_ffn1", "b_ffn2")
        nested = ("attn", "ssm_fwd", "ssm_bwd")
    else:
        raise TypeError(f"unknown block type {type(blk).__name__}")
    for f in simple:
        t = getattr(blk, f)
        if t is not None:
            yield f, t
    for f in nested:
        sub = getattr(blk, f)
        if sub is None:
            continue
        it = (_named_ssm_params(sub) if isinstance(sub, S.SsmParams)
              else _named_attn_params(sub))
        for name, t in it:
            yield f"{f}.{name}", t


# ---------------------------------------------------------------------------
# initialization


def _weight(rng: Rng, n_in: int, n_out: int) -> Tensor:
    return Tensor(rng.normal((n_in, n_out), std=INIT_STD),
                  requires_grad=True)


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


def _ones(n: int) -> Tensor:
    return Tensor(np.ones(n), requires_grad=True)


def _maybe_bias(cfg: ModelConfig, n: int) -> Optional[Tensor]:
    return _zeros(n) if cfg.use_bias else None


def _init_attention(cfg: ModelConfig, rng: Rng,
                    with_out: bool) -> AttentionParams:
    d = cfg.d_model
    return AttentionParams(
        w_q=_weight(rng, d, d), w_k=_weight(rng, d, d),
        w_v=_weight(rng, d, d),
        w_out=_weight(rng, d, d) if with_out else None,
        b_q=_maybe_bias(cfg, d), b_k=_maybe_bias(cfg, d),
        b_v=_maybe_bias(cfg, d),
        b_out=_maybe_bias(cfg, d) if with_out else None,
    )


def _init_ssm(cfg: ModelConfig, rng: Rng) -> S.SsmParams:
    return S.init_s4d(cfg.n_state, cfg.dt_min, cfg.dt_max, rng)


def _init_gated_block(cfg: ModelConfig, rng: Rng) -> GatedBlockParams:
    d, inner = cfg.d_model, cfg.intermediate
    blk = GatedBlockParams(
        ln_gain=_ones(d), ln_bias=_zeros(d),
        w_v=_weight(rng, d, inner),
        w_f=_weight(rng, d, d), w_b=_weight(rng, d, d),
        w_u1=_weight(rng, d, d), w_u2=_weight(rng, d, d),
        w_u=_weight(rng, d, inner), w_o=_weight(rng, inner, d),
        b_v=_maybe_bias(cfg, inner), b_f=_maybe_bias(cfg, d),
        b_b=_maybe_bias(cfg, d), b_u1=_maybe_bias(cfg, d),
        b_u2=_maybe_bias(cfg, d), b_u=_maybe_bias(cfg, inner),
        b_o=_maybe_bias(cfg, d),
    )
    if cfg.routing == "ssm":
        blk.ssm_fwd = _init_ssm(cfg, rng)
        blk.ssm_bwd = _init_ssm(cfg, rng)
    else:
        blk.attn_fwd = _init_attention(cfg, rng, with_out=False)
        blk.attn_bwd = _init_attention(cfg, rng, with_out=False)
    return blk


def _init_stacked_block(cfg: ModelConfig, rng: Rng) -> StackedBlockParams:
    d, inner = cfg.d_model, cfg.intermediate
    blk = StackedBlockParams(
        ln1_gain=_ones(d), ln1_bias=_zeros(d),
        ln2_gain=_ones(d), ln2_bias=_zeros(d),
        w_ffn1=_weight(rng, d, inner), w_ffn2=_weight(rng, inner, d),
        b_ffn1=_maybe_bias(cfg, inner), b_ffn2=_maybe_bias(cfg, d),
    )
    if cfg.routing == "attention":
        blk.attn = _init_attention(cfg, rng, with_out=True)
    else:
        blk.ssm_fwd = _init_ssm(cfg, rng)
        blk.ssm_bwd = _init_ssm(cfg, rng)
        blk.proj_fwd = _weight(rng, d, d)
        blk.proj_bwd = _weight(rng, d, d)
        blk.b_proj_fwd = _maybe_bias(cfg, d)
        blk.b_proj_bwd = _maybe_bias(cfg, d)
    return blk


def init_model(cfg: ModelConfig, rng: Rng) -> ModelParams:
    """Fresh parameters for `cfg`, drawn from `rng`."""
    d = cfg.d_model
    emb = EmbeddingParams(
        token_table=Tensor(rng.normal((cfg.vocab_size, d), std=INIT_STD),
                           requires_grad=True),
        position_table=(
            Tensor(rng.normal((cfg.max_len, d), std=INIT_STD),
                   requires_grad=True)
            if cfg.use_position_embeddings else None),
        head_transform=_weight(rng, d, d),
        head_transform_bias=_maybe_bias(cfg, d),
        head_ln_gain=_ones(d), head_ln_bias=_zeros(d),
        head_output_bias=(_zeros(cfg.vocab_size) if cfg.use_bias else None),
    )
    init_block = (_init_gated_block if cfg.arch == "gated"
                  else _init_stacked_block)
    blocks = [init_block(cfg, rng) for _ in range(cfg.n_layers)]
    return ModelParams(config=cfg, embeddings=emb, blocks=blocks)


# ---------------------------------------------------------------------------
# forward pieces


def flip(x, axis: int = -2) -> Tensor:
    """Reverse the sequence axis (rows by default)."""
    return T.flip(x, axis)


def _linear(x, w: Tensor, b: Optional[Tensor]) -> Tensor:
    y = T.matmul(x, w)
    return T.add(y, b) if b is not None else y


def dropout(x, p: float, rng: Optional[Rng], train: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or at p == 0."""
    if not train or p == 0.0:
        return T.as_tensor(x)
    if rng is None:
        raise ValueError("dropout in training mode requires an rng")
    x = T.as_tensor(x)
    keep = (rng.uniform(x.shape) >= p) / (1.0 - p)
    return T.mul(x, Tensor(keep))


def multihead_attention(x, p: AttentionParams, n_heads: int) -> Tensor:
    """Scaled dot-product self-attention over the row axis.

    Accepts (L, d) or (batch, L, d); heads split the feature axis.
    """
    x = T.as_tensor(x)
    d = x.shape[-1]
    if d % n_heads:
        raise ValueError("feature width must be divisible by n_heads")
    d_head = d // n_heads
    lead = x.shape[:-2]
    length = x.shape[-2]

    def split(t):
        t = T.reshape(t, lead + (length, n_heads, d_head))
        perm = tuple(range(len(lead))) + (
            len(lead) + 1, len(lead), len(lead) + 2)
        return T.transpose(t, perm)   # (..., heads, L, d_head)

    q = split(_linear(x, p.w_q, p.b_q))
    k = split(_linear(x, p.w_k, p.b_k))
    v = split(_linear(x, p.w_v, p.b_v))
    kt_perm = tuple(range(len(lead) + 1)) + (len(lead) + 2, len(lead) + 1)
    scores = T.mul(T.matmul(q, T.transpose(k, kt_perm)),
                   1.0 / math.sqrt(d_head))
    ctx = T.matmul(T.softmax(scores, axis=-1), v)
    back = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    ctx = T.reshape(T.transpose(ctx, back), lead + (length, d))
    if p.w_out is not None:
        ctx = _linear(ctx, p.w_out, p.b_out)
    return ctx


def _route_gated(branch, ssm_p, attn_p, n_heads: int) -> Tensor:
    if ssm_p is not None:
        return S.ssm_apply(ssm_p, branch)
    return multihead_attention(branch, attn_p, n_heads)


def gated_block(x, p: GatedBlockParams, *, dropout_p: float = 0.0,
                rng: Optional[Rng] = None, train: bool = False,
                n_heads: int = 1, skip_input_norm: bool = False) -> Tensor:
    """One gated block over (L, d) or (batch, L, d) activations.

    `skip_input_norm` bypasses the entry LayerNorm; it exists for probe
    configurations that need the branch structure without cross-feature
    coupling, and is never used in training.
    """
    x = T.as_tensor(x)
    d = p.w_f.shape[0]
    if x.shape[-1] != d:
        raise ValueError(
            f"input width {x.shape[-1]} does not match block width {d}"
        )
    h = x if skip_input_norm else T.layer_norm(x, p.ln_gain, p.ln_bias)
    value = T.gelu(_linear(h, p.w_v, p.b_v))
    fwd = T.gelu(_linear(h, p.w_f, p.b_f))
    bwd = T.gelu(_linear(flip(h), p.w_b, p.b_b))
    u1 = _linear(_route_gated(fwd, p.ssm_fwd, p.attn_fwd, n_heads),
                 p.w_u1, p.b_u1)
    u2 = _linear(_route_gated(bwd, p.ssm_bwd, p.attn_bwd, n_heads),
                 p.w_u2, p.b_u2)
    u = T.gelu(_linear(T.mul(u1, flip(u2)), p.w_u, p.b_u))
    out = _linear(T.mul(u, value), p.w_o, p.b_o)
    out = dropout(out, dropout_p, rng, train)
    return T.add(out, x)


def stacked_route(x, p: StackedBlockParams, routing: str,
                  n_heads: int = 1) -> Tensor:
    """The mixing sublayer of a stacked block, without norm or residual.

    Attention routing is one multi-head self-attention; ssm routing runs
    a forward directional map, then a reversed one on its output, each
    followed by a square projection.
    """
    if routing == "attention":
        return multihead_attention(x, p.attn, n_heads)
    if routing == "ssm":
        stage1 = _linear(S.ssm_apply(p.ssm_fwd, x),
                         p.proj_fwd, p.b_proj_fwd)
        return _linear(flip(S.ssm_apply(p.ssm_bwd, flip(stage1))),
                       p.proj_bwd, p.b_proj_bwd)
    raise ValueError(f"unknown routing {routing!r}")


def stacked_block(x, p: StackedBlockParams, routing: str, *,
                  n_heads: int = 1, dropout_p: float = 0.0,
                  rng: Optional[Rng] = None, train: bool = False) -> Tensor:
    """One post-norm transformer layer with attention or ssm mixing."""
    x = T.as_tensor(x)
    d = p.w_ffn1.shape[0]
    if x.shape[-1] != d:
        raise ValueError(
            f"input width {x.shape[-1]} does not match block width {d}"
        )
    mixed = dropout(stacked_route(x, p, routing, n_heads),
                    dropout_p, rng, train)
    sub1 = T.layer_norm(T.add(x, mixed), p.ln1_gain, p.ln1_bias)
    ffn = _linear(T.gelu(_linear(sub1, p.w_ffn1, p.b_ffn1)),
                  p.w_ffn2, p.b_ffn2)
    ffn = dropout(ffn, dropout_p, rng, train)
    return T.layer_norm(T.add(sub1, ffn), p.ln2_gain, p.ln2_bias)


def forward_mlm(tokens: np.ndarray, cfg: ModelConfig, params: ModelParams,
                *, train: bool = False, rng: Optional[Rng] = None) -> Tensor:
    """Token ids (L,) or (batch, L) to prediction logits (..., L, vocab).

    Dropout fires only with train=True, drawing masks from `rng` in a
    fixed order so a given (parameters, rng state) pair is replayable.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim not in (1, 2):
        raise ValueError("tokens must be a 1-D or 2-D integer array")
    length = tokens.shape[-1]
    emb = params.embeddings
    h = T.embedding(emb.token_table, tokens)
    if cfg.use_position_embeddings:
        if length > cfg.max_len:
            raise ValueError(
                f"sequence length {length} exceeds position table "
                f"size {cfg.max_len}"
            )
        h = T.add(h, T.getitem(emb.position_table, slice(0, length)))
    p_drop = cfg.dropout if train else 0.0
    for blk in params.blocks:
        if cfg.arch == "gated":
            h = gated_block(h, blk, dropout_p=p_drop, rng=rng, train=train,
                            n_heads=cfg.n_heads)
        else:
            h = stacked_block(h, blk, cfg.routing, n_heads=cfg.n_heads,
                              dropout_p=p_drop, rng=rng, train=train)
    head = T.layer_norm(
        T.gelu(_linear(h, emb.head_transform, emb.head_transform_bias)),
        emb.head_ln_gain, emb.head_ln_bias)
    logits = T.matmul(head, T.transpose(emb.token_table))
    if emb.head_output_bias is not None:
        logits = T.add(logits, emb.head_output_bias)
    return logits


# ---------------------------------------------------------------------------
# parameter accounting


def _ssm_param_count(n_state: int) -> int:
    # Six per stored conjugate pair plus the step size and skip scalars.
    return 6 * (n_state // 2) + 2


def param_count(cfg: ModelConfig) -> dict:
    """Analytic parameter counts, itemized; allocates nothing.

    `block_weights` covers every dense weight matrix in one block
    (including attention projections when routing is attention);
    `block_ssm` covers the state-space parameters; biases are zero
    unless `use_bias` is set.
    """
    d, inner, n = cfg.d_model, cfg.intermediate, cfg.n_state
    bias = cfg.use_bias
    if cfg.arch == "gated":
        weights = 3 * d * inner + 4 * d * d
        biases = (2 * inner + 5 * d) if bias else 0
        norm = 2 * d
        if cfg.routing == "ssm":
            ssm = 2 * _ssm_param_count(n)
        else:
            ssm = 0
            weights += 2 * 3 * d * d
            biases += 2 * 3 * d if bias else 0
    else:
        weights = 2 * d * inner
        biases = (inner + d) if bias else 0
        norm = 4 * d
        if cfg.routing == "attention":
            ssm = 0
            weights += 4 * d * d
            biases += 4 * d if bias else 0
        else:
            ssm = 2 * _ssm_param_count(n)
            weights += 2 * d * d
            biases += 2 * d if bias else 0
    per_block = weights + biases + norm + ssm
    embeddings = cfg.vocab_size * d
    if cfg.use_position_embeddings:
        embeddings += cfg.max_len * d
    head = d * d + 2 * d
    if bias:
        head += d + cfg.vocab_size
    counts = {
        "block_weights": weights,
        "block_biases": biases,
        "block_layer_norm": norm,
        "block_ssm": ssm,
        "block_total": per_block,
        "blocks_total": cfg.n_layers * per_block,
        "embeddings": embeddings,
        "head": head,
    }
    counts["total"] = counts["blocks_total"] + embeddings + head
    return counts


def count_allocated(params: ModelParams) -> int:
    """Exhaustive size sum over named parameters (tied weights once)."""
    return sum(t.data.size for _, t in params.named_parameters())
