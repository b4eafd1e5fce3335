"""MLM pretraining: shard preparation, the training loop, evaluation,
and continued pretraining at a longer sequence length.

Determinism contract: given (seed, config, corpus), shard bytes, batch
order, dropout masks, and therefore every loss value are reproducible.
Batch order and dropout are pure functions of (seed, step), so resuming
from a checkpoint at step k replays exactly the run that never stopped.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..checkpoint import load_checkpoint, load_into, save_checkpoint
from ..model import ModelConfig, ModelParams, forward_mlm, init_model
from ..numerics import Rng, backward, derive_seed, no_grad
from ..numerics import tensor as T
from .masking import IGNORE_LABEL, mask_tokens
from .optim import SCHEDULES, AdamW
from .shards import read_shard, write_shard
from .vocab import MASK, PAD, Vocab, build_vocab

LOSS_CSV_NAME = "loss.csv"
FINAL_CHECKPOINT = "checkpoint"


@dataclass
class TrainConfig:
    steps: int
    batch_size: int = 16
    peak_lr: float = 1e-3
    schedule: str = "cosine"
    warmup_frac: float = 0.01
    weight_decay: float = 0.01
    clip_norm: float = 0.0
    seed: int = 0
    checkpoint_every: int = 0   # 0 keeps only the final checkpoint

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.schedule not in SCHEDULES:
            raise ValueError(
                f"schedule must be one of {sorted(SCHEDULES)}"
            )


# ---------------------------------------------------------------------------
# shard preparation


def chunk_corpus(lines, vocab: Vocab, seq_len: int) -> np.ndarray:
    """Encode documents and cut each into fixed-length rows, PAD on the
    tail of a document's last chunk. Returns (n_chunks, seq_len) ids."""
    rows = []
    for line in lines:
        ids = vocab.encode(line.split())
        for start in range(0, len(ids), seq_len):
            piece = ids[start:start + seq_len]
            if len(piece) < seq_len:
                piece = piece + [PAD] * (seq_len - len(piece))
            rows.append(piece)
    if not rows:
        raise ValueError("corpus produced no token chunks")
    return np.array(rows, dtype=np.int64)


def masking_stats(input_ids: np.ndarray, labels: np.ndarray) -> dict:
    """Observed selection fraction and replacement split of a shard.

    The random-replacement count is inferred from the visible ids, so a
    random draw that happens to equal the original token is tallied as
    kept; with a realistic vocabulary that bias is far below the
    binomial noise.
    """
    selected = labels != IGNORE_LABEL
    # Unselected non-special positions keep an id >= 5, so the union
    # below recovers the maskable set from a masked shard alone.
    n_maskable = int(np.sum((input_ids >= 5) | selected))
    n_selected = int(selected.sum())
    masked = int(np.sum(selected & (input_ids == MASK)))
    kept = int(np.sum(selected & (input_ids == labels)))
    randomized = n_selected - masked - kept
    return {
        "maskable_positions": n_maskable,
        "selected": n_selected,
        "selected_fraction": n_selected / max(n_maskable, 1),
        "masked": masked,
        "randomized": randomized,
        "kept": kept,
    }


def prepare_shards(corpus_path: str, out_dir: str, *, vocab_size: int,
                   seq_len: int, mask_rate: float = 0.15, seed: int = 0,
                   n_shards: int = 1,
                   holdout_fraction: float = 0.1) -> dict:
    """Corpus file -> vocab file + masked train/heldout shard files.

    Chunks are masked offline. The heldout split takes every k-th chunk
    so both splits cover the corpus evenly; shard contents are a pure
    function of (corpus bytes, seed, sizes).
    """
    os.makedirs(out_dir, exist_ok=True)
    with open(corpus_path, "r", encoding="utf-8") as f:
        lines = [line.rstrip("\n") for line in f]
    vocab = build_vocab(lines, vocab_size)
    vocab.save(os.path.join(out_dir, "vocab.txt"))
    chunks = chunk_corpus(lines, vocab, seq_len)

    k = max(int(round(1.0 / holdout_fraction)), 2) if holdout_fraction else 0
    if k:
        held_sel = np.arange(len(chunks)) % k == 0
    else:
        held_sel = np.zeros(len(chunks), dtype=bool)
    splits = {"heldout": chunks[held_sel], "train": chunks[~held_sel]}

    paths: Dict[str, List[str]] = {"train": [], "heldout": []}
    stats_all = []
    for split, rows in splits.items():
        if not len(rows):
            continue
        parts = n_shards if split == "train" else 1
        bounds = np.linspace(0, len(rows), parts + 1, dtype=int)
        for si in range(parts):
            part = rows[bounds[si]:bounds[si + 1]]
            if not len(part):
                continue
            rng = Rng(derive_seed(seed, split, si))
            ids, labels = mask_tokens(part, mask_rate, rng, len(vocab))
            name = (f"{split}-{si:04d}.bin" if split == "train"
                    else "heldout.bin")
            path = os.path.join(out_dir, name)
            write_shard(path, ids, labels)
            paths[split].append(path)
            stats_all.append(masking_stats(ids, labels))

    agg = {key: sum(s[key] for s in stats_all)
           for key in ("maskable_positions", "selected", "masked",
                       "randomized", "kept")}
    agg["selected_fraction"] = (
        agg["selected"] / max(agg["maskable_positions"], 1))
    return {
        "vocab_path": os.path.join(out_dir, "vocab.txt"),
        "vocab_size": len(vocab),
        "n_chunks": int(len(chunks)),
        "train_paths": paths["train"],
        "heldout_paths": paths["heldout"],
        "stats": agg,
    }


def load_split(paths: List[str]) -> Tuple[np.ndarray, np.ndarray]:
    ids, labels = [], []
    for p in paths:
        a, b = read_shard(p)
        ids.append(a)
        labels.append(b)
    return np.concatenate(ids), np.concatenate(labels)


# ---------------------------------------------------------------------------
# training


def _batch_indices(seed: int, step: int, batch_size: int, count: int,
                   perm_cache: dict) -> np.ndarray:
    """Deterministic epoch-shuffled indices for one step."""
    out = np.empty(batch_size, dtype=np.int64)
    for i in range(batch_size):
        pos = step * batch_size + i
        epoch = pos // count
        perm = perm_cache.get(epoch)
        if perm is None:
            perm = Rng(derive_seed(seed, "order", epoch)).permutation(count)
            perm_cache[epoch] = perm
        out[i] = perm[pos % count]
    return out


def _checkpoint_entries(params: ModelParams, optimizer: AdamW):
    for name, t in params.named_parameters():
        yield name, t.data
    for name, arr in optimizer.state_entries():
        yield name, arr


def save_run_checkpoint(directory: str, params: ModelParams,
                        optimizer: AdamW, step: int,
                        train_cfg: TrainConfig) -> None:
    meta = {
        "step": step,
        "optimizer_steps": optimizer.step_count,
        "model_config": asdict(params.config),
        "train_config": asdict(train_cfg),
    }
    save_checkpoint(directory, _checkpoint_entries(params, optimizer),
                    meta=meta)


def load_run_checkpoint(directory: str):
    """Rebuild (params, optimizer, meta) from a saved run checkpoint."""
    entries, meta = load_checkpoint(directory)
    cfg = ModelConfig(**meta["model_config"])
    params = init_model(cfg, Rng(0))
    model_entries = {k: v for k, v in entries.items()
                     if not k.startswith(("adam_m.", "adam_v."))}
    load_into(params.named_parameters(), model_entries)
    tc = meta.get("train_config", {})
    optimizer = AdamW(params.trainable_parameters(),
                      weight_decay=tc.get("weight_decay", 0.0),
                      clip_norm=tc.get("clip_norm", 0.0))
    adam_entries = {k: v for k, v in entries.items()
                    if k.startswith(("adam_m.", "adam_v."))}
    if adam_entries:
        optimizer.load_state(adam_entries, meta.get("optimizer_steps", 0))
    return params, optimizer, meta


def _batch_loss(cfg: ModelConfig, params: ModelParams, ids: np.ndarray,
                labels: np.ndarray, *, train: bool,
                rng: Optional[Rng]) -> T.Tensor:
    logits = forward_mlm(ids, cfg, params, train=train, rng=rng)
    n_rows = int(np.prod(labels.shape))
    flat = T.reshape(logits, (n_rows, cfg.vocab_size))
    return T.masked_cross_entropy(flat, labels.reshape(-1))


def train_mlm(model_cfg: ModelConfig, train_cfg: TrainConfig,
              input_ids: np.ndarray, labels: np.ndarray, out_dir: str,
              *, params: Optional[ModelParams] = None,
              optimizer: Optional[AdamW] = None,
              start_step: int = 0) -> List[Tuple[int, float, float]]:
    """Run the MLM loop; returns [(step, lr, loss)] and writes artifacts.

    Writes `loss.csv` plus a final checkpoint directory (and periodic
    ones when configured). A non-finite loss aborts with the last
    written checkpoint left intact.
    """
    os.makedirs(out_dir, exist_ok=True)
    if params is None:
        params = init_model(model_cfg,
                            Rng(derive_seed(train_cfg.seed, "init")))
    if optimizer is None:
        optimizer = AdamW(params.trainable_parameters(),
                          weight_decay=train_cfg.weight_decay,
                          clip_norm=train_cfg.clip_norm)
    schedule = SCHEDULES[train_cfg.schedule]
    count = len(input_ids)
    if count < 1:
        raise ValueError("no training sequences")
    perm_cache: dict = {}
    history: List[Tuple[int, float, float]] = []
    csv_path = os.path.join(out_dir, LOSS_CSV_NAME)
    mode = "a" if start_step and os.path.exists(csv_path) else "w"
    with open(csv_path, mode, encoding="utf-8") as csv:
        if mode == "w":
            csv.write("step,lr,loss\n")
        for step in range(start_step, train_cfg.steps):
            idx = _batch_indices(train_cfg.seed, step,
                                 train_cfg.batch_size, count, perm_cache)
            lr = schedule(step, train_cfg.steps, train_cfg.warmup_frac,
                          train_cfg.peak_lr)
            drop_rng = Rng(derive_seed(train_cfg.seed, "dropout", step))
            loss = _batch_loss(model_cfg, params, input_ids[idx],
                               labels[idx], train=True, rng=drop_rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise RuntimeError(
                    f"non-finite loss at step {step}; the most recent "
                    f"checkpoint is retained"
                )
            optimizer.zero_grad()
            backward(loss)
            optimizer.step(lr)
            history.append((step, lr, value))
            csv.write(f"{step},{lr!r},{value!r}\n")
            csv.flush()
            done = step + 1
            if (train_cfg.checkpoint_every
                    and done % train_cfg.checkpoint_every == 0
                    and done < train_cfg.steps):
                save_run_checkpoint(
                    os.path.join(out_dir, f"checkpoint-step-{done}"),
                    params, optimizer, done, train_cfg)
    save_run_checkpoint(os.path.join(out_dir, FINAL_CHECKPOINT),
                        params, optimizer, train_cfg.steps, train_cfg)
    return history


def eval_mlm(model_cfg: ModelConfig, params: ModelParams,
             input_ids: np.ndarray, labels: np.ndarray,
             batch_size: int = 16) -> Tuple[float, float]:
    """Mean cross-entropy per labeled position and its exp (perplexity)."""
    total, weight = 0.0, 0
    with no_grad():
        for start in range(0, len(input_ids), batch_size):
            ids = input_ids[start:start + batch_size]
            lab = labels[start:start + batch_size]
            n = int(np.sum(lab != IGNORE_LABEL))
            if n == 0:
                continue
            loss = _batch_loss(model_cfg, params, ids, lab,
                               train=False, rng=None)
            total += float(loss.data) * n
            weight += n
    if weight == 0:
        raise ValueError("evaluation data has no labeled positions")
    mean = total / weight
    return mean, float(np.exp(mean))


def continue_pretrain(checkpoint_dir: str, new_len: int,
                      input_ids: np.ndarray, labels: np.ndarray,
                      steps: int, lr: float, out_dir: str,
                      *, seed: Optional[int] = None,
                      batch_size: Optional[int] = None):
    """Length extension: reload, lift max_len, keep training.

    The state-space kernels simply materialize at the longer length, so
    no parameters are added or approximated. Optimizer moments restart
    (the run is a new phase at a fixed learning rate).
    """
    params, _, meta = load_run_checkpoint(checkpoint_dir)
    cfg = params.config
    if new_len <= cfg.max_len:
        raise ValueError(
            f"new length {new_len} must exceed current max_len "
            f"{cfg.max_len}"
        )
    if cfg.use_position_embeddings:
        raise ValueError(
            "length extension needs kernel-based routing; this model "
            "uses a fixed-size position table"
        )
    if input_ids.shape[1] != new_len:
        raise ValueError(
            f"extension data has length {input_ids.shape[1]}, "
            f"expected {new_len}"
        )
    new_cfg = replace(cfg, max_len=new_len)
    params.config = new_cfg
    old_tc = meta.get("train_config", {})
    tc = TrainConfig(
        steps=steps,
        batch_size=batch_size or old_tc.get("batch_size", 16),
        peak_lr=lr,
        schedule="constant",
        warmup_frac=old_tc.get("warmup_frac", 0.01),
        weight_decay=old_tc.get("weight_decay", 0.0),
        clip_norm=old_tc.get("clip_norm", 0.0),
        seed=seed if seed is not None else old_tc.get("seed", 0) + 1,
    )
    history = train_mlm(new_cfg, tc, input_ids, labels, out_dir,
                        params=params)
    return history, new_cfg
