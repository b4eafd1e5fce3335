"""Training loop behavior: determinism, resume, artifacts, evaluation."""

import os

import numpy as np
import pytest

from gatedssm.model import ModelConfig, init_model
from gatedssm.numerics import Rng, derive_seed
from gatedssm.pretrain import (
    FINAL_CHECKPOINT,
    LOSS_CSV_NAME,
    N_SPECIAL,
    TrainConfig,
    Vocab,
    build_vocab,
    chunk_corpus,
    continue_pretrain,
    eval_mlm,
    generate_corpus,
    load_run_checkpoint,
    load_split,
    mask_tokens,
    masking_stats,
    prepare_shards,
    train_mlm,
)
from gatedssm.pretrain.trainer import _batch_indices

VOCAB = 60


def toy_cfg(**kw) -> ModelConfig:
    base = dict(arch="gated", routing="ssm", n_layers=2, d_model=32,
                n_state=8, max_len=16, vocab_size=VOCAB, dropout=0.1)
    base.update(kw)
    return ModelConfig(**base)


def toy_data(n_rows: int, seq_len: int = 16, seed: int = 0):
    ids = Rng(derive_seed(seed, "data")).integers(
        N_SPECIAL, VOCAB, (n_rows, seq_len))
    return mask_tokens(ids, 0.15, Rng(derive_seed(seed, "mask")), VOCAB)


# ---------------------------------------------------------------------------
# corpus chunking and shard preparation


def test_chunk_corpus_pads_tail():
    v = build_vocab(["a b c d e f g h i j"], max_size=32)
    rows = chunk_corpus(["a b c d e f g h i j"], v, seq_len=4)
    assert rows.shape == (3, 4)
    assert np.all(rows[:2] >= N_SPECIAL)
    assert list(rows[2, 2:]) == [0, 0]


def test_chunk_corpus_does_not_mix_documents():
    v = build_vocab(["a b c", "d e"], max_size=32)
    rows = chunk_corpus(["a b c", "d e"], v, seq_len=4)
    assert rows.shape == (2, 4)
    assert rows[0, 3] == 0 and np.all(rows[1, 2:] == 0)


def test_masking_stats_hand_example():
    ids = np.array([[0, 4, 7, 8, 9, 10]])
    labels = np.array([[-1, -1, 7, 12, -1, 13]])
    # position 2: [MASK]=4 would be id 4; here ids show 7==label: kept.
    # position 3: visible 8 != label 12: randomized.
    # position 5: visible 10 != 13: randomized.
    s = masking_stats(ids, labels)
    assert s["maskable_positions"] == 4
    assert s["selected"] == 3
    assert s["kept"] == 1
    assert s["randomized"] == 2
    assert s["masked"] == 0
    assert s["selected_fraction"] == pytest.approx(0.75)


def test_prepare_shards_outputs_and_determinism(tmp_path):
    corpus = str(tmp_path / "corpus.txt")
    generate_corpus(corpus, n_docs=30, doc_len=120, n_words=48, seed=9)

    outs = []
    for tag in ("a", "b"):
        out = str(tmp_path / tag)
        info = prepare_shards(corpus, out, vocab_size=64, seq_len=16,
                              seed=5, n_shards=2)
        outs.append((out, info))
    info = outs[0][1]
    assert len(info["train_paths"]) == 2
    assert len(info["heldout_paths"]) == 1
    assert info["vocab_size"] <= 64
    assert 0.13 <= info["stats"]["selected_fraction"] <= 0.17
    for name in sorted(os.listdir(outs[0][0])):
        a = open(os.path.join(outs[0][0], name), "rb").read()
        b = open(os.path.join(outs[1][0], name), "rb").read()
        assert a == b, name

    ids, labels = load_split(info["train_paths"])
    h_ids, _ = load_split(info["heldout_paths"])
    assert ids.shape[1] == 16
    assert len(ids) + len(h_ids) == info["n_chunks"]
    # Holdout takes every 10th chunk by default.
    assert len(h_ids) == pytest.approx(info["n_chunks"] / 10, abs=1)
    assert labels.max() >= N_SPECIAL


def test_prepare_shards_different_seed_differs(tmp_path):
    corpus = str(tmp_path / "c.txt")
    generate_corpus(corpus, n_docs=5, doc_len=100, n_words=32, seed=1)
    a = prepare_shards(corpus, str(tmp_path / "a"), vocab_size=40,
                       seq_len=8, seed=1)
    b = prepare_shards(corpus, str(tmp_path / "b"), vocab_size=40,
                       seq_len=8, seed=2)
    raw_a = open(a["train_paths"][0], "rb").read()
    raw_b = open(b["train_paths"][0], "rb").read()
    assert raw_a != raw_b


# ---------------------------------------------------------------------------
# batch order


def test_batch_indices_cover_each_epoch():
    cache: dict = {}
    seen = [int(i) for s in range(5)
            for i in _batch_indices(3, s, 2, 10, cache)]
    assert sorted(seen) == list(range(10))
    again = [int(i) for s in range(5)
             for i in _batch_indices(3, s, 2, 10, {})]
    assert seen == again
    # Second epoch reshuffles.
    epoch2 = [int(i) for s in range(5, 10)
              for i in _batch_indices(3, s, 2, 10, cache)]
    assert sorted(epoch2) == list(range(10))
    assert epoch2 != seen


# ---------------------------------------------------------------------------
# the loop itself


def test_initial_loss_near_uniform_and_decreases(tmp_path):
    ids, labels = toy_data(64, seed=2)
    cfg = toy_cfg()
    tc = TrainConfig(steps=60, batch_size=8, peak_lr=3e-3,
                     warmup_frac=0.1, seed=11)
    history = train_mlm(cfg, tc, ids, labels, str(tmp_path / "run"))
    assert len(history) == 60
    first = history[0][2]
    assert first == pytest.approx(np.log(VOCAB), rel=0.05)
    early = np.mean([h[2] for h in history[:10]])
    late = np.mean([h[2] for h in history[-10:]])
    assert late < early


def test_loss_csv_matches_history(tmp_path):
    ids, labels = toy_data(16, seed=3)
    out = str(tmp_path / "run")
    tc = TrainConfig(steps=4, batch_size=4, peak_lr=1e-3, seed=1)
    history = train_mlm(toy_cfg(), tc, ids, labels, out)
    lines = open(os.path.join(out, LOSS_CSV_NAME)).read().splitlines()
    assert lines[0] == "step,lr,loss"
    assert len(lines) == 5
    for (step, lr, loss), line in zip(history, lines[1:]):
        s, l, v = line.split(",")
        assert int(s) == step
        assert float(l) == lr
        assert float(v) == loss  # repr round-trips exactly


def test_final_checkpoint_reproduces_eval(tmp_path):
    ids, labels = toy_data(24, seed=4)
    out = str(tmp_path / "run")
    tc = TrainConfig(steps=5, batch_size=6, peak_lr=1e-3, seed=2)
    cfg = toy_cfg()
    train_mlm(cfg, tc, ids, labels, out)
    params, _, meta = load_run_checkpoint(
        os.path.join(out, FINAL_CHECKPOINT))
    assert meta["step"] == 5
    assert params.config == cfg
    held_ids, held_labels = toy_data(8, seed=5)
    loss1, ppl1 = eval_mlm(cfg, params, held_ids, held_labels)
    params2, _, _ = load_run_checkpoint(os.path.join(out, FINAL_CHECKPOINT))
    loss2, ppl2 = eval_mlm(cfg, params2, held_ids, held_labels)
    assert loss1 == loss2
    assert ppl1 == pytest.approx(np.exp(loss1))


def test_resume_is_bit_exact(tmp_path):
    ids, labels = toy_data(32, seed=6)
    cfg = toy_cfg()
    tc = TrainConfig(steps=10, batch_size=4, peak_lr=2e-3, seed=7,
                     checkpoint_every=5)
    full_dir = str(tmp_path / "full")
    full = train_mlm(cfg, tc, ids, labels, full_dir)
    mid = os.path.join(full_dir, "checkpoint-step-5")
    assert os.path.isdir(mid)
    assert not os.path.isdir(os.path.join(full_dir, "checkpoint-step-10"))

    params, optimizer, meta = load_run_checkpoint(mid)
    resumed_dir = str(tmp_path / "resumed")
    resumed = train_mlm(ModelConfig(**meta["model_config"]),
                        TrainConfig(**meta["train_config"]),
                        ids, labels, resumed_dir,
                        params=params, optimizer=optimizer,
                        start_step=meta["step"])
    assert resumed == full[5:]
    for name in ("params.bin", "manifest.json"):
        a = open(os.path.join(full_dir, FINAL_CHECKPOINT, name),
                 "rb").read()
        b = open(os.path.join(resumed_dir, FINAL_CHECKPOINT, name),
                 "rb").read()
        assert a == b, name


def test_nonfinite_loss_aborts_and_keeps_checkpoint(tmp_path):
    ids, labels = toy_data(16, seed=8)
    cfg = toy_cfg(dropout=0.0)
    out = str(tmp_path / "run")
    tc = TrainConfig(steps=3, batch_size=4, seed=3, checkpoint_every=1)
    train_mlm(cfg, tc, ids, labels, out)
    kept = os.path.join(out, "checkpoint-step-1")
    assert os.path.isdir(kept)

    params, optimizer, _ = load_run_checkpoint(kept)
    params.embeddings.token_table.data[0, 0] = np.nan
    with pytest.raises(RuntimeError, match="non-finite loss at step 1"):
        train_mlm(cfg, tc, ids, labels, out, params=params,
                  optimizer=optimizer, start_step=1)
    assert os.path.isdir(kept)
    reload_params, _, _ = load_run_checkpoint(kept)
    assert np.isfinite(reload_params.embeddings.token_table.data).all()


def test_eval_uniform_baseline_and_validation():
    cfg = toy_cfg(dropout=0.0)
    params = init_model(cfg, Rng(20))
    ids, labels = toy_data(32, seed=9)
    loss, ppl = eval_mlm(cfg, params, ids, labels)
    assert ppl == pytest.approx(VOCAB, rel=0.10)
    with pytest.raises(ValueError, match="no labeled"):
        eval_mlm(cfg, params, ids, np.full_like(labels, -1))


def test_train_config_validation():
    with pytest.raises(ValueError, match="steps"):
        TrainConfig(steps=0)
    with pytest.raises(ValueError, match="schedule"):
        TrainConfig(steps=1, schedule="warm")
    with pytest.raises(ValueError, match="batch_size"):
        TrainConfig(steps=1, batch_size=0)


# ---------------------------------------------------------------------------
# length extension


def checkpointed_toy_run(tmp_path, **cfg_kw):
    ids, labels = toy_data(16, seq_len=8, seed=10)
    cfg = toy_cfg(max_len=8, **cfg_kw)
    out = str(tmp_path / "base")
    tc = TrainConfig(steps=3, batch_size=4, peak_lr=1e-3, seed=4)
    train_mlm(cfg, tc, ids, labels, out)
    return os.path.join(out, FINAL_CHECKPOINT)


def test_continue_pretrain_extends_length(tmp_path):
    ckpt = checkpointed_toy_run(tmp_path)
    before, _, _ = load_run_checkpoint(ckpt)
    n_before = sum(t.data.size for _, t in before.named_parameters())

    long_ids, long_labels = toy_data(16, seq_len=16, seed=11)
    history, new_cfg = continue_pretrain(
        ckpt, 16, long_ids, long_labels, steps=3, lr=1e-4,
        out_dir=str(tmp_path / "ext"))
    assert new_cfg.max_len == 16
    assert len(history) == 3
    assert all(np.isfinite(h[2]) for h in history)
    after, _, meta = load_run_checkpoint(
        os.path.join(str(tmp_path / "ext"), FINAL_CHECKPOINT))
    assert meta["model_config"]["max_len"] == 16
    n_after = sum(t.data.size for _, t in after.named_parameters())
    assert n_after == n_before


def test_continue_pretrain_rejects_shorter_target(tmp_path):
    ckpt = checkpointed_toy_run(tmp_path)
    ids, labels = toy_data(4, seq_len=8, seed=12)
    with pytest.raises(ValueError, match="must exceed"):
        continue_pretrain(ckpt, 8, ids, labels, steps=1, lr=1e-4,
                          out_dir=str(tmp_path / "x"))


def test_continue_pretrain_rejects_position_tables(tmp_path):
    ckpt = checkpointed_toy_run(tmp_path, arch="stacked",
                                routing="attention", n_heads=4)
    ids, labels = toy_data(4, seq_len=16, seed=13)
    with pytest.raises(ValueError, match="position table"):
        continue_pretrain(ckpt, 16, ids, labels, steps=1, lr=1e-4,
                          out_dir=str(tmp_path / "x"))


def test_continue_pretrain_rejects_mismatched_data(tmp_path):
    ckpt = checkpointed_toy_run(tmp_path)
    ids, labels = toy_data(4, seq_len=12, seed=14)
    with pytest.raises(ValueError, match="length"):
        continue_pretrain(ckpt, 16, ids, labels, steps=1, lr=1e-4,
                          out_dir=str(tmp_path / "x"))
