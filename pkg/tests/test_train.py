import math
from dataclasses import replace

import numpy as np
import pytest

from hyqut.config import RunConfig, TrainConfig
from hyqut.data import BatchStream, Corpus, build_vocab, repetitive_corpus
from hyqut.errors import CheckpointError, ConfigError, NumericalError, UsageError
from hyqut.gradcheck import toy_config
from hyqut.model import Transformer
from hyqut.train import (AdamState, LossLog, Trainer, adam_step, clip_grad_norm, cross_entropy,
                         cross_entropy_with_grad, load_checkpoint, lr_at_step, restore, run_training,
                         save_checkpoint)


def test_uniform_logits_give_log_v():
    assert cross_entropy(np.zeros((2, 3, 50)), np.zeros((2, 3), int)) == pytest.approx(math.log(50))


def test_cross_entropy_mask_and_grad():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 4, 7))
    targets = rng.integers(0, 7, (2, 4))
    mask = np.array([[1, 1, 0, 0], [1, 0, 0, 0]], bool)
    loss, g = cross_entropy_with_grad(logits, targets, mask)
    assert loss == pytest.approx(cross_entropy(logits[mask][None], targets[mask][None]))
    assert np.all(g[~mask] == 0)
    eps = 1e-6
    i = (0, 1, 3)
    up, down = logits.copy(), logits.copy()
    up[i] += eps
    down[i] -= eps
    fd = (cross_entropy(up, targets, mask) - cross_entropy(down, targets, mask)) / (2 * eps)
    assert g[i] == pytest.approx(fd, rel=1e-6)
    with pytest.raises(UsageError):
        cross_entropy(logits, targets, np.zeros_like(mask))
    with pytest.raises(UsageError):
        cross_entropy(logits, targets + 7)


def test_schedule():
    cfg = TrainConfig(total_steps=110, warmup_steps=10, eta_max=1.0, eta_min=0.1)
    assert cfg.cycle_steps == 100
    assert lr_at_step(5, cfg) == pytest.approx(0.5)
    assert lr_at_step(10, cfg) == pytest.approx(1.0)
    assert lr_at_step(60, cfg) == pytest.approx(0.55)
    assert lr_at_step(110, cfg) == pytest.approx(0.1)
    # warm restart
    assert lr_at_step(111, cfg) == pytest.approx(lr_at_step(11, cfg))
    lrs = [lr_at_step(t, cfg) for t in range(10, 111)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert lr_at_step(3, TrainConfig(total_steps=10, warmup_steps=0, eta_max=0.2)) <= 0.2


def test_adam_matches_hand_update():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, -0.1])}
    st = AdamState.for_params(p)
    adam_step(p, g, st, lr=0.1)
    # the first bias-corrected step moves each weight by lr * sign(g)
    assert np.allclose(p["w"], [0.9, -1.9], atol=1e-6)
    adam_step(p, g, st, lr=0.1)
    assert st.t == 2
    with pytest.raises(NumericalError):
        adam_step(p, {"w": np.array([np.nan, 0.0])}, st, lr=0.1)


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(g, 1.0) == pytest.approx(5.0)
    assert np.sqrt(g["a"] ** 2 + g["b"] ** 2) == pytest.approx(1.0)


def _toy_run(**train):
    train.setdefault("total_steps", 12)
    train.setdefault("batch_size", 3)
    train.setdefault("eta_max", 0.01)
    train.setdefault("eta_min", 0.001)
    cfg = toy_config("Wq, FFN_gate")
    corpus = Corpus([line for line in repetitive_corpus(3000).splitlines()])
    tok = build_vocab(corpus)
    cfg = replace(cfg, vocab_size=tok.vocab_size, seq_len=8)
    run = RunConfig(cfg, TrainConfig(**train))
    return run, BatchStream(corpus, tok, run.train.batch_size, cfg.seq_len, run.train.seed)


def test_fd_mode_evaluation_count():
    run, stream = _toy_run(grad_mode="fd")
    tr = Trainer(Transformer(run.model, 0), run)
    n_theta = sum(p.theta.size for p in tr.model.projectors().values())
    run_training(tr, stream, 2)
    assert tr.fd_counter.count == 2 * 2 * n_theta


def test_fd_and_adjoint_steps_agree():
    out = []
    for mode in ("adjoint", "fd"):
        run, stream = _toy_run(grad_mode=mode)
        tr = Trainer(Transformer(run.model, 0), run)
        tr.compute_gradients(*stream.batch(0), step=1)
        out.append({k: v.copy() for k, v in tr.grads.items() if k.endswith("mq_layers.0.weight")})
    for k in out[0]:
        assert np.allclose(out[0][k], out[1][k], rtol=1e-5, atol=1e-9)


def test_same_seed_same_trace():
    traces = []
    for _ in range(2):
        run, stream = _toy_run(dropout=0.1, seed=5)
        tr = Trainer(Transformer(run.model, 5), run)
        traces.append(run_training(tr, stream, 6))
    assert traces[0] == traces[1]


def test_loss_log(tmp_path):
    with LossLog(tmp_path / "l.csv") as log:
        log.write(1, 0.1, 2.5, 100.0)
    with LossLog(tmp_path / "l.csv", append=True) as log:
        log.write(2, 0.2, 2.25, 100.0)
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines == ["step,lr,loss,tokens_per_sec", "1,0.1,2.5,100.0", "2,0.2,2.25,100.0"]


def test_checkpoint_round_trip(tmp_path):
    run, stream = _toy_run()
    tr = Trainer(Transformer(run.model, 0), run)
    run_training(tr, stream, 3)
    save_checkpoint(tr.model, tr, tr.step, tmp_path / "c.bin")
    ck = load_checkpoint(tmp_path / "c.bin")
    assert ck.step == 3 and ck.adam_t == 3
    for k, v in tr.model.named_parameters().items():
        assert np.array_equal(ck.params[k], v)
        assert np.array_equal(ck.adam_m[k], tr.opt.m[k])
    save_checkpoint(tr.model, tr, tr.step, tmp_path / "c32.bin", precision="f32")
    small = load_checkpoint(tmp_path / "c32.bin")
    k = "model.embed_tokens.embedding_table"
    assert np.allclose(small.params[k], ck.params[k], rtol=1e-6)
    assert (tmp_path / "c32.bin").stat().st_size < (tmp_path / "c.bin").stat().st_size


def test_checkpoint_corruption(tmp_path):
    run, _ = _toy_run()
    tr = Trainer(Transformer(run.model, 0), run)
    path = tmp_path / "c.bin"
    save_checkpoint(tr.model, tr, 0, path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    (tmp_path / "flip.bin").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "flip.bin")
    (tmp_path / "magic.bin").write_bytes(b"NOTACKPT" + bytes(blob[8:]))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic.bin")
    ver = bytearray(path.read_bytes())
    ver[8] = 99
    (tmp_path / "ver.bin").write_bytes(bytes(ver))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver.bin")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.bin")


def test_restore_rejects_other_config(tmp_path):
    run, _ = _toy_run()
    tr = Trainer(Transformer(run.model, 0), run)
    save_checkpoint(tr.model, tr, 0, tmp_path / "c.bin")
    other_run, _ = _toy_run(seed=3)
    other = Trainer(Transformer(other_run.model, 0), other_run)
    with pytest.raises(ConfigError, match="train.seed"):
        restore(load_checkpoint(tmp_path / "c.bin"), other)


def test_resume_matches_uninterrupted(tmp_path):
    run, stream = _toy_run()
    full = Trainer(Transformer(run.model, 0), run)
    whole = run_training(full, stream, 8)

    first = Trainer(Transformer(run.model, 0), run)
    head = run_training(first, stream, 4)
    save_checkpoint(first.model, first, first.step, tmp_path / "c.bin")
    second = Trainer(Transformer(run.model, 0), run)
    restore(load_checkpoint(tmp_path / "c.bin"), second)
    tail = run_training(second, stream, 8)
    assert head + tail == whole
    for k, v in full.model.named_parameters().items():
        assert np.array_equal(v, second.model.named_parameters()[k])


def test_nonfinite_loss_raises():
    run, stream = _toy_run()
    tr = Trainer(Transformer(run.model, 0), run)
    tr.model.named_parameters()["lm_head.bias"][0] = np.nan
    with pytest.raises(NumericalError):
        tr.train_step(*stream.batch(0))
