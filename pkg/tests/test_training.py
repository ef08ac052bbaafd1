import math

import numpy as np
import pytest

from conftest import random_utterances
from tonalasr import numerics as nx
from tonalasr import training as tr
from tonalasr.model import ConfigError, ModelConfig, init_params, load_checkpoint
from tonalasr.tokenizer import bpe_train


@pytest.fixture(scope="module")
def tok():
    return bpe_train(["a1 ba2", "丁七", "a1 ba2 丁七"], 260)


@pytest.fixture
def setup(tok):
    cfg = ModelConfig(vocab_size=tok.vocab_size, input_dim=4, subsample=2, num_layers=1,
                      hidden_dim=6, d_model=6, embed_dim=3)
    return init_params(cfg, 0), random_utterances(4)


def small(**kw):
    base = dict(base_lr=1e-3, batch_size=2, accum_steps=1, epochs_stage1=1, epochs_stage2=1,
                epochs_direct=2, epochs_pretrain=1)
    base.update(kw)
    return tr.TrainConfig(**base)


def test_eden_examples():
    c = tr.TrainConfig(base_lr=0.1)
    assert tr.eden_lr(0, 0, c) == 0.1
    assert tr.eden_lr(5000, 0, c) == pytest.approx(0.1 * 2 ** -0.25, rel=1e-12)
    assert tr.eden_lr(5000, 0, c) / 0.1 == pytest.approx(0.840896, abs=1e-6)
    for s in (0, 10, 999, 7000):
        assert tr.eden_lr(s + 1, 3, c) <= tr.eden_lr(s, 3, c)
        assert tr.eden_lr(s, 4, c) <= tr.eden_lr(s, 3, c)
        assert tr.eden_lr(s, 3, c) > 0


def test_clip_examples():
    g = {"a": np.array([0.0, 4.0])}
    clipped = tr.clip_gradients(g, 2.0)
    assert tr.global_norm(clipped) == pytest.approx(2.0, abs=1e-12)
    np.testing.assert_array_equal(clipped["a"], [0.0, 2.0])
    small_g = {"a": np.array([0.6, 0.8])}
    assert tr.clip_gradients(small_g) is small_g
    rng = np.random.default_rng(0)
    g = {"a": rng.standard_normal(5) * 10, "b": rng.standard_normal((2, 3)) * 10}
    c = tr.clip_gradients(g)
    assert tr.global_norm(c) <= 2.0 + 1e-12
    flat = np.concatenate([v.ravel() for v in g.values()])
    flat_c = np.concatenate([v.ravel() for v in c.values()])
    assert flat @ flat_c / np.linalg.norm(flat) / np.linalg.norm(flat_c) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(nx.NumericError):
        tr.clip_gradients({"a": np.array([np.inf])})


def test_config_validation():
    with pytest.raises(ConfigError):
        tr.TrainConfig(freeze={"decoder"})
    with pytest.raises(ConfigError):
        tr.TrainConfig(base_lr=0)


def test_dataset_excludes_long(caplog):
    utts = random_utterances(5, frames=(4, 12))
    ds = tr.Dataset(utts, "han_text", max_frames=8)
    assert len(ds) + ds.excluded == 5
    assert all(u.num_frames <= 8 for u in ds.utterances)
    with pytest.raises(ConfigError):
        tr.Dataset(utts, "han_text", max_frames=1)
    with pytest.raises(ConfigError):
        tr.Dataset(utts, "pinyin")


def test_one_step_decreases_loss(setup, tok):
    params, utts = setup
    feats = [u.features for u in utts[:2]]
    targets = [tok.encode(u.han_text) for u in utts[:2]]
    before, grads = tr.batch_loss_and_grads(params, feats, targets, params.names())
    stepped = tr.adam_update(params, grads, tr.OptimizerState(), 1e-3, small())
    after, _ = tr.batch_loss_and_grads(stepped, feats, targets, params.names())
    assert after < before


def test_accumulation_matches_larger_batch(setup, tok):
    params, utts = setup
    data = tr.Dataset(utts, "han_text")
    a = tr.train_stage(params, data, tok, small(batch_size=1, accum_steps=2), "direct", epochs=1)
    b = tr.train_stage(params, data, tok, small(batch_size=2, accum_steps=1), "direct", epochs=1)
    assert a.steps == b.steps == 2
    for n in params.names():
        np.testing.assert_allclose(a.params[n].data, b.params[n].data, rtol=0, atol=1e-12)


def test_freeze_all_is_bit_identical(setup, tok):
    params, utts = setup
    cfg = small(freeze={"encoder", "prediction", "joint"})
    res = tr.train_stage(params, tr.Dataset(utts, "tailo_text"), tok, cfg, "stage1", epochs=1)
    assert res.params == params


def test_freeze_encoder_only(setup, tok):
    params, utts = setup
    res = tr.train_stage(params, tr.Dataset(utts, "tailo_text"), tok, small(freeze={"encoder"}), "stage1")
    for n in params.names():
        same = np.array_equal(res.params[n].data, params[n].data)
        assert same == n.startswith("encoder") or n.endswith("bias") and same


def test_vocab_mismatch(setup, tok):
    params, utts = setup
    other = bpe_train(["xyzxyz"], 258)
    with pytest.raises(ConfigError):
        tr.train_stage(params, tr.Dataset(utts, "han_text"), other, small(), "direct")
    with pytest.raises(ConfigError):
        tr.train_stage(params, tr.Dataset(utts, "han_text"), tok, small(), "stage3")


def test_non_finite_loss_names_batch(setup, tok, monkeypatch):
    params, utts = setup
    monkeypatch.setattr(tr, "batch_loss_and_grads", lambda *a: (math.nan, {}))
    with pytest.raises(tr.TrainingError, match="epoch 0 batch 0"):
        tr.train_stage(params, tr.Dataset(utts, "han_text"), tok, small(), "direct")


def test_two_stage_checkpoints_and_steps(setup, tok, tmp_path):
    params, utts = setup
    final, (s1, s2) = tr.two_stage_train(params, utts, tok, small(freeze={"encoder"}), tmp_path)
    assert load_checkpoint(tmp_path / "stage1.ckpt").stage == "stage1"
    assert load_checkpoint(tmp_path / "stage2.ckpt").stage == "stage2"
    assert load_checkpoint(tmp_path / "stage1.ckpt") == s1.params
    assert s1.steps + s2.steps == 2 + 2
    assert final == s2.params
    # stage 2 unfreezes the encoder
    assert not np.array_equal(s2.params["encoder.0.weight"].data, s1.params["encoder.0.weight"].data)
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 2 and '"stage": "stage1"' in lines[0]
    assert math.isfinite(s2.log[0]["mean_loss"])


def test_training_is_deterministic(setup, tok):
    params, utts = setup
    a, _ = tr.direct_train(params, utts, tok, small())
    b, _ = tr.direct_train(params, utts, tok, small())
    assert all(a[n].data.tobytes() == b[n].data.tobytes() for n in params.names())


def test_pretrain_and_transfer(setup, tok, tmp_path):
    params, utts = setup
    pre = tr.pretrain_encoder(params, tr.Dataset(utts, "tailo_text"), tok, small(), tmp_path)
    assert load_checkpoint(tmp_path / "pretrain.ckpt").stage == "pretrain"
    assert np.max(np.abs(pre["encoder.0.weight"].data - params["encoder.0.weight"].data)) > 1e-6
    moved = tr.transfer_encoder(pre, 0)
    np.testing.assert_array_equal(moved["encoder.0.weight"].data, pre["encoder.0.weight"].data)
    assert not np.array_equal(moved["joint.weight"].data, pre["joint.weight"].data)


def test_on_epoch_callback(setup, tok):
    params, utts = setup
    seen = []
    tr.train_stage(params, tr.Dataset(utts, "han_text"), tok, small(), "direct",
                   on_epoch=lambda rec, p: seen.append(rec["epoch"]))
    assert seen == [0, 1]
