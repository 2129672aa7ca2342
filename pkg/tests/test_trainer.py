import json

import numpy as np
import pytest
import torch

from attentive_de.corpus import build_vocabulary, make_batch
from attentive_de.encoder import EncodedSequence
from attentive_de.objectives import regularizer
from attentive_de.synthetic import random_corpus
from attentive_de.trainer import (TrainConfig, TrainedModel, VocabularyMismatch, critic_names, encoder_names,
                                  format_config, in_batch_recall, init_model, meta_path, parse_config_text, train,
                                  train_step)

TINY = dict(layers=1, d_model=8, heads=2, word_dim=6, ffn_dim=16, max_len=8, batch_size=4, steps=3,
            dropout=0.0, val_fraction=0.0, lr=1e-2, critic_lr=1e-2)


def _cfg(**kw):
    return TrainConfig(**{**TINY, **kw})


@pytest.fixture
def corpus():
    return random_corpus(12, seed=0, vocab_size=30, ctx_len=5, rsp_len=3)


def _setup(corpus, **kw):
    cfg = _cfg(**kw)
    vocab = build_vocabulary(corpus)
    model = init_model(vocab, cfg)
    batch = make_batch(corpus, [0, 1, 2, 3], vocab, cfg.max_len)
    return model, batch


def _snapshot(model, names):
    return {n: model.store[n].detach().clone() for n in names}


def _changed(model, snap):
    return {n for n, v in snap.items() if not torch.equal(model.store[n].detach(), v)}


def test_de_gating_touches_only_the_plain_encoder(corpus):
    model, batch = _setup(corpus, variant="DE")
    snap = _snapshot(model, model.store.names())
    train_step(batch, model)
    changed = _changed(model, snap)
    assert not any(n.startswith("critic.") or ".residual." in n for n in changed)
    assert {"ctx.proj.W", "rsp.proj.W", "emb.table"} <= changed


def test_residual_parameters_train_only_with_we(corpus):
    model, batch = _setup(corpus, variant="ADE+WE")
    snap = _snapshot(model, model.store.names())
    train_step(batch, model)
    changed = _changed(model, snap)
    assert "ctx.residual.W" in changed and not any(n.startswith("critic.") for n in changed)


def test_encoder_names_exclude_critic(corpus):
    model, _ = _setup(corpus)
    names = encoder_names(model.store, model.variant)
    assert names and not any(n.startswith("critic.") for n in names)
    assert critic_names(model.store) == ["critic.x.W", "critic.x.b", "critic.x.Q"]


def test_critic_phase_leaves_encoder_alone(corpus):
    model, batch = _setup(corpus, variant="ADE+REG", lr=0.0)
    enc = encoder_names(model.store, model.variant)
    snap = _snapshot(model, model.store.names())
    train_step(batch, model)
    changed = _changed(model, snap)
    assert not changed & set(enc)
    assert {"critic.x.W", "critic.x.b"} <= changed


def test_encoder_phase_leaves_critic_alone(corpus):
    model, batch = _setup(corpus, variant="ADE+REG", critic_lr=0.0)
    snap = _snapshot(model, model.store.names())
    train_step(batch, model)
    changed = _changed(model, snap)
    assert not any(n.startswith("critic.") for n in changed)
    assert "ctx.proj.W" in changed


def test_critic_ascent_raises_the_bound(corpus):
    model, batch = _setup(corpus, variant="ADE+REG", lr=0.0, critic_steps=20, critic_lr=5e-2)
    with torch.no_grad():
        ctx, rsp = model.encode(batch.contexts, "ctx"), model.encode(batch.responses, "rsp")
    frozen = EncodedSequence(ctx.features, ctx.mask), EncodedSequence(rsp.features, rsp.mask)
    before = regularizer(*frozen, model.store, None).item()
    train_step(batch, model)
    after = regularizer(*frozen, model.store, None).item()
    assert after > before


def test_training_is_deterministic(corpus):
    _, a = train(_cfg(variant="ADE+WE+REG", dropout=0.1), corpus)
    _, b = train(_cfg(variant="ADE+WE+REG", dropout=0.1), corpus)
    for n in a.store:
        assert torch.equal(a.store[n].detach(), b.store[n].detach())


def test_seed_changes_the_run(corpus):
    _, a = train(_cfg(seed=0), corpus)
    _, b = train(_cfg(seed=1), corpus)
    assert not torch.equal(a.store["ctx.proj.W"].detach(), b.store["ctx.proj.W"].detach())


def test_report_history(corpus):
    report, _ = train(_cfg(steps=4), corpus)
    assert len(report.history) == 4
    assert set(report.history[0]) == {"l_ret_y", "l_ret_x", "l_ret", "l_reg", "total"}
    assert report.wall_clock > 0


def test_steps_must_be_positive():
    with pytest.raises(ValueError, match="steps >= 1 required"):
        TrainConfig(steps=0)


def test_batch_larger_than_training_split(corpus):
    with pytest.raises(ValueError, match="batch_size"):
        train(_cfg(batch_size=20), corpus)


def test_config_text_round_trip():
    cfg = _cfg(variant="ADE+REG", gamma=0.5, symmetric_reg=True)
    assert parse_config_text(format_config(cfg)) == cfg


def test_config_parsing():
    cfg = parse_config_text("# run\nvariant = ADE\nbatch_size = 8  # small\nsymmetric_reg = yes\n\nlr=0.01\n")
    assert (cfg.variant, cfg.batch_size, cfg.symmetric_reg, cfg.lr) == ("ADE", 8, True, 0.01)
    with pytest.raises(KeyError, match="learning_rate"):
        parse_config_text("learning_rate = 1")
    with pytest.raises(ValueError, match="batch_size"):
        parse_config_text("batch_size = many")
    with pytest.raises(ValueError, match="variant"):
        parse_config_text("variant = BERT")
    with pytest.raises(ValueError, match="line 1"):
        parse_config_text("just words")


def test_checkpoint_round_trip(tmp_path, corpus):
    _, model = train(_cfg(checkpoint=str(tmp_path / "m.ckpt")), corpus)
    back = TrainedModel.load(tmp_path / "m.ckpt")
    assert back.vocab.itos == model.vocab.itos and back.config == model.config
    assert back.response_freq == model.response_freq
    ctx = [d.context for d in corpus[:4]]
    rsp = [d.response for d in corpus[:4]]
    assert np.array_equal(back.score_matrix(ctx, rsp), model.score_matrix(ctx, rsp))


def test_checkpoint_vocabulary_mismatch(tmp_path, corpus):
    _, model = train(_cfg(checkpoint=str(tmp_path / "m.ckpt")), corpus)
    meta = json.loads(meta_path(tmp_path / "m.ckpt").read_text())
    meta["vocab"] = meta["vocab"][:-2]
    meta_path(tmp_path / "m.ckpt").write_text(json.dumps(meta))
    with pytest.raises(VocabularyMismatch) as err:
        TrainedModel.load(tmp_path / "m.ckpt")
    n = len(model.vocab)
    assert str(n) in str(err.value) and str(n - 2) in str(err.value)


def test_checkpoint_missing(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.ckpt"):
        TrainedModel.load(tmp_path / "nope.ckpt")


def test_in_batch_recall_range(corpus):
    _, model = train(_cfg(), corpus)
    r = in_batch_recall(model, corpus, 4)
    assert 0.0 <= r <= 1.0


def test_eval_every_writes_validation(tmp_path, corpus):
    report, _ = train(_cfg(steps=4, eval_every=2, val_fraction=0.25, checkpoint=str(tmp_path / "m.ckpt")), corpus)
    assert [s for s, _ in report.validation] == [2, 4]
    assert (tmp_path / "m.ckpt").exists()
