import math

import numpy as np
import pytest

from dinospeech import nn, supervised
from dinospeech.augment import SyntheticCorpusSpec, synth_corpus
from dinospeech.supervised import (
    AAMConfig, FinetuneConfig, TrainConfig, aam_logits, aam_loss, finetune, finetune_phases, margin_at,
    softmax_ce, train_supervised,
)


def test_aam_zero_margin_unit_scale_is_softmax_ce(rng):
    e, w = rng.standard_normal((6, 4)), rng.standard_normal((3, 4))
    y = rng.integers(0, 3, 6)
    loss, _, _ = aam_loss(e, y, w, margin=0.0, scale=1.0)
    cos = (e / np.linalg.norm(e, axis=1, keepdims=True)) @ (w / np.linalg.norm(w, axis=1, keepdims=True)).T
    ref = np.mean([-cos[i, y[i]] + np.log(np.sum(np.exp(cos[i]))) for i in range(6)])
    assert abs(loss - ref) < 1e-12


def test_aam_aligned_true_logit():
    w = np.eye(3)
    logits = aam_logits(np.array([[2.0, 0.0, 0.0]]), w, labels=np.array([0]), scale=30.0, margin=0.3)
    assert abs(logits[0, 0] - 30 * math.cos(0.3)) < 1e-12
    assert abs(logits[0, 0] - 28.66) < 0.01


def test_aam_easing_branch():
    # theta close to pi: theta + m would pass pi, the eased value applies
    m = 0.3
    w = np.array([[1.0, 0.0], [0.0, 1.0]])
    e = np.array([[-1.0, 0.05]])
    logits = aam_logits(e, w, labels=np.array([0]), scale=1.0, margin=m)
    cos_y = -1.0 / math.hypot(1.0, 0.05)
    assert cos_y <= math.cos(math.pi - m)
    assert abs(logits[0, 0] - (cos_y - math.sin(math.pi - m) * m)) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_aam_grad_check(seed):
    rng = np.random.default_rng(seed)
    p = {"e": rng.standard_normal((5, 4)), "W": rng.standard_normal((3, 4))}
    y = rng.integers(0, 3, 5)
    cfg = AAMConfig(scale=10.0, margin=0.3)

    def loss():
        return aam_loss(p["e"], y, p["W"], cfg)[0]

    _, ge, gw = aam_loss(p["e"], y, p["W"], cfg)
    assert nn.grad_check(p, loss, {"e": ge, "W": gw}) < 1e-4


@pytest.mark.parametrize("alpha", [0.1, 10.0])
def test_aam_embedding_scale_invariance(rng, alpha):
    e, w = rng.standard_normal((4, 5)), rng.standard_normal((3, 5))
    y = np.array([0, 1, 2, 0])
    assert abs(aam_loss(e, y, w)[0] - aam_loss(alpha * e, y, w)[0]) < 1e-10


def test_softmax_ce_grad(rng):
    p = {"z": rng.standard_normal((4, 3))}
    y = np.array([0, 2, 1, 1])
    _, g = softmax_ce(p["z"], y)
    assert nn.grad_check(p, lambda: softmax_ce(p["z"], y)[0], {"z": g}) < 1e-6


def test_margin_schedule():
    cfg = AAMConfig()
    assert margin_at(0, cfg) == 0.0
    assert margin_at(20, cfg) == 0.3 and margin_at(35, cfg) == 0.3
    assert abs(margin_at(10, cfg) - 0.15) < 1e-15


def test_aam_config_validation():
    with pytest.raises(ValueError):
        AAMConfig(scale=0.0)
    with pytest.raises(ValueError):
        AAMConfig(margin=2.0)


# --- training ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def corpus20():
    return synth_corpus(SyntheticCorpusSpec(n_speakers=20, utts_per_speaker=10, seed=0))


def speaker_labels(corpus):
    return {u.utt_id: int(u.speaker_id[3:]) for u in corpus}


def test_supervised_reaches_high_train_accuracy(corpus20):
    model = train_supervised(corpus20, speaker_labels(corpus20), nn.EncoderConfig(), AAMConfig(),
                             TrainConfig(epochs=30, augment=False), seed=0)
    assert model.history[-1]["train_acc"] > 0.95
    # the margin column follows the warmup schedule
    for row in model.history:
        assert row["margin"] == margin_at(row["epoch"], AAMConfig())


def small_corpus():
    return synth_corpus(SyntheticCorpusSpec(n_speakers=3, utts_per_speaker=4, seed=2))


def test_supervised_deterministic():
    corpus = small_corpus()
    labels = speaker_labels(corpus)
    cfg = TrainConfig(epochs=2, batch_size=4, augment=True)
    enc = nn.EncoderConfig(24, 8, 1, 6)
    a = train_supervised(corpus, labels, enc, AAMConfig(), cfg, seed=9)
    b = train_supervised(corpus, labels, enc, AAMConfig(), cfg, seed=9)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_label_permutation_is_nominal(corpus20):
    labels = speaker_labels(corpus20)
    perm = np.random.default_rng(0).permutation(20)
    relabeled = {k: int(perm[v]) for k, v in labels.items()}
    cfg = TrainConfig(epochs=30, augment=False)
    a = train_supervised(corpus20, labels, nn.EncoderConfig(), AAMConfig(), cfg, seed=1)
    b = train_supervised(corpus20, relabeled, nn.EncoderConfig(), AAMConfig(), cfg, seed=1)
    assert abs(a.history[-1]["train_acc"] - b.history[-1]["train_acc"]) <= 0.02


# --- fine-tuning -------------------------------------------------------------------


def pretrained(seed=0):
    return nn.init_encoder(nn.EncoderConfig(24, 8, 2, 6), np.random.default_rng(seed))


def attr_labels(corpus):
    return {u.utt_id: u.attr_class for u in corpus}


def test_ft2_phase1_freezes_everything_else():
    corpus = small_corpus()
    init = pretrained()
    cfg = FinetuneConfig(strategy="ft2", epochs=2, batch_size=4)
    phases = finetune_phases(cfg, {**init, "out.W": None, "out.b": None})
    assert phases[0] == {"enc.emb.W", "enc.emb.b", "out.W", "out.b"}
    model = finetune(init, corpus, attr_labels(corpus), 2, cfg, seed=0)
    assert [r["phase"] for r in model.history] == [0, 0, 1, 1]

    # snapshot parameters around every phase-1 step
    captured = {}
    original = supervised._train_step

    def spy(params, adam, x, y, aam_cfg, margin, lr, trainable=None):
        if trainable is not None and "enc.l0.W" not in trainable and "before" not in captured:
            captured["before"] = {k: v.copy() for k, v in params.items()}
        out = original(params, adam, x, y, aam_cfg, margin, lr, trainable)
        if trainable is not None and "enc.l0.W" not in trainable:
            captured["after"] = {k: v.copy() for k, v in params.items()}
        return out

    supervised._train_step = spy
    try:
        finetune(init, corpus, attr_labels(corpus), 2, cfg, seed=0)
    finally:
        supervised._train_step = original
    for k in ("enc.l0.W", "enc.l0.b", "enc.l1.W", "enc.l1.b"):
        assert np.array_equal(captured["before"][k], captured["after"][k])
        assert np.array_equal(captured["after"][k], init[k])
    assert not np.array_equal(captured["after"]["enc.emb.W"], init["enc.emb.W"])


def test_ft1_updates_everything():
    corpus = small_corpus()
    init = pretrained()
    model = finetune(init, corpus, attr_labels(corpus), 2, FinetuneConfig(strategy="ft1", epochs=1, batch_size=4), seed=0)
    assert all(not np.array_equal(model.params[k], init[k]) for k in init)
    assert [r["phase"] for r in model.history] == [0]


def test_finetune_needs_two_classes():
    corpus = small_corpus()
    with pytest.raises(ValueError):
        finetune(pretrained(), corpus, attr_labels(corpus), 1, FinetuneConfig(epochs=1), seed=0)


def test_finetune_plateau_decay():
    corpus = small_corpus()
    cfg = FinetuneConfig(strategy="ft1", epochs=4, batch_size=4, lr=1e-12, plateau_patience=2)
    model = finetune(pretrained(), corpus, attr_labels(corpus), 2, cfg, seed=0)
    lrs = [r["lr"] for r in model.history]
    # with a negligible lr the held-out loss never improves after epoch 0
    assert lrs[0] == 1e-12 and lrs[2] == pytest.approx(1e-13) and lrs[3] == pytest.approx(1e-13)


def test_finetune_aam_loss_and_validation():
    corpus = small_corpus()
    model = finetune(pretrained(), corpus, attr_labels(corpus), 2,
                     FinetuneConfig(strategy="ft1", loss="aam", epochs=1, batch_size=4), seed=0)
    assert "cls.W" in model.params
    with pytest.raises(ValueError):
        FinetuneConfig(strategy="ft3")
    with pytest.raises(ValueError):
        FinetuneConfig(pad_mode="mirror")
