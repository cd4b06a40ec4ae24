"""Supervised x-vector training with additive angular margin, and fine-tuning."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .augment import AugmentPolicy, derive_rng, make_pools
from .data import CropSource, chunk_features, embed_features, prepare_utterances, utterance_features
from .features import FeatureConfig

SIN_FLOOR = 1e-12


@dataclass
class AAMConfig:
    scale: float = 30.0
    margin: float = 0.3
    margin_warmup_epochs: int = 20

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if not 0 <= self.margin < math.pi / 2:
            raise ValueError("margin must be in [0, pi/2)")


def margin_at(epoch: float, cfg: AAMConfig) -> float:
    """Linear warmup from 0 to ``cfg.margin`` over ``margin_warmup_epochs``."""
    if cfg.margin_warmup_epochs <= 0:
        return cfg.margin
    return cfg.margin * min(1.0, max(0.0, epoch / cfg.margin_warmup_epochs))


def _unit_rows(x):
    norm = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), nn.NORM_FLOOR)
    return x / norm, norm


def aam_logits(emb, W, labels=None, scale=30.0, margin=0.0):
    """Scaled cosine logits with the margin applied to the true class (if given)."""
    e_hat, _ = _unit_rows(np.atleast_2d(np.asarray(emb, dtype=np.float64)))
    w_hat, _ = _unit_rows(np.asarray(W, dtype=np.float64))
    cos = e_hat @ w_hat.T
    if labels is None or margin == 0.0:
        return scale * cos
    phi, _ = _margin_target(cos[np.arange(len(cos)), labels], margin)
    out = scale * cos
    out[np.arange(len(cos)), labels] = scale * phi
    return out


def _margin_target(cos_y, margin):
    """cos(theta + m) with the usual linear easing once theta + m passes pi:
    phi = cos(theta) - m * sin(m) when cos(theta) <= cos(pi - m).
    Returns (phi, d phi / d cos)."""
    sin_y = np.sqrt(np.maximum(1.0 - cos_y * cos_y, 0.0))
    phi = cos_y * math.cos(margin) - sin_y * math.sin(margin)
    dphi = math.cos(margin) + math.sin(margin) * cos_y / np.maximum(sin_y, SIN_FLOOR)
    eased = cos_y <= math.cos(math.pi - margin)
    phi = np.where(eased, cos_y - math.sin(math.pi - margin) * margin, phi)
    dphi = np.where(eased, 1.0, dphi)
    return phi, dphi


def aam_loss(emb, labels, W, cfg: AAMConfig | None = None, margin: float | None = None, scale: float | None = None):
    """Mean AAM-softmax cross-entropy.

    Returns ``(loss, d loss/d emb, d loss/d W)``; embeddings and class rows
    are l2-normalized internally, so the loss is scale-invariant in both.
    """
    cfg = cfg or AAMConfig()
    m = cfg.margin if margin is None else margin
    s = cfg.scale if scale is None else scale
    e = np.atleast_2d(np.asarray(emb, dtype=np.float64))
    labels = np.asarray(labels, dtype=int)
    n = len(e)
    e_hat, e_norm = _unit_rows(e)
    w_hat, w_norm = _unit_rows(np.asarray(W, dtype=np.float64))
    cos = e_hat @ w_hat.T
    rows = np.arange(n)
    phi, dphi = _margin_target(cos[rows, labels], m)
    logits = s * cos
    logits[rows, labels] = s * phi
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[rows, labels].mean())

    g_logits = np.exp(logp)
    g_logits[rows, labels] -= 1.0
    g_logits /= n
    g_cos = s * g_logits
    g_cos[rows, labels] *= dphi
    g_ehat = g_cos @ w_hat
    g_what = g_cos.T @ e_hat
    g_e = (g_ehat - np.sum(g_ehat * e_hat, axis=1, keepdims=True) * e_hat) / e_norm
    g_w = (g_what - np.sum(g_what * w_hat, axis=1, keepdims=True) * w_hat) / w_norm
    return loss, g_e, g_w


def softmax_ce(logits, labels):
    logits = np.atleast_2d(logits)
    rows = np.arange(len(logits))
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    g = np.exp(logp)
    g[rows, labels] -= 1.0
    return float(-logp[rows, labels].mean()), g / len(logits)


# --- classifier heads on top of the encoder embedding -------------------------------


def init_classifier(kind: str, emb_dim: int, n_classes: int, rng) -> dict:
    if kind == "aam":
        w = rng.standard_normal((n_classes, emb_dim))
        return {"cls.W": w / np.linalg.norm(w, axis=1, keepdims=True)}
    if kind == "ce":
        return {"out.W": rng.standard_normal((n_classes, emb_dim)) * np.sqrt(1.0 / emb_dim), "out.b": np.zeros((1, n_classes))}
    raise ValueError(f"unknown loss {kind!r}")


def classifier_kind(params: dict) -> str:
    return "aam" if "cls.W" in params else "ce"


def classifier_loss(params, emb, labels, aam_cfg: AAMConfig, margin: float):
    """Returns (loss, d loss/d emb, classifier grads)."""
    if classifier_kind(params) == "aam":
        loss, g_e, g_w = aam_loss(emb, labels, params["cls.W"], aam_cfg, margin=margin)
        return loss, g_e, {"cls.W": g_w}
    logits = emb @ params["out.W"].T + params["out.b"]
    loss, g = softmax_ce(logits, labels)
    return loss, g @ params["out.W"], {"out.W": g.T @ emb, "out.b": g.sum(axis=0, keepdims=True)}


def classifier_scores(params, emb):
    if classifier_kind(params) == "aam":
        return aam_logits(emb, params["cls.W"], scale=1.0)
    return emb @ params["out.W"].T + params["out.b"]


def predict(params: dict, feats) -> np.ndarray:
    return np.argmax(classifier_scores(params, embed_features(params, feats)), axis=1)


# --- training loops -----------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.005
    min_lr: float = 1e-5
    warmup_epochs: int = 2
    hold_epochs: int = 10
    decay_epochs: float = 4.0
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 1e-5
    amsgrad: bool = True
    chunk_len_s: float = 2.0
    pad_mode: str = "repeat"
    augment: bool = True


def lr_warmup_hold_decay(epoch_f: float, cfg: TrainConfig) -> float:
    """Linear warmup, constant hold, then halving every ``decay_epochs`` down to ``min_lr``."""
    if epoch_f < cfg.warmup_epochs:
        return cfg.lr * (epoch_f + 1e-3) / cfg.warmup_epochs
    if epoch_f < cfg.warmup_epochs + cfg.hold_epochs:
        return cfg.lr
    k = (epoch_f - cfg.warmup_epochs - cfg.hold_epochs) / cfg.decay_epochs
    return max(cfg.min_lr, cfg.lr * 0.5**k)


class ChunkBatcher:
    """Deterministic per-epoch chunk batches for labeled utterances."""

    def __init__(self, utts, labels, feat_cfg, chunk_frames, pad_mode, policy, seed, tag):
        self.utts = utts
        self.labels = np.asarray(labels, dtype=int)
        self.chunk_frames = chunk_frames
        self.pad_mode = pad_mode
        self.seed = seed
        self.tag = tag
        pools = make_pools(policy, utts[0].sample_rate) if policy is not None else None
        self.source = CropSource(feat_cfg, policy, pools)

    def batches(self, epoch: int, batch_size: int):
        order = derive_rng(self.seed, self.tag, "order", epoch).permutation(len(self.utts))
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            x = np.stack([
                chunk_features(self.utts[j], self.chunk_frames, self.pad_mode,
                               derive_rng(self.seed, self.tag, "chunk", epoch, self.utts[j].utt_id), self.source)
                for j in idx
            ])
            yield x, self.labels[idx]


def _train_step(params, adam, x, y, aam_cfg, margin, lr, trainable=None):
    emb, cache = nn.encoder_forward(params, x)
    loss, g_emb, grads = classifier_loss(params, emb, y, aam_cfg, margin)
    if not np.isfinite(loss):
        raise nn.DivergenceError(f"diverged: loss={loss}")
    grads.update(nn.encoder_backward(params, cache, g_emb, trainable))
    adam.step(params, grads, lr=lr, trainable=trainable)
    return loss


@dataclass
class SupervisedModel:
    params: dict
    history: list = field(default_factory=list)


def train_supervised(corpus, labels: dict, enc_cfg: nn.EncoderConfig, aam_cfg: AAMConfig, cfg: TrainConfig, seed: int,
                     feat_cfg: FeatureConfig | None = None, policy: AugmentPolicy | None = None,
                     init_params: dict | None = None, trainable=None, margin_fn=None, log=None) -> SupervisedModel:
    """Minibatch AAM training of encoder + class matrix on random fixed-length chunks.

    ``labels`` maps utt_id -> class index (dense 0..C-1).  ``margin_fn(epoch)``
    overrides the warmup schedule (used by the robust large-margin stage).
    """
    feat_cfg = feat_cfg or FeatureConfig()
    utts = [u for u in prepare_utterances(corpus, feat_cfg) if u.utt_id in labels]
    y = [labels[u.utt_id] for u in utts]
    n_classes = max(y) + 1
    rng = derive_rng(seed, "sup-init")
    if init_params is None:
        params = nn.init_encoder(enc_cfg, rng)
        params.update(init_classifier("aam", enc_cfg.emb_dim, n_classes, rng))
    else:
        params = copy.deepcopy(init_params)
    policy = (policy or AugmentPolicy()) if cfg.augment else None
    batcher = ChunkBatcher(utts, y, feat_cfg, int(round(cfg.chunk_len_s / feat_cfg.hop_s)), cfg.pad_mode, policy, seed, "sup")
    adam = nn.Adam(cfg.lr, cfg.betas, weight_decay=cfg.weight_decay, amsgrad=cfg.amsgrad)
    n_batches = math.ceil(len(utts) / cfg.batch_size)
    history = []
    for epoch in range(cfg.epochs):
        margin = margin_fn(epoch) if margin_fn else margin_at(epoch, aam_cfg)
        total, count = 0.0, 0
        for it, (x, yb) in enumerate(batcher.batches(epoch, cfg.batch_size)):
            lr = lr_warmup_hold_decay(epoch + it / n_batches, cfg)
            total += _train_step(params, adam, x, yb, aam_cfg, margin, lr, trainable) * len(yb)
            count += len(yb)
        # full-utterance accuracy is costly; only measured after the last epoch
        train_acc = float("nan")
        if epoch == cfg.epochs - 1:
            train_acc = float(np.mean(predict(params, [utterance_features(u, feat_cfg) for u in utts]) == np.asarray(y)))
        row = {"epoch": epoch, "loss": total / count, "margin": margin, "lr": lr, "train_acc": train_acc}
        history.append(row)
        if log:
            log(row)
    return SupervisedModel(params, history)


# --- fine-tuning --------------------------------------------------------------------


@dataclass
class FinetuneConfig:
    strategy: str = "ft2"
    loss: str = "ce"
    chunk_len_s: float = 2.0
    pad_mode: str = "repeat"
    augment: bool = False
    epochs: int = 50
    lr: float = 1e-4
    batch_size: int = 16
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    min_delta: float = 1e-5
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 1e-5
    amsgrad: bool = True
    phase1_epochs: int | None = None
    aam: AAMConfig = field(default_factory=lambda: AAMConfig(margin_warmup_epochs=0))

    def __post_init__(self):
        if self.strategy not in ("ft1", "ft2"):
            raise ValueError("strategy must be ft1 or ft2")
        if self.loss not in ("ce", "aam"):
            raise ValueError("loss must be ce or aam")
        if self.pad_mode not in ("zero", "repeat"):
            raise ValueError("pad_mode must be zero or repeat")


def finetune_phases(cfg: FinetuneConfig, params: dict) -> list:
    """Trainable-name sets, one per optimization phase."""
    everything = set(params)
    if cfg.strategy == "ft1":
        return [everything]
    head = {n for n in params if n.startswith(("cls.", "out."))}
    return [set(nn.post_pooling_names()) | head, everything]


def evaluate_loss(params, feats, labels, aam_cfg: AAMConfig, margin: float) -> float:
    emb = embed_features(params, feats)
    loss, _, _ = classifier_loss(params, emb, np.asarray(labels), aam_cfg, margin)
    return loss


def finetune(pretrained: dict, corpus, labels: dict, n_classes: int, cfg: FinetuneConfig, seed: int,
             val_corpus=None, feat_cfg: FeatureConfig | None = None, policy: AugmentPolicy | None = None,
             log=None) -> SupervisedModel:
    """Append a fresh output layer to a pretrained encoder and tune (FT1 or FT2).

    Each phase runs the full epoch budget with its own optimizer and a
    reduce-on-plateau learning rate driven by the held-out loss.  Without a
    validation corpus, every tenth training utterance is held out.
    """
    if n_classes < 2:
        raise ValueError("fine-tuning needs at least two classes")
    feat_cfg = feat_cfg or FeatureConfig()
    utts = [u for u in prepare_utterances(corpus, feat_cfg) if u.utt_id in labels]
    if val_corpus is None:
        val_utts = utts[::10]
        utts = [u for i, u in enumerate(utts) if i % 10]
    else:
        val_utts = [u for u in prepare_utterances(val_corpus, feat_cfg) if u.utt_id in labels]
    y = [labels[u.utt_id] for u in utts]
    val_feats = [utterance_features(u, feat_cfg) for u in val_utts]
    val_y = [labels[u.utt_id] for u in val_utts]

    params = {n: w.copy() for n, w in pretrained.items() if n.startswith("enc.")}
    emb_dim = params["enc.emb.W"].shape[0]
    params.update(init_classifier(cfg.loss, emb_dim, n_classes, derive_rng(seed, "ft-init")))
    policy = (policy or AugmentPolicy()) if cfg.augment else None
    batcher = ChunkBatcher(utts, y, feat_cfg, int(round(cfg.chunk_len_s / feat_cfg.hop_s)), cfg.pad_mode, policy, seed, "ft")
    margin = cfg.aam.margin

    history = []
    epoch_counter = 0
    for phase, trainable in enumerate(finetune_phases(cfg, params)):
        adam = nn.Adam(cfg.lr, cfg.betas, weight_decay=cfg.weight_decay, amsgrad=cfg.amsgrad)
        lr = cfg.lr
        best, stale = math.inf, 0
        epochs = cfg.phase1_epochs if (phase == 0 and cfg.strategy == "ft2" and cfg.phase1_epochs) else cfg.epochs
        for epoch in range(epochs):
            total, count = 0.0, 0
            for x, yb in batcher.batches(epoch_counter, cfg.batch_size):
                total += _train_step(params, adam, x, yb, cfg.aam, margin, lr, trainable) * len(yb)
                count += len(yb)
            epoch_counter += 1
            val_loss = evaluate_loss(params, val_feats, val_y, cfg.aam, margin) if val_feats else total / count
            if val_loss < best - cfg.min_delta:
                best, stale = val_loss, 0
            else:
                stale += 1
                if stale >= cfg.plateau_patience:
                    lr *= cfg.plateau_factor
                    stale = 0
            row = {"phase": phase, "epoch": epoch, "loss": total / count, "val_loss": val_loss, "lr": lr}
            history.append(row)
            if log:
                log(row)
    return SupervisedModel(params, history)
