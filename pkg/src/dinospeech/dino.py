"""Self-distillation without labels: student/teacher training on multi-crop views."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .augment import AugmentPolicy, CropConfig, crop_starts, derive_rng, make_pools
from .data import CropSource, prepare_utterances
from .features import FeatureConfig


@dataclass
class DinoConfig:
    tau_s: float = 0.1
    tau_t: float = 0.04
    center_momentum: float = 0.9
    teacher_momentum_start: float = 0.996
    teacher_momentum_end: float = 1.0
    epochs: int = 30
    batch_size: int = 16
    lr: float = 0.005
    min_lr: float = 1e-6
    warmup_epochs: int = 3
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.95)
    amsgrad: bool = True
    freeze_last_epochs: int = 1
    centering: bool = True
    augment: bool = True
    crop: CropConfig = field(default_factory=CropConfig)
    encoder: nn.EncoderConfig = field(default_factory=nn.EncoderConfig)
    head: nn.HeadConfig = field(default_factory=nn.HeadConfig)

    def __post_init__(self):
        if not 0 < self.tau_t < self.tau_s:
            raise ValueError("sharpening needs 0 < tau_t < tau_s")
        if not 0 <= self.center_momentum < 1:
            raise ValueError("center momentum must be in [0, 1)")
        for lam in (self.teacher_momentum_start, self.teacher_momentum_end):
            if not 0 <= lam <= 1:
                raise ValueError("teacher momentum must be in [0, 1]")
        self.head.in_dim = self.encoder.emb_dim


@dataclass
class DinoState:
    student: dict
    teacher: dict
    center: np.ndarray
    adam: nn.Adam
    step: int = 0
    epoch: int = 0


def temp_softmax(logits, tau: float) -> np.ndarray:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits, tau: float) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def n_pairs(n_crops: int) -> int:
    return 2 * (n_crops - 1)


def teacher_targets(teacher_logits, center, tau_t: float, centering: bool = True) -> np.ndarray:
    t = np.asarray(teacher_logits, dtype=np.float64)
    if centering:
        t = t - np.asarray(center).reshape(-1)
    return temp_softmax(t, tau_t)


def dino_loss_from_targets(p2: np.ndarray, student_logits: np.ndarray, tau_s: float):
    """Cross-entropy over (teacher long crop, other student crop) pairs.

    ``p2`` is ``(B, 2, K)``, ``student_logits`` ``(B, S, K)`` with the two long
    crops first.  The loss is averaged over pairs and over the batch.
    Returns ``(loss, d loss / d student_logits)``.
    """
    b, s, k = student_logits.shape
    if p2.shape != (b, 2, k):
        raise ValueError(f"teacher shape {p2.shape} does not match student {student_logits.shape}")
    if s < 2:
        raise ValueError("need at least the two long crops")
    npairs = n_pairs(s)
    logp1 = log_softmax(student_logits, tau_s)
    p1 = np.exp(logp1)
    p2_sum = p2[:, 0] + p2[:, 1]
    total = -np.einsum("bk,bsk->b", p2_sum, logp1) + np.einsum("bik,bik->b", p2, logp1[:, :2])
    loss = float(total.mean() / npairs)

    # each crop j is paired with every teacher crop except itself
    n_partners = np.full(s, 2.0)
    n_partners[:2] = 1.0
    target_sum = np.repeat(p2_sum[:, None, :], s, axis=1)
    target_sum[:, :2] -= p2
    grad = (n_partners[None, :, None] * p1 - target_sum) / (tau_s * npairs * b)
    return loss, grad


def dino_loss(teacher_logits, student_logits, center, tau_s: float, tau_t: float, centering: bool = True):
    """Loss and student-logit gradients; accepts single-utterance or batched inputs."""
    t = np.asarray(teacher_logits, dtype=np.float64)
    st = np.asarray(student_logits, dtype=np.float64)
    single = st.ndim == 2
    if single:
        t, st = t[None], st[None]
    if t.shape[1] != 2:
        raise ValueError("teacher must see exactly two long crops")
    if t.shape[-1] != st.shape[-1]:
        raise ValueError("teacher and student output dimensions differ")
    p2 = teacher_targets(t, center, tau_t, centering)
    loss, grad = dino_loss_from_targets(p2, st, tau_s)
    return loss, grad[0] if single else grad


def ema_update(teacher: dict, student: dict, lam: float) -> dict:
    for name, w in teacher.items():
        if lam == 1.0:
            continue
        if lam == 0.0:
            w[...] = student[name]
        else:
            w *= lam
            w += (1.0 - lam) * student[name]
    return teacher


def center_update(c, teacher_logit_batch, m: float) -> np.ndarray:
    batch = np.asarray(teacher_logit_batch, dtype=np.float64).reshape(-1, np.asarray(c).size)
    if batch.shape[0] == 0:
        raise ValueError("empty teacher batch")
    return m * np.asarray(c, dtype=np.float64) + (1.0 - m) * batch.mean(axis=0).reshape(np.shape(c))


def schedule_value(kind: str, step: int, total: int, start: float, end: float, warmup: int = 0) -> float:
    """``cosine``: start -> end over ``total`` steps.
    ``linear_warmup_cosine``: 0 -> start over ``warmup`` steps, then cosine to end."""
    if total <= 0:
        return end
    step = min(max(step, 0), total)
    if kind == "cosine":
        return end + (start - end) * (1 + math.cos(math.pi * step / total)) / 2
    if kind == "linear_warmup_cosine":
        if step < warmup:
            return start * step / warmup
        span = total - warmup
        if span <= 0:
            return end
        return end + (start - end) * (1 + math.cos(math.pi * (step - warmup) / span)) / 2
    raise ValueError(f"unknown schedule {kind!r}")


def init_state(cfg: DinoConfig, seed: int) -> DinoState:
    rng = derive_rng(seed, "dino-init")
    student = nn.init_encoder(cfg.encoder, rng)
    student.update(nn.init_head(cfg.head, rng))
    teacher = copy.deepcopy(student)
    adam = nn.Adam(cfg.lr, cfg.betas, weight_decay=cfg.weight_decay, amsgrad=cfg.amsgrad, unit_rows=nn.last_layer_names())
    return DinoState(student, teacher, np.zeros((1, cfg.head.out_dim)), adam)


def network_forward(params: dict, crops: np.ndarray):
    emb, enc_cache = nn.encoder_forward(params, crops)
    logits, head_cache = nn.head_forward(params, emb)
    return logits, (enc_cache, head_cache)


def teacher_forward(params: dict, crops: np.ndarray) -> np.ndarray:
    """Forward-only path: nothing is cached, so no gradient can reach the teacher."""
    emb, _ = nn.encoder_forward(params, crops)
    logits, _ = nn.head_forward(params, emb)
    return logits


def student_step_grads(params: dict, longs: np.ndarray, shorts: np.ndarray, p2: np.ndarray, tau_s: float, trainable=None):
    """Student forward/backward on a batch; returns ``(loss, grads, long-crop logits)``.

    ``longs``: (B*2, Tl, D) ordered utterance-major; ``shorts``: (B*n_short, Ts, D).
    """
    b = p2.shape[0]
    emb_l, cache_l = nn.encoder_forward(params, longs)
    parts = [emb_l]
    cache_s = None
    if shorts is not None and len(shorts):
        emb_s, cache_s = nn.encoder_forward(params, shorts)
        parts.append(emb_s)
    emb = np.concatenate(parts)
    logits, head_cache = nn.head_forward(params, emb)
    k = logits.shape[1]
    n_long = emb_l.shape[0]
    n_short_per = (emb.shape[0] - n_long) // b
    student_logits = np.concatenate(
        [logits[:n_long].reshape(b, 2, k), logits[n_long:].reshape(b, n_short_per, k)], axis=1
    )
    loss, g = dino_loss_from_targets(p2, student_logits, tau_s)
    g_logits = np.concatenate([g[:, :2].reshape(-1, k), g[:, 2:].reshape(-1, k)])
    grads, g_emb = nn.head_backward(params, head_cache, g_logits)
    enc_grads = nn.encoder_backward(params, cache_l, g_emb[:n_long], trainable)
    if cache_s is not None:
        for name, v in nn.encoder_backward(params, cache_s, g_emb[n_long:], trainable).items():
            enc_grads[name] = enc_grads[name] + v
    grads.update(enc_grads)
    return loss, grads, logits[:n_long]


def entropy_stats(p: np.ndarray):
    """Mean per-sample entropy (nats) and mean per-sample max probability."""
    p = p.reshape(-1, p.shape[-1])
    ent = -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=1)
    return float(ent.mean()), float(p.max(axis=1).mean())


def train_dino(corpus, cfg: DinoConfig, seed: int, feat_cfg: FeatureConfig | None = None,
               policy: AugmentPolicy | None = None, state: DinoState | None = None, log=None):
    """Train student/teacher networks on unlabeled utterances.

    Returns ``(state, history)``; history rows are dicts with keys
    ``epoch, loss, entropy, max_prob, center_norm, lambda, lr``.
    Raises :class:`nn.DivergenceError` (with ``.state``) on a non-finite loss.
    """
    feat_cfg = feat_cfg or FeatureConfig()
    if cfg.encoder.in_dim != feat_cfg.n_mels:
        raise ValueError("encoder in_dim must equal n_mels")
    policy = policy or AugmentPolicy()
    utts = prepare_utterances(corpus, feat_cfg)
    hop_s = feat_cfg.hop_s
    long_len, short_len = cfg.crop.long_frames(hop_s), cfg.crop.short_frames(hop_s)
    utts = [u for u in utts if u.n_frames >= long_len]
    if not utts:
        raise ValueError("no utterance is long enough for a long crop")
    pools = make_pools(policy, utts[0].sample_rate) if cfg.augment else None
    source = CropSource(feat_cfg, policy if cfg.augment else None, pools)

    state = state or init_state(cfg, seed)
    steps_per_epoch = max(1, len(utts) // cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    warmup = steps_per_epoch * cfg.warmup_epochs
    frozen_last = set(nn.last_layer_names())
    all_names = set(state.student)
    history = []

    for epoch in range(state.epoch, cfg.epochs):
        order = derive_rng(seed, "dino-order", epoch).permutation(len(utts))
        trainable = all_names - frozen_last if epoch < cfg.freeze_last_epochs else all_names
        sums = {"loss": 0.0, "entropy": 0.0, "max_prob": 0.0}
        lam = lr = 0.0
        for it in range(steps_per_epoch):
            batch = [utts[i] for i in order[it * cfg.batch_size : (it + 1) * cfg.batch_size]]
            longs, shorts = [], []
            for u in batch:
                rng = derive_rng(seed, "dino-crop", epoch, u.utt_id)
                for st in crop_starts(u.n_frames, long_len, cfg.crop.n_long, rng):
                    longs.append(source.crop(u, int(st), long_len, rng))
                for st in crop_starts(u.n_frames, short_len, cfg.crop.n_short, rng):
                    shorts.append(source.crop(u, int(st), short_len, rng))
            longs = np.stack(longs)
            shorts = np.stack(shorts) if shorts else None

            t_logits = teacher_forward(state.teacher, longs)
            p2 = teacher_targets(t_logits, state.center, cfg.tau_t, cfg.centering).reshape(len(batch), 2, -1)
            lr = schedule_value("linear_warmup_cosine", state.step, total, cfg.lr, cfg.min_lr, warmup)
            loss, grads, _ = student_step_grads(state.student, longs, shorts, p2, cfg.tau_s, trainable)
            if not np.isfinite(loss):
                err = nn.DivergenceError(f"diverged at epoch {epoch} step {it}: loss={loss}")
                err.state = state
                raise err
            state.adam.step(state.student, grads, lr=lr, trainable=trainable)
            lam = schedule_value("cosine", state.step, total, cfg.teacher_momentum_start, cfg.teacher_momentum_end)
            ema_update(state.teacher, state.student, lam)
            state.center = center_update(state.center, t_logits, cfg.center_momentum)
            state.step += 1

            ent, mp = entropy_stats(p2)
            sums["loss"] += loss
            sums["entropy"] += ent
            sums["max_prob"] += mp
        state.epoch = epoch + 1
        row = {k: v / steps_per_epoch for k, v in sums.items()}
        row.update(epoch=epoch, center_norm=float(np.linalg.norm(state.center)), **{"lambda": lam}, lr=lr)
        history.append(row)
        if log:
            log(row)
    return state, history


def teacher_diagnostics(params: dict, center, feats, cfg: DinoConfig, centering: bool | None = None):
    """Entropy / max-probability of teacher targets over whole utterances."""
    centering = cfg.centering if centering is None else centering
    probs = []
    for f in feats:
        logits = teacher_forward(params, f.frames)
        probs.append(teacher_targets(logits, center, cfg.tau_t, centering))
    p = np.concatenate(probs)
    ent, mp = entropy_stats(p)
    return {"entropy": ent, "max_prob": mp, "log_k": math.log(p.shape[-1])}
