"""Pseudo-labeling: k-means, agglomerative clustering, and the iterative retraining loop."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .backend import cosine_scores
from .data import embed_features, prepare_utterances, utterance_features
from .features import FeatureConfig
from .metrics import eer, make_trials, score_trials
from .supervised import AAMConfig, TrainConfig, train_supervised


@dataclass
class ClusterAssignment:
    labels: dict  # utt_id -> cluster id
    n_clusters: int

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(np.fromiter(self.labels.values(), dtype=int), minlength=self.n_clusters)


def _sq_dists(x, centers):
    d = (x * x).sum(axis=1)[:, None] - 2 * x @ centers.T + (centers * centers).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(x, k: int, max_iter: int = 100, seed: int = 0):
    """Lloyd's algorithm with k-means++ seeding.

    Returns ``(assignment, centers, inertia_history)``.  A cluster that
    empties is re-seeded with the point farthest from its current center.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, n={n}]")
    rng = np.random.default_rng(seed)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        idx = rng.choice(n, p=closest / total) if total > 0 else int(np.argmax(closest))
        centers[j] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[j : j + 1])[:, 0])

    assign = None
    history = []
    for _ in range(max_iter):
        d = _sq_dists(x, centers)
        new = np.argmin(d, axis=1)
        history.append(float(d[np.arange(n), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = assign == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(_sq_dists(x, centers)[np.arange(n), assign]))
                centers[j] = x[far]
                assign[far] = j
    d = _sq_dists(x, centers)
    inertia = float(d[np.arange(n), assign].sum())
    if inertia < history[-1]:
        history.append(inertia)
    return assign, centers, history


def cosine_distance_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    u = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    return np.clip(1.0 - u @ u.T, 0.0, 2.0)


def ahc(x, n_clusters: int, weights=None) -> np.ndarray:
    """Average-linkage agglomerative clustering on cosine distance.

    ``weights`` (item multiplicities, e.g. k-means cluster sizes) weight the
    average linkage.  Ties go to the smallest (i, j) pair.  Returns dense
    labels ordered by first appearance.
    """
    d = cosine_distance_matrix(x)
    n = len(d)
    if not 1 <= n_clusters <= n:
        raise ValueError("n_clusters must be in [1, n_items]")
    size = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).copy()
    active = np.ones(n, dtype=bool)
    members = {i: [i] for i in range(n)}
    np.fill_diagonal(d, np.inf)
    for _ in range(n - n_clusters):
        masked = np.where(active[:, None] & active[None, :], d, np.inf)
        flat = int(np.argmin(masked))  # row-major argmin = smallest (i, j) on ties
        i, j = divmod(flat, n)
        i, j = min(i, j), max(i, j)
        new_row = (size[i] * d[i] + size[j] * d[j]) / (size[i] + size[j])
        d[i, :] = new_row
        d[:, i] = new_row
        d[i, i] = np.inf
        size[i] += size[j]
        active[j] = False
        members[i].extend(members.pop(j))
    labels = np.empty(n, dtype=int)
    for c, root in enumerate(sorted(members)):
        labels[members[root]] = c
    return labels


def relabel_dense(labels) -> np.ndarray:
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty(len(order), dtype=int)
    remap[order] = np.arange(len(order))
    return remap[np.unique(labels, return_inverse=True)[1]]


def pseudo_label_embeddings(utt_ids, emb, kmeans_k: int, ahc_clusters: int, seed: int = 0) -> ClusterAssignment:
    """k-means over utterances, AHC over the k-means centers, propagated back."""
    km_assign, centers, _ = kmeans(emb, kmeans_k, seed=seed)
    weights = np.bincount(km_assign, minlength=kmeans_k)
    used = np.flatnonzero(weights > 0)
    center_labels = np.full(kmeans_k, -1)
    center_labels[used] = ahc(centers[used], min(ahc_clusters, len(used)), weights[used])
    labels = relabel_dense(center_labels[km_assign])
    return ClusterAssignment(dict(zip(utt_ids, labels.tolist())), int(labels.max()) + 1)


def pseudo_label(corpus, params: dict, kmeans_k: int, ahc_clusters: int, seed: int = 0,
                 feat_cfg: FeatureConfig | None = None) -> ClusterAssignment:
    feat_cfg = feat_cfg or FeatureConfig()
    utts = prepare_utterances(corpus, feat_cfg)
    emb = embed_features(params, [utterance_features(u, feat_cfg) for u in utts])
    return pseudo_label_embeddings([u.utt_id for u in utts], emb, kmeans_k, ahc_clusters, seed)


def purity(pred, truth) -> float:
    """Fraction of items whose cluster's majority true label matches their own."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    total = 0
    for c in np.unique(pred):
        _, counts = np.unique(truth[pred == c], return_counts=True)
        total += counts.max()
    return total / len(pred)


def pairwise_f1(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    iu = np.triu_indices(len(pred), 1)
    same_p = (pred[:, None] == pred[None, :])[iu]
    same_t = (truth[:, None] == truth[None, :])[iu]
    tp = np.sum(same_p & same_t)
    if tp == 0:
        return 0.0
    precision, recall = tp / same_p.sum(), tp / same_t.sum()
    return float(2 * precision * recall / (precision + recall))


@dataclass
class PipelineConfig:
    cycles: int = 2
    kmeans_k: int = 80
    ahc_clusters: int = 20
    width_factor: int = 2
    train: TrainConfig = field(default_factory=TrainConfig)
    aam: AAMConfig = field(default_factory=AAMConfig)
    robust_margin: float = 0.5
    robust_epochs: int = 10
    robust_chunk_len_s: float = 3.0


def _eval_eer(params, heldout) -> float:
    ids, feats, trials = heldout
    emb = embed_features(params, feats)
    return eer(score_trials(trials, dict(zip(ids, emb)), cosine_scores))


def iterate_pipeline(corpus, initial_params: dict, cfg: PipelineConfig, seed: int, heldout_corpus=None,
                     feat_cfg: FeatureConfig | None = None, log=None):
    """Alternate pseudo-labeling and supervised retraining, then a robust stage.

    Each cycle clusters embeddings from the current model and trains a fresh,
    wider encoder with AAM on the cluster ids.  The robust stage trains one
    more fresh model on the last labels and then fine-tunes only its
    post-pooling layers with ``robust_margin``.  Returns ``(final_params,
    metrics)`` with one metrics row per stage; ``cycles=0`` returns the
    initial model untouched.
    """
    feat_cfg = feat_cfg or FeatureConfig()
    if cfg.cycles == 0:
        return initial_params, []
    utts = prepare_utterances(corpus, feat_cfg)
    true_spk = {u.utt_id: u.speaker_id for u in utts}
    heldout = None
    if heldout_corpus is not None:
        h_utts = prepare_utterances(heldout_corpus, feat_cfg)
        h_ids = [u.utt_id for u in h_utts]
        trials = make_trials(h_ids, [u.speaker_id for u in h_utts], seed=seed)
        heldout = (h_ids, [utterance_features(u, feat_cfg) for u in h_utts], trials)

    def record(stage, params, assignment):
        row = {"stage": stage}
        if assignment is not None:
            ids = list(assignment.labels)
            pred = [assignment.labels[i] for i in ids]
            truth = [true_spk[i] for i in ids]
            row.update(n_clusters=assignment.n_clusters, purity=purity(pred, truth), pairwise_f1=pairwise_f1(pred, truth))
        if heldout is not None:
            row["eer"] = _eval_eer(params, heldout)
        metrics.append(row)
        record.last_good = params
        if log:
            log(row)

    metrics = []
    record("initial", initial_params, None)
    params = initial_params
    try:
        params = _run_cycles(corpus, initial_params, cfg, seed, feat_cfg, record)
    except nn.DivergenceError as exc:
        exc.params = record.last_good
        exc.metrics = metrics
        raise
    return params, metrics


def _run_cycles(corpus, params, cfg: PipelineConfig, seed, feat_cfg, record):
    enc_cfg = _encoder_config(params)
    for cycle in range(cfg.cycles):
        assignment = pseudo_label(corpus, params, cfg.kmeans_k, cfg.ahc_clusters, seed + cycle, feat_cfg)
        if cycle == 0:
            enc_cfg = enc_cfg.scaled(cfg.width_factor)
        model = train_supervised(corpus, assignment.labels, enc_cfg, cfg.aam, cfg.train, seed + 100 + cycle, feat_cfg)
        params = model.params
        record(f"cycle{cycle + 1}", params, assignment)

    # robust stage: fresh model on the final labels, then large-margin post-pooling tuning
    assignment = pseudo_label(corpus, params, cfg.kmeans_k, cfg.ahc_clusters, seed + cfg.cycles, feat_cfg)
    model = train_supervised(corpus, assignment.labels, enc_cfg, cfg.aam, cfg.train, seed + 200, feat_cfg)
    tune_cfg = copy.deepcopy(cfg.train)
    tune_cfg.epochs = cfg.robust_epochs
    tune_cfg.chunk_len_s = cfg.robust_chunk_len_s
    tune_cfg.lr = cfg.train.lr * 0.1
    tune_cfg.warmup_epochs = 0
    tune_cfg.hold_epochs = cfg.robust_epochs
    trainable = set(nn.post_pooling_names()) | {"cls.W"}
    robust_aam = AAMConfig(cfg.aam.scale, cfg.robust_margin, 0)
    model = train_supervised(corpus, assignment.labels, enc_cfg, robust_aam, tune_cfg, seed + 300, feat_cfg,
                             init_params=model.params, trainable=trainable,
                             margin_fn=lambda e: _robust_margin(e, cfg))
    record("robust", model.params, assignment)
    return model.params


def _robust_margin(epoch: int, cfg: PipelineConfig) -> float:
    """Linear ramp from the cycle margin to the robust margin over the first half."""
    ramp = max(1, cfg.robust_epochs // 2)
    t = min(1.0, (epoch + 1) / ramp)
    return cfg.aam.margin + t * (cfg.robust_margin - cfg.aam.margin)


def _encoder_config(params: dict) -> nn.EncoderConfig:
    n_layers = nn.encoder_layers(params)
    hidden, in_dim = params["enc.l0.W"].shape
    return nn.EncoderConfig(in_dim, hidden, n_layers, params["enc.emb.W"].shape[0])
