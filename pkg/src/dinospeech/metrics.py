"""Detection metrics (DET sweep, EER, minDCF), accuracy, and cross-validation folds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TrialScores:
    scores: np.ndarray
    is_target: np.ndarray
    enroll: list | None = None
    test: list | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.is_target = np.asarray(self.is_target, dtype=bool)
        if self.scores.shape != self.is_target.shape:
            raise ValueError("scores and labels differ in length")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    @property
    def n_target(self) -> int:
        return int(self.is_target.sum())

    @property
    def n_nontarget(self) -> int:
        return int((~self.is_target).sum())

    def check_both_classes(self):
        if self.n_target == 0 or self.n_nontarget == 0:
            raise ValueError("need at least one target and one nontarget trial")


def det_sweep(ts: TrialScores) -> np.ndarray:
    """Rows ``(threshold, p_fa, p_miss)`` for every distinct score plus -inf/+inf.

    ``p_fa`` is the fraction of nontargets scoring >= threshold, ``p_miss``
    the fraction of targets scoring below it.
    """
    ts.check_both_classes()
    thr = np.concatenate([[-np.inf], np.unique(ts.scores), [np.inf]])
    tgt = np.sort(ts.scores[ts.is_target])
    non = np.sort(ts.scores[~ts.is_target])
    p_miss = np.searchsorted(tgt, thr, side="left") / len(tgt)
    p_fa = 1.0 - np.searchsorted(non, thr, side="left") / len(non)
    return np.column_stack([thr, p_fa, p_miss])


def _lower_hull(points: np.ndarray) -> np.ndarray:
    """Lower-left convex hull of (p_fa, p_miss) points, ordered by increasing p_fa."""
    pts = sorted({(float(a), float(b)) for a, b in points})
    hull: list = []
    for p in pts:
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            if (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1) <= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    return np.array(hull)


def eer(ts: TrialScores) -> float:
    """Equal error rate on the convex hull of the DET operating points.

    Step-function DET curves rarely cross ``p_fa = p_miss`` exactly, so the
    crossing is linearly interpolated between the two hull vertices that
    bracket it (the ROC convex-hull convention).
    """
    sweep = det_sweep(ts)
    hull = _lower_hull(sweep[:, 1:])
    diff = hull[:, 0] - hull[:, 1]  # p_fa - p_miss, increasing along the hull
    for i in range(len(hull)):
        if diff[i] == 0:
            return float(hull[i, 0])
        if i > 0 and diff[i - 1] < 0 < diff[i]:
            (x1, y1), (x2, y2) = hull[i - 1], hull[i]
            alpha = (y1 - x1) / ((x2 - x1) - (y2 - y1))
            return float(x1 + alpha * (x2 - x1))
    raise AssertionError("DET hull never crosses the diagonal")


def min_dcf(ts: TrialScores, p_target: float = 0.01, c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    """Minimum detection cost over thresholds, normalized by the best trivial system."""
    sweep = det_sweep(ts)
    cost = p_target * c_miss * sweep[:, 2] + (1 - p_target) * c_fa * sweep[:, 1]
    return float(cost.min() / min(p_target * c_miss, (1 - p_target) * c_fa))


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise ValueError("predictions and labels must be non-empty and aligned")
    return float(np.mean(preds == labels))


def kfold(n: int, k: int, stratify: str = "none", labels=None, groups=None, seed: int = 0) -> list:
    """Test-index arrays for ``k`` folds.

    ``class``: each fold's per-class counts differ by at most one.
    ``group``: all samples sharing a group id land in the same fold.
    """
    if not 1 <= k <= n:
        raise ValueError("need 1 <= k <= n")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    if stratify == "none":
        for i, chunk in enumerate(np.array_split(rng.permutation(n), k)):
            folds[i] = chunk.tolist()
    elif stratify == "class":
        labels = np.asarray(labels)
        offset = 0
        for c in np.unique(labels):
            idx = rng.permutation(np.flatnonzero(labels == c))
            for j, i in enumerate(idx):
                folds[(offset + j) % k].append(int(i))
            offset += len(idx)
    elif stratify == "group":
        groups = np.asarray(groups)
        uniq = np.unique(groups)
        if len(uniq) < k:
            raise ValueError("fewer groups than folds")
        sizes = {g: int(np.sum(groups == g)) for g in uniq}
        # largest groups first, each to the currently smallest fold
        for g in sorted(uniq, key=lambda g: (-sizes[g], str(g))):
            target = min(range(k), key=lambda f: (len(folds[f]), f))
            folds[target].extend(np.flatnonzero(groups == g).tolist())
    else:
        raise ValueError(f"unknown stratify mode {stratify!r}")
    return [np.array(sorted(f), dtype=int) for f in folds]


def make_trials(utt_ids, speaker_ids, n_target_per_utt: int = 2, n_nontarget_per_utt: int = 2, seed: int = 0) -> list:
    """Balanced (enroll, test, label) trials drawn from a labeled utterance set."""
    rng = np.random.default_rng(seed)
    utt_ids = list(utt_ids)
    spk = np.asarray(speaker_ids)
    trials = []
    for i, u in enumerate(utt_ids):
        same = np.flatnonzero((spk == spk[i]) & (np.arange(len(spk)) > i))
        diff = np.flatnonzero(spk != spk[i])
        for j in rng.permutation(same)[:n_target_per_utt]:
            trials.append((u, utt_ids[j], "target"))
        for j in rng.permutation(diff)[:n_nontarget_per_utt]:
            if j > i:
                trials.append((u, utt_ids[j], "nontarget"))
    return trials


def score_trials(trials, emb_by_id: dict, scorer) -> TrialScores:
    """Apply ``scorer(enroll_matrix, test_matrix) -> scores`` to a labeled trial list."""
    enroll = np.array([emb_by_id[t[0]] for t in trials])
    test = np.array([emb_by_id[t[1]] for t in trials])
    labels = np.array([t[2] == "target" for t in trials])
    return TrialScores(scorer(enroll, test), labels, [t[0] for t in trials], [t[1] for t in trials])
