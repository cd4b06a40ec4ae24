import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dinospeech.metrics import TrialScores, accuracy, det_sweep, eer, kfold, make_trials, min_dcf, score_trials


def hand_example():
    return TrialScores([2.0, 0.0, 1.0, -1.0], [True, True, False, False])


def oracle_points(ts):
    """(p_fa, p_miss) at every candidate threshold by direct counting."""
    tgt = ts.scores[ts.is_target]
    non = ts.scores[~ts.is_target]
    thr = [-np.inf] + sorted(set(ts.scores.tolist())) + [np.inf]
    return np.array([[np.mean(non >= t), np.mean(tgt < t)] for t in thr]), np.array(thr)


def oracle_eer(ts):
    """Lowest diagonal crossing over every chord between two operating points."""
    pts, _ = oracle_points(ts)
    best = np.inf
    for (x1, y1), (x2, y2) in itertools.product(pts, repeat=2):
        d1, d2 = x1 - y1, x2 - y2
        if d1 == 0:
            best = min(best, x1)
        elif d1 < 0 < d2:
            a = -d1 / (d2 - d1)
            best = min(best, x1 + a * (x2 - x1))
    return best


def oracle_min_dcf(ts, p, cm, cf):
    pts, _ = oracle_points(ts)
    return min(p * cm * pm + (1 - p) * cf * pf for pf, pm in pts) / min(p * cm, (1 - p) * cf)


def random_trials(seed, n=40):
    r = np.random.default_rng(seed)
    lab = r.random(n) < 0.4
    lab[:2] = [True, False]
    # rounding creates ties across classes
    return TrialScores(np.round(r.standard_normal(n) + lab, 1), lab)


def test_det_sweep_matches_counting():
    for seed in range(10):
        ts = random_trials(seed)
        pts, thr = oracle_points(ts)
        sweep = det_sweep(ts)
        np.testing.assert_array_equal(sweep[:, 0], thr)
        np.testing.assert_allclose(sweep[:, 1:], pts, atol=1e-15)


def test_eer_hand_example():
    assert eer(hand_example()) == pytest.approx(0.25, abs=1e-12)


def test_min_dcf_hand_example():
    ts = hand_example()
    assert min_dcf(ts, p_target=0.5) == pytest.approx(oracle_min_dcf(ts, 0.5, 1, 1), abs=1e-15)
    assert min_dcf(ts, p_target=0.5) == pytest.approx(0.5)


def test_det_sweep_degenerate_cases():
    sweep = det_sweep(TrialScores(np.ones(4), [True, False, True, False]))
    assert {tuple(r) for r in sweep[:, 1:]} == {(1.0, 0.0), (0.0, 1.0)}
    sweep = det_sweep(TrialScores([2.0, 3.0, 0.0, 1.0], [True, True, False, False]))
    assert any((r[1] == 0) and (r[2] == 0) for r in sweep)
    assert np.all(np.diff(sweep[:, 1]) <= 0) and np.all(np.diff(sweep[:, 2]) >= 0)


def test_eer_perfect_separation():
    assert eer(TrialScores([2.0, 3.0, 0.0, 1.0], [True, True, False, False])) == 0.0


def test_eer_chance():
    r = np.random.default_rng(0)
    ts = TrialScores(r.standard_normal(10000), r.random(10000) < 0.5)
    assert abs(eer(ts) - 0.5) < 0.05


def test_eer_and_min_dcf_match_oracles():
    for seed in range(100):
        ts = random_trials(seed)
        assert abs(eer(ts) - oracle_eer(ts)) < 1e-12
        assert abs(min_dcf(ts, 0.05, 1, 2) - oracle_min_dcf(ts, 0.05, 1, 2)) < 1e-12


@given(st.integers(0, 10000), st.floats(0.1, 10), st.floats(-5, 5))
def test_monotone_transform_invariance(seed, a, b):
    ts = random_trials(seed)
    for g in (np.exp, lambda s: a * s + b):
        t2 = TrialScores(g(ts.scores), ts.is_target)
        assert abs(eer(t2) - eer(ts)) < 1e-12
        assert abs(min_dcf(t2) - min_dcf(ts)) < 1e-12


@given(st.integers(0, 10000))
def test_bounds(seed):
    ts = random_trials(seed)
    assert 0 <= eer(ts) <= 0.5
    assert 0 <= min_dcf(ts) <= 1


def test_min_dcf_cases():
    constant = TrialScores(np.zeros(6), [True, False] * 3)
    assert min_dcf(constant) == pytest.approx(1.0)
    sep = TrialScores([2.0, 3.0, 0.0, 1.0], [True, True, False, False])
    assert min_dcf(sep) == 0.0


def test_trial_validation():
    with pytest.raises(ValueError):
        eer(TrialScores([1.0, 2.0], [True, True]))
    with pytest.raises(ValueError):
        TrialScores([np.nan, 1.0], [True, False])
    with pytest.raises(ValueError):
        TrialScores([1.0], [True, False])


def test_accuracy():
    assert accuracy([1, 2, 3, 4], [1, 2, 3, 4]) == 1.0
    assert accuracy([1, 2], [0, 0]) == 0.0
    assert accuracy([1, 2, 3, 4], [1, 2, 0, 0]) == 0.5
    with pytest.raises(ValueError):
        accuracy([], [])


def test_kfold_partition_and_loo():
    folds = kfold(10, 3, seed=1)
    assert sorted(np.concatenate(folds).tolist()) == list(range(10))
    loo = kfold(5, 5)
    assert all(len(f) == 1 for f in loo)
    with pytest.raises(ValueError):
        kfold(3, 4)


def test_kfold_group():
    groups = np.repeat(np.arange(7), [5, 1, 3, 2, 4, 2, 3])
    folds = kfold(len(groups), 3, "group", groups=groups)
    assert sorted(np.concatenate(folds).tolist()) == list(range(len(groups)))
    for g in range(7):
        assert sum(np.any(groups[f] == g) for f in folds) == 1


def test_kfold_class_balance():
    labels = np.array([0] * 60 + [1] * 40)
    folds = kfold(100, 10, "class", labels=labels, seed=4)
    for f in folds:
        counts = np.bincount(labels[f], minlength=2)
        assert abs(counts[0] - 6) <= 1 and abs(counts[1] - 4) <= 1


def test_make_and_score_trials(rng):
    ids = [f"u{i}" for i in range(12)]
    spk = np.repeat([0, 1, 2], 4)
    trials = make_trials(ids, spk, seed=3)
    for e, t, lab in trials:
        assert e != t
        assert (spk[ids.index(e)] == spk[ids.index(t)]) == (lab == "target")
    emb = {u: rng.standard_normal(3) for u in ids}
    ts = score_trials(trials, emb, lambda a, b: (a * b).sum(axis=1))
    assert ts.n_target + ts.n_nontarget == len(trials)
    assert make_trials(ids, spk, seed=3) == trials
