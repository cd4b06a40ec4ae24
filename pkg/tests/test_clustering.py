import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.cluster.hierarchy import fcluster, linkage

from dinospeech import clustering, nn
from dinospeech.augment import SyntheticCorpusSpec, synth_corpus
from dinospeech.clustering import (
    PipelineConfig, ahc, cosine_distance_matrix, iterate_pipeline, kmeans, pairwise_f1, pseudo_label,
    pseudo_label_embeddings, purity, relabel_dense,
)
from dinospeech.supervised import TrainConfig


def same_partition(a, b):
    return np.array_equal(relabel_dense(a), relabel_dense(b))


def blobs(rng, n_per=20, sigma=0.1):
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [5.0, 10 * np.sqrt(0.75)]])
    truth = np.repeat([0, 1, 2], n_per)
    return centers[truth] + sigma * rng.standard_normal((3 * n_per, 2)), truth


# --- k-means -----------------------------------------------------------------------


def test_kmeans_k_equals_n(rng):
    x = rng.standard_normal((7, 3))
    assign, _, hist = kmeans(x, 7)
    assert hist[-1] == 0.0
    assert sorted(assign.tolist()) == list(range(7))


def test_kmeans_blobs_purity(rng):
    x, truth = blobs(rng)
    assign, _, _ = kmeans(x, 3, seed=1)
    best = max(np.mean(np.array(p)[assign] == truth) for p in itertools.permutations(range(3)))
    assert best == 1.0


@given(st.integers(0, 10000), st.integers(1, 8))
def test_kmeans_inertia_non_increasing(seed, k):
    x = np.random.default_rng(seed).standard_normal((30, 3))
    _, _, hist = kmeans(x, k, seed=seed)
    assert np.all(np.diff(hist) <= 1e-9)


def test_kmeans_errors_and_determinism(rng):
    x = rng.standard_normal((20, 2))
    with pytest.raises(ValueError):
        kmeans(x, 21)
    a1, c1, _ = kmeans(x, 4, seed=5)
    a2, c2, _ = kmeans(x, 4, seed=5)
    assert np.array_equal(a1, a2) and np.array_equal(c1, c2)


# --- AHC ---------------------------------------------------------------------------


def oracle_ahc(x, n_clusters):
    """Average linkage recomputed from member pairs at every step."""
    d = cosine_distance_matrix(x)
    clusters = [[i] for i in range(len(x))]
    while len(clusters) > n_clusters:
        best = None
        for a, b in itertools.combinations(range(len(clusters)), 2):
            link = np.mean([d[i, j] for i in clusters[a] for j in clusters[b]])
            if best is None or link < best[0]:
                best = (link, a, b)
        _, a, b = best
        clusters[a] = clusters[a] + clusters.pop(b)
    labels = np.empty(len(x), dtype=int)
    for c, members in enumerate(clusters):
        labels[members] = c
    return labels


def test_ahc_trivial(rng):
    x = rng.standard_normal((5, 3))
    assert np.array_equal(ahc(x, 5), np.arange(5))
    assert np.all(ahc(x, 1) == 0)
    with pytest.raises(ValueError):
        ahc(x, 6)


def test_ahc_two_tight_groups(rng):
    g1 = np.array([1.0, 0.0, 0.0]) + 0.05 * rng.standard_normal((3, 3))
    g2 = np.array([0.0, 1.0, 0.0]) + 0.05 * rng.standard_normal((3, 3))
    x = np.vstack([g1, g2])
    labels = ahc(x, 2)
    truth = np.array([0, 0, 0, 1, 1, 1])
    assert same_partition(labels, truth)
    assert same_partition(labels, oracle_ahc(x, 2))
    # exhaustive: the recovered split has the smallest mean within-group distance
    d = cosine_distance_matrix(x)

    def within(part):
        return sum(d[i, j] for i, j in itertools.combinations(range(6), 2) if part[i] == part[j])

    splits = [np.array(p) for p in itertools.product([0, 1], repeat=6) if 0 < sum(p) < 6]
    assert within(labels) == pytest.approx(min(within(p) for p in splits))


@given(st.integers(0, 10000), st.integers(1, 8))
def test_ahc_matches_oracle_and_scipy(seed, k):
    x = np.random.default_rng(seed).standard_normal((9, 4))
    labels = ahc(x, k)
    assert same_partition(labels, oracle_ahc(x, k))
    z = linkage(x, method="average", metric="cosine")
    assert same_partition(labels, fcluster(z, k, criterion="maxclust"))


@given(st.integers(0, 10000))
def test_ahc_weights_equal_duplication(seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((6, 3))
    w = r.integers(1, 4, 6)
    dup = np.repeat(x, w, axis=0)
    first = np.concatenate([[0], np.cumsum(w)[:-1]])
    for k in (1, 2, 3):
        assert same_partition(ahc(x, k, weights=w), ahc(dup, k)[first])


# --- pseudo labels and quality scores ----------------------------------------------


def test_purity_and_f1():
    truth = [0, 0, 1, 1]
    assert purity([5, 5, 7, 7], truth) == 1.0 and pairwise_f1([5, 5, 7, 7], truth) == 1.0
    assert purity([0, 0, 0, 0], truth) == 0.5
    # one merged cluster: precision 2/6, recall 1
    assert pairwise_f1([0, 0, 0, 0], truth) == pytest.approx(2 * (1 / 3) / (1 / 3 + 1))
    assert pairwise_f1([0, 1, 2, 3], truth) == 0.0


def test_oracle_embeddings_give_true_partition():
    truth = np.repeat(np.arange(6), 5)
    emb = np.eye(6)[truth] + 1e-3 * np.random.default_rng(0).standard_normal((30, 6))
    ids = [f"u{i}" for i in range(30)]
    a = pseudo_label_embeddings(ids, emb, kmeans_k=12, ahc_clusters=6, seed=0)
    pred = [a.labels[i] for i in ids]
    assert a.n_clusters == 6 and sorted(set(pred)) == list(range(6))
    assert purity(pred, truth) == 1.0 and pairwise_f1(pred, truth) == 1.0
    assert a.sizes.sum() == 30


@pytest.fixture(scope="module")
def tiny():
    corpus = synth_corpus(SyntheticCorpusSpec(n_speakers=3, utts_per_speaker=4, seed=2))
    params = nn.init_encoder(nn.EncoderConfig(hidden=16, n_layers=2, emb_dim=8), np.random.default_rng(0))
    return corpus, params


def test_pseudo_label_covers_corpus(tiny):
    corpus, params = tiny
    a = pseudo_label(corpus, params, kmeans_k=6, ahc_clusters=3, seed=0)
    assert set(a.labels) == {u.utt_id for u in corpus}
    assert a.n_clusters == 3 and sorted(set(a.labels.values())) == [0, 1, 2]
    b = pseudo_label(corpus, params, kmeans_k=6, ahc_clusters=3, seed=0)
    assert a.labels == b.labels


def test_zero_cycles_returns_initial(tiny):
    corpus, params = tiny
    out, metrics = iterate_pipeline(corpus, params, PipelineConfig(cycles=0), seed=0)
    assert out is params and metrics == []


def test_divergence_keeps_last_good(tiny, monkeypatch):
    corpus, params = tiny
    real = clustering.train_supervised
    calls = []

    def flaky(*args, **kwargs):
        calls.append(1)
        if len(calls) == 2:
            raise nn.DivergenceError("non-finite loss")
        return real(*args, **kwargs)

    monkeypatch.setattr(clustering, "train_supervised", flaky)
    cfg = PipelineConfig(cycles=2, kmeans_k=6, ahc_clusters=3, width_factor=1,
                         train=TrainConfig(epochs=1, batch_size=4, augment=False))
    with pytest.raises(nn.DivergenceError) as info:
        iterate_pipeline(corpus, params, cfg, seed=0)
    assert [m["stage"] for m in info.value.metrics] == ["initial", "cycle1"]
    assert info.value.params is not params
    assert info.value.params["enc.emb.W"].shape == params["enc.emb.W"].shape
