"""Attribute classification from a pretrained encoder: FT1 vs FT2, zero vs repeat padding.

The attribute corpus uses 1.5-3 s utterances and a 6 s training chunk, so
every utterance is padded and padding fills half the chunk or more.

    python3 scripts/finetune_study.py --seeds 5 --pretrain-epochs 10
"""

from __future__ import annotations

import argparse
import itertools
import json

import numpy as np

from dinospeech.augment import SyntheticCorpusSpec, synth_corpus
from dinospeech.data import prepare_utterances, utterance_features
from dinospeech.dino import DinoConfig, train_dino
from dinospeech.features import FeatureConfig
from dinospeech.metrics import accuracy
from dinospeech.supervised import FinetuneConfig, finetune, predict

ATTR_SPEC = dict(n_speakers=16, utts_per_speaker=10, dur_range_s=(1.5, 3.0), n_attr_classes=2)


def pretrain(seed=0, epochs=10, n_speakers=20, utts_per_speaker=20):
    corpus = synth_corpus(SyntheticCorpusSpec(n_speakers, utts_per_speaker, seed=seed))
    state, _ = train_dino(corpus, DinoConfig(epochs=epochs, augment=False), seed)
    return state.teacher


def padded_fraction(corpus, chunk_len_s, feat_cfg):
    utts = prepare_utterances(corpus, feat_cfg)
    need = int(round(chunk_len_s / feat_cfg.hop_s))
    return float(np.mean([u.n_frames < need for u in utts]))


def run_one(pretrained, seed, strategy, pad_mode, chunk_len_s=6.0, epochs=15, lr=1e-3, log=None):
    feat_cfg = FeatureConfig()
    train = synth_corpus(SyntheticCorpusSpec(**ATTR_SPEC, seed=500 + seed))
    test = synth_corpus(SyntheticCorpusSpec(**ATTR_SPEC, seed=900 + seed))
    labels = {u.utt_id: u.attr_class for u in train}
    cfg = FinetuneConfig(strategy=strategy, pad_mode=pad_mode, chunk_len_s=chunk_len_s, epochs=epochs, lr=lr,
                         plateau_patience=3)
    model = finetune(pretrained, train, labels, 2, cfg, seed, feat_cfg=feat_cfg, log=log)
    utts = prepare_utterances(test, feat_cfg)
    preds = predict(model.params, [utterance_features(u, feat_cfg) for u in utts])
    return {"seed": seed, "strategy": strategy, "pad_mode": pad_mode, "chunk_len_s": chunk_len_s,
            "accuracy": accuracy(preds, [u.attr_class for u in utts]),
            "padded_fraction": padded_fraction(train, chunk_len_s, feat_cfg)}


def study(pretrained, seeds=range(5), strategies=("ft1", "ft2"), pads=("zero", "repeat"), **kw):
    rows = [run_one(pretrained, s, st, pm, **kw) for s, st, pm in itertools.product(seeds, strategies, pads)]
    means = {}
    for st, pm in itertools.product(strategies, pads):
        means[f"{st}_{pm}"] = float(np.mean([r["accuracy"] for r in rows if r["strategy"] == st and r["pad_mode"] == pm]))
    return rows, means


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--pretrain-epochs", type=int, default=10)
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--chunk-len", type=float, default=6.0)
    args = ap.parse_args()
    params = pretrain(epochs=args.pretrain_epochs)
    rows, means = study(params, range(args.seeds), epochs=args.epochs, chunk_len_s=args.chunk_len)
    for r in rows:
        print(json.dumps(r))
    print(json.dumps(means, indent=2))


if __name__ == "__main__":
    main()
