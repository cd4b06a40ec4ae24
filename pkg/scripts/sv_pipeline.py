"""Synthetic speaker verification: DINO embeddings vs a random encoder, cosine vs PLDA.

Reference setup: 30 training speakers x 40 utterances of 6-10 s, 15 unseen
held-out speakers, encoder width 128, batch 8 with augmentation, 20 epochs.
Embeddings come from the teacher encoder.

    python3 scripts/sv_pipeline.py --seed 0 --save teacher.ckpt
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from dinospeech import nn
from dinospeech.augment import SyntheticCorpusSpec, synth_corpus
from dinospeech.backend import PLDABackend, cosine_scores
from dinospeech.data import embed_features, prepare_utterances, utterance_features
from dinospeech.dino import DinoConfig, init_state, train_dino
from dinospeech.features import FeatureConfig
from dinospeech.formats import save_checkpoint
from dinospeech.metrics import eer, make_trials, min_dcf, score_trials


def embed_corpus(params, corpus, feat_cfg):
    utts = prepare_utterances(corpus, feat_cfg)
    emb = embed_features(params, [utterance_features(u, feat_cfg) for u in utts])
    return [u.utt_id for u in utts], [u.speaker_id for u in utts], emb


REFERENCE = dict(n_speakers=30, utts_per_speaker=40, dur_range_s=(6.0, 10.0))


def reference_dino_config(epochs=20) -> DinoConfig:
    return DinoConfig(epochs=epochs, batch_size=8, augment=True, encoder=nn.EncoderConfig(hidden=128))


def run(seed=0, heldout_speakers=15, heldout_utts=20, epochs=20, plda_dim=16, log=None):
    """Returns a dict of EER/minDCF for random-init cosine, DINO cosine and DINO PLDA,
    plus the trained DINO state."""
    feat_cfg = FeatureConfig()
    train = synth_corpus(SyntheticCorpusSpec(**REFERENCE, seed=seed))
    heldout = synth_corpus(SyntheticCorpusSpec(heldout_speakers, heldout_utts, seed=seed + 1000))
    cfg = reference_dino_config(epochs)

    t0 = time.time()
    state, history = train_dino(train, cfg, seed, feat_cfg, log=log)
    random_params = init_state(cfg, seed).teacher

    ids, spk, _ = embed_corpus(random_params, heldout, feat_cfg)
    trials = make_trials(ids, spk, n_target_per_utt=4, n_nontarget_per_utt=4, seed=seed)
    out = {"train_s": time.time() - t0}

    def evaluate(name, emb_by_id, scorer):
        ts = score_trials(trials, emb_by_id, scorer)
        out[f"{name}_eer"] = eer(ts)
        out[f"{name}_min_dcf"] = min_dcf(ts)

    _, _, rand_emb = embed_corpus(random_params, heldout, feat_cfg)
    evaluate("random_cosine", dict(zip(ids, rand_emb)), cosine_scores)
    _, _, dino_emb = embed_corpus(state.teacher, heldout, feat_cfg)
    evaluate("dino_cosine", dict(zip(ids, dino_emb)), cosine_scores)

    _, train_spk, train_emb = embed_corpus(state.teacher, train, feat_cfg)
    backend = PLDABackend.fit(train_emb, np.asarray(train_spk), plda_dim)
    evaluate("dino_plda", dict(zip(ids, dino_emb)), backend.score)
    out["n_trials"] = len(trials)
    out["final_max_prob"] = history[-1]["max_prob"]
    return out, state


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--plda-dim", type=int, default=16)
    ap.add_argument("--save", help="write the teacher checkpoint here")
    args = ap.parse_args()
    res, state = run(args.seed, epochs=args.epochs, plda_dim=args.plda_dim,
                     log=lambda r: print(json.dumps(r), flush=True))
    print(json.dumps(res, indent=2))
    if args.save:
        save_checkpoint(args.save, state.teacher)


if __name__ == "__main__":
    main()
