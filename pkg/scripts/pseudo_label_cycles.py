"""Pseudo-label retraining cycles starting from a DINO model.

Clusters DINO embeddings into pseudo speakers, retrains a wider supervised
encoder on them, repeats, and ends with the large-margin robust stage.
Held-out EER, purity and pairwise F1 are reported per stage.

    python3 scripts/pseudo_label_cycles.py --seed 0
"""

from __future__ import annotations

import argparse
import json

from dinospeech.augment import SyntheticCorpusSpec, synth_corpus
from dinospeech.clustering import PipelineConfig, iterate_pipeline
from dinospeech.dino import DinoConfig, train_dino
from dinospeech.supervised import TrainConfig


def run(initial_params, seed=0, n_speakers=30, utts_per_speaker=40, heldout_speakers=15, heldout_utts=20,
        dur_range_s=(4.5, 6.0), cycles=2, epochs=20, robust_epochs=10, log=None):
    corpus = synth_corpus(SyntheticCorpusSpec(n_speakers, utts_per_speaker, dur_range_s=dur_range_s, seed=seed))
    heldout = synth_corpus(SyntheticCorpusSpec(heldout_speakers, heldout_utts, seed=seed + 1000))
    cfg = PipelineConfig(cycles=cycles, kmeans_k=4 * n_speakers, ahc_clusters=n_speakers,
                         train=TrainConfig(epochs=epochs), robust_epochs=robust_epochs)
    return iterate_pipeline(corpus, initial_params, cfg, seed, heldout_corpus=heldout, log=log)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--dino-epochs", type=int, default=30)
    ap.add_argument("--epochs", type=int, default=20)
    args = ap.parse_args()
    corpus = synth_corpus(SyntheticCorpusSpec(30, 40, seed=args.seed))
    state, _ = train_dino(corpus, DinoConfig(epochs=args.dino_epochs), args.seed)
    _, metrics = run(state.teacher, args.seed, epochs=args.epochs, log=lambda r: print(json.dumps(r), flush=True))


if __name__ == "__main__":
    main()
