"""Teacher-output health with and without centering.

A healthy run keeps the mean teacher max-probability below 0.9 and the mean
teacher entropy inside (0.10, 0.95) * log K.  Turning centering off lets one
output dimension take over.

    python3 scripts/collapse_ablation.py --epochs 30
"""

from __future__ import annotations

import argparse
import json
import math

from dinospeech.augment import SyntheticCorpusSpec, synth_corpus
from dinospeech.dino import DinoConfig, train_dino

MAX_PROB_CEIL = 0.9
ENTROPY_BAND = (0.10, 0.95)


def healthy(row: dict, k: int) -> bool:
    ratio = row["entropy"] / math.log(k)
    return row["max_prob"] < MAX_PROB_CEIL and ENTROPY_BAND[0] < ratio < ENTROPY_BAND[1]


def run(centering: bool, seed=0, n_speakers=20, utts_per_speaker=20, epochs=30, log=None) -> dict:
    corpus = synth_corpus(SyntheticCorpusSpec(n_speakers, utts_per_speaker, seed=seed))
    cfg = DinoConfig(epochs=epochs, centering=centering, augment=False)
    _, history = train_dino(corpus, cfg, seed, log=log)
    k = cfg.head.out_dim
    last = history[-1]
    return {"centering": centering, "max_prob": last["max_prob"], "entropy_ratio": last["entropy"] / math.log(k),
            "healthy": healthy(last, k), "history": history}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=30)
    args = ap.parse_args()
    for centering in (True, False):
        res = run(centering, args.seed, epochs=args.epochs)
        res.pop("history")
        print(json.dumps(res))


if __name__ == "__main__":
    main()
