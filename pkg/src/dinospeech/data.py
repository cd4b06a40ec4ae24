"""Utterance preparation and crop materialization shared by the trainers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .augment import AugmentPolicy, AugmentPools, augment_waveform, crop_starts, pad_chunk
from .features import FeatureConfig, FeatureMatrix, Waveform, logmel, sliding_mvn, vad_trim


@dataclass
class PreparedUtt:
    utt_id: str
    speaker_id: str
    attr_class: int
    samples: np.ndarray  # VAD-trimmed waveform
    sample_rate: int
    fbank: np.ndarray  # un-normalized log-mel of ``samples``

    @property
    def n_frames(self) -> int:
        return self.fbank.shape[0]


def prepare_utterances(corpus, feat_cfg: FeatureConfig) -> list:
    """VAD-trim every utterance and cache its log-mel features.

    Utterances with less than one frame of speech are skipped.
    """
    out = []
    for u in corpus:
        w = vad_trim(u.wave, feat_cfg)
        if len(w) < feat_cfg.frame_len(w.sample_rate):
            continue
        out.append(PreparedUtt(u.utt_id, u.speaker_id, u.attr_class, w.samples, w.sample_rate, logmel(w, feat_cfg).frames))
    return out


def utterance_features(u: PreparedUtt, feat_cfg: FeatureConfig) -> FeatureMatrix:
    return sliding_mvn(FeatureMatrix(u.fbank, feat_cfg.hop_s), feat_cfg.mvn_window)


class CropSource:
    """Turns (utterance, start frame, length) into a normalized feature crop.

    Without an augmentation policy the cached log-mel is sliced; with one, the
    matching waveform span is augmented and re-analysed.
    """

    def __init__(self, feat_cfg: FeatureConfig, policy: AugmentPolicy | None = None, pools: AugmentPools | None = None):
        self.feat_cfg = feat_cfg
        self.policy = policy
        self.pools = pools

    def crop(self, u: PreparedUtt, start: int, length: int, rng: np.random.Generator) -> np.ndarray:
        cfg = self.feat_cfg
        if self.policy is None:
            fb = u.fbank[start : start + length]
        else:
            hop, flen = cfg.hop(u.sample_rate), cfg.frame_len(u.sample_rate)
            span = u.samples[start * hop : start * hop + flen + (length - 1) * hop]
            w = augment_waveform(Waveform(span.astype(np.float64), u.sample_rate), self.policy, self.pools, rng)
            fb = logmel(w, cfg).frames
        return sliding_mvn(FeatureMatrix(fb, cfg.hop_s), cfg.mvn_window).frames


def embed_features(params: dict, feats, prefix: str = "enc") -> np.ndarray:
    """Encoder embeddings for a list of FeatureMatrix / (T, D) arrays."""
    rows = []
    for f in feats:
        x = f.frames if isinstance(f, FeatureMatrix) else f
        emb, _ = nn.encoder_forward(params, x, prefix)
        rows.append(emb[0])
    return np.array(rows)


def chunk_features(u: PreparedUtt, length: int, pad_mode: str, rng: np.random.Generator, source: CropSource) -> np.ndarray:
    """A ``length``-frame training chunk; short utterances are normalized whole, then padded."""
    if u.n_frames >= length:
        start = int(crop_starts(u.n_frames, length, 1, rng)[0])
        return source.crop(u, start, length, rng)
    full = source.crop(u, 0, u.n_frames, rng)
    return pad_chunk(FeatureMatrix(full, source.feat_cfg.hop_s), length, pad_mode).frames
