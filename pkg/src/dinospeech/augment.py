"""Multi-crop sampling, waveform augmentation, padding, and the synthetic corpus.

All randomness comes from an explicit ``numpy.random.Generator``; use
:func:`derive_rng` to get per-utterance streams that do not depend on
processing order.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .features import FeatureMatrix, Waveform


def derive_rng(*keys) -> np.random.Generator:
    """Generator seeded from a tuple of ints/strings (strings go through crc32)."""
    ints = [k if isinstance(k, (int, np.integer)) else zlib.crc32(str(k).encode()) for k in keys]
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in ints])


@dataclass
class CropConfig:
    n_long: int = 2
    len_long_s: float = 4.0
    n_short: int = 4
    len_short_s: float = 2.0

    def __post_init__(self):
        if self.n_long != 2:
            raise ValueError("n_long must be 2: the teacher consumes exactly two long crops")
        if not self.len_long_s >= self.len_short_s > 0:
            raise ValueError("need len_long_s >= len_short_s > 0")
        if self.n_short < 0:
            raise ValueError("n_short must be >= 0")

    @property
    def n_crops(self) -> int:
        return self.n_long + self.n_short

    def long_frames(self, hop_s: float) -> int:
        return int(round(self.len_long_s / hop_s))

    def short_frames(self, hop_s: float) -> int:
        return int(round(self.len_short_s / hop_s))


@dataclass
class CropSet:
    long_crops: list
    short_crops: list
    source_utt: str = ""

    @property
    def crops(self) -> list:
        return list(self.long_crops) + list(self.short_crops)


def crop_starts(n_total: int, length: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Independent uniform start positions for ``count`` crops of ``length``."""
    if n_total < length:
        raise ValueError(f"input needs padding: {n_total} frames < crop of {length}")
    return rng.integers(0, n_total - length + 1, size=count)


def sample_crops(f: FeatureMatrix, cfg: CropConfig, rng: np.random.Generator, utt_id: str = "") -> CropSet:
    n_long = cfg.long_frames(f.frame_hop_s)
    n_short = cfg.short_frames(f.frame_hop_s)
    t = f.n_frames
    long_starts = crop_starts(t, n_long, cfg.n_long, rng)
    short_starts = crop_starts(t, n_short, cfg.n_short, rng)
    return CropSet(
        [FeatureMatrix(f.frames[s : s + n_long], f.frame_hop_s) for s in long_starts],
        [FeatureMatrix(f.frames[s : s + n_short], f.frame_hop_s) for s in short_starts],
        utt_id,
    )


def _power(x: np.ndarray) -> float:
    return float(np.mean(np.asarray(x, dtype=np.float64) ** 2))


def add_noise(w: Waveform, noise: Waveform, snr_db: float, rng: np.random.Generator | None = None) -> Waveform:
    """Mix ``noise`` into ``w`` at ``snr_db``; ``snr_db=inf`` is a pass-through."""
    x = np.asarray(w.samples, dtype=np.float64)
    if np.isposinf(snr_db):
        return Waveform(x.copy(), w.sample_rate)
    n = np.asarray(noise.samples, dtype=np.float64)
    if len(n) == 0:
        raise ValueError("undefined SNR: empty noise")
    if len(n) < len(x):
        n = np.tile(n, -(-len(x) // len(n)))
    offset = 0 if rng is None or len(n) == len(x) else int(rng.integers(0, len(n) - len(x) + 1))
    seg = n[offset : offset + len(x)]
    p_sig, p_noise = _power(x), _power(seg)
    if p_sig == 0.0 or p_noise == 0.0:
        raise ValueError("undefined SNR: zero-power signal or noise")
    alpha = np.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(x + alpha * seg, w.sample_rate)


def reverberate(w: Waveform, rir: Waveform) -> Waveform:
    """Convolve with ``rir``, truncate to the input length, restore the input peak."""
    h = np.asarray(rir.samples, dtype=np.float64)
    if h.size == 0 or not np.all(np.isfinite(h)):
        raise ValueError("rir must be non-empty and finite")
    x = np.asarray(w.samples, dtype=np.float64)
    if x.size == 0:
        return Waveform(x.copy(), w.sample_rate)
    if h.size <= 64:
        y = np.convolve(x, h)[: len(x)]
    else:
        y = signal.fftconvolve(x, h)[: len(x)]
    peak_in, peak_out = np.max(np.abs(x)), np.max(np.abs(y))
    if peak_out > 0 and peak_in != peak_out:
        y = y * (peak_in / peak_out)
    return Waveform(y, w.sample_rate)


def pad_chunk(f: FeatureMatrix, target: int, mode: str = "repeat") -> FeatureMatrix:
    if target < 1:
        raise ValueError("target must be >= 1")
    t = f.n_frames
    if t >= target:
        return f
    if mode == "zero":
        pad = np.zeros((target - t, f.dim))
        return FeatureMatrix(np.concatenate([f.frames, pad]), f.frame_hop_s)
    if mode == "repeat":
        if t == 0:
            raise ValueError("cannot repeat-pad an empty feature matrix")
        return FeatureMatrix(f.frames[np.arange(target) % t], f.frame_hop_s)
    raise ValueError(f"unknown pad mode {mode!r}")


def crop_or_pad(f: FeatureMatrix, target: int, mode: str, rng: np.random.Generator) -> FeatureMatrix:
    """Random ``target``-frame chunk, padding first when the input is shorter."""
    if f.n_frames <= target:
        return pad_chunk(f, target, mode)
    s = int(crop_starts(f.n_frames, target, 1, rng)[0])
    return FeatureMatrix(f.frames[s : s + target], f.frame_hop_s)


# --- synthetic augmentation sources -------------------------------------------------

NOISE_TYPES = ("babble", "music", "noise")


@dataclass
class AugmentPolicy:
    reverb_prob: float = 0.45
    noise_prob: float = 0.7
    snr_ranges: dict = field(default_factory=lambda: {"babble": (3.0, 18.0), "music": (3.0, 18.0), "noise": (0.0, 18.0)})
    pool_seed: int = 1234
    pool_size: int = 4

    def __post_init__(self):
        for p in (self.reverb_prob, self.noise_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must be in [0, 1]")
        if not self.snr_ranges:
            raise ValueError("snr_ranges must be non-empty")
        for lo, hi in self.snr_ranges.values():
            if lo > hi:
                raise ValueError("empty SNR interval")


def make_noise(kind: str, n: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    white = rng.standard_normal(n)
    if kind == "noise":
        return white
    if kind == "music":
        # low-passed "pink-ish" noise with a few sustained tones
        b, a = signal.butter(1, min(0.99, 500.0 / (sample_rate / 2)))
        x = signal.lfilter(b, a, white)
        t = np.arange(n) / sample_rate
        for f0 in rng.uniform(150, min(1500, sample_rate / 3), size=3):
            x += 0.5 * np.std(x) * np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
        return x
    if kind == "babble":
        # band-limited noise with a syllable-rate amplitude envelope
        b, a = signal.butter(2, [min(0.9, 200.0 / (sample_rate / 2)), min(0.95, 3000.0 / (sample_rate / 2))], "band")
        x = signal.lfilter(b, a, white)
        t = np.arange(n) / sample_rate
        env = np.zeros(n)
        for rate in rng.uniform(2.0, 6.0, size=4):
            env += 1.0 + np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
        return x * env
    raise ValueError(f"unknown noise type {kind!r}")


def make_rir(sample_rate: int, rng: np.random.Generator, rt60: float | None = None) -> np.ndarray:
    """Direct path plus exponentially decaying random reflections."""
    if rt60 is None:
        rt60 = rng.choice([0.15, 0.3, 0.5]) * rng.uniform(0.8, 1.2)
    n = max(2, int(rt60 * sample_rate))
    t = np.arange(n) / sample_rate
    h = rng.standard_normal(n) * np.exp(-6.9 * t / rt60)
    h[: int(0.002 * sample_rate)] = 0.0
    h *= 0.3
    h[0] = 1.0
    return h


@dataclass
class AugmentPools:
    noises: dict
    rirs: list
    sample_rate: int


def make_pools(policy: AugmentPolicy, sample_rate: int, noise_s: float = 8.0) -> AugmentPools:
    rng = derive_rng(policy.pool_seed, "pools", sample_rate)
    noises = {
        kind: [make_noise(kind, int(noise_s * sample_rate), sample_rate, rng) for _ in range(policy.pool_size)]
        for kind in policy.snr_ranges
    }
    rirs = [make_rir(sample_rate, rng) for _ in range(policy.pool_size * 3)]
    return AugmentPools(noises, rirs, sample_rate)


def augment_waveform(w: Waveform, policy: AugmentPolicy, pools: AugmentPools, rng: np.random.Generator) -> Waveform:
    """Reverb with ``reverb_prob`` then one random noise type with ``noise_prob``.

    The two draws are independent, so a chunk can get both.
    """
    out = w
    if rng.random() < policy.reverb_prob:
        rir = pools.rirs[int(rng.integers(len(pools.rirs)))]
        out = reverberate(out, Waveform(rir, w.sample_rate))
    if rng.random() < policy.noise_prob:
        kinds = sorted(pools.noises)
        kind = kinds[int(rng.integers(len(kinds)))]
        lo, hi = policy.snr_ranges[kind]
        snr = rng.uniform(lo, hi)
        pool = pools.noises[kind]
        noise = pool[int(rng.integers(len(pool)))]
        if _power(out.samples) > 0:
            out = add_noise(out, Waveform(noise, w.sample_rate), snr, rng)
    return out


# --- synthetic speaker corpus -------------------------------------------------------


@dataclass
class SyntheticCorpusSpec:
    n_speakers: int = 20
    utts_per_speaker: int = 10
    dur_range_s: tuple = (4.5, 6.0)
    n_attr_classes: int = 2
    seed: int = 0
    sample_rate: int = 8000
    n_vowels: int = 5

    def __post_init__(self):
        self.dur_range_s = tuple(float(d) for d in self.dur_range_s)
        if min(self.n_speakers, self.utts_per_speaker, self.n_attr_classes, self.n_vowels) < 1:
            raise ValueError("all counts must be >= 1")
        lo, hi = self.dur_range_s
        if not 0 < lo <= hi:
            raise ValueError("invalid duration range")


@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    attr_class: int
    wave: Waveform


@dataclass
class SpeakerVoice:
    f0: float
    formants: np.ndarray  # (n_vowels, 3) Hz
    bandwidths: np.ndarray  # (n_vowels, 3) Hz
    tilt: float


def _speaker_voice(spec: SyntheticCorpusSpec, s: int) -> SpeakerVoice:
    rng = derive_rng(spec.seed, "speaker", s)
    nyq = spec.sample_rate / 2
    f1 = rng.uniform(250, 900, spec.n_vowels)
    f2 = rng.uniform(900, min(2600, 0.7 * nyq), spec.n_vowels)
    f3 = rng.uniform(min(2400, 0.65 * nyq), 0.9 * nyq, spec.n_vowels)
    formants = np.stack([f1, f2, f3], axis=1)
    bandwidths = rng.uniform(50, 140, formants.shape)
    return SpeakerVoice(rng.uniform(90, 240), formants, bandwidths, rng.uniform(0.6, 0.95))


def _resonator(x: np.ndarray, freq: float, bw: float, sr: int) -> np.ndarray:
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return signal.lfilter([1.0 - r], a, x)


def _synth_utterance(spec: SyntheticCorpusSpec, voice: SpeakerVoice, s: int, u: int):
    """Returns (attr_class, samples)."""
    sr = spec.sample_rate
    rng = derive_rng(spec.seed, "utt", s, u)
    attr = int(rng.integers(spec.n_attr_classes))
    n = int(round(rng.uniform(*spec.dur_range_s) * sr))
    t = np.arange(n) / sr

    # excitation: jittered pulse train at the speaker's pitch plus aspiration noise
    f0 = voice.f0 * (1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.2, 0.6) * t + rng.uniform(0, 6.3)))
    phase = np.cumsum(f0 / sr)
    pulses = np.diff(np.floor(phase), prepend=0.0)
    exc = pulses + 0.05 * rng.standard_normal(n)
    exc = signal.lfilter([1.0], [1.0, -voice.tilt], exc)

    # segment into vowel-like units drawn from the speaker's inventory
    labels = np.empty(n, dtype=int)
    pos = 0
    while pos < n:
        seg = int(rng.uniform(0.06, 0.2) * sr)
        labels[pos : pos + seg] = -1 if rng.random() < 0.12 else rng.integers(spec.n_vowels)
        pos += seg
    y = np.zeros(n)
    jitter = 1.0 + 0.03 * rng.standard_normal(voice.formants.shape)
    for v in range(spec.n_vowels):
        mask = labels == v
        if not mask.any():
            continue
        out = exc
        for k in range(3):
            out = _resonator(out, voice.formants[v, k] * jitter[v, k], voice.bandwidths[v, k], sr)
        y[mask] = out[mask]

    # attribute class: family of energy contours (modulation rate and depth)
    rate = 1.5 + 3.0 * attr
    depth = 0.25 + 0.5 * (attr % 2)
    env = 1.0 - depth * 0.5 * (1.0 + np.sin(2 * np.pi * rate * t + rng.uniform(0, 6.3)))
    y *= env
    y[labels == -1] = 0.0
    y = y / (np.max(np.abs(y)) + 1e-12) * rng.uniform(0.3, 0.9)
    y += 10 ** (-45 / 20) * rng.standard_normal(n) * np.sqrt(np.mean(y**2))
    return attr, y.astype(np.float32)


def synth_corpus(spec: SyntheticCorpusSpec) -> list:
    """Deterministic corpus of :class:`Utterance` records.

    Speakers are fixed formant inventories, pitch and spectral tilt driving a
    pulse-train excitation; ``attr_class`` picks an energy-contour family
    independently of the speaker.
    """
    corpus = []
    for s in range(spec.n_speakers):
        voice = _speaker_voice(spec, s)
        for u in range(spec.utts_per_speaker):
            attr, samples = _synth_utterance(spec, voice, s, u)
            corpus.append(Utterance(f"spk{s:03d}-utt{u:03d}", f"spk{s:03d}", attr, Waveform(samples, spec.sample_rate)))
    return corpus
