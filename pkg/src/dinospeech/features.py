"""Front-end: energy VAD, log-mel filterbanks and sliding-window MVN."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureMatrix:
    frames: np.ndarray
    frame_hop_s: float = 0.010

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError("frames must be a T x D matrix")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class FeatureConfig:
    n_mels: int = 24
    frame_len_s: float = 0.025
    hop_s: float = 0.010
    mvn_window: int = 150
    vad_offset_db: float = 6.0
    vad_floor_percentile: float = 0.0

    def __post_init__(self):
        if not self.frame_len_s > self.hop_s > 0:
            raise ValueError("need frame_len_s > hop_s > 0")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.mvn_window < 3:
            raise ValueError("mvn_window must be >= 3")

    def frame_len(self, sample_rate: int) -> int:
        return int(round(self.frame_len_s * sample_rate))

    def hop(self, sample_rate: int) -> int:
        return int(round(self.hop_s * sample_rate))


def n_frames(n_samples: int, frame_len: int, hop: int) -> int:
    if n_samples < frame_len:
        return 0
    return 1 + (n_samples - frame_len) // hop


def frame_signal(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """Strided (T, frame_len) view of ``x``; no padding at the tail."""
    t = n_frames(len(x), frame_len, hop)
    if t == 0:
        return np.zeros((0, frame_len), dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    return np.lib.stride_tricks.as_strided(
        x, shape=(t, frame_len), strides=(hop * x.strides[0], x.strides[0]), writeable=False
    )


def frame_log_energy(w: Waveform, cfg: FeatureConfig) -> np.ndarray:
    """Per-frame energy in dB (10*log10 of the sum of squares)."""
    frames = frame_signal(w.samples, cfg.frame_len(w.sample_rate), cfg.hop(w.sample_rate))
    return 10.0 * np.log10(np.einsum("ij,ij->i", frames, frames) + LOG_FLOOR)


def energy_vad(w: Waveform, cfg: FeatureConfig) -> np.ndarray:
    """Boolean keep-mask, one entry per analysis frame.

    A frame is speech when its energy exceeds the per-utterance floor (the
    minimum frame energy, or a low percentile when ``vad_floor_percentile``
    is set) by ``vad_offset_db``.  The threshold
    is capped at ``peak - vad_offset_db`` so a stationary signal is kept as a
    whole instead of being discarded.  Digital silence (frame power below
    ``LOG_FLOOR``) is never kept.
    """
    energy = frame_log_energy(w, cfg)
    if energy.size == 0:
        return np.zeros(0, dtype=bool)
    floor = np.percentile(energy, cfg.vad_floor_percentile)
    threshold = min(floor + cfg.vad_offset_db, energy.max() - cfg.vad_offset_db)
    silent = energy <= 10.0 * np.log10(2 * LOG_FLOOR)
    return (energy > threshold) & ~silent


def vad_trim(w: Waveform, cfg: FeatureConfig) -> Waveform:
    """Drop non-speech frames; each kept frame contributes its hop-length span."""
    mask = energy_vad(w, cfg)
    hop = cfg.hop(w.sample_rate)
    if mask.size == 0 or mask.all():
        return Waveform(w.samples.copy(), w.sample_rate)
    keep = np.repeat(mask, hop)
    tail = w.samples[len(keep):]
    body = w.samples[: len(keep)][keep]
    if mask[-1]:
        body = np.concatenate([body, tail])
    return Waveform(body, w.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular, unit-peak filters spaced evenly on the mel scale, 0..Nyquist.

    Returns an (n_mels, n_fft // 2 + 1) weight matrix.
    """
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def fft_size(frame_len: int) -> int:
    return 1 << int(np.ceil(np.log2(frame_len)))


def logmel(w: Waveform, cfg: FeatureConfig) -> FeatureMatrix:
    sr = w.sample_rate
    frame_len, hop = cfg.frame_len(sr), cfg.hop(sr)
    if len(w) < frame_len:
        raise ValueError(f"waveform too short: {len(w)} samples < one frame ({frame_len})")
    frames = frame_signal(w.samples, frame_len, hop) * np.hamming(frame_len)
    n_fft = fft_size(frame_len)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    fbank = mel_filterbank(cfg.n_mels, n_fft, sr)
    return FeatureMatrix(np.log(power @ fbank.T + LOG_FLOOR), frame_hop_s=hop / sr)


def _window_bounds(t: int, window: int):
    idx = np.arange(t)
    start = np.maximum(idx - window // 2, 0)
    stop = np.minimum(idx - window // 2 + window, t)
    return start, stop


def sliding_mvn(f: FeatureMatrix, window: int = 150) -> FeatureMatrix:
    """Normalize each frame by the mean/std of the window centred on it.

    The window spans ``[t - window//2, t - window//2 + window)`` and is
    truncated at the edges.
    """
    if window < 3:
        raise ValueError("window must be >= 3")
    x = f.frames
    t = x.shape[0]
    if t == 0:
        return FeatureMatrix(x.copy(), f.frame_hop_s)
    # shifting by a reference row keeps running sums well conditioned and
    # maps constant inputs to exact zeros
    x = x - x[0]
    zero = np.zeros((1, x.shape[1]))
    c1 = np.concatenate([zero, np.cumsum(x, axis=0)])
    c2 = np.concatenate([zero, np.cumsum(x * x, axis=0)])
    start, stop = _window_bounds(t, window)
    n = (stop - start)[:, None].astype(np.float64)
    mean = (c1[stop] - c1[start]) / n
    var = np.maximum((c2[stop] - c2[start]) / n - mean * mean, 0.0)
    std = np.maximum(np.sqrt(var), STD_FLOOR)
    return FeatureMatrix((x - mean) / std, f.frame_hop_s)


def extract(w: Waveform, cfg: FeatureConfig, vad: bool = True) -> FeatureMatrix:
    """Full front-end: optional VAD trim, log-mel, sliding MVN."""
    if vad:
        w = vad_trim(w, cfg)
    return sliding_mvn(logmel(w, cfg), cfg.mvn_window)
