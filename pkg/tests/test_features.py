import numpy as np
import pytest
from hypothesis import given, strategies as st

from dinospeech.features import (
    FeatureConfig, FeatureMatrix, LOG_FLOOR, Waveform, energy_vad, fft_size, frame_log_energy,
    hz_to_mel, logmel, mel_filterbank, mel_to_hz, sliding_mvn, vad_trim,
)

CFG = FeatureConfig()


def test_waveform_validation():
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]))
    with pytest.raises(ValueError):
        Waveform(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Waveform(np.zeros(3), sample_rate=0)
    assert Waveform(np.zeros(16000)).duration == 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        FeatureConfig(frame_len_s=0.01, hop_s=0.01)
    with pytest.raises(ValueError):
        FeatureConfig(n_mels=0)


# --- VAD ---------------------------------------------------------------------------


def test_vad_silence_drops_everything():
    mask = energy_vad(Waveform(np.zeros(16000)), CFG)
    assert mask.size == 98 and not mask.any()


def test_vad_constant_sine_keeps_everything():
    t = np.arange(16000) / 16000
    w = Waveform(np.sin(2 * np.pi * 1000 * t))  # 25 whole periods per frame
    mask = energy_vad(w, FeatureConfig(vad_offset_db=3.0))
    assert mask.all()


def test_vad_half_silence_half_tone():
    sr = 16000
    t = np.arange(sr) / sr
    tone = np.sin(2 * np.pi * 1000 * t)
    x = np.concatenate([0.1 * tone, tone])  # 20 dB contrast
    cfg = FeatureConfig(vad_offset_db=10.0)
    mask = energy_vad(Waveform(x), cfg)
    # oracle: direct per-frame energy summation, tone frames are those lying
    # entirely in the loud half
    flen, hop = cfg.frame_len(sr), cfg.hop(sr)
    expected = []
    for i in range(len(mask)):
        seg = x[i * hop : i * hop + flen]
        e_db = 10 * np.log10(np.sum(seg * seg))
        expected.append(e_db)
    expected = np.array(expected)
    quiet_db = 10 * np.log10(np.sum((0.1 * tone[:flen]) ** 2))
    keep = expected > quiet_db + 10.0
    assert np.array_equal(mask, keep)
    starts = np.arange(len(mask)) * hop
    assert np.array_equal(mask[starts >= sr], np.ones(np.sum(starts >= sr), bool))
    assert not mask[starts + flen <= sr].any()


def test_vad_empty_waveform():
    assert energy_vad(Waveform(np.zeros(0)), CFG).size == 0


@given(st.floats(0.01, 100.0))
def test_vad_scale_invariant(scale):
    rng = np.random.default_rng(0)
    env = np.repeat(rng.uniform(0.01, 1.0, 20), 800)
    x = env * rng.standard_normal(env.size)
    a = energy_vad(Waveform(x), CFG)
    b = energy_vad(Waveform(scale * x), CFG)
    assert np.array_equal(a, b)


def test_frame_energy_matches_direct_sum(rng):
    x = rng.standard_normal(4000)
    e = frame_log_energy(Waveform(x, 8000), CFG)
    flen, hop = CFG.frame_len(8000), CFG.hop(8000)
    direct = [10 * np.log10(np.sum(x[i * hop : i * hop + flen] ** 2) + LOG_FLOOR) for i in range(len(e))]
    np.testing.assert_allclose(e, direct, rtol=1e-12)


def test_vad_trim_keeps_speech_span():
    x = np.concatenate([np.zeros(8000), np.random.default_rng(1).standard_normal(16000)])
    out = vad_trim(Waveform(x), CFG)
    assert 15000 <= len(out) <= 16800


# --- log-mel -----------------------------------------------------------------------


def test_logmel_frame_count():
    f = logmel(Waveform(np.random.default_rng(0).standard_normal(16000)), CFG)
    assert f.frames.shape == (98, 24)


def test_logmel_white_noise_finite_above_floor(rng):
    f = logmel(Waveform(rng.standard_normal(8000)), CFG)
    assert np.all(np.isfinite(f.frames))
    assert np.all(f.frames > np.log(LOG_FLOOR))


def test_logmel_too_short():
    with pytest.raises(ValueError, match="too short"):
        logmel(Waveform(np.ones(100)), CFG)


def test_mel_scale_roundtrip():
    f = np.linspace(0, 8000, 50)
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)


def test_filterbank_shape_and_peaks():
    fb = mel_filterbank(24, 512, 16000)
    assert fb.shape == (24, 257)
    assert np.all(fb >= 0) and np.all(fb.max(axis=1) <= 1.0 + 1e-12)
    # every interior bin is covered by some filter
    assert np.all(fb[:, 1:-1].sum(axis=0) > 0)


def test_tone_at_filter_center_dominates():
    sr, n_mels = 16000, 24
    n_fft = fft_size(CFG.frame_len(sr))
    centers = mel_to_hz(np.linspace(0, hz_to_mel(sr / 2), n_mels + 2))[1:-1]
    k = 12
    # snap the tone to the DFT bin nearest the filter center
    f0 = round(centers[k] * n_fft / sr) * sr / n_fft
    t = np.arange(sr) / sr
    w = Waveform(np.sin(2 * np.pi * f0 * t), sr)
    out = logmel(w, CFG).frames
    # independent oracle: naive DFT of one windowed frame, triangular weights
    # evaluated straight from the mel edge definition
    flen = CFG.frame_len(sr)
    frame = w.samples[:flen] * np.hamming(flen)
    n = np.arange(flen)
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    spec = np.array([abs(np.sum(frame * np.exp(-2j * np.pi * b * n / n_fft))) ** 2 for b in range(len(freqs))])
    edges = mel_to_hz(np.linspace(0, hz_to_mel(sr / 2), n_mels + 2))
    energies = []
    for m in range(n_mels):
        lo, mid, hi = edges[m : m + 3]
        wts = np.clip(np.minimum((freqs - lo) / (mid - lo), (hi - freqs) / (hi - mid)), 0, None)
        energies.append(np.log(spec @ wts + LOG_FLOOR))
    np.testing.assert_allclose(out[0], energies, rtol=1e-9, atol=1e-9)
    assert np.argmax(out[0]) == k
    assert np.all(np.argmax(out, axis=1) == k)


def test_logmel_shift_by_one_hop(rng):
    x = rng.standard_normal(8000 + 80)
    a = logmel(Waveform(x[:8000], 8000), CFG).frames
    b = logmel(Waveform(x[80:], 8000), CFG).frames
    np.testing.assert_allclose(a[1:], b[:-1], atol=1e-9)


# --- MVN ---------------------------------------------------------------------------


def mvn_oracle(x, window):
    t = len(x)
    out = np.empty_like(x)
    for i in range(t):
        lo, hi = max(0, i - window // 2), min(t, i - window // 2 + window)
        seg = x[lo:hi]
        out[i] = (x[i] - seg.mean(axis=0)) / np.maximum(seg.std(axis=0), 1e-8)
    return out


def test_mvn_constant_is_zero():
    out = sliding_mvn(FeatureMatrix(np.full((50, 4), 3.7)), 11).frames
    assert np.all(out == 0.0)


def test_mvn_single_frame_zero():
    out = sliding_mvn(FeatureMatrix(np.array([[1.0, -2.0, 5.0]])), 150).frames
    assert np.all(out == 0.0)


def test_mvn_ramp_matches_bruteforce():
    x = np.outer(np.arange(300.0), [1.0, 0.5, -2.0]) + 7.0
    out = sliding_mvn(FeatureMatrix(x), 150).frames
    oracle = mvn_oracle(x, 150)
    np.testing.assert_allclose(out[75:225], oracle[75:225], atol=1e-10)
    np.testing.assert_allclose(out, oracle, atol=1e-9)


def test_mvn_rejects_tiny_window():
    with pytest.raises(ValueError):
        sliding_mvn(FeatureMatrix(np.zeros((3, 2))), 2)


@given(st.integers(1, 60), st.integers(3, 25), st.integers(0, 10_000))
def test_mvn_matches_oracle_property(t, window, seed):
    x = np.random.default_rng(seed).normal(5.0, 2.0, (t, 3))
    out = sliding_mvn(FeatureMatrix(x), window).frames
    np.testing.assert_allclose(out, mvn_oracle(x, window), atol=1e-7)


def test_mvn_interior_window_stats(rng):
    x = rng.normal(2.0, 3.0, (400, 2))
    w = 51
    out = sliding_mvn(FeatureMatrix(x), w).frames
    for t in (100, 200, 300):
        seg = x[t - w // 2 : t - w // 2 + w]
        z = (seg - seg.mean(axis=0)) / seg.std(axis=0)
        assert np.all(np.abs(z.mean(axis=0)) < 1e-8)
        assert np.all(np.abs(z.std(axis=0) - 1) < 1e-6)
        np.testing.assert_allclose(out[t], z[w // 2], atol=1e-9)
