"""Plain-text and RIFF file formats used across the pipeline.

Numbers are written with 17 significant digits so every float round-trips.
"""

from __future__ import annotations

import hashlib
import wave
from pathlib import Path

import numpy as np

from .features import FeatureMatrix, Waveform

CHECKPOINT_VERSION = "dinospeech-ckpt-1"


def fmt(x) -> str:
    return f"{float(x):.17g}"


# --- audio -------------------------------------------------------------------------


def write_wav(path, w: Waveform) -> None:
    x = np.clip(np.asarray(w.samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        sr = fh.getframerate()
        pcm = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    return Waveform((pcm.astype(np.float64) / 32767.0).astype(np.float32), sr)


# --- features ----------------------------------------------------------------------


def write_feature_archive(path, items) -> None:
    """``items``: iterable of (utt_id, FeatureMatrix)."""
    with open(path, "w") as fh:
        for utt, f in items:
            t, d = f.frames.shape
            fh.write(f"{utt} {t} {d}\n")
            for row in f.frames:
                fh.write(" ".join(fmt(v) for v in row) + "\n")


def read_feature_archive(path, frame_hop_s: float = 0.010) -> dict:
    out = {}
    with open(path) as fh:
        lines = iter(fh)
        for header in lines:
            if not header.strip():
                continue
            utt, t, d = header.split()
            t, d = int(t), int(d)
            rows = [np.array(next(lines).split(), dtype=np.float64) for _ in range(t)]
            frames = np.array(rows).reshape(t, d) if t else np.zeros((0, d))
            out[utt] = FeatureMatrix(frames, frame_hop_s)
    return out


# --- manifests, embeddings, trials, scores -----------------------------------------


def write_manifest(path, records) -> None:
    """``records``: iterable of (utt_id, speaker_id, attr_class, wav_path)."""
    with open(path, "w") as fh:
        for utt, spk, attr, wav in records:
            fh.write(f"{utt} {spk} {attr} {wav}\n")


def read_manifest(path) -> list:
    base = Path(path).parent
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            utt, spk, attr, wav = line.split()
            wav_path = Path(wav)
            if not wav_path.is_absolute():
                wav_path = base / wav_path
            out.append((utt, spk, int(attr), str(wav_path)))
    return out


def write_embeddings(path, ids, emb) -> None:
    with open(path, "w") as fh:
        for utt, row in zip(ids, np.atleast_2d(emb)):
            fh.write(utt + " " + " ".join(fmt(v) for v in row) + "\n")


def read_embeddings(path):
    ids, rows = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if parts:
                ids.append(parts[0])
                rows.append(np.array(parts[1:], dtype=np.float64))
    return ids, np.array(rows)


def write_trials(path, trials) -> None:
    """``trials``: iterable of (enroll, test[, label])."""
    with open(path, "w") as fh:
        for tr in trials:
            fh.write(" ".join(str(x) for x in tr) + "\n")


def read_trials(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if len(parts) == 3 and parts[2] not in ("target", "nontarget"):
                raise ValueError(f"{path}: bad trial label {parts[2]!r}")
            out.append(tuple(parts))
    return out


def write_scores(path, rows) -> None:
    with open(path, "w") as fh:
        for enroll, test, score in rows:
            fh.write(f"{enroll} {test} {fmt(score)}\n")


def read_scores(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if parts:
                out.append((parts[0], parts[1], float(parts[2])))
    return out


def write_labels(path, mapping: dict) -> None:
    with open(path, "w") as fh:
        for utt in mapping:
            fh.write(f"{utt} {mapping[utt]}\n")


def read_labels(path) -> dict:
    """``<utt_id> <label>`` lines; integer labels come back as ints, others as strings."""
    out = {}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if parts:
                out[parts[0]] = int(parts[1]) if parts[1].lstrip("-").isdigit() else parts[1]
    return out


# --- checkpoints -------------------------------------------------------------------


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_checkpoint(path, params: dict, cfg_hash: str = "0") -> None:
    """Header ``<version> <config_hash>``, then ``<name> <rows> <cols>`` blocks."""
    with open(path, "w") as fh:
        fh.write(f"{CHECKPOINT_VERSION} {cfg_hash}\n")
        for name, w in params.items():
            w = np.asarray(w, dtype=np.float64)
            if w.ndim != 2:
                raise ValueError(f"{name}: checkpoint blocks must be 2-D")
            fh.write(f"{name} {w.shape[0]} {w.shape[1]}\n")
            for row in w:
                fh.write(" ".join(fmt(v) for v in row) + "\n")


def load_checkpoint(path):
    """Returns ``(params, config_hash)``."""
    params = {}
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2 or header[0] != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a {CHECKPOINT_VERSION} checkpoint")
        for line in fh:
            if not line.strip():
                continue
            name, r, c = line.split()
            r, c = int(r), int(c)
            rows = [np.array(fh.readline().split(), dtype=np.float64) for _ in range(r)]
            params[name] = np.array(rows, dtype=np.float64).reshape(r, c)
    return params, header[1]
