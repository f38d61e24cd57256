"""Synthetic speech-like data plus the on-disk dataset formats.

Each transcript character owns a fixed random unit prototype vector; an
utterance emits 2-4 noisy copies of the prototype per character, so the
mapping from frames to symbols is learnable by a small model in minutes.

Feature files are little-endian binary ("FEAT", T, D, then float32 rows);
a manifest is one `<utt-id>\t<feature-path>\t<transcript>` line per
utterance.
"""

from __future__ import annotations

import string
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

FEATURE_MAGIC = b"FEAT"


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # (T, D) float64, exactly float32-representable
    transcript: str

    def __post_init__(self):
        if not self.transcript:
            raise DataError(f"utterance {self.id}: empty transcript")
        if self.features.ndim != 2:
            raise DataError(f"utterance {self.id}: features must be 2-D")
        if self.features.shape[0] < len(self.transcript):
            raise DataError(
                f"utterance {self.id}: {self.features.shape[0]} frames for "
                f"{len(self.transcript)} characters"
            )


def gen_synthetic(
    num_utts: int,
    vocab_size: int = 26,
    min_words: int = 1,
    max_words: int = 3,
    seed: int = 0,
    feat_dim: int = 16,
    min_word_len: int = 2,
    max_word_len: int = 5,
    noise: float = 0.1,
) -> list[Utterance]:
    """Deterministic synthetic dataset; every character (space included)
    emits 2-4 frames of its unit prototype plus Gaussian noise."""
    if vocab_size > 26:
        raise DataError(f"letter alphabet caps vocab_size at 26, got {vocab_size}")
    rng = np.random.default_rng(seed)
    letters = string.ascii_lowercase[:vocab_size]
    prototypes = {}
    for ch in letters + " ":
        v = rng.normal(size=feat_dim)
        prototypes[ch] = v / np.linalg.norm(v)

    utts = []
    for n in range(num_utts):
        words = []
        for _ in range(int(rng.integers(min_words, max_words + 1))):
            length = int(rng.integers(min_word_len, max_word_len + 1))
            words.append("".join(rng.choice(list(letters), size=length)))
        transcript = " ".join(words)
        rows = []
        for ch in transcript:
            for _ in range(int(rng.integers(2, 5))):
                rows.append(prototypes[ch] + noise * rng.normal(size=feat_dim))
        feats = np.asarray(rows)
        # round-trip through float32 so saved and in-memory features agree
        feats = feats.astype(np.float32).astype(np.float64)
        utts.append(Utterance(f"utt{n:05d}", feats, transcript))
    return utts


def split_dataset(utts: list[Utterance], seed: int = 0, dev_frac: float = 0.1,
                  test_frac: float = 0.1):
    """Seeded 80/10/10 shuffle split; utterance ids never overlap."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(utts))
    n_dev = max(1, int(len(utts) * dev_frac))
    n_test = max(1, int(len(utts) * test_frac))
    dev = [utts[i] for i in order[:n_dev]]
    test = [utts[i] for i in order[n_dev : n_dev + n_test]]
    train = [utts[i] for i in order[n_dev + n_test :]]
    return train, dev, test


# ---------------------------------------------------------------------------
# Feature files


def write_features(path: str | Path, features: np.ndarray):
    t, d = features.shape
    payload = FEATURE_MAGIC + struct.pack("<II", t, d)
    payload += np.ascontiguousarray(features, dtype="<f4").tobytes()
    Path(path).write_bytes(payload)


def read_features(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"feature file not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise DataError(f"{path}: bad feature-file magic {raw[:4]!r}")
    t, d = struct.unpack_from("<II", raw, 4)
    expected = 12 + 4 * t * d
    if len(raw) < expected:
        raise DataError(f"{path}: truncated feature file ({len(raw)} < {expected} bytes)")
    data = np.frombuffer(raw, dtype="<f4", count=t * d, offset=12)
    return data.reshape(t, d).astype(np.float64)


# ---------------------------------------------------------------------------
# Manifests


def write_manifest(path: str | Path, utts: list[Utterance], feature_dir: str | Path):
    """Write the manifest and one feature file per utterance."""
    path = Path(path)
    feature_dir = Path(feature_dir)
    feature_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for utt in utts:
        feat_path = feature_dir / f"{utt.id}.feat"
        write_features(feat_path, utt.features)
        lines.append(f"{utt.id}\t{feat_path}\t{utt.transcript}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> list[Utterance]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    utts = []
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{ln}: expected 3 tab-separated fields, got {len(parts)}")
        utt_id, feat_path, transcript = parts
        utts.append(Utterance(utt_id, read_features(feat_path), transcript))
    return utts
