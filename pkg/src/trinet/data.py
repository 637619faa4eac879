"""Synthetic Markov-chain sequence corpus with known per-frame classes.

Binary file layout (all little-endian)::

    offset  size          field
    0       4             magic b"TRIN"
    4       4   u32       format version (currently 1)
    8       4   u32       num_sequences n
    12      4   u32       seq_len T
    16      4   u32       feature_dim F
    20      4   u32       num_classes C
    24      8*n*T*F f64   features, row-major (n, T, F)
    ...     2*n*T   u16   frame labels, row-major (n, T)
    ...     n       u8    split tag per sequence (0 pretrain, 1 finetune, 2 eval, 255 untagged)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"TRIN"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")

PRETRAIN, FINETUNE, EVAL, UNTAGGED = 0, 1, 2, 255
SPLIT_NAMES = {"pretrain": PRETRAIN, "finetune": FINETUNE, "eval": EVAL}

MEANS_SEED = 20231015
# Nearest-mean (Bayes-optimal) frame accuracy is about 0.90 for the default means.
DEFAULT_SIGMA = 1.275


class DatasetFormatError(ValueError):
    pass


class DatasetVersionError(DatasetFormatError):
    pass


def sticky_transitions(num_classes: int, stay: float) -> np.ndarray:
    off = (1.0 - stay) / (num_classes - 1)
    mat = np.full((num_classes, num_classes), off)
    np.fill_diagonal(mat, stay)
    return mat


def default_class_means(num_classes: int = 8, feature_dim: int = 16, seed: int = MEANS_SEED) -> np.ndarray:
    return np.random.default_rng(seed).normal(0.0, 1.0, (num_classes, feature_dim))


@dataclass
class SynthConfig:
    num_classes: int = 8
    feature_dim: int = 16
    seq_len: int = 64
    num_sequences: int = 400
    emission_noise_std: float = DEFAULT_SIGMA
    stay_prob: float = 0.9
    seed: int = 0
    transition_matrix: np.ndarray | None = None
    class_means: np.ndarray | None = None

    def __post_init__(self):
        if self.transition_matrix is None:
            self.transition_matrix = sticky_transitions(self.num_classes, self.stay_prob)
        if self.class_means is None:
            self.class_means = default_class_means(self.num_classes, self.feature_dim)
        self.transition_matrix = np.asarray(self.transition_matrix, dtype=np.float64)
        self.class_means = np.asarray(self.class_means, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        C, F = self.num_classes, self.feature_dim
        P = self.transition_matrix
        if P.shape != (C, C) or (P < 0).any() or np.abs(P.sum(axis=1) - 1.0).max() > 1e-12:
            raise ValueError("transition matrix must be C x C, nonnegative, with rows summing to 1")
        if self.class_means.shape != (C, F):
            raise ValueError(f"class_means must have shape {(C, F)}")
        diffs = self.class_means[:, None, :] - self.class_means[None, :, :]
        dist = np.abs(diffs).sum(-1) + np.eye(C)
        if (dist == 0).any():
            raise ValueError("class means must be pairwise distinct")
        if not self.emission_noise_std >= 0:
            raise ValueError("emission_noise_std must be nonnegative")
        if self.seq_len < 1 or self.num_sequences < 1:
            raise ValueError("seq_len and num_sequences must be positive")


@dataclass
class LabeledDataset:
    features: np.ndarray
    frame_labels: np.ndarray
    split: np.ndarray = field(default=None)
    num_classes: int = 0

    def __post_init__(self):
        n = self.features.shape[0]
        if self.split is None:
            self.split = np.full(n, UNTAGGED, dtype=np.uint8)
        if self.frame_labels.shape != self.features.shape[:2] or self.split.shape != (n,):
            raise ValueError("features, labels and split tags have inconsistent shapes")
        if self.num_classes == 0:
            self.num_classes = int(self.frame_labels.max()) + 1

    def subset(self, name: str) -> "LabeledDataset":
        sel = self.split == SPLIT_NAMES[name]
        return LabeledDataset(self.features[sel], self.frame_labels[sel], self.split[sel], self.num_classes)

    def __len__(self) -> int:
        return self.features.shape[0]


def generate(config: SynthConfig) -> LabeledDataset:
    """Sample label chains and Gaussian emissions; sequence i uses seed (seed, i)."""
    C, F, T = config.num_classes, config.feature_dim, config.seq_len
    cum = np.cumsum(config.transition_matrix, axis=1)
    cum[:, -1] = 1.0
    feats = np.empty((config.num_sequences, T, F))
    labels = np.empty((config.num_sequences, T), dtype=np.int64)
    for i in range(config.num_sequences):
        rng = np.random.default_rng([config.seed, i])
        u = rng.random(T)
        seq = np.empty(T, dtype=np.int64)
        seq[0] = min(int(u[0] * C), C - 1)
        for t in range(1, T):
            seq[t] = np.searchsorted(cum[seq[t - 1]], u[t], side="right")
        labels[i] = seq
        feats[i] = config.class_means[seq] + config.emission_noise_std * rng.standard_normal((T, F))
    return LabeledDataset(feats, labels, num_classes=C)


def split(dataset: LabeledDataset, fractions, seed: int = 0) -> LabeledDataset:
    """Tag whole sequences as pretrain / finetune / eval (largest-remainder rounding)."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or (fr < 0).any():
        raise ValueError("need three nonnegative fractions")
    if abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    n = len(dataset)
    raw = fr * n
    counts = np.floor(raw).astype(int)
    for idx in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[idx] += 1
    order = np.random.default_rng([seed, 0x5EED]).permutation(n)
    tags = np.empty(n, dtype=np.uint8)
    bounds = np.cumsum([0, *counts])
    for tag in range(3):
        tags[order[bounds[tag]:bounds[tag + 1]]] = tag
    return LabeledDataset(dataset.features, dataset.frame_labels, tags, dataset.num_classes)


def downsample_labels(labels: np.ndarray, stride: int, num_classes: int) -> np.ndarray:
    """Majority label per stride window (ties go to the smaller class id).

    A trailing partial window votes over the frames it has.
    """
    n, T_in = labels.shape
    T = -(-T_in // stride)
    counts = np.zeros((n, T, num_classes), dtype=np.int64)
    steps = np.arange(T_in) // stride
    for t in range(T_in):
        np.add.at(counts, (np.arange(n), steps[t], labels[:, t]), 1)
    return counts.argmax(axis=-1)


def bayes_frame_accuracy(class_means: np.ndarray, sigma: float, num_samples: int, seed: int = 0) -> float:
    """Monte-Carlo accuracy of the nearest-mean classifier under uniform class priors."""
    rng = np.random.default_rng(seed)
    C, F = class_means.shape
    y = rng.integers(0, C, num_samples)
    x = class_means[y] + sigma * rng.standard_normal((num_samples, F))
    d = ((x[:, None, :] - class_means[None]) ** 2).sum(-1)
    return float((d.argmin(1) == y).mean())


def save(dataset: LabeledDataset, path) -> Path:
    n, T, F = dataset.features.shape
    if dataset.num_classes > 0xFFFF:
        raise ValueError("labels must fit in u16")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, n, T, F, dataset.num_classes))
        fh.write(np.ascontiguousarray(dataset.features, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(dataset.frame_labels, dtype="<u2").tobytes())
        fh.write(np.ascontiguousarray(dataset.split, dtype="u1").tobytes())
    return path


def load(path) -> LabeledDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError("file too short for a header")
    magic, version, n, T, F, C = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DatasetVersionError(f"dataset format version {version}, expected {FORMAT_VERSION}")
    sizes = (8 * n * T * F, 2 * n * T, n)
    if len(raw) != _HEADER.size + sum(sizes):
        raise DatasetFormatError(
            f"payload is {len(raw) - _HEADER.size} bytes, header implies {sum(sizes)} (truncated or corrupt)"
        )
    off = _HEADER.size
    feats = np.frombuffer(raw, "<f8", n * T * F, off).reshape(n, T, F).astype(np.float64)
    off += sizes[0]
    labels = np.frombuffer(raw, "<u2", n * T, off).reshape(n, T).astype(np.int64)
    off += sizes[1]
    tags = np.frombuffer(raw, "u1", n, off).copy()
    return LabeledDataset(feats, labels, tags, int(C))
