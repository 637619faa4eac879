"""Collapse metrics and embedding export."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

SV_TOL = 1e-8


@dataclass
class CollapseMetrics:
    per_dim_variance: np.ndarray
    mean_variance: float
    effective_rank: float
    mean_pairwise_cosine: float
    step: int

    def as_row(self) -> dict:
        return {
            "step": self.step,
            "mean_variance": self.mean_variance,
            "effective_rank": self.effective_rank,
            "mean_pairwise_cosine": self.mean_pairwise_cosine,
        }


def _rows(embeddings) -> np.ndarray:
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim > 2:
        x = x.reshape(-1, x.shape[-1])
    if x.ndim != 2:
        raise ValueError(f"expected an n x D matrix, got shape {x.shape}")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 rows")
    return x


def per_dim_variance(embeddings) -> np.ndarray:
    """Unbiased per-dimension variance over rows (frames are flattened first)."""
    return _rows(embeddings).var(axis=0, ddof=1)


def effective_rank(embeddings) -> float:
    """exp(entropy) of the normalised singular values of the mean-centred matrix.

    Singular values below ``SV_TOL`` times the scale of the raw (uncentred)
    data are treated as zero, so jitter that is negligible next to the
    embeddings themselves reads as collapse. An all-zero centred matrix has
    effective rank 1.
    """
    x = _rows(embeddings)
    scale = np.linalg.norm(x, 2)
    return effective_rank_uncentered(x - x.mean(axis=0), scale)


def effective_rank_uncentered(x: np.ndarray, scale: float | None = None) -> float:
    s = np.linalg.svd(np.asarray(x, dtype=np.float64), compute_uv=False)
    if s.size == 0 or s[0] <= 0.0:
        return 1.0
    s = s[s > SV_TOL * max(s[0], scale or 0.0)]
    if s.size == 0:
        return 1.0
    p = s / s.sum()
    return float(np.exp(-(p * np.log(p)).sum()))


def mean_pairwise_cosine(embeddings, sample_pairs: int, rng: np.random.Generator,
                         return_excluded: bool = False):
    """Monte-Carlo mean cosine similarity over distinct row pairs.

    Zero-norm rows are dropped before sampling; pass ``return_excluded`` to get
    how many were dropped alongside the mean.
    """
    x = _rows(embeddings)
    norms = np.linalg.norm(x, axis=1)
    keep = norms > 0
    excluded = int((~keep).sum())
    if excluded:
        logger.info("mean_pairwise_cosine: excluded %d zero-norm rows", excluded)
    if keep.sum() < 2:
        raise ValueError("fewer than 2 nonzero rows")
    unit = x[keep] / norms[keep, None]
    n = unit.shape[0]
    i = rng.integers(0, n, size=sample_pairs)
    j = rng.integers(0, n - 1, size=sample_pairs)
    j = j + (j >= i)
    value = float(np.einsum("ij,ij->i", unit[i], unit[j]).mean())
    return (value, excluded) if return_excluded else value


def collapse_metrics(embeddings, step: int, rng: np.random.Generator, sample_pairs: int = 2000) -> CollapseMetrics:
    x = _rows(embeddings)
    var = per_dim_variance(x)
    try:
        cos = mean_pairwise_cosine(x, sample_pairs, rng)
    except ValueError:
        cos = float("nan")
    return CollapseMetrics(var, float(var.mean()), effective_rank(x), cos, step)


def pca_project(embeddings, dims: int = 2) -> np.ndarray:
    """Project centred rows onto the top ``dims`` covariance eigenvectors.

    Components are sorted by decreasing eigenvalue and each is signed so its
    largest-magnitude loading is positive.
    """
    x = _rows(embeddings)
    if not 1 <= dims <= x.shape[1]:
        raise ValueError(f"dims must lie in [1, {x.shape[1]}]")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:dims]
    comps = vecs[:, order]
    lead = comps[np.argmax(np.abs(comps), axis=0), np.arange(dims)]
    comps = comps * np.where(lead < 0, -1.0, 1.0)
    return xc @ comps


def export_embeddings(embeddings, labels, path, dims: int = 2) -> Path:
    """Write PCA coordinates plus the class label as CSV."""
    x = _rows(embeddings)
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != x.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {x.shape[0]} rows")
    coords = pca_project(x, dims)
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([f"pc{i + 1}" for i in range(dims)] + ["label"])
            for row, label in zip(coords, labels):
                writer.writerow([repr(float(v)) for v in row] + [int(label)])
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc}") from exc
    return path


def load_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    dims = len(header) - 1
    coords = np.array([[float(v) for v in r[:dims]] for r in rows])
    labels = np.array([int(r[dims]) for r in rows])
    return coords, labels
