"""Distribution-level fidelity metrics for generated audio.

Two complementary measures over sets of clip embeddings:

* A Gaussian Frechet distance between fitted (mean, covariance) pairs,
  the classic audio-fidelity proxy. Exposed on the command line under the
  honest name ``fad-proxy``: the bundled embedder is a fixed mel summary,
  not a learned audio classifier, so absolute values are not comparable to
  published scores. Relative comparisons under one embedder are meaningful.
* A non-parametric energy distance computed from all pairwise Euclidean
  distances, which needs no Gaussian assumption and is exactly zero when
  both samples are identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .spectral import MelSpectrogram

EIGENVALUE_TOLERANCE = -1e-8

# Pairwise-distance working-set budget (elements per block), ~128 MB of f64.
PAIRWISE_BLOCK_ELEMENTS = 2**24


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------


def mel_summary_embedding(mel) -> np.ndarray:
    """Fixed per-clip embedding: per-bin mean, std, and delta mean.

    Accepts a :class:`MelSpectrogram` or a raw ``[T, n_mels]`` array and
    returns a ``[3 * n_mels]`` float64 vector. The delta block is the mean
    frame-to-frame difference (zeros for single-frame clips), a cheap proxy
    for temporal texture.
    """
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError(f"expected a [T, n_mels] array with T >= 1, got shape {frames.shape}")
    mean = frames.mean(axis=0)
    std = frames.std(axis=0)
    if frames.shape[0] >= 2:
        delta_mean = np.diff(frames, axis=0).mean(axis=0)
    else:
        delta_mean = np.zeros(frames.shape[1])
    return np.concatenate([mean, std, delta_mean])


@dataclass
class EmbeddingStats:
    """Gaussian summary of an embedding set: mean, covariance, sample count."""

    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.mean.ndim != 1:
            raise ValueError(f"mean must be 1-D, got shape {self.mean.shape}")
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(f"cov must be [{d}, {d}], got shape {self.cov.shape}")
        if not isinstance(self.count, (int, np.integer)) or self.count < 2:
            raise ValueError(f"count must be an integer >= 2, got {self.count!r}")
        self.count = int(self.count)
        if not np.all(np.isfinite(self.mean)) or not np.all(np.isfinite(self.cov)):
            raise ValueError("stats must be finite")
        asym = float(np.max(np.abs(self.cov - self.cov.T))) if d else 0.0
        if asym > 1e-8:
            raise ValueError(f"cov must be symmetric; max |C - C.T| = {asym:.3e}")
        if d and float(np.min(np.linalg.eigvalsh(self.cov))) < EIGENVALUE_TOLERANCE:
            raise ValueError("cov must be positive semi-definite (within -1e-8)")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def embed_stats(
    clips: Sequence,
    embedder: Callable[[object], np.ndarray] | None = None,
) -> EmbeddingStats:
    """Fit Gaussian stats over ``embedder(clip)`` vectors (unbiased covariance)."""
    if embedder is None:
        embedder = mel_summary_embedding
    vectors = [np.asarray(embedder(clip), dtype=np.float64) for clip in clips]
    if len(vectors) < 2:
        raise ValueError(f"need at least 2 clips to fit stats, got {len(vectors)}")
    dims = {v.shape for v in vectors}
    if len(dims) != 1 or vectors[0].ndim != 1:
        raise ValueError(f"embeddings must share one 1-D shape, got {sorted(dims)}")
    x = np.stack(vectors)
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    cov = (cov + cov.T) / 2.0
    return EmbeddingStats(mean=mean, cov=cov, count=x.shape[0])


# ---------------------------------------------------------------------------
# Frechet distance
# ---------------------------------------------------------------------------


def _trace_sqrt_product(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """Tr((A^1/2 B A^1/2)^1/2) via eigendecompositions, clipping tiny negatives."""
    vals_a, vecs_a = np.linalg.eigh(cov_a)
    sqrt_a = (vecs_a * np.sqrt(np.clip(vals_a, 0.0, None))) @ vecs_a.T
    inner = sqrt_a @ cov_b @ sqrt_a
    inner = (inner + inner.T) / 2.0
    vals = np.linalg.eigvalsh(inner)
    return float(np.sum(np.sqrt(np.clip(vals, 0.0, None))))


def frechet_distance(a: EmbeddingStats, b: EmbeddingStats) -> float:
    """Frechet distance between two Gaussians: |mu_a - mu_b|^2 + Tr(A + B - 2(AB)^1/2).

    Equal covariances short-circuit to the exact squared mean distance, and
    the cross term is evaluated in both orders and averaged so the function
    is symmetric in its arguments bit-for-bit.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    mean_term = float(diff @ diff)
    if np.array_equal(a.cov, b.cov):
        return mean_term
    cross = (_trace_sqrt_product(a.cov, b.cov) + _trace_sqrt_product(b.cov, a.cov)) / 2.0
    value = mean_term + float(np.trace(a.cov) + np.trace(b.cov)) - 2.0 * cross
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# Energy distance
# ---------------------------------------------------------------------------


def _as_points(x, name: str) -> np.ndarray:
    pts = np.asarray(x, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ValueError(f"{name} must be a non-empty [N, D] array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError(f"{name} must be finite")
    return pts


def _mean_pairwise_distance(x: np.ndarray, y: np.ndarray) -> float:
    # Differences are formed directly (no |x|^2 + |y|^2 - 2xy shortcut) so
    # coincident points give exact zeros; blocks bound peak memory.
    n, d = x.shape
    m = y.shape[0]
    block = max(PAIRWISE_BLOCK_ELEMENTS // max(m * d, 1), 1)
    total = 0.0
    for start in range(0, n, block):
        diff = x[start : start + block, None, :] - y[None, :, :]
        total += float(np.sum(np.sqrt(np.sum(diff * diff, axis=-1))))
    return total / (n * m)


def energy_distance(xs, ys) -> float:
    """Sample energy distance 2 E|X-Y| - E|X-X'| - E|X'-Y'| over all pairs.

    All three expectations are all-pairs means (diagonal included), so two
    samples holding identical point sequences give exactly 0.0 and two point
    masses at Euclidean distance d give 2d.
    """
    x = _as_points(xs, "xs")
    y = _as_points(ys, "ys")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    cross = _mean_pairwise_distance(x, y)
    within_x = _mean_pairwise_distance(x, x)
    within_y = _mean_pairwise_distance(y, y)
    return max(2.0 * cross - within_x - within_y, 0.0)
