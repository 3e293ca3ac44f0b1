"""Fréchet distance between Gaussian fits of feature sets.

Features come from a small handcrafted extractor (intensity histogram,
moments and gradient percentiles) rather than an Inception network; any
callable mapping a :class:`~nodkit.volio.Volume` to a vector can be used
instead.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DomainError


@dataclass(frozen=True)
class FeatureConfig:
    bins: int = 16
    hu_range: tuple = (-1000.0, 500.0)
    grad_percentiles: tuple = (50.0, 90.0, 99.0)

    @property
    def length(self) -> int:
        return self.bins + 2 + len(self.grad_percentiles)


def extract_features(volume, config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Normalised HU histogram, mean, std and gradient-magnitude percentiles."""
    data = np.asarray(volume.data, dtype=np.float64)
    if data.size == 0:
        raise DomainError("empty volume")
    lo, hi = config.hu_range
    hist, _ = np.histogram(np.clip(data, lo, hi), bins=config.bins, range=(lo, hi))
    hist = hist / data.size
    sq = np.zeros_like(data)
    for axis, spacing in enumerate(volume.meta.spacing):
        if data.shape[axis] > 1:
            sq += np.gradient(data, spacing, axis=axis) ** 2
    grad = np.percentile(np.sqrt(sq), config.grad_percentiles)
    return np.concatenate([hist, [data.mean(), data.std()], grad])


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int


def gaussian_stats(features) -> GaussianStats:
    """Sample mean and unbiased (n - 1) covariance, symmetrised."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n = x.shape[0]
    if n < 2:
        raise DomainError("need at least two feature vectors")
    mu = x.mean(axis=0)
    d = x - mu
    cov = d.T @ d / (n - 1)
    return GaussianStats(mu, 0.5 * (cov + cov.T), n)


def sqrtm_psd(a) -> np.ndarray:
    """Symmetric square root of a PSD matrix; negative eigenvalues clamp to 0."""
    a = np.asarray(a, dtype=np.float64)
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def trace_sqrt_product(a, b) -> float:
    """trace((A B)^(1/2)) via the congruent form A^(1/2) B A^(1/2).

    The eigenvalues of that form are the squared singular values of
    ``A^(1/2) B^(1/2)``, so the trace is the sum of those singular values.
    This avoids square-rooting tiny, noisy eigenvalues when either matrix is
    rank deficient and is symmetric in ``a`` and ``b``.
    """
    m = sqrtm_psd(a) @ sqrtm_psd(b)
    return float(np.sum(np.linalg.svd(m, compute_uv=False)))


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    if a.mean.shape != b.mean.shape:
        raise DomainError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    d = float(diff @ diff) + float(np.trace(a.cov) + np.trace(b.cov)) \
        - 2.0 * trace_sqrt_product(a.cov, b.cov)
    return max(d, 0.0)


def fid_from_volumes(set_a, set_b, extractor=extract_features) -> float:
    fa = [extractor(v) for v in set_a]
    fb = [extractor(v) for v in set_b]
    return frechet_distance(gaussian_stats(fa), gaussian_stats(fb))
