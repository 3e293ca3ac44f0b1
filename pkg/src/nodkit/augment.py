"""Lesion-aware mask augmentation.

Lesions are shrunk by whole erosion steps towards a target volume
percentage, the freed voxels are handed back to the nearest lung lobe, and
the resulting label map is reduced to the (body, nodule, spacing)
conditioning bundle the generator consumes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .curate import NODULE_LABEL, nearest_lobe_field
from .errors import DomainError
from .maskops import BinaryMask, Connectivity, kernels
from .volio import LabelMap

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ShrinkConfig:
    target_percent: float
    connectivity: Connectivity = Connectivity.FACE
    max_iter: int = 50

    def __post_init__(self):
        if not 0 < self.target_percent <= 100:
            raise DomainError(f"target_percent must lie in (0, 100], got {self.target_percent}")
        if self.max_iter < 1:
            raise DomainError("max_iter must be >= 1")
        object.__setattr__(self, "connectivity", Connectivity.parse(self.connectivity))


@dataclass(frozen=True)
class ShrinkResult:
    mask: BinaryMask
    achieved_percent: float
    iterations_used: int
    removed: BinaryMask
    best_iteration: int = 0
    warning: str = ""


def shrink_lesion(m: BinaryMask, cfg: ShrinkConfig, backend=None) -> ShrinkResult:
    """Erode ``m`` step by step and keep the iterate closest to the target.

    Stops once the volume percentage drops to the target or below, when the
    next erosion would empty the lesion, when erosion reaches a fixpoint, or
    after ``cfg.max_iter`` steps. If no erosion step keeps any voxel the
    original mask is returned with a warning.
    """
    v_orig = m.count
    if v_orig == 0:
        raise DomainError("cannot shrink an empty lesion")
    target = float(cfg.target_percent)
    offsets = cfg.connectivity.offsets
    erode = kernels(backend).erode

    current = np.ascontiguousarray(m.bits)
    best, best_it, best_p = current, 0, 100.0
    delta_best = abs(100.0 - target)
    used = 0
    reached = 100.0 <= target
    warning = ""
    while not reached and used < cfg.max_iter:
        nxt = erode(current, offsets)
        n = int(np.count_nonzero(nxt))
        if n == 0:
            if used == 0:
                warning = "first erosion empties the lesion; original kept"
            break
        if np.array_equal(nxt, current):
            break
        current = nxt
        used += 1
        p = 100.0 * n / v_orig
        if abs(p - target) < delta_best:
            best, best_it, best_p, delta_best = current, used, p, abs(p - target)
        reached = p <= target
    if not reached and not warning:
        warning = "target percentage not reached"
    if warning:
        logger.debug("shrink_lesion: %s (target %.1f%%, achieved %.1f%%)", warning, target, best_p)
    return ShrinkResult(
        mask=m.replace(best),
        achieved_percent=best_p,
        iterations_used=used,
        removed=m.replace(m.bits & ~best),
        best_iteration=best_it,
        warning=warning,
    )


def refill_removed(labels: LabelMap, removed: BinaryMask, backend=None) -> LabelMap:
    """Relabel removed lesion voxels with the nearest lobe label (28-32)."""
    if labels.meta != removed.meta:
        raise DomainError(f"geometry mismatch: {labels.meta} vs {removed.meta}")
    nearest, _ = nearest_lobe_field(labels, backend)
    out = labels.labels.copy()
    out[removed.bits] = nearest[removed.bits]
    return LabelMap(labels.meta, out)


def shrink_and_refill(labels: LabelMap, lesion: BinaryMask, cfg: ShrinkConfig, backend=None):
    """Shrink one lesion inside a label map; returns ``(new_labels, ShrinkResult)``."""
    res = shrink_lesion(lesion, cfg, backend)
    if not res.removed.bits.any():
        return labels, res
    return refill_removed(labels, res.removed, backend), res


@dataclass(frozen=True)
class Conditioning:
    body: BinaryMask
    nodule: BinaryMask
    spacing: tuple


def build_conditioning(labels: LabelMap) -> Conditioning:
    body = BinaryMask(labels.meta, labels.labels != 0)
    nodule = BinaryMask(labels.meta, labels.labels == NODULE_LABEL)
    return Conditioning(body, nodule, labels.meta.spacing)


def diameter_of_mask(m: BinaryMask) -> float:
    """Longest axis-aligned bounding-box extent in mm."""
    if not m.bits.any():
        raise DomainError("diameter of an empty mask is undefined")
    extents = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        idx = np.flatnonzero(m.bits.any(axis=other))
        extents.append((idx[-1] - idx[0] + 1) * m.meta.spacing[axis])
    return float(max(extents))


@dataclass(frozen=True)
class DiameterStats:
    mean: float
    median: float
    counts: np.ndarray
    edges: np.ndarray
    n: int


def diameter_stats(diameters, bin_width: float = 2.0, hist_range=(0.0, 100.0)) -> DiameterStats:
    """Mean, lower median and histogram of diameters (mm).

    Values outside ``hist_range`` are not binned.
    """
    d = np.sort(np.asarray(diameters, dtype=np.float64))
    if d.size == 0:
        raise DomainError("no diameters given")
    nbins = int(round((hist_range[1] - hist_range[0]) / bin_width))
    counts, edges = np.histogram(d, bins=nbins, range=hist_range)
    return DiameterStats(float(d.mean()), float(d[(d.size - 1) // 2]), counts, edges, int(d.size))


def cohort_diameter_stats(masks, bin_width: float = 2.0, hist_range=(0.0, 100.0)) -> DiameterStats:
    masks = list(masks)
    if not masks:
        raise DomainError("empty cohort")
    return diameter_stats([diameter_of_mask(m) for m in masks], bin_width, hist_range)


def sample_target_percents(n: int, low: float = 50.0, high: float = 100.0, seed: int = 0) -> np.ndarray:
    """Per-lesion targets drawn uniformly from ``[low, high)``."""
    return np.random.default_rng(seed).uniform(low, high, size=n)
