"""Malignancy-classification protocol: AUC, bootstrap CIs, folds, patches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from ..errors import DomainError
from ..volio import Volume, VolumeMeta, in_bounds, world_to_voxel

FOLD_COUNTS = {10: 10, 20: 5, 50: 2, 100: 1}
PATCH_SPACING = (0.7, 0.7, 1.25)
PATCH_HU_RANGE = (-1000.0, 500.0)
PAD_HU = -1000.0
STD_FLOOR = 1e-6


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise DomainError("scores and labels differ in length")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise DomainError("AUC needs at least one positive and one negative")
    return s, y


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count one half."""
    s, y = _check_binary(scores, labels)
    ranks = rankdata(s)  # average ranks for ties
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def bootstrap_ci(scores, labels, n_boot: int = 2000, level: float = 0.95, seed: int = 0):
    """Percentile interval of case-resampled AUCs.

    Resamples containing a single class are redrawn.
    """
    s, y = _check_binary(scores, labels)
    if n_boot < 100:
        raise DomainError("n_boot must be >= 100")
    if not 0 < level < 1:
        raise DomainError("level must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    n = s.size
    stats = np.empty(n_boot)
    k = 0
    while k < n_boot:
        idx = rng.integers(0, n, n)
        yy = y[idx]
        if yy.all() or not yy.any():
            continue
        stats[k] = auc(s[idx], yy)
        k += 1
    alpha = (1.0 - level) / 2.0
    low, high = np.percentile(stats, [100 * alpha, 100 * (1 - alpha)])
    return float(low), float(high)


@dataclass(frozen=True)
class FoldPlan:
    fraction: int
    folds: tuple  # tuple of sorted index arrays


def plan_folds(n_items: int, fraction: int, labels=None, seed: int = 0) -> FoldPlan:
    """Split items into disjoint data-fraction folds (10%->10, 20%->5, 50%->2, 100%->1).

    With ``labels`` positives and negatives are shuffled separately and dealt
    round-robin, so every fold holds the floor or ceiling of its share.
    """
    fraction = int(fraction)
    if fraction not in FOLD_COUNTS:
        raise DomainError(f"fraction must be one of {sorted(FOLD_COUNTS)}, got {fraction}")
    k = FOLD_COUNTS[fraction]
    if n_items < k:
        raise DomainError(f"{n_items} items cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    if labels is None:
        order = rng.permutation(n_items)
    else:
        y = np.asarray(labels).astype(bool).ravel()
        if y.size != n_items:
            raise DomainError("labels length differs from n_items")
        pos = rng.permutation(np.flatnonzero(y))
        neg = rng.permutation(np.flatnonzero(~y))
        order = np.concatenate([pos, neg])
    folds = tuple(np.sort(order[i::k]) for i in range(k))
    return FoldPlan(fraction, folds)


def preprocess_patch(ct: Volume, ann, target_spacing=PATCH_SPACING, patch_vox=(64, 64, 32)) -> Volume:
    """Classifier input patch centred on an annotation.

    The patch grid has ``target_spacing`` and places voxel ``patch_vox // 2``
    on the annotation centre. Intensities are trilinearly interpolated
    (outside the scan: -1000 HU), clipped to [-1000, 500] HU and z-scored
    with the patch's own statistics; a near-constant patch becomes zeros.
    """
    c = world_to_voxel(ct.meta, ann.center_mm)
    if not in_bounds(ct.meta, c):
        raise DomainError(f"annotation centre {ann.center_mm} mm lies outside the volume")
    patch_vox = tuple(int(p) for p in patch_vox)
    target = np.asarray(target_spacing, dtype=np.float64)
    half = np.array([p // 2 for p in patch_vox], dtype=np.float64)
    axes = [(np.arange(n) - h) * s for n, h, s in zip(patch_vox, half, target)]
    grids = np.meshgrid(*axes, indexing="ij")
    coords = [(np.asarray(ann.center_mm[i]) + grids[i] - ct.meta.origin[i]) / ct.meta.spacing[i]
              for i in range(3)]
    data = ndimage.map_coordinates(np.asarray(ct.data, dtype=np.float64), coords, order=1,
                                   mode="constant", cval=PAD_HU, prefilter=False)
    data = np.clip(data, *PATCH_HU_RANGE)
    std = data.std()
    data = np.zeros_like(data) if std < STD_FLOOR else (data - data.mean()) / std
    origin = tuple(float(ann.center_mm[i] - half[i] * target[i]) for i in range(3))
    return Volume(VolumeMeta(patch_vox, tuple(target), origin), data)
