"""Cohort curation: body masks, point-driven nodule masks, label integration."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .maskops import (BinaryMask, Connectivity, box_element, distance_transform,
                      fill_holes, kernels, largest_component, morph_binary)
from .volio import LabelMap, NoduleAnnotation, Volume, VolumeMeta, in_bounds, world_to_voxel

logger = logging.getLogger(__name__)

BODY_LABEL = 200
NODULE_LABEL = 201
LOBE_LABELS = (28, 29, 30, 31, 32)
BODY_THRESHOLD_HU = -300.0

# absorbs float noise in extent/spacing ratios that should be integral
_CEIL_SLACK = 1e-9
# distance comparisons in mm
_DIST_SLACK = 1e-9


@dataclass(frozen=True)
class VoiPatch:
    volume: Volume
    offset_vox: tuple
    source_meta: VolumeMeta


@dataclass(frozen=True)
class SegmentationConfig:
    method: str = "kmeans"
    n_clusters: int = 2
    margin_vox: int = 5
    seed: int = 0
    max_iter: int = 100
    close_size: int = 3
    open_size: int = 2

    def __post_init__(self):
        if self.method not in ("kmeans", "otsu"):
            raise DomainError(f"method must be 'kmeans' or 'otsu', got {self.method!r}")
        if self.n_clusters < 2:
            raise DomainError("n_clusters must be >= 2")
        if self.margin_vox < 0:
            raise DomainError("margin_vox must be >= 0")


def _same_geometry(*metas):
    first = metas[0]
    for m in metas[1:]:
        if m != first:
            raise DomainError(f"geometry mismatch: {first} vs {m}")


def derive_body_mask(ct: Volume, threshold_hu: float = BODY_THRESHOLD_HU, backend=None) -> BinaryMask:
    """Body envelope: strict HU threshold, largest face component, holes filled."""
    raw = BinaryMask(ct.meta, ct.data > threshold_hu)
    if not raw.bits.any():
        raise DomainError(f"empty body: no voxel exceeds {threshold_hu} HU")
    body = largest_component(raw, Connectivity.FACE, backend)
    return fill_holes(body, Connectivity.FACE, backend)


def half_extent_vox(meta: VolumeMeta, extent_mm) -> tuple:
    return tuple(int(math.ceil(e / (2.0 * s) - _CEIL_SLACK))
                 for e, s in zip(extent_mm, meta.spacing))


def annotation_box(meta: VolumeMeta, ann: NoduleAnnotation, margin_vox: int = 0):
    """Inclusive voxel bounds ``(lo, hi)`` of an annotation box plus margin, clipped."""
    c = world_to_voxel(meta, ann.center_mm)
    h = half_extent_vox(meta, ann.extent_mm)
    lo = tuple(max(0, ci - hi - margin_vox) for ci, hi in zip(c, h))
    hi = tuple(min(d - 1, ci + hi + margin_vox) for ci, hi, d in zip(c, h, meta.dims))
    return lo, hi


def box_mask(meta: VolumeMeta, ann: NoduleAnnotation) -> BinaryMask:
    """Annotation box rasterised on the grid (the weak reference standard)."""
    lo, hi = annotation_box(meta, ann)
    bits = np.zeros(meta.dims, dtype=bool)
    if all(l <= h for l, h in zip(lo, hi)):
        bits[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] = True
    return BinaryMask(meta, bits)


def extract_voi(ct: Volume, ann: NoduleAnnotation, margin_vox: int = 5) -> VoiPatch:
    c = world_to_voxel(ct.meta, ann.center_mm)
    if not in_bounds(ct.meta, c):
        raise DomainError(f"annotation centre {ann.center_mm} mm maps to voxel {c}, outside the volume")
    lo, hi = annotation_box(ct.meta, ann, margin_vox)
    data = ct.data[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
    origin = tuple(o + i * s for o, i, s in zip(ct.meta.origin, lo, ct.meta.spacing))
    meta = VolumeMeta(data.shape, ct.meta.spacing, origin)
    return VoiPatch(Volume(meta, data), lo, ct.meta)


def kmeans_1d(values, n_clusters: int = 2, max_iter: int = 100):
    """Deterministic Lloyd iterations on scalars.

    Centres start evenly spaced from the minimum to the maximum value (for
    two clusters: exactly min and max). Assignment ties go to the lower
    centre index; an emptied cluster keeps its centre.

    Returns
    -------
    assign : ndarray of int
    centers : ndarray of float
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    centers = np.linspace(x.min(), x.max(), n_clusters)
    assign = None
    for _ in range(max_iter):
        new = np.argmin(np.abs(x[:, None] - centers[None, :]), axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(n_clusters):
            sel = assign == j
            if sel.any():
                centers[j] = x[sel].mean()
    return assign, centers


def otsu_threshold(values) -> float:
    """Exact Otsu split over the distinct values; foreground is ``> threshold``."""
    x = np.asarray(values, dtype=np.float64).ravel()
    u, counts = np.unique(x, return_counts=True)
    if u.size < 2:
        raise DomainError("degenerate intensity: a single distinct value")
    w = counts.astype(np.float64)
    cw = np.cumsum(w)[:-1]
    cs = np.cumsum(w * u)[:-1]
    total_w, total_s = w.sum(), (w * u).sum()
    w0, w1 = cw, total_w - cw
    mu0, mu1 = cs / w0, (total_s - cs) / w1
    between = w0 * w1 * (mu0 - mu1) ** 2
    return float(u[int(np.argmax(between))])


def segment_nodule(voi: VoiPatch, cfg: SegmentationConfig = SegmentationConfig(),
                   backend=None) -> BinaryMask:
    """Intensity clustering inside a VOI, refined by close then open.

    The highest-mean cluster (kmeans) or the above-threshold class (otsu)
    is the nodule. Returns a mask on the parent grid.
    """
    vals = voi.volume.data.astype(np.float64)
    if vals.size == 0:
        raise DomainError("empty VOI")
    if vals.min() == vals.max():
        raise DomainError("degenerate intensity: VOI is constant")
    if cfg.method == "kmeans":
        assign, centers = kmeans_1d(vals, cfg.n_clusters, cfg.max_iter)
        fg = (assign == int(np.argmax(centers))).reshape(vals.shape)
    else:
        fg = vals > otsu_threshold(vals)

    k = kernels(backend)
    fg = np.ascontiguousarray(fg)
    closing = box_element(cfg.close_size)
    fg = k.erode(k.dilate(fg, closing), closing)
    opening = box_element(cfg.open_size)
    fg = k.dilate(k.erode(fg, opening), opening)

    full = np.zeros(voi.source_meta.dims, dtype=bool)
    ox, oy, oz = voi.offset_vox
    nx, ny, nz = fg.shape
    full[ox:ox + nx, oy:oy + ny, oz:oz + nz] = fg
    return BinaryMask(voi.source_meta, full)


def dilate_mask_mm(m: BinaryMask, mm: float, backend=None) -> BinaryMask:
    """Add every voxel within ``mm`` (Euclidean, in mm) of the mask."""
    if mm < 0:
        raise DomainError("dilation distance must be >= 0")
    if mm == 0 or not m.bits.any():
        return m
    dist = distance_transform(m, backend)
    return m.replace(m.bits | (dist <= mm + _DIST_SLACK))


def _lobes_present(labels: np.ndarray):
    present = [l for l in LOBE_LABELS if np.any(labels == l)]
    if not present:
        raise DomainError("no lobe labels (28-32) present")
    return present


def nearest_lobe_field(organs: LabelMap, backend=None):
    """Per-voxel nearest lobe label and its distance (mm); ties pick the smallest label."""
    present = _lobes_present(organs.labels)
    best_d = np.full(organs.meta.dims, np.inf)
    best_l = np.zeros(organs.meta.dims, dtype=np.uint8)
    for lobe in present:  # ascending, so strict < keeps the smaller label on ties
        d = distance_transform(BinaryMask(organs.meta, organs.labels == lobe), backend)
        closer = d < best_d
        best_d[closer] = d[closer]
        best_l[closer] = lobe
    return best_l, best_d


def attribute_lobe(m: BinaryMask, organs: LabelMap, backend=None) -> int:
    """Majority lobe under the mask, else the lobe closest to it."""
    _same_geometry(m.meta, organs.meta)
    if not m.bits.any():
        raise DomainError("cannot attribute an empty mask to a lobe")
    present = _lobes_present(organs.labels)
    under = organs.labels[m.bits]
    votes = [int(np.count_nonzero(under == l)) for l in LOBE_LABELS]
    if max(votes) > 0:
        return LOBE_LABELS[int(np.argmax(votes))]
    best, best_d = None, np.inf
    for lobe in present:
        d = distance_transform(BinaryMask(organs.meta, organs.labels == lobe), backend)
        dmin = float(d[m.bits].min())
        if dmin < best_d:
            best, best_d = lobe, dmin
    return best


def lung_boundary(lung: BinaryMask, backend=None) -> BinaryMask:
    """Lung voxels with a face neighbour outside the lung (the grid edge counts as outside)."""
    padded = np.pad(lung.bits, 1, constant_values=False)
    inner = kernels(backend).erode(np.ascontiguousarray(padded), Connectivity.FACE.offsets)
    return lung.replace(lung.bits & ~inner[1:-1, 1:-1, 1:-1])


def pleural_distance(m: BinaryMask, lung: BinaryMask, backend=None) -> float:
    """Smallest distance (mm) from the mask to the lung boundary surface."""
    _same_geometry(m.meta, lung.meta)
    if not m.bits.any():
        raise DomainError("empty nodule mask")
    if not lung.bits.any():
        raise DomainError("empty lung mask")
    boundary = lung_boundary(lung, backend)
    return float(distance_transform(boundary, backend)[m.bits].min())


def integrate_labels(organs: LabelMap, body: BinaryMask, nodules=()) -> LabelMap:
    """Merge organ labels, body envelope and nodule masks into one map.

    Priority is NODULE > organ > BODY > background. Nodule voxels are
    treated as inside the body, so nothing outside ``body | nodules`` is
    labelled.
    """
    _same_geometry(organs.meta, body.meta, *(n.meta for n in nodules))
    nod = np.zeros(organs.meta.dims, dtype=bool)
    for n in nodules:
        nod |= n.bits
    inside = body.bits | nod
    out = np.where(inside, organs.labels.astype(np.uint32), 0)
    out[inside & (out == 0)] = BODY_LABEL
    out[nod] = NODULE_LABEL
    return LabelMap(organs.meta, out)
