"""3D binary mask algorithms: morphology, components, hole filling, EDT.

Voxels outside the grid count as background when dilating and are simply
ignored when eroding, so a mask that fills the grid is a fixpoint of
erosion.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .._backend import resolve_backend
from ..errors import DomainError
from ..volio import LabelMap, VolumeMeta

__all__ = [
    "BinaryMask", "Connectivity", "box_element", "morph_binary",
    "connected_components", "largest_component", "fill_holes",
    "distance_transform", "kernels",
]


class Connectivity(enum.IntEnum):
    """Neighbourhood order: 1 = faces (6), 2 = +edges (18), 3 = +corners (26)."""

    FACE = 1
    EDGE = 2
    FULL = 3

    @property
    def neighbours(self) -> int:
        return {1: 6, 2: 18, 3: 26}[int(self)]

    @property
    def offsets(self) -> np.ndarray:
        return _conn_offsets(int(self))

    @classmethod
    def parse(cls, value) -> "Connectivity":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            key = value.strip().lower()
            names = {"face": cls.FACE, "edge": cls.EDGE, "full": cls.FULL,
                     "6": cls.FACE, "18": cls.EDGE, "26": cls.FULL}
            if key in names:
                return names[key]
            value = int(key)
        value = int(value)
        if value in (6, 18, 26):
            return {6: cls.FACE, 18: cls.EDGE, 26: cls.FULL}[value]
        return cls(value)


@lru_cache(maxsize=None)
def _conn_offsets(order: int) -> np.ndarray:
    offs = [o for o in itertools.product((-1, 0, 1), repeat=3)
            if sum(abs(c) for c in o) <= order]
    arr = np.array(offs, dtype=np.int64)
    arr.setflags(write=False)
    return arr


@lru_cache(maxsize=None)
def box_element(size: int) -> np.ndarray:
    """Offsets of a ``size``-cubed box element.

    Odd sizes are centred; even sizes are anchored at the minimum corner
    (a 2-cube covers offsets 0..1 on each axis).
    """
    lo = -(size // 2) if size % 2 else 0
    rng = range(lo, lo + size)
    arr = np.array(list(itertools.product(rng, rng, rng)), dtype=np.int64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class BinaryMask:
    meta: VolumeMeta
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.shape != self.meta.dims:
            raise DomainError(f"mask shape {bits.shape} does not match dims {self.meta.dims}")
        bits = np.array(bits, dtype=bool, copy=True)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def replace(self, bits) -> "BinaryMask":
        return BinaryMask(self.meta, bits)

    def __invert__(self) -> "BinaryMask":
        return BinaryMask(self.meta, ~self.bits)

    @classmethod
    def empty(cls, meta: VolumeMeta) -> "BinaryMask":
        return cls(meta, np.zeros(meta.dims, dtype=bool))


def kernels(backend=None):
    """Return the kernel module for ``backend`` (see ``NODKIT_BACKEND``)."""
    if resolve_backend(backend) == "numba":
        from . import _kernels_numba as k
    else:
        from . import _kernels_numpy as k
    return k


def _element(conn) -> np.ndarray:
    if isinstance(conn, np.ndarray):
        return conn
    return Connectivity.parse(conn).offsets


def _morph_array(bits, op, offsets, iterations, k):
    def apply(a, fn):
        for _ in range(iterations):
            a = fn(a, offsets)
        return a

    if op == "dilate":
        return apply(bits, k.dilate)
    if op == "erode":
        return apply(bits, k.erode)
    if op == "open":
        return apply(apply(bits, k.erode), k.dilate)
    if op == "close":
        return apply(apply(bits, k.dilate), k.erode)
    raise ValueError(f"unknown morphology op {op!r}")


def morph_binary(m: BinaryMask, op: str, conn=Connectivity.FACE, iterations: int = 1,
                 backend=None) -> BinaryMask:
    """Binary dilate/erode/open/close.

    ``conn`` is a :class:`Connectivity` or an explicit ``(K, 3)`` offset
    array such as :func:`box_element` output. Open and close apply all
    erosions (dilations) first, then all dilations (erosions).
    """
    if iterations < 1:
        raise DomainError(f"iterations must be >= 1, got {iterations}")
    bits = np.ascontiguousarray(m.bits)
    out = _morph_array(bits, op, _element(conn), iterations, kernels(backend))
    return m.replace(out)


def _canonical_labels(raw, fg):
    """Relabel 1..K by decreasing size, ties by smallest x-fastest linear index."""
    flat = raw.ravel(order="F")
    nz = np.flatnonzero(flat)
    if nz.size == 0:
        return np.zeros(raw.shape, dtype=np.int64), 0
    vals, first, counts = np.unique(flat[nz], return_index=True, return_counts=True)
    first = nz[first]
    order = np.lexsort((first, -counts))
    lut = np.zeros(int(vals.max()) + 1, dtype=np.int64)
    lut[vals[order]] = np.arange(1, vals.size + 1)
    return lut[raw], int(vals.size)


def connected_components(m: BinaryMask, conn=Connectivity.FACE, backend=None) -> LabelMap:
    """Label foreground components 1..K, label 1 being the largest.

    Equal-sized components are ordered by the smallest linear index (x
    fastest, then y, then z) of any of their voxels.
    """
    raw, _ = kernels(backend).label_components(np.ascontiguousarray(m.bits), _element(conn))
    labels, _ = _canonical_labels(raw, m.bits)
    return LabelMap(m.meta, labels)


def largest_component(m: BinaryMask, conn=Connectivity.FACE, backend=None) -> BinaryMask:
    if not m.bits.any():
        return m
    labels = connected_components(m, conn, backend).labels
    return m.replace(labels == 1)


def fill_holes(m: BinaryMask, conn=Connectivity.FACE, backend=None) -> BinaryMask:
    """Fill background regions not ``conn``-reachable from the grid boundary."""
    bg = np.ascontiguousarray(~m.bits)
    raw, n = kernels(backend).label_components(bg, _element(conn))
    if n == 0:
        return m
    border = np.zeros(bg.shape, dtype=bool)
    border[[0, -1], :, :] = True
    border[:, [0, -1], :] = True
    border[:, :, [0, -1]] = True
    outside = np.unique(raw[border & bg])
    enclosed = bg & ~np.isin(raw, outside)
    return m.replace(m.bits | enclosed)


def distance_transform(m: BinaryMask, backend=None) -> np.ndarray:
    """Exact Euclidean distance (mm) from each voxel to the nearest foreground voxel."""
    if not m.bits.any():
        raise DomainError("distance transform of an empty mask is undefined")
    sq = kernels(backend).edt_sq(np.ascontiguousarray(m.bits), m.meta.spacing)
    return np.sqrt(sq)
