"""Pure-numpy mask kernels (fallback backend).

Every function here has a twin in ``_kernels_numba`` with the same
signature and the same result.
"""
import numpy as np

# max elements materialised by the brute-force 1-D distance pass
_EDT_CHUNK_ELEMS = 1 << 22


def _shift_slices(d, n, forward):
    """Slices (dst, src) so that dst[i] pairs with src[i + d] (forward)
    or src[i - d] (backward), restricted to valid indices."""
    if not forward:
        d = -d
    if d > 0:
        return slice(0, n - d), slice(d, n)
    if d < 0:
        return slice(-d, n), slice(0, n + d)
    return slice(0, n), slice(0, n)


def _pairs(shape, off, forward):
    dst, src = [], []
    for n, d in zip(shape, off):
        a, b = _shift_slices(int(d), n, forward)
        dst.append(a)
        src.append(b)
    return tuple(dst), tuple(src)


def dilate(mask, offsets):
    """q is set iff mask[q - b] for some offset b (outside the grid is background)."""
    out = np.zeros_like(mask)
    for off in offsets:
        dst, src = _pairs(mask.shape, off, forward=False)
        out[dst] |= mask[src]
    return out


def erode(mask, offsets):
    """p is kept iff mask[p + b] for every in-grid offset b."""
    out = mask.copy()
    for off in offsets:
        dst, src = _pairs(mask.shape, off, forward=True)
        out[dst] &= mask[src]
    return out


def label_components(mask, offsets):
    """Label connected components; labels are arbitrary positive ints.

    Min-index propagation with pointer jumping: every voxel holds the flat
    index of a voxel in its own component and takes the minimum over its
    neighbours until nothing changes.
    """
    flat = mask.ravel()
    big = np.iinfo(np.int64).max
    idx = np.where(flat, np.arange(flat.size, dtype=np.int64), big).reshape(mask.shape)
    if not flat.any():
        return np.zeros(mask.shape, dtype=np.int64), 0
    fg = mask
    while True:
        prev = idx.copy()
        for off in offsets:
            dst, src = _pairs(mask.shape, off, forward=True)
            cand = np.where(fg[src], idx[src], big)
            np.minimum(idx[dst], cand, out=idx[dst], where=fg[dst])
        # pointer jumping
        lab = idx.ravel()
        sel = np.flatnonzero(flat)
        while True:
            jumped = lab[lab[sel]]
            if np.array_equal(jumped, lab[sel]):
                break
            lab[sel] = jumped
        if np.array_equal(idx, prev):
            break
    out = np.where(fg, idx + 1, 0)
    return out, int(np.unique(out[fg]).size)


def _edt_pass(f, spacing, axis):
    """Exact 1-D min-plus pass: out[i] = min_j f[j] + s^2 (i - j)^2."""
    moved = np.moveaxis(f, axis, -1)
    shape = moved.shape
    n = shape[-1]
    lines = moved.reshape(-1, n)
    s2 = float(spacing) * float(spacing)
    i = np.arange(n, dtype=np.float64)
    dd = s2 * ((i[:, None] - i[None, :]) ** 2)  # [i, j]
    out = np.empty_like(lines)
    rows = max(1, _EDT_CHUNK_ELEMS // (n * n))
    for start in range(0, lines.shape[0], rows):
        block = lines[start:start + rows]
        out[start:start + rows] = np.min(block[:, None, :] + dd[None, :, :], axis=2)
    return np.moveaxis(out.reshape(shape), -1, axis)


def edt_sq(feature, spacing):
    """Squared anisotropic distance to the nearest ``True`` voxel."""
    f = np.where(feature, 0.0, np.inf)
    for axis in range(feature.ndim):
        f = _edt_pass(f, spacing[axis], axis)
    return np.ascontiguousarray(f)
