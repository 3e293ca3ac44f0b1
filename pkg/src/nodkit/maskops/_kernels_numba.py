"""numba-compiled mask kernels; see ``_kernels_numpy`` for the contracts."""
import numpy as np
from numba import njit


@njit(cache=True)
def _dilate(mask, offsets, out):
    nx, ny, nz = mask.shape
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                hit = False
                for k in range(offsets.shape[0]):
                    sx = x - offsets[k, 0]
                    sy = y - offsets[k, 1]
                    sz = z - offsets[k, 2]
                    if 0 <= sx < nx and 0 <= sy < ny and 0 <= sz < nz and mask[sx, sy, sz]:
                        hit = True
                        break
                out[x, y, z] = hit


@njit(cache=True)
def _erode(mask, offsets, out):
    nx, ny, nz = mask.shape
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if not mask[x, y, z]:
                    out[x, y, z] = False
                    continue
                keep = True
                for k in range(offsets.shape[0]):
                    sx = x + offsets[k, 0]
                    sy = y + offsets[k, 1]
                    sz = z + offsets[k, 2]
                    if 0 <= sx < nx and 0 <= sy < ny and 0 <= sz < nz and not mask[sx, sy, sz]:
                        keep = False
                        break
                out[x, y, z] = keep


def dilate(mask, offsets):
    out = np.empty_like(mask)
    _dilate(mask, np.ascontiguousarray(offsets, dtype=np.int64), out)
    return out


def erode(mask, offsets):
    out = np.empty_like(mask)
    _erode(mask, np.ascontiguousarray(offsets, dtype=np.int64), out)
    return out


@njit(cache=True)
def _label(mask, offsets, out):
    nx, ny, nz = mask.shape
    stack = np.empty(mask.size, dtype=np.int64)
    current = 0
    for x0 in range(nx):
        for y0 in range(ny):
            for z0 in range(nz):
                if not mask[x0, y0, z0] or out[x0, y0, z0] != 0:
                    continue
                current += 1
                out[x0, y0, z0] = current
                top = 0
                stack[0] = (x0 * ny + y0) * nz + z0
                top = 1
                while top > 0:
                    top -= 1
                    p = stack[top]
                    z = p % nz
                    y = (p // nz) % ny
                    x = p // (ny * nz)
                    for k in range(offsets.shape[0]):
                        sx = x + offsets[k, 0]
                        sy = y + offsets[k, 1]
                        sz = z + offsets[k, 2]
                        if 0 <= sx < nx and 0 <= sy < ny and 0 <= sz < nz:
                            if mask[sx, sy, sz] and out[sx, sy, sz] == 0:
                                out[sx, sy, sz] = current
                                stack[top] = (sx * ny + sy) * nz + sz
                                top += 1
    return current


def label_components(mask, offsets):
    out = np.zeros(mask.shape, dtype=np.int64)
    n = _label(mask, np.ascontiguousarray(offsets, dtype=np.int64), out)
    return out, int(n)


@njit(cache=True)
def _edt_line(f, s2, out, v, z):
    n = f.shape[0]
    k = -1
    for q in range(n):
        fq = f[q]
        if fq == np.inf:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -np.inf
            z[1] = np.inf
            continue
        while True:
            vk = v[k]
            s = ((fq + s2 * (q * q)) - (f[vk] + s2 * (vk * vk))) / (2.0 * s2 * (q - vk))
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    if k < 0:
        for x in range(n):
            out[x] = np.inf
        return
    k = 0
    for x in range(n):
        while z[k + 1] < x:
            k += 1
        d = float(x - v[k])
        out[x] = f[v[k]] + s2 * (d * d)


@njit(cache=True)
def _edt_axis(f, s2, out):
    # f, out: (lines, n) contiguous
    n = f.shape[1]
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1, dtype=np.float64)
    for i in range(f.shape[0]):
        _edt_line(f[i], s2, out[i], v, z)


def edt_sq(feature, spacing):
    f = np.where(feature, 0.0, np.inf)
    for axis in range(feature.ndim):
        moved = np.ascontiguousarray(np.moveaxis(f, axis, -1))
        shape = moved.shape
        lines = moved.reshape(-1, shape[-1])
        out = np.empty_like(lines)
        s = float(spacing[axis])
        _edt_axis(lines, s * s, out)
        f = np.moveaxis(out.reshape(shape), -1, axis)
    return np.ascontiguousarray(f)
