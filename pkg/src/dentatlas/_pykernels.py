"""Pure-numpy sampling kernels; the fallback when the compiled core is unavailable."""

import numpy as np

# points this close outside the grid (in voxels) are treated as on its edge
EDGE_TOL = 1e-6


def _locate(x, n, clamp):
    x = np.asarray(x, dtype=np.float64)
    if clamp:
        valid = np.ones(x.shape, dtype=bool)
    else:
        valid = (x >= -EDGE_TOL) & (x <= n - 1 + EDGE_TOL)
    x = np.clip(x, 0.0, n - 1)
    if n == 1:
        zero = np.zeros(x.shape, dtype=np.intp)
        return zero, zero, np.zeros(x.shape), valid
    i0 = np.floor(np.where(valid, x, 0.0)).astype(np.intp)
    i0 = np.minimum(i0, n - 2)
    f = np.where(valid, x - i0, 0.0)
    return i0, i0 + 1, f, valid


def trilinear_sample(data, coords, clamp=False):
    """Sample every channel of ``data`` (C, nx, ny, nz) at index-space ``coords`` (3, M)."""
    data = np.asarray(data, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    _, nx, ny, nz = data.shape
    x0, x1, fx, vx = _locate(coords[0], nx, clamp)
    y0, y1, fy, vy = _locate(coords[1], ny, clamp)
    z0, z1, fz, vz = _locate(coords[2], nz, clamp)
    valid = vx & vy & vz
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    out = np.zeros((data.shape[0], coords.shape[1]))
    for c, d in enumerate(data):
        c00 = d[x0, y0, z0] * gx + d[x1, y0, z0] * fx
        c10 = d[x0, y1, z0] * gx + d[x1, y1, z0] * fx
        c01 = d[x0, y0, z1] * gx + d[x1, y0, z1] * fx
        c11 = d[x0, y1, z1] * gx + d[x1, y1, z1] * fx
        c0 = c00 * gy + c10 * fy
        c1 = c01 * gy + c11 * fy
        out[c] = np.where(valid, c0 * gz + c1 * fz, 0.0)
    return out


def _nearest(x, n, clamp):
    k = np.floor(np.asarray(x, dtype=np.float64) + 0.5)
    valid = (k >= 0) & (k <= n - 1)
    if clamp:
        valid = np.ones(k.shape, dtype=bool)
    k = np.clip(k, 0, n - 1).astype(np.intp)
    return k, valid


def nearest_sample(data, coords, clamp=False):
    """Nearest-neighbour counterpart of :func:`trilinear_sample`."""
    data = np.asarray(data, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    _, nx, ny, nz = data.shape
    i, vi = _nearest(coords[0], nx, clamp)
    j, vj = _nearest(coords[1], ny, clamp)
    k, vk = _nearest(coords[2], nz, clamp)
    valid = vi & vj & vk
    out = np.zeros((data.shape[0], coords.shape[1]))
    for c, d in enumerate(data):
        out[c] = np.where(valid, d[i, j, k], 0.0)
    return out
