# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled sampling kernels. Semantics match ``_pykernels`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

# points this close outside the grid (in voxels) are treated as on its edge
cdef double EDGE_TOL = 1e-6


cdef inline bint _locate(double x, Py_ssize_t n, bint clamp,
                         Py_ssize_t* i0, Py_ssize_t* i1, double* f) noexcept nogil:
    if not clamp and (x < -EDGE_TOL or x > n - 1 + EDGE_TOL):
        return False
    if x < 0.0:
        x = 0.0
    elif x > n - 1:
        x = n - 1
    if n == 1:
        i0[0] = 0
        i1[0] = 0
        f[0] = 0.0
        return True
    cdef Py_ssize_t i = <Py_ssize_t>floor(x)
    if i > n - 2:
        i = n - 2
    i0[0] = i
    i1[0] = i + 1
    f[0] = x - i
    return True


def trilinear_sample(const double[:, :, :, ::1] data, const double[:, ::1] coords,
                     bint clamp=False):
    """Sample every channel of ``data`` (C, nx, ny, nz) at index-space ``coords`` (3, M)."""
    cdef Py_ssize_t nc = data.shape[0]
    cdef Py_ssize_t nx = data.shape[1], ny = data.shape[2], nz = data.shape[3]
    cdef Py_ssize_t m = coords.shape[1]
    out_arr = np.zeros((nc, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t p, c, x0, x1, y0, y1, z0, z1
    cdef double fx, fy, fz, gx, gy, gz, c00, c10, c01, c11, c0, c1
    with nogil:
        for p in range(m):
            if not _locate(coords[0, p], nx, clamp, &x0, &x1, &fx):
                continue
            if not _locate(coords[1, p], ny, clamp, &y0, &y1, &fy):
                continue
            if not _locate(coords[2, p], nz, clamp, &z0, &z1, &fz):
                continue
            gx = 1.0 - fx
            gy = 1.0 - fy
            gz = 1.0 - fz
            for c in range(nc):
                c00 = data[c, x0, y0, z0] * gx + data[c, x1, y0, z0] * fx
                c10 = data[c, x0, y1, z0] * gx + data[c, x1, y1, z0] * fx
                c01 = data[c, x0, y0, z1] * gx + data[c, x1, y0, z1] * fx
                c11 = data[c, x0, y1, z1] * gx + data[c, x1, y1, z1] * fx
                c0 = c00 * gy + c10 * fy
                c1 = c01 * gy + c11 * fy
                out[c, p] = c0 * gz + c1 * fz
    return out_arr


cdef inline bint _nearest(double x, Py_ssize_t n, bint clamp, Py_ssize_t* i) noexcept nogil:
    cdef Py_ssize_t k = <Py_ssize_t>floor(x + 0.5)
    if k < 0:
        if not clamp:
            return False
        k = 0
    elif k > n - 1:
        if not clamp:
            return False
        k = n - 1
    i[0] = k
    return True


def nearest_sample(const double[:, :, :, ::1] data, const double[:, ::1] coords,
                   bint clamp=False):
    """Nearest-neighbour counterpart of :func:`trilinear_sample`."""
    cdef Py_ssize_t nc = data.shape[0]
    cdef Py_ssize_t nx = data.shape[1], ny = data.shape[2], nz = data.shape[3]
    cdef Py_ssize_t m = coords.shape[1]
    out_arr = np.zeros((nc, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t p, c, i, j, k
    with nogil:
        for p in range(m):
            if not _nearest(coords[0, p], nx, clamp, &i):
                continue
            if not _nearest(coords[1, p], ny, clamp, &j):
                continue
            if not _nearest(coords[2, p], nz, clamp, &k):
                continue
            for c in range(nc):
                out[c, p] = data[c, i, j, k]
    return out_arr
