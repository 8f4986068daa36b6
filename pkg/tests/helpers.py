"""Synthetic volumes shared by several test modules."""

import numpy as np
from scipy import ndimage

from dentatlas import kernels
from dentatlas.register import local_cc
from dentatlas.volgrid import VolumeGrid


def smooth_random(rng, shape, sigma=2.0):
    d = ndimage.gaussian_filter(rng.normal(size=shape), sigma)
    return (d - d.min()) / (d.max() - d.min())


def smooth_field(rng, dims, amplitude):
    u = np.stack([ndimage.gaussian_filter(rng.normal(size=dims), 3.0) for _ in range(3)])
    return amplitude * u / np.abs(u).max()


def blob_volume(geom):
    """Two overlapping soft ellipsoids plus a ramp: smooth, asymmetric, non-constant."""
    x = geom.physical_grid()
    lo, hi = geom.bounds()
    c = (lo + hi) / 2
    r = (hi - lo) / 2
    q1 = (((x - c.reshape(3, 1, 1, 1)) / (0.55 * r).reshape(3, 1, 1, 1)) ** 2).sum(axis=0)
    c2 = c + np.array([0.3, -0.2, 0.15]) * r
    q2 = (((x - c2.reshape(3, 1, 1, 1)) / (0.25 * r).reshape(3, 1, 1, 1)) ** 2).sum(axis=0)
    d = 1 / (1 + np.exp(4 * (q1 - 1))) + 0.6 / (1 + np.exp(4 * (q2 - 1)))
    d = d * (0.8 + 0.2 * (x[0] - lo[0]) / (hi[0] - lo[0]))
    return VolumeGrid(geom, d.astype(np.float32))


def _fd_directional(a, b, radius, direction, h=1e-4):
    # metric of b sampled at x + t*direction(x), differentiated at t = 0
    idx = np.indices(b.shape).astype(float)

    def f(t):
        bb = kernels.trilinear(b, (idx + t * direction).reshape(3, -1)).reshape(b.shape)
        return local_cc(a, bb, radius, with_gradient=False)[0]

    return (f(h) - f(-h)) / (2 * h)


def local_cc_fd_relative_error(rng, shape=(12, 12, 12), radius=2):
    """Relative error of the analytic directional derivative against central differences.

    The trial displacement is smooth and vanishes near the border.
    """
    a = smooth_random(rng, shape, sigma=2.5)
    b = 0.6 * a + 0.4 * smooth_random(rng, shape, sigma=2.5)
    _, g = local_cc(a, b, radius, spacing=(1.0, 1.0, 1.0))
    d = np.stack([ndimage.gaussian_filter(rng.normal(size=shape), 2.0) for _ in range(3)])
    d[:, :2], d[:, -2:], d[:, :, :2], d[:, :, -2:], d[:, :, :, :2], d[:, :, :, -2:] = 0, 0, 0, 0, 0, 0
    analytic = float((g * d).sum())
    # +h and -h shifts see forward and backward differences; their mean is the
    # central difference the analytic gradient is built on
    numeric = _fd_directional(a, b, radius, d)
    return abs(analytic - numeric) / max(abs(numeric), 1e-12)
