"""Similarity metrics: global Pearson correlation and windowed cross-correlation."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..errors import DegenerateInput, InvalidArgument

# window variance (intensity^2) below which a voxel is excluded from local CC
LOCAL_CC_EPS = 1e-6


def _arr(v):
    return np.asarray(getattr(v, "data", v), dtype=np.float64)


def global_correlation(a, b) -> float:
    """Pearson correlation of two same-shaped images."""
    x, y = _arr(a), _arr(b)
    if x.shape != y.shape:
        raise InvalidArgument("correlation inputs must share geometry")
    x = x - x.mean()
    y = y - y.mean()
    sxx = float((x * x).sum())
    syy = float((y * y).sum())
    if sxx <= 0 or syy <= 0:
        raise DegenerateInput("correlation of a constant image")
    return float((x * y).sum() / np.sqrt(sxx * syy))


def _window_sum(x, radius):
    # zero-padded box sum over the (2r+1)^3 window
    n = 2 * radius + 1
    return ndimage.uniform_filter(x, size=n, mode="constant", cval=0.0) * n ** 3


def _window_count(shape, radius):
    """In-domain voxels per window; windows are truncated at the grid border."""
    counts = []
    for L in shape:
        i = np.arange(L)
        counts.append(np.minimum(i, radius) + np.minimum(L - 1 - i, radius) + 1.0)
    return counts[0][:, None, None] * counts[1][None, :, None] * counts[2][None, None, :]


def local_cc(a, b, radius: int = 4, spacing=None, with_gradient: bool = True):
    """Mean windowed normalised cross-correlation and its gradient.

    Returns ``(metric, gradient)`` where ``gradient`` (3, nx, ny, nz) is the
    derivative of the metric with respect to the sampling positions of ``b``
    (per mm), i.e. moving ``b``'s samples along the gradient increases the
    metric. ``spacing`` defaults to the grid spacing of ``b`` if it has one.
    """
    if radius < 1:
        raise InvalidArgument("local CC window radius must be >= 1")
    A, B = _arr(a), _arr(b)
    if A.shape != B.shape:
        raise InvalidArgument("local CC inputs must share geometry")
    if spacing is None:
        spacing = getattr(b, "spacing", (1.0, 1.0, 1.0))
    n = _window_count(A.shape, radius)

    sa = _window_sum(A, radius)
    sb = _window_sum(B, radius)
    ma, mb = sa / n, sb / n
    saa = _window_sum(A * A, radius) - sa * ma
    sbb = _window_sum(B * B, radius) - sb * mb
    sab = _window_sum(A * B, radius) - sa * mb

    valid = (saa > LOCAL_CC_EPS * n) & (sbb > LOCAL_CC_EPS * n)
    count = int(valid.sum())
    if count == 0:
        return 0.0, np.zeros((3,) + A.shape) if with_gradient else None
    denom = np.where(valid, saa * sbb, 1.0)
    cc = np.where(valid, sab * sab / denom, 0.0)
    metric = float(cc.sum() / count)
    if not with_gradient:
        return metric, None

    alpha = np.where(valid, 2.0 * sab / denom, 0.0)
    beta = np.where(valid, alpha * sab / np.where(valid, sbb, 1.0), 0.0)
    gamma = beta * mb - alpha * ma
    dmdb = (A * _window_sum(alpha, radius) - B * _window_sum(beta, radius)
            + _window_sum(gamma, radius)) / count
    grad_b = np.gradient(B, *spacing)
    return metric, np.stack([dmdb * g for g in grad_b])


def local_cc_symmetric(a, b, radius: int = 4, spacing=(1.0, 1.0, 1.0)):
    """``(metric, grad_a, grad_b)``: both gradients from one set of window sums.

    Equivalent to ``local_cc(b, a)`` and ``local_cc(a, b)`` combined, at about
    two thirds of the cost.
    """
    A, B = _arr(a), _arr(b)
    if A.shape != B.shape:
        raise InvalidArgument("local CC inputs must share geometry")
    n = _window_count(A.shape, radius)
    sa = _window_sum(A, radius)
    sb = _window_sum(B, radius)
    ma, mb = sa / n, sb / n
    saa = _window_sum(A * A, radius) - sa * ma
    sbb = _window_sum(B * B, radius) - sb * mb
    sab = _window_sum(A * B, radius) - sa * mb
    valid = (saa > LOCAL_CC_EPS * n) & (sbb > LOCAL_CC_EPS * n)
    count = int(valid.sum())
    if count == 0:
        zero = np.zeros((3,) + A.shape)
        return 0.0, zero, zero.copy()
    denom = np.where(valid, saa * sbb, 1.0)
    metric = float(np.where(valid, sab * sab / denom, 0.0).sum() / count)
    alpha = np.where(valid, 2.0 * sab / denom, 0.0)
    s_alpha = _window_sum(alpha, radius)
    grads = []
    for X, Y, mx, my, sxx in ((A, B, ma, mb, saa), (B, A, mb, ma, sbb)):
        beta = np.where(valid, alpha * sab / np.where(valid, sxx, 1.0), 0.0)
        gamma = beta * mx - alpha * my
        d = (Y * s_alpha - X * _window_sum(beta, radius) + _window_sum(gamma, radius)) / count
        grads.append(np.stack([d * g for g in np.gradient(X, *spacing)]))
    return metric, grads[0], grads[1]


def local_cc_value(a, b, radius: int = 4) -> float:
    return local_cc(a, b, radius, with_gradient=False)[0]
