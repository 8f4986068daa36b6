"""Rigid and affine registration by correlation ascent over a Gaussian pyramid."""

from __future__ import annotations

import logging

import numpy as np
from scipy.spatial.transform import Rotation

from ..errors import DegenerateInput, InvalidArgument, RegistrationFailure
from .fields import sample_physical
from .metrics import global_correlation
from .schedule import ChannelPair, RegistrationSchedule, pyramid_level
from .transforms import AffineTransform, RigidTransform

log = logging.getLogger(__name__)

INITIAL_STEP = 0.1
MIN_STEP = 1e-5
# relative improvement a trial step must exceed to be accepted
IMPROVEMENT_TOL = 1e-12


class _Params:
    """Scaled parameter vector <-> transform. A unit change moves points ~1 mm."""

    def __init__(self, mode, center, radius, init):
        self.mode = mode
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = max(float(radius), 1e-6)
        if init is None:
            init = AffineTransform(np.eye(3), np.zeros(3), self.center)
        init = init.to_affine().recentered(self.center)
        if mode == "rigid":
            rot = Rotation.from_matrix(init.linear)
            if not np.allclose(rot.as_matrix(), init.linear, atol=1e-6):
                raise InvalidArgument("rigid registration needs a rigid initial transform")
            self.x0 = np.concatenate([rot.as_rotvec() * self.radius, init.translation])
        elif mode == "affine":
            self.x0 = np.concatenate([(init.linear - np.eye(3)).ravel() * self.radius, init.translation])
        else:
            raise InvalidArgument(f"unknown linear mode {mode!r}")

    def matrix(self, x):
        if self.mode == "rigid":
            return Rotation.from_rotvec(x[:3] / self.radius).as_matrix()
        return np.eye(3) + x[:9].reshape(3, 3) / self.radius

    def transform(self, x):
        if self.mode == "rigid":
            return RigidTransform.from_rotvec(x[:3] / self.radius, x[3:], self.center)
        return AffineTransform(self.matrix(x), x[9:], self.center)

    def apply(self, x, pts):
        m = self.matrix(x)
        c = self.center.reshape(3, 1)
        t = x[-3:].reshape(3, 1)
        return m @ (pts - c) + c + t


def _level_data(pair: ChannelPair, shrink, sigma):
    out = []
    for c, w in zip(pair.channels(), pair.weights):
        if w > 0:
            d, g = pyramid_level(c.data, c.geometry, shrink, sigma)
            out.append((d, w))
    return out, pair.geometry.shrink(shrink)


def _weighted_correlation(fixed, moving, mgeom, pts, strict=False):
    # only fixed points that land inside the moving grid take part
    idx = mgeom.physical_to_index(pts)
    inside = np.all((idx >= 0) & (idx <= np.reshape(mgeom.dims, (3, 1)) - 1), axis=0)
    pts = pts[:, inside]
    total = 0.0
    for (fd, w), (md, _) in zip(fixed, moving):
        warped = sample_physical(md, mgeom, pts)
        try:
            total += w * global_correlation(fd.reshape(-1)[inside], warped)
        except DegenerateInput:
            if strict:
                raise
            return -np.inf
    return total


def register_linear(fixed: ChannelPair, moving: ChannelPair, mode: str = "rigid",
                    schedule: RegistrationSchedule | None = None, init=None,
                    center=None, trace: list | None = None):
    """Maximise weighted Pearson correlation of ``fixed`` and ``moving`` warped by T.

    The returned transform maps fixed-space points into moving space, so the
    aligned moving image is ``moving(T(x))``. ``trace`` (if given) receives one
    ``(level, metric)`` tuple per accepted step.
    """
    schedule = schedule or RegistrationSchedule()
    if fixed.weights != moving.weights:
        moving = moving.with_weights(fixed.weights)
    center = fixed.foreground_centroid() if center is None else np.asarray(center, dtype=float)
    fg = np.asarray(fixed.guidance.data if fixed.weights[1] > 0 else fixed.intensity.data)
    radius = _foreground_radius(fixed, fg, center)
    params = _Params(mode, center, radius, init)
    x = params.x0.copy()

    for shrink, sigma, max_iter in schedule.levels:
        fdata, fgeom = _level_data(fixed, shrink, sigma)
        mdata, mgeom = _level_data(moving, shrink, sigma)
        stride = _sampling_stride(fgeom.dims, schedule.linear_max_points)
        grid = fgeom.physical_grid()[:, ::stride, ::stride, ::stride].reshape(3, -1)
        if stride > 1:
            fdata = [(np.ascontiguousarray(d[::stride, ::stride, ::stride]), w) for d, w in fdata]
        unit = float(np.mean(fgeom.spacing))

        def metric(p):
            return _weighted_correlation(fdata, mdata, mgeom, params.apply(p, grid))

        current = metric(x)
        if not np.isfinite(current):
            if shrink == schedule.shrink_factors[0]:
                try:
                    _weighted_correlation(fdata, mdata, mgeom, params.apply(x, grid), strict=True)
                except DegenerateInput as exc:
                    raise RegistrationFailure(f"metric degenerate at initialisation: {exc}") from None
            raise RegistrationFailure("metric degenerate at pyramid level start")
        step = INITIAL_STEP
        h = 0.05 * unit
        grad = None
        for _ in range(max_iter):
            if step < MIN_STEP:
                break
            if grad is None:
                grad = np.empty_like(x)
                for i in range(x.size):
                    e = np.zeros_like(x)
                    e[i] = h
                    grad[i] = (metric(x + e) - metric(x - e)) / (2 * h)
                gnorm = np.linalg.norm(grad)
                if not np.isfinite(gnorm) or gnorm == 0:
                    break
            trial = x + step * unit * grad / gnorm
            value = metric(trial)
            if value > current + IMPROVEMENT_TOL * max(abs(current), 1.0):
                x, current, grad = trial, value, None
                if trace is not None:
                    trace.append((shrink, current))
            else:
                step /= 2
        log.debug("linear %s level %d: metric %.6f", mode, shrink, current)
    return params.transform(x)


def _sampling_stride(dims, limit):
    s = 1
    while np.prod([-(-n // s) for n in dims]) > limit:
        s += 1
    return s


def _foreground_radius(pair, fg, center):
    grid = pair.geometry.physical_grid()
    mask = fg > 0
    if not mask.any():
        mask = np.ones(fg.shape, dtype=bool)
    d = grid[:, mask] - center.reshape(3, 1)
    return float(np.sqrt((d ** 2).sum(axis=0).mean()))


def resample_channels(pair: ChannelPair, transform, geometry=None) -> ChannelPair:
    """Moving channels pulled into ``geometry`` through a point transform."""
    from .fields import warp_volume

    geometry = geometry or pair.geometry
    return ChannelPair(warp_volume(pair.intensity, transform, geometry),
                       warp_volume(pair.guidance, transform, geometry), pair.weights)
