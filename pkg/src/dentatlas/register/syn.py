"""Greedy symmetric diffeomorphic registration driven by local cross-correlation.

Both images are deformed toward a midpoint space. Each half-map is updated by
exponentiating a smoothed, normalised metric gradient (scaling and squaring)
and composing it into the map. The final forward and inverse fields combine
the two half-maps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import InversionFailure, RegistrationFailure
from ..volgrid import Geometry
from .fields import (
    DiffeoPair,
    DisplacementField,
    _compose,
    exp_field,
    invert_field,
    jacobian_determinant_array,
    sample_physical,
    smooth_vectors,
)
from .linear import resample_channels
from .metrics import local_cc_symmetric
from .schedule import ChannelPair, RegistrationSchedule, pyramid_level

log = logging.getLogger(__name__)

MIN_GRADIENT_STEP = 1e-4


@dataclass
class SynResult:
    pair: DiffeoPair
    metric: float
    trace: list = field(default_factory=list)


def _level_channels(pair: ChannelPair, shrink, sigma):
    return [(pyramid_level(d, pair.geometry, shrink, sigma)[0], w) for d, w in pair.active()]


def _warp_all(channels, geom, u):
    pts = geom.physical_grid() + u
    return [sample_physical(d, geom, pts) for d, _ in channels]


def _metric_and_gradients(fixed, moving, wf, wm, geom, radius):
    metric = 0.0
    g_f = np.zeros((3,) + geom.dims)
    g_m = np.zeros((3,) + geom.dims)
    for (_, w), a, b in zip(fixed, wf, wm):
        value, gf, gm = local_cc_symmetric(a, b, radius, spacing=geom.spacing)
        metric += w * value
        g_m += w * gm
        g_f += w * gf
    return metric, g_f, g_m


FLAT_GRADIENT = 1e-9


def _normalised_update(g, geom, sigma, step):
    g = smooth_vectors(g, sigma)
    sp = geom.spacing_array.reshape(3, 1, 1, 1)
    norm = np.sqrt(((g / sp) ** 2).sum(axis=0)).max()
    # the metric gradient is a voxel mean, so norm * size is the scale-free size;
    # below the threshold the images already agree up to rounding
    if not np.isfinite(norm) or norm * g[0].size < FLAT_GRADIENT:
        return None
    # largest update is ``step`` voxels
    return g * (step / norm)


def _min_jacobian(u, geom, margin=1):
    j = jacobian_determinant_array(u, geom.spacing)
    m = margin
    inner = j[m:-m, m:-m, m:-m] if min(geom.dims) > 2 * m else j
    return float(inner.min())


def _converged(values, window, tol):
    if len(values) < window:
        return False
    y = np.asarray(values[-window:])
    x = np.arange(window, dtype=float)
    slope = np.polyfit(x, y, 1)[0]
    return slope < tol


def register_syn(fixed: ChannelPair, moving: ChannelPair, init=None,
                 schedule: RegistrationSchedule | None = None) -> SynResult:
    """Symmetric diffeomorphic registration of ``moving`` (after ``init``) onto ``fixed``.

    The forward field maps fixed-space points into the space of the
    init-resampled moving image: ``moving(init(x + forward(x))) ~ fixed(x)``.
    """
    schedule = schedule or RegistrationSchedule()
    geom = fixed.geometry
    if fixed.weights != moving.weights:
        moving = moving.with_weights(fixed.weights)
    if init is not None or not moving.geometry.close_to(geom):
        moving = resample_channels(moving, init, geom)

    u_f = u_m = None
    step = schedule.gradient_step
    trace = []
    metric = 0.0
    for shrink, sigma, max_iter in schedule.levels:
        lgeom = geom.shrink(shrink)
        fch = _level_channels(fixed, shrink, sigma)
        mch = _level_channels(moving, shrink, sigma)
        if u_f is None:
            u_f = np.zeros((3,) + lgeom.dims)
            u_m = np.zeros((3,) + lgeom.dims)
        else:
            u_f = _upsample(u_f, prev_geom, lgeom)
            u_m = _upsample(u_m, prev_geom, lgeom)
        prev_geom = lgeom
        history = []
        level_step = step
        wf = _warp_all(fch, lgeom, u_f)
        wm = _warp_all(mch, lgeom, u_m)
        it = 0
        saved = None
        while it < max_iter:
            metric, g_f, g_m = _metric_and_gradients(fch, mch, wf, wm, lgeom, schedule.cc_window_radius)
            if history and metric < history[-1]:
                # the last step lowered the metric: undo it and retry with half the step
                u_f, u_m, wf, wm, metric, g_f, g_m = saved
                level_step /= 2
                if level_step < MIN_GRADIENT_STEP:
                    break
            else:
                history.append(metric)
                trace.append((shrink, metric))
                if _converged(history, schedule.convergence_window, schedule.convergence_tol):
                    break
            saved = (u_f, u_m, wf, wm, metric, g_f, g_m)
            d_f = _normalised_update(g_f, lgeom, schedule.update_field_sigma, level_step)
            d_m = _normalised_update(g_m, lgeom, schedule.update_field_sigma, level_step)
            if d_f is None or d_m is None:
                break
            e_f = exp_field(DisplacementField(lgeom, d_f), schedule.min_squarings).vectors
            e_m = exp_field(DisplacementField(lgeom, d_m), schedule.min_squarings).vectors
            new_f = smooth_vectors(_compose(u_f, e_f, lgeom), schedule.total_field_sigma)
            new_m = smooth_vectors(_compose(u_m, e_m, lgeom), schedule.total_field_sigma)
            if _min_jacobian(new_f, lgeom) <= 0 or _min_jacobian(new_m, lgeom) <= 0:
                level_step /= 2
                if level_step < MIN_GRADIENT_STEP:
                    raise RegistrationFailure("gradient step underflow after Jacobian folding")
                continue
            u_f, u_m = new_f, new_m
            wf = _warp_all(fch, lgeom, u_f)
            wm = _warp_all(mch, lgeom, u_m)
            it += 1
        metric = history[-1] if history else metric
        log.debug("syn level %d: %d iterations, metric %.6f", shrink, it, metric)

    half_f = DisplacementField(geom, u_f)
    half_m = DisplacementField(geom, u_m)
    try:
        inv_f = invert_field(half_f)
        inv_m = invert_field(half_m)
    except InversionFailure as exc:
        raise RegistrationFailure(str(exc)) from None
    forward = DisplacementField(geom, _compose(half_m.vectors, inv_f.vectors, geom))
    inverse = DisplacementField(geom, _compose(half_f.vectors, inv_m.vectors, geom))
    return SynResult(DiffeoPair(forward, inverse), metric, trace)


def _upsample(u, src: Geometry, dst: Geometry):
    if src == dst:
        return u
    return sample_physical(u, src, dst.physical_grid(), clamp=True)
