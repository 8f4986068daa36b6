"""Multi-resolution schedules, two-channel inputs and the image pyramid."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..errors import InvalidArgument
from ..volgrid import Geometry, VolumeGrid, require_same_geometry


@dataclass(frozen=True)
class RegistrationSchedule:
    shrink_factors: tuple = (8, 4, 2, 1)
    smoothing_sigmas_voxels: tuple = (3.0, 2.0, 1.0, 0.0)
    max_iterations: tuple = (100, 80, 40, 10)
    convergence_tol: float = 1e-6
    convergence_window: int = 10
    cc_window_radius: int = 4
    gradient_step: float = 0.25
    update_field_sigma: float = 3.0
    total_field_sigma: float = 0.5
    min_squarings: int = 4
    # linear stages evaluate the metric on a regular subgrid of at most this many fixed voxels
    linear_max_points: int = 131072

    def __post_init__(self):
        for name in ("shrink_factors", "smoothing_sigmas_voxels", "max_iterations"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        n = len(self.shrink_factors)
        if not n or len(self.smoothing_sigmas_voxels) != n or len(self.max_iterations) != n:
            raise InvalidArgument("schedule lists must be non-empty and of equal length")
        f = self.shrink_factors
        if any(int(x) != x or x < 1 for x in f) or f[-1] != 1 or any(a < b for a, b in zip(f, f[1:])):
            raise InvalidArgument(f"shrink factors must be integers descending to 1, got {f}")
        if any(s < 0 for s in self.smoothing_sigmas_voxels) or any(i < 0 for i in self.max_iterations):
            raise InvalidArgument("smoothing sigmas and iteration counts must be non-negative")
        if self.linear_max_points < 1:
            raise InvalidArgument("linear_max_points must be positive")
        if self.cc_window_radius < 1 or self.gradient_step <= 0 or self.min_squarings < 0:
            raise InvalidArgument("invalid CC radius, gradient step or squaring count")

    @property
    def levels(self):
        return list(zip(self.shrink_factors, self.smoothing_sigmas_voxels, self.max_iterations))


@dataclass(frozen=True, eq=False)
class ChannelPair:
    """CBCT intensity plus the reassigned-segmentation guidance channel."""

    intensity: VolumeGrid
    guidance: VolumeGrid
    weights: tuple = (0.5, 0.5)

    def __post_init__(self):
        require_same_geometry(self.intensity, self.guidance, "channels")
        w = tuple(float(x) for x in self.weights)
        if len(w) != 2 or min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise InvalidArgument(f"channel weights must be non-negative and sum to 1, got {w}")
        object.__setattr__(self, "weights", w)

    @property
    def geometry(self) -> Geometry:
        return self.intensity.geometry

    def channels(self):
        return [self.intensity, self.guidance]

    def active(self):
        """(array, weight) for every channel with nonzero weight."""
        return [(np.asarray(c.data, dtype=np.float64), w)
                for c, w in zip(self.channels(), self.weights) if w > 0]

    def with_weights(self, weights) -> ChannelPair:
        return ChannelPair(self.intensity, self.guidance, weights)

    def foreground_centroid(self) -> np.ndarray:
        """Intensity-weighted centroid (mm) of the guidance channel, else of the intensity."""
        for c in (self.guidance, self.intensity):
            d = np.asarray(c.data, dtype=np.float64)
            d = np.where(d > 0, d, 0.0)
            if d.sum() > 0:
                grid = self.geometry.physical_grid()
                return (grid * d).reshape(3, -1).sum(axis=1) / d.sum()
        lo, hi = self.geometry.bounds()
        return (lo + hi) / 2


def pyramid_level(data: np.ndarray, geom: Geometry, shrink: int, sigma: float):
    """Gaussian smoothing (sigma in full-resolution voxels) then subsampling."""
    d = np.asarray(data, dtype=np.float64)
    if sigma > 0:
        d = ndimage.gaussian_filter(d, sigma, mode="nearest")
    if shrink > 1:
        d = d[::shrink, ::shrink, ::shrink]
    return np.ascontiguousarray(d), geom.shrink(shrink)
