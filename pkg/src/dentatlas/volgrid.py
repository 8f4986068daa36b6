"""Volumetric grids, resampling and the segmentation-guided enhancement operators.

Arrays are indexed ``data[i, j, k]`` with ``i`` along x. The physical position
of voxel ``(i, j, k)`` is ``origin + (i, j, k) * spacing`` (no direction
cosines). Serialised payloads are x-fastest, see :mod:`dentatlas.io`.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import DegenerateInput, EmptyForeground, InvalidArgument, MissingLabel

UPPER_ARCH = (17, 16, 15, 14, 13, 12, 11, 21, 22, 23, 24, 25, 26, 27)
LOWER_ARCH = (47, 46, 45, 44, 43, 42, 41, 31, 32, 33, 34, 35, 36, 37)
FDI_LABELS = tuple(sorted(UPPER_ARCH + LOWER_ARCH))
_ALLOWED_LABELS = frozenset((0, 1) + FDI_LABELS)


@dataclass(frozen=True)
class Geometry:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise InvalidArgument("geometry needs three dims, spacings and origin components")
        if min(dims) < 1:
            raise InvalidArgument(f"dims must be positive, got {dims}")
        if not all(s > 0 and math.isfinite(s) for s in spacing):
            raise InvalidArgument(f"spacing must be positive, got {spacing}")
        if not all(math.isfinite(o) for o in origin):
            raise InvalidArgument(f"origin must be finite, got {origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def spacing_array(self) -> np.ndarray:
        return np.array(self.spacing)

    @property
    def origin_array(self) -> np.ndarray:
        return np.array(self.origin)

    def index_to_physical(self, idx):
        idx = np.asarray(idx, dtype=np.float64)
        shape = (3,) + (1,) * (idx.ndim - 1)
        return self.origin_array.reshape(shape) + idx * self.spacing_array.reshape(shape)

    def physical_to_index(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        shape = (3,) + (1,) * (pts.ndim - 1)
        return (pts - self.origin_array.reshape(shape)) / self.spacing_array.reshape(shape)

    def index_grid(self) -> np.ndarray:
        """(3, nx, ny, nz) array of voxel indices (read-only, cached)."""
        return _index_grid(self.dims)

    def physical_grid(self) -> np.ndarray:
        """(3, nx, ny, nz) array of voxel centre positions in mm (read-only, cached)."""
        return _physical_grid(self)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = self.origin_array
        return lo, lo + (np.array(self.dims) - 1) * self.spacing_array

    def shrink(self, factor: int) -> Geometry:
        """Geometry of ``data[::factor, ::factor, ::factor]``."""
        dims = tuple(-(-n // factor) for n in self.dims)
        return Geometry(dims, tuple(s * factor for s in self.spacing), self.origin)

    def close_to(self, other: Geometry, tol: float = 1e-6) -> bool:
        return (self.dims == other.dims
                and np.allclose(self.spacing, other.spacing, rtol=0, atol=tol)
                and np.allclose(self.origin, other.origin, rtol=0, atol=tol))


@functools.lru_cache(maxsize=8)
def _index_grid(dims):
    g = np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij"))
    g.flags.writeable = False
    return g


@functools.lru_cache(maxsize=8)
def _physical_grid(geom):
    g = geom.index_to_physical(_index_grid(geom.dims))
    g.flags.writeable = False
    return g


def require_same_geometry(a, b, what="inputs"):
    ga = a if isinstance(a, Geometry) else a.geometry
    gb = b if isinstance(b, Geometry) else b.geometry
    if not ga.close_to(gb):
        raise InvalidArgument(f"{what} have different geometry: {ga} vs {gb}")


@dataclass(frozen=True, eq=False)
class _Grid:
    geometry: Geometry
    data: np.ndarray = field(repr=False)

    _dtype = np.float32

    def __post_init__(self):
        data = np.array(self.data, dtype=self._dtype, copy=True)
        if data.shape != self.geometry.dims:
            raise InvalidArgument(f"data shape {data.shape} does not match dims {self.geometry.dims}")
        self._validate(data)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    def _validate(self, data):
        pass

    @property
    def dims(self):
        return self.geometry.dims

    @property
    def spacing(self):
        return self.geometry.spacing

    @property
    def origin(self):
        return self.geometry.origin

    def with_data(self, data):
        return type(self)(self.geometry, data)


class VolumeGrid(_Grid):
    """Scalar image (float32) with physical spacing and origin."""

    _dtype = np.float32

    def _validate(self, data):
        if not np.all(np.isfinite(data)):
            raise InvalidArgument("volume contains non-finite values")


class LabelGrid(_Grid):
    """Integer tooth-label image: 0 background, FDI labels, or a binary mask."""

    _dtype = np.uint16

    def _validate(self, data):
        bad = set(np.unique(data).tolist()) - _ALLOWED_LABELS
        if bad:
            raise InvalidArgument(f"labels outside the FDI set: {sorted(bad)}")

    def labels(self) -> list[int]:
        return [int(v) for v in np.unique(self.data) if v != 0]


class VoxelBox(NamedTuple):
    """Inclusive voxel index box."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]


@dataclass(frozen=True)
class EnhancementConfig:
    margin_voxels: int = 30
    dilation_radius_voxels: int = 15
    reassignment_table: dict = field(default_factory=lambda: dict(default_reassignment_table()))

    def __post_init__(self):
        if self.margin_voxels < 0 or self.dilation_radius_voxels < 0:
            raise InvalidArgument("margin and dilation radius must be non-negative")
        table = {int(k): float(v) for k, v in self.reassignment_table.items()}
        if any(not 0.0 <= v <= 1.0 for v in table.values()):
            raise InvalidArgument("reassignment intensities must lie in [0, 1]")
        if table.get(0, 0.0) != 0.0:
            raise InvalidArgument("background must map to 0")
        object.__setattr__(self, "reassignment_table", table)


def default_reassignment_table() -> dict[int, float]:
    """Alternate 1.0 / 0.5 along each arch so neighbouring teeth differ by 0.5."""
    table = {0: 0.0}
    for arch in (UPPER_ARCH, LOWER_ARCH):
        for pos, label in enumerate(arch):
            table[label] = 1.0 if pos % 2 == 0 else 0.5
    return table


def adjacent_pairs() -> list[tuple[int, int]]:
    return [(arch[i], arch[i + 1]) for arch in (UPPER_ARCH, LOWER_ARCH) for i in range(len(arch) - 1)]


def _output_dims(dims, spacing, target):
    # the epsilon keeps exact ratios such as 0.8 / 0.4 from rounding up
    return tuple(max(1, math.ceil(n * s / t - 1e-9)) for n, s, t in zip(dims, spacing, target))


def resample_trilinear(v: VolumeGrid, target_spacing) -> VolumeGrid:
    target = tuple(float(t) for t in np.broadcast_to(np.asarray(target_spacing, dtype=float), (3,)))
    if not all(t > 0 for t in target):
        raise InvalidArgument(f"target spacing must be positive, got {target}")
    out_geom = Geometry(_output_dims(v.dims, v.spacing, target), target, v.origin)
    return resample_to_geometry(v, out_geom)


def resample_to_geometry(v, geom: Geometry, order: int = 1):
    """Sample ``v`` on the voxel centres of ``geom``; outside reads 0.

    ``order`` 1 is trilinear (volumes), 0 is nearest neighbour (labels).
    """
    if v.geometry == geom:
        return type(v)(geom, v.data)
    idx = v.geometry.physical_to_index(geom.physical_grid())
    sampler = kernels.trilinear if order == 1 else kernels.nearest
    return type(v)(geom, sampler(v.data, idx))


def normalize_intensity(v: VolumeGrid) -> VolumeGrid:
    d = v.data.astype(np.float64)
    lo, hi = d.min(), d.max()
    if hi <= lo:
        raise DegenerateInput("cannot normalise a constant volume")
    return v.with_data((d - lo) / (hi - lo))


def bounding_box_of_labels(labels: LabelGrid) -> VoxelBox:
    fg = labels.data != 0
    if not fg.any():
        raise EmptyForeground("label grid has no foreground voxels")
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hits = np.flatnonzero(fg.any(axis=other))
        lo.append(int(hits[0]))
        hi.append(int(hits[-1]))
    return VoxelBox(tuple(lo), tuple(hi))


def crop_with_margin(g, box: VoxelBox, margin: int):
    if margin < 0:
        raise InvalidArgument("margin must be non-negative")
    dims = g.dims
    for lo, hi, n in zip(box.lo, box.hi, dims):
        if not 0 <= lo <= hi < n:
            raise InvalidArgument(f"box {box} does not fit in dims {dims}")
    lo = [max(l - margin, 0) for l in box.lo]
    hi = [min(h + margin, n - 1) for h, n in zip(box.hi, dims)]
    data = g.data[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
    origin = tuple(o + l * s for o, l, s in zip(g.origin, lo, g.spacing))
    return type(g)(Geometry(data.shape, g.spacing, origin), data)


@functools.lru_cache(maxsize=None)
def ball_offsets(radius: int) -> np.ndarray:
    """All integer offsets ``o`` with ``|o|_2 <= radius``, as an (n, 3) array."""
    r = int(radius)
    rng = np.arange(-r, r + 1)
    o = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    o = o[(o ** 2).sum(axis=1) <= r * r]
    o.flags.writeable = False
    return o


def ball_structure(radius: int) -> np.ndarray:
    r = int(radius)
    s = np.zeros((2 * r + 1,) * 3, dtype=bool)
    o = ball_offsets(r) + r
    s[o[:, 0], o[:, 1], o[:, 2]] = True
    return s


def dilate_labels(labels: LabelGrid, radius: int) -> LabelGrid:
    """Binary dilation of the foreground by the Euclidean ball of ``radius`` voxels."""
    if radius < 0:
        raise InvalidArgument("dilation radius must be non-negative")
    fg = labels.data != 0
    if radius == 0 or not fg.any():
        return labels.with_data(fg.astype(np.uint16))
    if radius <= 3:
        out = ndimage.binary_dilation(fg, structure=ball_structure(radius))
    else:
        # same set as the ball dilation: squared distances are integers, compared exactly
        d2 = ndimage.distance_transform_edt(~fg, return_distances=True) ** 2
        out = np.rint(d2) <= radius * radius
    return labels.with_data(out.astype(np.uint16))


def mask_by_labels(v: VolumeGrid, mask: LabelGrid) -> VolumeGrid:
    require_same_geometry(v, mask, "volume and mask")
    return v.with_data(np.where(mask.data != 0, v.data, np.float32(0)))


def reassign_label_intensities(labels: LabelGrid, table=None) -> VolumeGrid:
    table = default_reassignment_table() if table is None else table
    present = np.unique(labels.data)
    lut = np.zeros(int(present.max()) + 1, dtype=np.float32)
    for lab in present:
        lab = int(lab)
        if lab == 0:
            continue
        if lab not in table:
            raise MissingLabel(lab)
        lut[lab] = table[lab]
    return VolumeGrid(labels.geometry, lut[labels.data])


def dice_coefficient(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise InvalidArgument("Dice inputs must share geometry")
    na, nb = int(np.count_nonzero(a)), int(np.count_nonzero(b))
    if na + nb == 0:
        raise DegenerateInput("Dice is undefined for two empty sets")
    inter = int(np.count_nonzero(a & b))
    return 2 * inter / (na + nb)


@dataclass(frozen=True, eq=False)
class EnhancedSubject:
    box: VoxelBox
    labels: LabelGrid
    intensity: VolumeGrid
    guidance: VolumeGrid
    mask: LabelGrid


def enhance(volume: VolumeGrid, labels: LabelGrid, config: EnhancementConfig | None = None) -> EnhancedSubject:
    """Crop around the teeth, mask the surroundings and build the guidance channel."""
    config = config or EnhancementConfig()
    require_same_geometry(volume, labels, "volume and labels")
    box = bounding_box_of_labels(labels)
    vol = crop_with_margin(volume, box, config.margin_voxels)
    lab = crop_with_margin(labels, box, config.margin_voxels)
    mask = dilate_labels(lab, config.dilation_radius_voxels)
    return EnhancedSubject(
        box=box,
        labels=lab,
        intensity=mask_by_labels(vol, mask),
        guidance=reassign_label_intensities(lab, config.reassignment_table),
        mask=mask,
    )


def union_geometry(geometries, spacing) -> Geometry:
    """Grid at ``spacing`` covering the physical extent of every input grid."""
    spacing = np.broadcast_to(np.asarray(spacing, dtype=float), (3,))
    lo = np.min([g.bounds()[0] for g in geometries], axis=0)
    hi = np.max([g.bounds()[1] for g in geometries], axis=0)
    dims = np.floor((hi - lo) / spacing + 1e-9).astype(int) + 1
    return Geometry(tuple(dims), tuple(spacing), tuple(lo))
