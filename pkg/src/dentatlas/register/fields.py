"""Dense displacement fields: warping, composition, inversion, exponentiation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .. import kernels
from ..errors import InversionFailure, InvalidArgument
from ..volgrid import Geometry, VolumeGrid, require_same_geometry
from .transforms import _PointTransform


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-voxel displacement in mm, stored as a (3, nx, ny, nz) array."""

    geometry: Geometry
    vectors: np.ndarray = field(repr=False)

    def __post_init__(self):
        vec = np.array(self.vectors, dtype=np.float64, copy=True)
        if vec.shape != (3,) + self.geometry.dims:
            raise InvalidArgument(f"field shape {vec.shape} does not match dims {self.geometry.dims}")
        if not np.all(np.isfinite(vec)):
            raise InvalidArgument("displacement field contains non-finite values")
        vec.flags.writeable = False
        object.__setattr__(self, "vectors", vec)

    @classmethod
    def zeros(cls, geometry: Geometry) -> DisplacementField:
        return cls(geometry, np.zeros((3,) + geometry.dims))

    @classmethod
    def constant(cls, geometry: Geometry, vector) -> DisplacementField:
        v = np.asarray(vector, dtype=np.float64).reshape(3, 1, 1, 1)
        return cls(geometry, np.broadcast_to(v, (3,) + geometry.dims))

    def __neg__(self):
        return DisplacementField(self.geometry, -self.vectors)

    def scaled(self, s: float) -> DisplacementField:
        return DisplacementField(self.geometry, self.vectors * s)

    def in_voxels(self) -> np.ndarray:
        return self.vectors / self.geometry.spacing_array.reshape(3, 1, 1, 1)

    def norm_voxels(self) -> np.ndarray:
        return np.sqrt((self.in_voxels() ** 2).sum(axis=0))

    def positions(self) -> np.ndarray:
        """Physical positions ``x + u(x)`` for every voxel."""
        return self.geometry.physical_grid() + self.vectors


@dataclass(frozen=True, eq=False)
class DiffeoPair:
    forward: DisplacementField
    inverse: DisplacementField


def sample_physical(data, geom: Geometry, pts, order=1, clamp=False):
    """Sample array(s) living on ``geom`` at physical points ``pts`` (3, ...)."""
    idx = geom.physical_to_index(pts)
    if order == 1:
        return kernels.trilinear(data, idx, clamp=clamp)
    return kernels.nearest(data, idx, clamp=clamp)


def warp_array(data, geom: Geometry, target: Geometry, transform=None, order=1):
    """Pull ``data`` (on ``geom``) back onto ``target`` through a field or point transform.

    ``out(x) = data(T(x))``; ``transform`` may be a :class:`DisplacementField` on
    ``target``, a linear transform, a list applied right-to-left (the last entry
    acts on ``x`` first), or ``None``.
    """
    pts = map_points(target, transform)
    return sample_physical(data, geom, pts, order=order)


def map_points(target: Geometry, transform):
    pts = target.physical_grid()
    on_grid = True
    chain = transform if isinstance(transform, (list, tuple)) else [transform]
    for t in reversed(chain):
        if t is None:
            continue
        if isinstance(t, DisplacementField):
            if on_grid and t.geometry == target:
                pts = pts + t.vectors
            else:
                pts = pts + sample_physical(t.vectors, t.geometry, pts, clamp=True)
        elif isinstance(t, _PointTransform):
            pts = t.apply(pts)
        else:
            raise InvalidArgument(f"cannot warp with {type(t).__name__}")
        on_grid = False
    return pts


def warp_volume(v: VolumeGrid, transform, geometry: Geometry | None = None, order: int = 1):
    """``out(x) = v(x + u(x))`` (trilinear, outside reads 0)."""
    if isinstance(transform, DisplacementField):
        if geometry is not None:
            require_same_geometry(transform.geometry, geometry, "field and target")
        geometry = transform.geometry
    geometry = geometry or v.geometry
    out = warp_array(v.data, v.geometry, geometry, transform, order=order)
    return type(v)(geometry, out)


def compose_fields(f1: DisplacementField, f2: DisplacementField) -> DisplacementField:
    """``(f1 o f2)(x) = u2(x) + u1(x + u2(x))``."""
    require_same_geometry(f1, f2, "fields")
    return DisplacementField(f2.geometry, _compose(f1.vectors, f2.vectors, f2.geometry))


def _compose(u1, u2, geom):
    pts = geom.physical_grid() + u2
    return u2 + sample_physical(u1, geom, pts, clamp=True)


def invert_field(f: DisplacementField, tol_voxels: float = 0.01, max_iter: int = 50,
                 max_residual: float = 0.5) -> DisplacementField:
    """Fixed-point inverse ``v <- -u(x + v)``.

    The fixed point only contracts where the field's gradient norm is below
    one. When it stalls, Newton steps on ``y + u(y) = x`` finish the job.
    """
    geom = f.geometry
    grid = geom.physical_grid()
    sp = geom.spacing_array.reshape(3, 1, 1, 1)
    v = np.zeros_like(f.vectors)
    for _ in range(max_iter):
        v_new = -sample_physical(f.vectors, geom, grid + v, clamp=True)
        step = np.abs((v_new - v) / sp).max()
        v = v_new
        if step < tol_voxels:
            break
    inv = DisplacementField(geom, v)
    res = composition_residual(f, inv)
    if not res <= max_residual:
        inv = DisplacementField(geom, _newton_inverse(f, v, tol_voxels, max_iter))
        res = composition_residual(f, inv)
    if not res <= max_residual:
        raise InversionFailure(res)
    return inv


def _newton_inverse(f: DisplacementField, v0, tol_voxels, max_iter):
    geom = f.geometry
    grid = geom.physical_grid()
    sp = geom.spacing_array.reshape(3, 1, 1, 1)
    shape = f.vectors.shape[1:]
    grad = np.stack([np.stack(np.gradient(f.vectors[c], *geom.spacing, edge_order=1)) for c in range(3)])
    grad = grad.reshape((9,) + shape)
    eye = np.eye(3)

    def residual(y):
        return y + sample_physical(f.vectors, geom, y, clamp=True) - grid

    y = grid + v0
    r = residual(y)
    err = np.sqrt(((r / sp) ** 2).sum(axis=0))
    for _ in range(max_iter):
        if err.max() < tol_voxels:
            break
        J = sample_physical(grad, geom, y, clamp=True).reshape((3, 3) + shape)
        J = np.moveaxis(J, (0, 1), (-2, -1)) + eye
        delta = np.linalg.solve(J, np.moveaxis(r, 0, -1)[..., None])[..., 0]
        delta = np.moveaxis(delta, -1, 0)
        # per-voxel backtracking keeps every residual from growing
        t = np.ones(shape)
        for _ in range(6):
            y_new = y - t * delta
            r_new = residual(y_new)
            err_new = np.sqrt(((r_new / sp) ** 2).sum(axis=0))
            worse = ~(err_new <= err)
            if not worse.any():
                break
            t = np.where(worse, t / 2, t)
        keep = err_new <= err
        y = np.where(keep, y_new, y)
        r = np.where(keep, r_new, r)
        err = np.where(keep, err_new, err)
    return y - grid


def composition_residual(f: DisplacementField, g: DisplacementField, margin: int = 1) -> float:
    """Max |f o g - id| in voxels over voxels whose image under ``g`` stays inside the grid."""
    geom = g.geometry
    c = _compose(f.vectors, g.vectors, geom) / geom.spacing_array.reshape(3, 1, 1, 1)
    idx = geom.physical_to_index(geom.physical_grid() + g.vectors)
    dims = np.array(geom.dims).reshape(3, 1, 1, 1)
    inside = np.all((idx >= margin) & (idx <= dims - 1 - margin), axis=0)
    if not inside.any():
        return 0.0
    return float(np.sqrt((c ** 2).sum(axis=0))[inside].max())


def roundtrip_residual(pair: DiffeoPair, margin: int = 1) -> float:
    return max(composition_residual(pair.forward, pair.inverse, margin),
               composition_residual(pair.inverse, pair.forward, margin))


def jacobian_determinant_array(u: np.ndarray, spacing) -> np.ndarray:
    """det(I + grad u) with central differences inside, one-sided at the border."""
    grads = np.empty((3, 3) + u.shape[1:])
    for c in range(3):
        if min(u.shape[1:]) < 2:
            raise InvalidArgument("jacobian needs at least 2 voxels per axis")
        g = np.gradient(u[c], *spacing, edge_order=1)
        for a in range(3):
            grads[c, a] = g[a]
    for c in range(3):
        grads[c, c] += 1.0
    j = grads
    return (j[0, 0] * (j[1, 1] * j[2, 2] - j[1, 2] * j[2, 1])
            - j[0, 1] * (j[1, 0] * j[2, 2] - j[1, 2] * j[2, 0])
            + j[0, 2] * (j[1, 0] * j[2, 1] - j[1, 1] * j[2, 0]))


def jacobian_determinant(f: DisplacementField) -> VolumeGrid:
    return VolumeGrid(f.geometry, jacobian_determinant_array(f.vectors, f.geometry.spacing))


def min_interior_jacobian(f: DisplacementField, margin: int = 1) -> float:
    j = jacobian_determinant_array(f.vectors, f.geometry.spacing)
    m = margin
    inner = j[m:-m or None, m:-m or None, m:-m or None] if m else j
    return float(inner.min()) if inner.size else float(j.min())


def exp_field(v: DisplacementField, min_squarings: int = 4) -> DisplacementField:
    """Exponential of a stationary velocity field by scaling and squaring."""
    geom = v.geometry
    vmax = float(v.norm_voxels().max())
    n = min_squarings
    while vmax / 2 ** n > 0.5:
        n += 1
    u = v.vectors / 2 ** n
    for _ in range(n):
        u = _compose(u, u, geom)
    return DisplacementField(geom, u)


def smooth_vectors(u: np.ndarray, sigma_voxels: float) -> np.ndarray:
    if sigma_voxels <= 0:
        return u
    return np.stack([ndimage.gaussian_filter(c, sigma_voxels, mode="nearest") for c in u])


def resample_field(f: DisplacementField, geom: Geometry) -> DisplacementField:
    """Carry a displacement field onto another grid (vectors stay in mm)."""
    if f.geometry == geom:
        return f
    return DisplacementField(geom, sample_physical(f.vectors, f.geometry, geom.physical_grid(), clamp=True))
