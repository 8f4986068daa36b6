"""Synthetic dental phantoms with exact ground truth.

A template holds 28 superellipsoid teeth (crown plus tapered root) placed along
an upper and a lower parabolic arch. Subjects are produced by an analytic
smooth deformation (Gaussian bumps plus small per-tooth rigid jitter) so that
displacements, labels and mesh vertices are known exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import GenerationFailure, InvalidArgument
from .register.fields import DisplacementField
from .shape.mesh import SurfaceMesh, extract_surface
from .volgrid import LOWER_ARCH, UPPER_ARCH, Geometry, LabelGrid, VolumeGrid

# mesiodistal width, buccolingual width, crown height, root length (mm, typical adult)
_TOOTH_MM = {
    "upper": {1: (8.5, 7.0, 10.5, 13.0), 2: (6.5, 6.0, 9.0, 13.0), 3: (7.5, 8.0, 10.0, 17.0),
              4: (7.0, 9.0, 8.5, 14.0), 5: (6.5, 9.0, 8.0, 14.0), 6: (10.0, 11.0, 7.5, 13.0),
              7: (9.0, 11.0, 7.0, 13.0)},
    "lower": {1: (5.5, 6.0, 9.0, 12.5), 2: (6.0, 6.5, 9.5, 14.0), 3: (7.0, 7.5, 11.0, 16.0),
              4: (7.0, 7.5, 8.5, 14.0), 5: (7.0, 8.0, 8.0, 14.5), 6: (11.0, 10.5, 7.5, 14.0),
              7: (10.5, 10.0, 7.0, 13.0)},
}
ENAMEL = 1.0
DENTIN = 0.75
BONE = 0.3
GAP_MM = 1.6
CROWN_EXPONENT = 3.0


@dataclass(frozen=True)
class ToothParams:
    label: int
    center: np.ndarray  # occlusal-plane centre of the crown (mm)
    tangent: np.ndarray  # mesiodistal axis
    normal: np.ndarray  # buccolingual axis
    axis: np.ndarray  # from occlusal surface toward the root apex
    half_width: float  # mesiodistal semi-axis (mm)
    half_depth: float  # buccolingual semi-axis (mm)
    crown_height: float
    root_length: float

    def local(self, pts):
        """(n, 3) physical -> (n, 3) tooth-frame coordinates (t, n, h)."""
        d = pts - self.center
        return np.stack([d @ self.tangent, d @ self.normal, d @ self.axis], axis=1)

    def inside(self, pts, shrink=1.0):
        q = self.local(pts)
        a, b = self.half_width * shrink, self.half_depth * shrink
        hc = self.crown_height
        crown = (np.abs(q[:, 0] / a) ** CROWN_EXPONENT + np.abs(q[:, 1] / b) ** CROWN_EXPONENT
                 + np.abs((q[:, 2] - hc / 2) / (hc / 2 * shrink)) ** CROWN_EXPONENT) <= 1.0
        h0 = 0.6 * hc
        span = hc - h0 + self.root_length * shrink
        s = (q[:, 2] - h0) / span
        r = 0.72 * np.clip(1.0 - s, 0.0, 1.0) ** 0.6
        root = (s >= 0) & (s <= 1) & ((q[:, 0] / (a * np.maximum(r, 1e-9))) ** 2
                                      + (q[:, 1] / (b * np.maximum(r, 1e-9))) ** 2 <= 1.0)
        return crown | root

    def extent(self):
        """Conservative radius (mm) of a ball around ``center`` holding the tooth."""
        return float(np.sqrt(max(self.half_width, self.half_depth) ** 2
                             + (self.crown_height + self.root_length) ** 2)) + 1.0


@dataclass(frozen=True, eq=False)
class PhantomTemplate:
    seed: int
    labels: LabelGrid
    intensity: VolumeGrid
    teeth: tuple  # ToothParams, FDI order
    meshes: dict = field(repr=False)  # label -> SurfaceMesh (canonical vertex ids)

    @property
    def geometry(self) -> Geometry:
        return self.labels.geometry

    def tooth(self, label) -> ToothParams:
        return next(t for t in self.teeth if t.label == label)


@dataclass(frozen=True)
class Deformation:
    """Analytic displacement d(x): Gaussian bumps plus per-tooth linearised rigid jitter."""

    bump_centers: np.ndarray  # (K, 3)
    bump_sigmas: np.ndarray  # (K,)
    bump_amplitudes: np.ndarray  # (K, 3) mm
    jitter_centers: np.ndarray  # (T, 3)
    jitter_sigmas: np.ndarray  # (T,)
    jitter_omegas: np.ndarray  # (T, 3) small rotation vectors (rad)
    jitter_translations: np.ndarray  # (T, 3) mm

    def negated(self) -> Deformation:
        return Deformation(self.bump_centers, self.bump_sigmas, -self.bump_amplitudes,
                           self.jitter_centers, self.jitter_sigmas, -self.jitter_omegas,
                           -self.jitter_translations)

    @classmethod
    def zero(cls) -> Deformation:
        e3 = np.zeros((0, 3))
        e = np.zeros(0)
        return cls(e3, e, e3, e3, e, e3, e3)

    def is_zero(self) -> bool:
        return not (self.bump_amplitudes.any() or self.jitter_omegas.any() or self.jitter_translations.any())

    def _terms(self):
        for c, s, a in zip(self.bump_centers, self.bump_sigmas, self.bump_amplitudes):
            yield c, s, a, None
        for c, s, om, t in zip(self.jitter_centers, self.jitter_sigmas, self.jitter_omegas,
                               self.jitter_translations):
            yield c, s, t, om

    @staticmethod
    def _support(pts, c, s):
        # exp(-r^2 / 2s^2) < 1e-16 beyond 8.6 s; such points are skipped
        r = pts - c
        d2 = np.einsum("ij,ij->i", r, r)
        near = np.flatnonzero(d2 < (8.6 * s) ** 2)
        return near, r[near], np.exp(-d2[near] / (2 * s * s))

    def displacement(self, pts) -> np.ndarray:
        """d at (n, 3) points."""
        pts = np.asarray(pts, dtype=np.float64)
        out = np.zeros_like(pts)
        for c, s, a, om in self._terms():
            near, r, g = self._support(pts, c, s)
            vec = a if om is None else np.cross(om, r) + a
            out[near] += g[:, None] * vec
        return out

    def jacobian(self, pts) -> np.ndarray:
        """grad d at (n, 3) points, shape (n, 3, 3) with [i, j] = d d_i / d x_j."""
        pts = np.asarray(pts, dtype=np.float64)
        jac = np.zeros((len(pts), 3, 3))
        for c, s, a, om in self._terms():
            near, r, g = self._support(pts, c, s)
            dg = g[:, None] * (-r / (s * s))
            if om is None:
                jac[near] += a[None, :, None] * dg[:, None, :]
            else:
                lin = np.cross(om, r) + a
                skew = np.array([[0, -om[2], om[1]], [om[2], 0, -om[0]], [-om[1], om[0], 0]])
                jac[near] += lin[:, :, None] * dg[:, None, :] + g[:, None, None] * skew
        return jac

    def forward(self, pts) -> np.ndarray:
        """psi(p) = p + d(p): template point -> subject point."""
        return np.asarray(pts, dtype=np.float64) + self.displacement(pts)

    def inverse(self, pts, tol=1e-10, max_iter=30) -> np.ndarray:
        """psi^-1 by Newton iteration on the analytic field."""
        q = np.asarray(pts, dtype=np.float64)
        p = q - self.displacement(q)
        active = np.arange(len(p))
        for _ in range(max_iter):
            sub = p[active]
            resid = sub + self.displacement(sub) - q[active]
            err = np.abs(resid).max(axis=1)
            done = err < tol
            active = active[~done]
            if not len(active):
                return p
            sub, resid = sub[~done], resid[~done]
            jac = self.jacobian(sub) + np.eye(3)
            p[active] = sub - np.linalg.solve(jac, resid[:, :, None])[:, :, 0]
        raise GenerationFailure("analytic deformation could not be inverted")


@dataclass(frozen=True, eq=False)
class PhantomSubject:
    seed: int
    sign: int
    amplitude_voxels: float
    noise_sigma: float
    intensity: VolumeGrid
    labels: LabelGrid
    deformation: Deformation = field(repr=False)
    forward_field: DisplacementField = field(repr=False)  # template grid: p -> p + d(p)
    inverse_field: DisplacementField = field(repr=False)  # subject grid: q -> psi^-1(q)
    vertices: dict = field(repr=False)  # label -> (n, 3) tracked template vertices

    @property
    def geometry(self) -> Geometry:
        return self.labels.geometry

    def meshes(self, template: PhantomTemplate) -> dict:
        return {t: SurfaceMesh(v, template.meshes[t].triangles) for t, v in self.vertices.items()}


def _arch_curve(half_width, depth, n=4001):
    x = np.linspace(-half_width, half_width, n)
    y = depth * (x / half_width) ** 2
    seg = np.hypot(np.diff(x), np.diff(y))
    s = np.concatenate([[0.0], np.cumsum(seg)])
    return x, y, s


def _place_arch(labels, sizes, rng, geom, half_width, depth, y0, z_occlusal, axis_sign, scale):
    """ToothParams for one arch; ``labels`` ordered along the arch."""
    widths = np.array([sizes[lab % 10][0] for lab in labels]) * scale
    gaps = GAP_MM * scale
    total = widths.sum() + gaps * (len(labels) - 1)
    x, y, s = _arch_curve(half_width, depth)
    if total > s[-1]:
        raise GenerationFailure("arch too short for the teeth")
    start = (s[-1] - total) / 2
    lo, hi = geom.bounds()
    cx = (lo[0] + hi[0]) / 2
    teeth = []
    pos = start
    for lab, w in zip(labels, widths):
        mid = pos + w / 2
        pos += w + gaps
        xm = np.interp(mid, s, x)
        ym = np.interp(mid, s, y)
        tangent = np.array([1.0, 2 * depth * xm / half_width ** 2, 0.0])
        tangent /= np.linalg.norm(tangent)
        normal = np.array([-tangent[1], tangent[0], 0.0])
        md, bl, hc, hr = sizes[lab % 10]
        jit = 1.0 + rng.uniform(-0.04, 0.04, size=4)
        tilt = rng.uniform(-0.05, 0.05, size=2)
        axis = np.array([0.0, 0.0, axis_sign]) + tilt[0] * tangent + tilt[1] * normal
        axis /= np.linalg.norm(axis)
        # keep the frame orthonormal after tilting
        normal = np.cross(axis, tangent)
        normal /= np.linalg.norm(normal)
        tangent = np.cross(normal, axis)
        teeth.append(ToothParams(
            label=int(lab),
            center=np.array([cx + xm, y0 + ym, z_occlusal]),
            tangent=tangent, normal=normal, axis=axis,
            half_width=0.5 * w * 0.97 * jit[0] / 1.04,
            half_depth=0.5 * bl * scale * jit[1],
            crown_height=hc * scale * jit[2],
            root_length=hr * scale * jit[3],
        ))
    return teeth


def _rasterize(teeth, geom: Geometry):
    labels = np.zeros(geom.dims, dtype=np.uint16)
    intensity = np.zeros(geom.dims, dtype=np.float64)
    owner = np.zeros(geom.dims, dtype=np.int32)
    grid = geom.physical_grid()
    for k, tooth in enumerate(teeth, start=1):
        r = tooth.extent()
        lo = np.floor(geom.physical_to_index(tooth.center - r)).astype(int)
        hi = np.ceil(geom.physical_to_index(tooth.center + r)).astype(int) + 1
        lo = np.clip(lo, 0, geom.dims)
        hi = np.clip(hi, 0, geom.dims)
        sl = tuple(slice(a, b) for a, b in zip(lo, hi))
        pts = grid[(slice(None),) + sl].reshape(3, -1).T
        inside = tooth.inside(pts).reshape(tuple(hi - lo))
        if not inside.any():
            raise GenerationFailure(f"tooth {tooth.label} falls outside the grid")
        if np.any(owner[sl][inside] != 0):
            raise GenerationFailure(f"tooth {tooth.label} overlaps a neighbour")
        inner = tooth.inside(pts, shrink=0.8).reshape(inside.shape)
        q = tooth.local(pts)[:, 2].reshape(inside.shape)
        enamel = inside & ~inner & (q < tooth.crown_height * 0.85)
        owner[sl][inside] = k
        labels[sl][inside] = tooth.label
        intensity[sl][inside] = np.where(enamel[inside], ENAMEL, DENTIN)
    touching = inside_touch(labels)
    if touching:
        raise GenerationFailure(f"teeth {touching} touch")
    return labels, intensity


def inside_touch(labels):
    """Pairs of distinct teeth sharing a face-adjacent voxel boundary."""
    pairs = set()
    for axis in range(3):
        a = np.moveaxis(labels, axis, 0)
        l, r = a[:-1], a[1:]
        m = (l != 0) & (r != 0) & (l != r)
        for x, y in zip(l[m], r[m]):
            pairs.add((int(min(x, y)), int(max(x, y))))
    return sorted(pairs)


def _background(teeth, geom: Geometry, labels):
    """Smooth jaw-bone shell around the roots."""
    grid = geom.physical_grid()
    bone = np.zeros(geom.dims, dtype=bool)
    for tooth in teeth:
        r = tooth.extent() + 2.0
        lo = np.clip(np.floor(geom.physical_to_index(tooth.center - r)).astype(int), 0, geom.dims)
        hi = np.clip(np.ceil(geom.physical_to_index(tooth.center + r)).astype(int) + 1, 0, geom.dims)
        sl = tuple(slice(a, b) for a, b in zip(lo, hi))
        pts = grid[(slice(None),) + sl].reshape(3, -1).T
        q = tooth.local(pts)
        pad = 2.2 * np.mean(geom.spacing)
        ell = ((q[:, 0] / (tooth.half_width + pad + 1.0)) ** 2 + (q[:, 1] / (tooth.half_depth + pad)) ** 2 <= 1.0)
        band = (q[:, 2] > 0.75 * tooth.crown_height) & (q[:, 2] < tooth.crown_height + tooth.root_length + pad)
        bone[sl] |= (ell & band).reshape(tuple(hi - lo))
    return BONE * ndimage.gaussian_filter(bone.astype(np.float64), 1.5)


def generate_template(seed: int = 0, grid_dims=96, spacing=0.4, max_attempts: int = 10) -> PhantomTemplate:
    """Deterministic 28-tooth phantom on a cubic grid of ``grid_dims`` voxels."""
    dims = tuple(np.broadcast_to(np.asarray(grid_dims, dtype=int), (3,)).tolist())
    sp = tuple(np.broadcast_to(np.asarray(spacing, dtype=float), (3,)).tolist())
    if min(dims) < 32:
        raise InvalidArgument("phantom grids need at least 32 voxels per axis")
    geom = Geometry(dims, sp, (0.0, 0.0, 0.0))
    lo, hi = geom.bounds()
    ext = hi - lo
    rng = np.random.default_rng(seed)
    widen = 1.0
    last = None
    for _ in range(max_attempts):
        arch_rng = np.random.default_rng(rng.integers(2 ** 63))
        # tooth scale: teeth span ~ 0.46 of z for both arches (crown + root)
        scale = 0.45 * ext[2] / (2 * (10.5 + 17.0)) * arch_rng.uniform(0.97, 1.03)
        half_width = 0.36 * ext[0] * widen * arch_rng.uniform(0.97, 1.03)
        depth = 0.50 * ext[1] * arch_rng.uniform(0.95, 1.02)
        y0 = lo[1] + 0.16 * ext[1]
        zc = (lo[2] + hi[2]) / 2
        gap = max(1.5 * sp[2], 1.0 * scale)
        try:
            upper = _place_arch(UPPER_ARCH, _TOOTH_MM["upper"], arch_rng, geom, half_width, depth,
                                y0, zc + gap, +1.0, scale)
            lower = _place_arch(LOWER_ARCH, _TOOTH_MM["lower"], arch_rng, geom, half_width * 0.96,
                                depth * 0.96, y0 + 0.02 * ext[1], zc - gap, -1.0, scale)
            teeth = sorted(upper + lower, key=lambda t: t.label)
            labels, inten = _rasterize(teeth, geom)
        except GenerationFailure as exc:
            last = exc
            widen *= 1.05
            continue
        bg = _background(teeth, geom, labels)
        inten = np.where(labels != 0, inten, bg)
        label_grid = LabelGrid(geom, labels)
        meshes = {t.label: extract_surface(label_grid, label=t.label) for t in teeth}
        return PhantomTemplate(seed, label_grid, VolumeGrid(geom, inten), tuple(teeth), meshes)
    raise GenerationFailure(f"could not place 28 non-overlapping teeth: {last}")


def random_deformation(template: PhantomTemplate, seed: int, amplitude_voxels: float,
                       n_bumps: int = 10) -> Deformation:
    if amplitude_voxels == 0:
        return Deformation.zero()
    geom = template.geometry
    rng = np.random.default_rng(seed)
    unit = float(np.mean(geom.spacing))
    amp = amplitude_voxels * unit
    fg = np.argwhere(template.labels.data != 0)
    lo = geom.index_to_physical(fg.min(axis=0))
    hi = geom.index_to_physical(fg.max(axis=0))
    size = float(np.max(hi - lo))
    centers = rng.uniform(lo, hi, size=(n_bumps, 3))
    sigmas = rng.uniform(0.14, 0.22, size=n_bumps) * size
    dirs = rng.normal(size=(n_bumps, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    amps = dirs * amp * rng.uniform(0.6, 1.0, size=(n_bumps, 1))
    teeth = template.teeth
    jc = np.array([t.center + t.axis * 0.5 * t.crown_height for t in teeth])
    js = np.array([0.9 * t.half_width for t in teeth])
    jitter = amplitude_voxels / 2.0
    omegas = rng.normal(scale=np.deg2rad(1.0) * jitter, size=(len(teeth), 3))
    trans = rng.normal(scale=0.2 * unit * jitter, size=(len(teeth), 3))
    return Deformation(centers, sigmas, amps, jc, js, omegas, trans)


def _min_jacobian(deform: Deformation, geom: Geometry) -> float:
    pts = geom.physical_grid().reshape(3, -1).T
    j = deform.jacobian(pts) + np.eye(3)
    return float(np.linalg.det(j).min())


def synthesize_subject(template: PhantomTemplate, seed: int, amplitude_voxels: float = 2.0,
                       noise_sigma: float = 0.0, sign: int = 1, max_retries: int = 20,
                       min_jacobian: float = 0.2) -> PhantomSubject:
    """Deform the template by a random analytic field and add Gaussian noise."""
    geom = template.geometry
    deform = None
    for attempt in range(max_retries):
        cand = random_deformation(template, _attempt_seed(seed, attempt), amplitude_voxels)
        # antithetic partners must both be diffeomorphic, so check both signs
        if min(_min_jacobian(cand, geom), _min_jacobian(cand.negated(), geom)) > min_jacobian:
            deform = cand
            break
    if deform is None:
        raise GenerationFailure(f"no diffeomorphic deformation after {max_retries} retries (seed {seed})")
    if sign < 0:
        deform = deform.negated()
    return _subject_from_deformation(template, deform, seed, sign, amplitude_voxels, noise_sigma)


def _attempt_seed(seed, attempt):
    return seed if attempt == 0 else [seed, attempt]


def _subject_from_deformation(template, deform, seed, sign, amplitude, noise_sigma):
    geom = template.geometry
    grid = geom.physical_grid()
    pts = grid.reshape(3, -1).T
    pre = deform.inverse(pts)
    if deform.is_zero():
        # exact copy; resampling would add index roundoff
        inten = np.array(template.intensity.data)
        labels = np.array(template.labels.data, dtype=np.uint16)
    else:
        idx = geom.physical_to_index(pre.T.reshape((3,) + geom.dims))
        inten = kernels.trilinear(template.intensity.data, idx)
        labels = kernels.nearest(template.labels.data, idx).astype(np.uint16)
    if noise_sigma > 0:
        noise_rng = np.random.default_rng([seed, 0 if sign > 0 else 1, 7])
        inten = inten + noise_rng.normal(scale=noise_sigma, size=inten.shape)
    fwd = deform.displacement(pts).T.reshape((3,) + geom.dims)
    inv = (pre - pts).T.reshape((3,) + geom.dims)
    verts = {t: deform.forward(m.vertices) for t, m in template.meshes.items()}
    return PhantomSubject(
        seed=seed, sign=sign, amplitude_voxels=amplitude, noise_sigma=noise_sigma,
        intensity=VolumeGrid(geom, inten), labels=LabelGrid(geom, labels),
        deformation=deform, forward_field=DisplacementField(geom, fwd),
        inverse_field=DisplacementField(geom, inv), vertices=verts,
    )


def cohort(template: PhantomTemplate, n: int, seeds=None, amplitude_voxels: float = 2.0,
           noise_sigma: float = 0.0) -> list[PhantomSubject]:
    """``n`` subjects in antithetic pairs: subjects 2k and 2k+1 share a seed with negated fields."""
    if n < 2 or n % 2:
        raise InvalidArgument("antithetic cohorts need an even size >= 2")
    if seeds is None:
        seeds = [1000 + 17 * k for k in range(n // 2)]
    seeds = list(seeds)
    if len(seeds) != n // 2:
        raise InvalidArgument(f"need {n // 2} seeds for {n} subjects, got {len(seeds)}")
    out = []
    for s in seeds:
        out.append(synthesize_subject(template, s, amplitude_voxels, noise_sigma, sign=+1))
        out.append(synthesize_subject(template, s, amplitude_voxels, noise_sigma, sign=-1))
    return out


def _family_base(geom: Geometry, label: int) -> ToothParams:
    lo, hi = geom.bounds()
    c = (lo + hi) / 2
    md, bl, hc, hr = _TOOTH_MM["upper"][label % 10]
    s = 0.7 * (hi[2] - lo[2]) / (hc + hr) / 1.3
    return ToothParams(label, c - np.array([0, 0, 0.5 * (hc + hr) * s]), np.array([1.0, 0, 0]),
                       np.array([0, 1.0, 0]), np.array([0, 0, 1.0]), 0.5 * md * s, 0.5 * bl * s,
                       hc * s, hr * s)


def _family_factors(k, mode_scale):
    # mesiodistal width, buccolingual width, and both heights together
    return 1 + mode_scale * np.asarray(k, dtype=float)


def _scaled_tooth(base: ToothParams, f) -> ToothParams:
    return ToothParams(base.label, base.center, base.tangent, base.normal, base.axis,
                       base.half_width * f[0], base.half_depth * f[1],
                       base.crown_height * f[2], base.root_length * f[2])


def phantom_tooth_family(n: int, seed: int = 0, grid_dims: int = 40, spacing: float = 0.25,
                         mode_scale: float = 0.12, label: int = 16):
    """Label grids of one tooth whose widths and height vary along three independent modes.

    Returns ``(base_params, [(coefficients, LabelGrid), ...])``.
    """
    rng = np.random.default_rng(seed)
    geom = Geometry((grid_dims,) * 3, (spacing,) * 3)
    base = _family_base(geom, label)
    pts = geom.physical_grid().reshape(3, -1).T
    out = []
    for _ in range(n):
        k = rng.normal(size=3)
        t = _scaled_tooth(base, _family_factors(k, mode_scale))
        mask = t.inside(pts).reshape(geom.dims)
        out.append((k, LabelGrid(geom, mask.astype(np.uint16) * label)))
    return base, out


def tooth_family_meshes(n: int, seed: int = 0, grid_dims: int = 40, spacing: float = 0.25,
                        mode_scale: float = 0.12, label: int = 16):
    """The family of :func:`phantom_tooth_family` as meshes in exact vertex correspondence.

    The base surface is extracted once; each member moves its vertices by the
    member's per-axis scaling in the tooth frame, which maps the base solid
    exactly onto the member solid. Returns ``(base_mesh, [(coefficients, SurfaceMesh), ...])``.
    """
    rng = np.random.default_rng(seed)
    geom = Geometry((grid_dims,) * 3, (spacing,) * 3)
    base = _family_base(geom, label)
    mask = base.inside(geom.physical_grid().reshape(3, -1).T).reshape(geom.dims)
    base_mesh = extract_surface(LabelGrid(geom, mask.astype(np.uint16) * label), label=label)
    frame = np.stack([base.tangent, base.normal, base.axis])
    q = base.local(base_mesh.vertices)
    out = []
    for _ in range(n):
        k = rng.normal(size=3)
        verts = base.center + (q * _family_factors(k, mode_scale)) @ frame
        out.append((k, base_mesh.with_vertices(verts)))
    return base_mesh, out
