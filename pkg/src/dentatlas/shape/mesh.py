"""Triangle meshes: isosurface extraction, cleanup and point-to-surface projection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from ..errors import InvalidArgument

MIN_TRIANGLE_AREA = 1e-12


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    vertices: np.ndarray  # (n, 3) mm
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    labels: np.ndarray | None = None  # optional per-vertex tooth label

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise InvalidArgument("triangle index out of range")
        if not np.all(np.isfinite(v)):
            raise InvalidArgument("mesh vertices must be finite")
        v.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if self.labels is not None:
            lab = np.array(self.labels, dtype=np.int64).reshape(-1)
            if len(lab) != len(v):
                raise InvalidArgument("per-vertex labels must match the vertex count")
            lab.flags.writeable = False
            object.__setattr__(self, "labels", lab)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def is_empty(self) -> bool:
        return self.n_vertices == 0

    def with_vertices(self, vertices) -> SurfaceMesh:
        return SurfaceMesh(vertices, self.triangles, self.labels)

    def triangle_areas(self) -> np.ndarray:
        return triangle_areas(self.vertices, self.triangles)

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def signed_volume(self) -> float:
        v = self.vertices[self.triangles]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)

    def edges(self) -> np.ndarray:
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def euler_characteristic(self) -> int:
        used = np.unique(self.triangles)
        return len(used) - len(self.edges()) + self.n_triangles

    def is_closed(self) -> bool:
        """Every edge shared by exactly two triangles."""
        t = self.triangles
        if not len(t):
            return False
        e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def vertex_normals(self) -> np.ndarray:
        v, t = self.vertices, self.triangles
        fn = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        n = np.zeros_like(v)
        for k in range(3):
            np.add.at(n, t[:, k], fn)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)

    def bbox_diagonal(self) -> float:
        if self.is_empty():
            return 0.0
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))


def triangle_areas(vertices, triangles) -> np.ndarray:
    v = vertices[triangles]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def clean_mesh(vertices, triangles, labels=None) -> SurfaceMesh:
    """Merge coincident vertices, drop tiny and duplicate triangles, drop unused vertices."""
    v = np.asarray(vertices, dtype=np.float64)
    t = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if len(v):
        _, first, inverse = np.unique(np.round(v, 9), axis=0, return_index=True, return_inverse=True)
        inverse = inverse.reshape(-1)
        # keep original vertex order for determinism of ids
        order = np.argsort(first)
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        v = v[first[order]]
        t = rank[inverse[t]]
        if labels is not None:
            labels = np.asarray(labels)[first[order]]
    if len(t):
        t = t[(t[:, 0] != t[:, 1]) & (t[:, 1] != t[:, 2]) & (t[:, 0] != t[:, 2])]
        t = t[triangle_areas(v, t) >= MIN_TRIANGLE_AREA]
        _, keep = np.unique(np.sort(t, axis=1), axis=0, return_index=True)
        t = t[np.sort(keep)]
    used = np.unique(t)
    remap = -np.ones(len(v), dtype=np.int64)
    remap[used] = np.arange(len(used))
    return SurfaceMesh(v[used], remap[t] if len(t) else np.zeros((0, 3), dtype=np.int64),
                       None if labels is None else np.asarray(labels)[used])


def extract_surface(grid, iso: float = 0.5, label: int | None = None) -> SurfaceMesh:
    """Marching-cubes isosurface in physical coordinates with outward-facing triangles.

    For a :class:`~dentatlas.volgrid.LabelGrid` the binary indicator of ``label``
    (or of any nonzero label) is contoured; scalar volumes are contoured
    directly at ``iso``.
    """
    data = np.asarray(grid.data)
    if min(data.shape) < 2:
        raise InvalidArgument("surface extraction needs at least 2 voxels per axis")
    if np.issubdtype(data.dtype, np.integer):
        field_ = (data == label) if label is not None else (data != 0)
        field_ = field_.astype(np.float64)
    else:
        field_ = data.astype(np.float64)
        if label is not None:
            raise InvalidArgument("label selection needs an integer label grid")
    inside = field_ > iso
    if not inside.any():
        return SurfaceMesh(np.zeros((0, 3)))
    idx = np.argwhere(inside)
    lo = np.maximum(idx.min(axis=0) - 1, 0)
    hi = np.minimum(idx.max(axis=0) + 2, data.shape)
    sub = field_[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    # pad with the outside value so surfaces touching the border are still closed
    fill = min(float(field_.min()), iso - 1.0)
    sub = np.pad(sub, 1, constant_values=fill)
    verts, faces, _, _ = measure.marching_cubes(sub, level=iso, allow_degenerate=False, method="lewiner")
    verts = verts + lo - 1
    pts = np.asarray(grid.origin) + verts * np.asarray(grid.spacing)
    mesh = clean_mesh(pts, faces)
    if mesh.n_triangles and mesh.signed_volume() < 0:
        mesh = SurfaceMesh(mesh.vertices, mesh.triangles[:, ::-1])
    return mesh


def closest_points_on_triangles(points, a, b, c):
    """Closest point on triangle (a_i, b_i, c_i) to points[i] (all (n, 3))."""
    p = np.asarray(points, dtype=np.float64)
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def put(mask, value):
        m = mask & ~done
        out[m] = value[m] if np.ndim(value) == 2 else value
        done[m] = True

    put((d1 <= 0) & (d2 <= 0), a)
    put((d3 >= 0) & (d4 <= d3), b)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        put((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        put(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)
    return out


def project_to_surface(points, mesh: SurfaceMesh, k: int = 16):
    """Nearest point on ``mesh`` for each point, searching the ``k`` closest triangles."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    v, t = mesh.vertices, mesh.triangles
    if not len(t):
        raise InvalidArgument("cannot project onto an empty mesh")
    k = min(k, len(t))
    tri = v[t]
    centroids = tri.mean(axis=1)
    _, cand = cKDTree(centroids).query(pts, k=k)
    cand = np.asarray(cand).reshape(len(pts), k)
    best = np.empty_like(pts)
    best_d = np.full(len(pts), np.inf)
    for j in range(k):
        ids = cand[:, j]
        q = closest_points_on_triangles(pts, tri[ids, 0], tri[ids, 1], tri[ids, 2])
        d = ((q - pts) ** 2).sum(axis=1)
        better = d < best_d
        best[better] = q[better]
        best_d[better] = d[better]
    return best, np.sqrt(best_d)


def point_to_surface_distance(points, mesh: SurfaceMesh) -> np.ndarray:
    return project_to_surface(points, mesh)[1]


def symmetric_surface_distance(a: SurfaceMesh, b: SurfaceMesh) -> float:
    """Mean of the two directed mean vertex-to-surface distances."""
    return 0.5 * (float(point_to_surface_distance(a.vertices, b).mean())
                  + float(point_to_surface_distance(b.vertices, a).mean()))
