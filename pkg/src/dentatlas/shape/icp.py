"""Rigid surface alignment: principal-axes initialisation then point-to-plane ICP."""

from __future__ import annotations

import itertools

import numpy as np
from scipy.spatial import cKDTree

from ..errors import AlignmentFailure, InvalidArgument
from ..register.transforms import RigidTransform
from .mesh import SurfaceMesh


def _principal_axes(pts):
    c = pts.mean(axis=0)
    w, v = np.linalg.eigh(np.cov((pts - c).T))
    return c, v[:, ::-1]


def _sym_nn_distance(a, b, tree_a, tree_b):
    return 0.5 * (tree_b.query(a)[0].mean() + tree_a.query(b)[0].mean())


def _initial_rotations(src, dst):
    cs, es = _principal_axes(src)
    cd, ed = _principal_axes(dst)
    yield np.eye(3)
    for sx, sy in itertools.product((1, -1), repeat=2):
        flip = np.diag([sx, sy, sx * sy])
        r = ed @ flip @ es.T
        if np.linalg.det(r) < 0:
            r = ed @ np.diag([sx, sy, -sx * sy]) @ es.T
        yield r


def _point_to_plane_step(src, dst, normals):
    # linearised: minimise sum(((I + [w]x) s + t - d) . n)^2
    a = np.hstack([np.cross(src, normals), normals])
    b = np.einsum("ij,ij->i", dst - src, normals)
    x, *_ = np.linalg.lstsq(a, b, rcond=None)
    return x[:3], x[3:]


def _rotation(w):
    theta = np.linalg.norm(w)
    if theta == 0:
        return np.eye(3)
    k = w / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * kx @ kx


def _plane_rms(src0, rot, trans, dst, normals, tree):
    moved = src0 @ rot.T + trans
    _, nn = tree.query(moved)
    return float(np.sqrt(np.mean(np.einsum("ij,ij->i", moved - dst[nn], normals[nn]) ** 2)))


def rigid_align_to_template(subject: SurfaceMesh, template: SurfaceMesh, max_iter: int = 100,
                            tol: float = 1e-6, max_increases: int = 5) -> RigidTransform:
    """Rigid transform taking ``subject`` onto ``template`` (no scaling)."""
    if subject.is_empty() or template.is_empty():
        raise InvalidArgument("rigid alignment needs two nonempty meshes")
    src0 = subject.vertices
    dst = template.vertices
    normals = template.vertex_normals()
    tree_dst = cKDTree(dst)
    cs = src0.mean(axis=0)
    cd = dst.mean(axis=0)

    best = None
    for r0 in _initial_rotations(src0, dst):
        moved = (src0 - cs) @ r0.T + cd
        score = _sym_nn_distance(moved, dst, cKDTree(moved), tree_dst)
        if best is None or score < best[0] - 1e-12:
            best = (score, r0)
    rot = best[1]
    trans = cd - rot @ cs  # x -> rot x + trans

    prev_rms = _plane_rms(src0, rot, trans, dst, normals, tree_dst)
    increases = 0
    for _ in range(max_iter):
        moved = src0 @ rot.T + trans
        _, nn = tree_dst.query(moved)
        w, t = _point_to_plane_step(moved, dst[nn], normals[nn])
        # backtrack: on near-symmetric shapes a full linearised step can overshoot
        for _ in range(8):
            r = _rotation(w)
            rms = _plane_rms(src0, r @ rot, r @ trans + t, dst, normals, tree_dst)
            if rms <= prev_rms:
                break
            w, t = w / 2, t / 2
        if not np.isfinite(rms):
            raise AlignmentFailure("ICP produced a non-finite residual")
        if rms > prev_rms + 1e-12:
            increases += 1
            if increases >= max_increases:
                raise AlignmentFailure("ICP diverged (RMS rose for 5 consecutive iterations)")
        else:
            increases = 0
        rot = r @ rot
        trans = r @ trans + t
        if abs(prev_rms - rms) < tol:
            break
        prev_rms = rms
    # re-orthonormalise accumulated rotation
    u, _, vt = np.linalg.svd(rot)
    rot = u @ vt
    return RigidTransform.from_matrix(rot, trans, np.zeros(3))


def apply_rigid(mesh: SurfaceMesh, transform: RigidTransform) -> SurfaceMesh:
    return mesh.with_vertices(transform.apply_rows(mesh.vertices))
