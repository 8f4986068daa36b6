"""Point-to-point correspondence between template and subject tooth meshes."""

from __future__ import annotations

import numpy as np

from ..errors import DataError
from ..register.transforms import RigidTransform
from .cpd import CpdConfig, cpd_nonrigid
from .icp import apply_rigid, rigid_align_to_template
from .mesh import SurfaceMesh, extract_surface, project_to_surface
from .pca import CorrespondedShapeSet


def _subsample(n, limit):
    if n <= limit:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, limit).round().astype(int))


def establish_correspondence(template: SurfaceMesh, subject: SurfaceMesh,
                             cfg: CpdConfig | None = None) -> SurfaceMesh:
    """Subject surface resampled with the template's vertices and triangles.

    The subject must already be rigidly aligned to the template.
    """
    cfg = cfg or CpdConfig()
    ti = _subsample(template.n_vertices, cfg.max_points)
    si = _subsample(subject.n_vertices, cfg.max_points)
    res = cpd_nonrigid(template.vertices[ti], subject.vertices[si], cfg, track_objective=False)
    moved = res.moved if len(ti) == template.n_vertices else res.displace(template.vertices)
    projected, _ = project_to_surface(moved, subject)
    return SurfaceMesh(projected, template.triangles, template.labels)


def tooth_meshes(labels, teeth=None) -> dict[int, SurfaceMesh]:
    teeth = labels.labels() if teeth is None else teeth
    return {int(t): extract_surface(labels, label=int(t)) for t in teeth}


def merge_meshes(meshes: dict[int, SurfaceMesh], order) -> SurfaceMesh:
    verts, tris, labs = [], [], []
    offset = 0
    for t in order:
        m = meshes[t]
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        labs.append(np.full(m.n_vertices, t))
        offset += m.n_vertices
    return SurfaceMesh(np.concatenate(verts), np.concatenate(tris), np.concatenate(labs))


def dentition_correspondence(template: dict[int, SurfaceMesh], subject: dict[int, SurfaceMesh],
                             cfg: CpdConfig | None = None) -> tuple[SurfaceMesh, RigidTransform]:
    """Rigidly align the whole dentition, then run CPD tooth by tooth (FDI order)."""
    order = sorted(template)
    missing = [t for t in order if t not in subject or subject[t].is_empty()]
    if missing:
        raise DataError(f"subject is missing teeth {missing}")
    tmpl = merge_meshes(template, order)
    subj = merge_meshes(subject, order)
    rigid = rigid_align_to_template(subj, tmpl)
    aligned = {t: apply_rigid(subject[t], rigid) for t in order}
    parts = {t: establish_correspondence(template[t], aligned[t], cfg) for t in order}
    return merge_meshes(parts, order), rigid


def tooth_correspondence(template: SurfaceMesh, subject: SurfaceMesh,
                         cfg: CpdConfig | None = None) -> SurfaceMesh:
    """Per-tooth model input: rigid alignment of the single tooth, then CPD."""
    rigid = rigid_align_to_template(subject, template)
    return establish_correspondence(template, apply_rigid(subject, rigid), cfg)


def shape_set(meshes, ids=None) -> CorrespondedShapeSet:
    meshes = list(meshes)
    return CorrespondedShapeSet(meshes[0].triangles, np.stack([m.vertices for m in meshes]),
                                tuple(ids) if ids is not None else ())
