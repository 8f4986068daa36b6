"""Surfaces, rigid alignment, CPD correspondence and PCA shape models."""

from .correspond import (
    dentition_correspondence,
    establish_correspondence,
    merge_meshes,
    shape_set,
    tooth_correspondence,
    tooth_meshes,
)
from .cpd import CpdConfig, CpdResult, cpd_nonrigid
from .icp import apply_rigid, rigid_align_to_template
from .mesh import SurfaceMesh, extract_surface, project_to_surface, symmetric_surface_distance
from .pca import CorrespondedShapeSet, ShapeModel, explained_variance_report, pca_fit, pca_synthesize

__all__ = [
    "CorrespondedShapeSet",
    "CpdConfig",
    "CpdResult",
    "ShapeModel",
    "SurfaceMesh",
    "apply_rigid",
    "cpd_nonrigid",
    "dentition_correspondence",
    "establish_correspondence",
    "explained_variance_report",
    "extract_surface",
    "merge_meshes",
    "pca_fit",
    "pca_synthesize",
    "project_to_surface",
    "rigid_align_to_template",
    "shape_set",
    "symmetric_surface_distance",
    "tooth_correspondence",
    "tooth_meshes",
]
