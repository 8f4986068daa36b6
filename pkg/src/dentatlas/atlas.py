"""Groupwise template construction and atlas-based tooth labelling.

The builder alternates pairwise registration of every subject to the current
template, averaging of the warped subjects, and a shape update that pulls the
template along the inverse of the mean transform.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import AveragingFailure, DentAtlasError, InvalidArgument, RegistrationFailure
from .register.fields import DiffeoPair, DisplacementField, map_points, sample_physical
from .register.linear import register_linear
from .register.schedule import ChannelPair, RegistrationSchedule
from .register.syn import register_syn
from .register.transforms import AffineTransform
from .volgrid import (
    Geometry,
    LabelGrid,
    VolumeGrid,
    dice_coefficient,
    require_same_geometry,
    resample_to_geometry,
    union_geometry,
)

log = logging.getLogger(__name__)

# guidance-template level above which a voxel counts as tooth for field statistics
FOREGROUND_LEVEL = 0.25


@dataclass(frozen=True, eq=False)
class TemplatePair:
    intensity_template: VolumeGrid
    guidance_template: VolumeGrid
    generation: int = 0

    def __post_init__(self):
        require_same_geometry(self.intensity_template, self.guidance_template, "template channels")
        if self.generation < 0:
            raise InvalidArgument("template generation must be non-negative")

    @property
    def geometry(self) -> Geometry:
        return self.intensity_template.geometry

    def channels(self, weights=(0.5, 0.5)) -> ChannelPair:
        return ChannelPair(self.intensity_template, self.guidance_template, weights)

    def foreground(self) -> np.ndarray:
        return np.asarray(self.guidance_template.data) > FOREGROUND_LEVEL


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    mean_metric: float
    mean_field_norm: float  # voxels, over the template foreground
    template_change: float  # max abs voxel change of the intensity template


@dataclass
class AtlasRun:
    cohort: list
    schedule: RegistrationSchedule = field(default_factory=RegistrationSchedule)
    outer_iterations: int = 10
    shape_update_step: float = 0.25
    weights: tuple = (0.5, 0.5)
    working_spacing: float | None = None
    labels: list | None = None  # optional per-subject LabelGrids for the hard atlas labels
    workers: int = 1
    records: list = field(default_factory=list)

    def __post_init__(self):
        self.cohort = list(self.cohort)
        if len(self.cohort) < 2:
            raise InvalidArgument(f"atlas construction needs a cohort of at least 2, got {len(self.cohort)}")
        if self.outer_iterations < 1:
            raise InvalidArgument("outer_iterations must be at least 1")
        if not 0 < self.shape_update_step <= 1:
            raise InvalidArgument("shape_update_step must lie in (0, 1]")
        if self.labels is not None and len(self.labels) != len(self.cohort):
            raise InvalidArgument("one label grid per cohort subject is required")
        if self.workers < 1:
            raise InvalidArgument("workers must be at least 1")


@dataclass
class AtlasResult:
    templates: TemplatePair
    pairs: list  # DiffeoPair per subject, on the template grid
    affines: list  # AffineTransform per subject (template -> subject points)
    metrics: list
    trace: list  # IterationRecord per outer iteration
    labels: LabelGrid | None = None

    def mean_final_field(self) -> DisplacementField:
        return average_displacement_fields([p.forward for p in self.pairs])

    def unbiasedness(self) -> float:
        """Mean foreground norm (voxels) of the average final subject field."""
        return _mean_norm_voxels(self.mean_final_field(), self.templates.foreground())


@dataclass
class LabelTransferResult:
    true_labels: list  # subject tooth ids (ground truth, hidden from the assignment)
    assigned: dict  # true label -> assigned atlas label (0 = unassigned)
    best_dsc: dict
    success: dict

    @property
    def n_teeth(self) -> int:
        return len(self.true_labels)

    @property
    def n_success(self) -> int:
        return sum(bool(v) for v in self.success.values())

    @property
    def success_rate(self) -> float:
        return self.n_success / self.n_teeth if self.n_teeth else 0.0


def common_geometry(cohort, spacing=None) -> Geometry:
    geoms = [c.geometry for c in cohort]
    if spacing is None:
        spacing = min(min(g.spacing) for g in geoms)
    return union_geometry(geoms, spacing)


def resample_cohort(cohort, geom: Geometry) -> list:
    return [ChannelPair(resample_to_geometry(c.intensity, geom), resample_to_geometry(c.guidance, geom),
                        c.weights) for c in cohort]


def initialize_templates(cohort) -> TemplatePair:
    """Voxelwise mean of every channel over a cohort sharing one grid."""
    cohort = list(cohort)
    if not cohort:
        raise InvalidArgument("cannot initialise templates from an empty cohort")
    geom = cohort[0].geometry
    for c in cohort[1:]:
        require_same_geometry(c.geometry, geom, "cohort grids")
    inten = np.mean([np.asarray(c.intensity.data, dtype=np.float64) for c in cohort], axis=0)
    guide = np.mean([np.asarray(c.guidance.data, dtype=np.float64) for c in cohort], axis=0)
    return TemplatePair(VolumeGrid(geom, inten), VolumeGrid(geom, guide), 0)


def average_affine_transforms(ts) -> AffineTransform:
    """Log-Euclidean mean of the linear parts, arithmetic mean of translations."""
    ts = [t.to_affine() for t in ts]
    if not ts:
        raise InvalidArgument("cannot average an empty list of transforms")
    center = ts[0].center
    ts = [t.recentered(center) for t in ts]
    logs = []
    for t in ts:
        lg = linalg.logm(t.linear)
        if not np.all(np.isfinite(lg)) or np.abs(lg.imag).max() > 1e-8:
            raise AveragingFailure("matrix logarithm undefined for an affine part")
        logs.append(lg.real)
    linear = linalg.expm(np.mean(logs, axis=0))
    translation = np.mean([t.translation for t in ts], axis=0)
    return AffineTransform(linear, translation, center)


def average_displacement_fields(fs) -> DisplacementField:
    fs = list(fs)
    if not fs:
        raise InvalidArgument("cannot average an empty list of fields")
    geom = fs[0].geometry
    acc = np.zeros_like(fs[0].vectors, dtype=np.float64)
    for f in fs:
        require_same_geometry(f.geometry, geom, "fields")
        acc += f.vectors
    return DisplacementField(geom, acc / len(fs))


def _update_chain(mean_affine: AffineTransform, mean_field: DisplacementField, step: float):
    return [mean_affine.inverse(), mean_field.scaled(-step)]


def apply_shape_update(t: TemplatePair, mean_affine: AffineTransform, mean_field: DisplacementField,
                       step: float) -> TemplatePair:
    """``T'(x) = T(A^-1(x - step * u(x)))`` for both channels; generation + 1."""
    if not 0 < step <= 1:
        raise InvalidArgument("shape update step must lie in (0, 1]")
    geom = t.geometry
    require_same_geometry(mean_field.geometry, geom, "mean field and template")
    pts = map_points(geom, _update_chain(mean_affine, mean_field, step))
    data = sample_physical(np.stack([t.intensity_template.data, t.guidance_template.data]).astype(np.float64),
                           geom, pts, clamp=True)
    return TemplatePair(VolumeGrid(geom, data[0]), VolumeGrid(geom, data[1]), t.generation + 1)


def _mean_norm_voxels(f: DisplacementField, mask) -> float:
    n = f.norm_voxels()
    return float(n[mask].mean()) if mask.any() else float(n.mean())


def _register_subject(args):
    index, fixed, moving, schedule, init = args
    try:
        if init is None:
            init = register_linear(fixed, moving, "rigid", schedule)
        affine = register_linear(fixed, moving, "affine", schedule, init=init).to_affine()
        syn = register_syn(fixed, moving, init=affine, schedule=schedule)
    except RegistrationFailure as exc:
        raise RegistrationFailure(str(exc), subject=index) from None
    except DentAtlasError as exc:
        raise RegistrationFailure(f"{type(exc).__name__}: {exc}", subject=index) from None
    return affine, syn.pair, syn.metric


def _map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def _warp_subject(pair: ChannelPair, geom, affine, forward):
    pts = map_points(geom, [affine, forward])
    data = np.stack([pair.intensity.data, pair.guidance.data]).astype(np.float64)
    return sample_physical(data, pair.geometry, pts)


def majority_labels(label_grids, geom: Geometry, transforms) -> LabelGrid:
    """Per-voxel majority vote of nearest-neighbour warped label maps (ties -> smaller id)."""
    warped = [sample_physical(l.data, l.geometry, map_points(geom, t), order=0).astype(np.int64)
              for l, t in zip(label_grids, transforms)]
    ids = sorted({int(v) for w in warped for v in np.unique(w)})
    counts = np.zeros((len(ids),) + geom.dims, dtype=np.int32)
    for w in warped:
        for k, lab in enumerate(ids):
            counts[k] += w == lab
    out = np.asarray(ids, dtype=np.uint16)[np.argmax(counts, axis=0)]
    return LabelGrid(geom, out)


def build_atlas(run: AtlasRun, progress=None) -> AtlasResult:
    """Iterated register / average / shape-update template construction."""
    geom = common_geometry(run.cohort, run.working_spacing)
    cohort = [c.with_weights(run.weights) for c in resample_cohort(run.cohort, geom)]
    templates = initialize_templates(cohort)
    n = len(cohort)
    inits = [None] * n
    run.records = []
    last = None
    for it in range(1, run.outer_iterations + 1):
        fixed = templates.channels(run.weights)
        jobs = [(i, fixed, cohort[i], run.schedule, inits[i]) for i in range(n)]
        results = _map(_register_subject, jobs, run.workers)
        affines = [r[0] for r in results]
        pairs = [r[1] for r in results]
        metrics = [float(r[2]) for r in results]
        # step 3: average the warped subjects (fixed subject order)
        acc = np.zeros((2,) + geom.dims)
        for c, a, p in zip(cohort, affines, pairs):
            acc += _warp_subject(c, geom, a, p.forward)
        acc /= n
        averaged = TemplatePair(VolumeGrid(geom, acc[0]), VolumeGrid(geom, acc[1]), templates.generation)
        # step 4: shape update
        mean_affine = average_affine_transforms(affines)
        mean_field = average_displacement_fields([p.forward for p in pairs])
        updated = apply_shape_update(averaged, mean_affine, mean_field, run.shape_update_step)
        change = float(np.abs(np.asarray(updated.intensity_template.data, dtype=np.float64)
                              - np.asarray(templates.intensity_template.data, dtype=np.float64)).max())
        rec = IterationRecord(it, float(np.mean(metrics)), _mean_norm_voxels(mean_field, _foreground(fixed)),
                              change)
        run.records.append(rec)
        log.info("atlas iteration %d: metric %.5f, mean field %.4f voxel", it, rec.mean_metric,
                 rec.mean_field_norm)
        if progress is not None:
            progress(rec)
        last = (affines, pairs, metrics, mean_affine, mean_field)
        templates = updated
        inits = affines

    affines, pairs, metrics, mean_affine, mean_field = last
    labels = None
    if run.labels is not None:
        # vote in the frame of the last registrations, then follow the same shape update
        voted = majority_labels(run.labels, geom, [[a, p.forward] for a, p in zip(affines, pairs)])
        pts = map_points(geom, _update_chain(mean_affine, mean_field, run.shape_update_step))
        labels = LabelGrid(geom, sample_physical(voted.data, geom, pts, order=0, clamp=True))
    return AtlasResult(templates, pairs, affines, metrics, list(run.records), labels)


def _foreground(pair: ChannelPair) -> np.ndarray:
    return np.asarray(pair.guidance.data) > FOREGROUND_LEVEL


def _components(labels: LabelGrid):
    ids = [int(v) for v in np.unique(labels.data) if v != 0]
    return {i: labels.data == i for i in ids}


def atlas_label_transfer(atlas_labels: LabelGrid, atlas_channels: ChannelPair, subject_labels: LabelGrid,
                         subject_channels: ChannelPair, schedule: RegistrationSchedule | None = None,
                         known_truth: bool = True) -> LabelTransferResult:
    """Label every subject tooth with the warped atlas tooth of largest Dice.

    Subject teeth are the voxel sets of the distinct ids in ``subject_labels``;
    the ids themselves are used only to score success.
    """
    schedule = schedule or RegistrationSchedule()
    require_same_geometry(atlas_labels, atlas_channels.geometry, "atlas labels and channels")
    require_same_geometry(subject_labels, subject_channels.geometry, "subject labels and channels")
    fixed = subject_channels
    moving = atlas_channels.with_weights(subject_channels.weights)
    rigid = register_linear(fixed, moving, "rigid", schedule)
    affine = register_linear(fixed, moving, "affine", schedule, init=rigid)
    syn = register_syn(fixed, moving, init=affine, schedule=schedule)
    geom = subject_labels.geometry
    pts = map_points(geom, [affine, syn.pair.forward])
    warped = sample_physical(atlas_labels.data, atlas_labels.geometry, pts, order=0).astype(np.int64)
    return assign_by_dice(warped, subject_labels, known_truth)


def assign_by_dice(warped_atlas: np.ndarray, subject_labels: LabelGrid, known_truth: bool = True):
    atlas_ids = [int(v) for v in np.unique(warped_atlas) if v != 0]
    atlas_masks = {a: warped_atlas == a for a in atlas_ids}
    comps = _components(subject_labels)
    assigned, best, success = {}, {}, {}
    for true_id, comp in comps.items():
        label, score = 0, 0.0
        for a in atlas_ids:
            d = dice_coefficient(comp, atlas_masks[a])
            if d > score:
                label, score = a, d
        assigned[true_id] = label
        best[true_id] = score
        success[true_id] = bool(known_truth and label != 0 and label == true_id)
    return LabelTransferResult(sorted(comps), assigned, best, success)


def labeling_success_rate(results) -> float:
    results = list(results)
    if not results:
        raise InvalidArgument("no labelling results to summarise")
    total = sum(r.n_teeth for r in results)
    return sum(r.n_success for r in results) / total if total else 0.0


def default_workers() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)
