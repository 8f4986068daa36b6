"""Phantom experiments with known ground truth.

Each function returns a plain dict so the CLI can dump it as JSON and the
acceptance tests can assert on it.
"""

from __future__ import annotations

import time

import numpy as np

from . import phantom
from .atlas import AtlasRun, atlas_label_transfer, build_atlas, labeling_success_rate
from .register.fields import map_points, sample_physical
from .register.linear import register_linear
from .register.schedule import ChannelPair, RegistrationSchedule
from .register.syn import register_syn
from .shape.mesh import extract_surface, symmetric_surface_distance
from .volgrid import EnhancementConfig, LabelGrid, VolumeGrid, enhance, reassign_label_intensities


def enhanced_channels(volume, labels, config: EnhancementConfig | None = None, weights=(0.5, 0.5)):
    e = enhance(volume, labels, config)
    return ChannelPair(e.intensity, e.guidance, weights), e.labels


def surface_distance_to_template(labels: LabelGrid, template: phantom.PhantomTemplate) -> float:
    """Mean over teeth of the symmetric surface distance (mm) to the hidden template."""
    d = []
    for t, ref in sorted(template.meshes.items()):
        m = extract_surface(labels, label=t)
        d.append(symmetric_surface_distance(m, ref) if not m.is_empty() else np.inf)
    return float(np.mean(d))


def unbiased_atlas_experiment(seed: int = 0, n: int = 8, dims: int = 96, spacing: float = 0.4,
                              amplitude: float = 2.0, outer_iterations: int = 5, workers: int = 1,
                              schedule: RegistrationSchedule | None = None, progress=None) -> dict:
    t0 = time.perf_counter()
    tmpl = phantom.generate_template(seed, dims, spacing)
    subjects = phantom.cohort(tmpl, n, amplitude_voxels=amplitude)
    t_gen = time.perf_counter() - t0
    chans, labs = zip(*(enhanced_channels(s.intensity, s.labels) for s in subjects))
    run = AtlasRun(list(chans), schedule or RegistrationSchedule(), outer_iterations=outer_iterations,
                   labels=list(labs), workers=workers)
    t1 = time.perf_counter()
    res = build_atlas(run, progress=progress)
    t_build = time.perf_counter() - t1
    atlas_d = surface_distance_to_template(res.labels, tmpl)
    subject_d = [surface_distance_to_template(s.labels, tmpl) for s in subjects]
    gen_mean = np.mean([s.forward_field.vectors for s in subjects], axis=0)
    fg = np.asarray(tmpl.labels.data) > 0
    gen_norm = float(np.sqrt(((gen_mean / spacing) ** 2).sum(axis=0))[fg].mean())
    return {
        "atlas_surface_distance_mm": atlas_d,
        "subject_surface_distance_mm": subject_d,
        "mean_final_field_norm_voxels": res.unbiasedness(),
        "generative_mean_field_norm_voxels": gen_norm,
        "trace": [r.__dict__ for r in res.trace],
        "atlas_labels": sorted(res.labels.labels()),
        "generation_seconds": t_gen,
        "build_seconds": t_build,
        "seconds": time.perf_counter() - t0,
        "_result": res,
    }


def _binary_guidance(labels: LabelGrid) -> VolumeGrid:
    return VolumeGrid(labels.geometry, (np.asarray(labels.data) > 0).astype(np.float32))


def labeling_experiment(seed: int = 0, n: int = 16, dims: int = 64, spacing: float = 0.6,
                        amplitude: float = 2.0, noise: float = 0.1,
                        schedule: RegistrationSchedule | None = None) -> dict:
    """Guided (two-channel) versus intensity-only atlas labelling on one cohort.

    The hidden template plays the atlas. Subject tooth identities are hidden:
    the subject guidance channel is the binary tooth mask.
    """
    schedule = schedule or RegistrationSchedule()
    tmpl = phantom.generate_template(seed, dims, spacing)
    subjects = phantom.cohort(tmpl, n, seeds=[5000 + 31 * k for k in range(n // 2)],
                              amplitude_voxels=amplitude, noise_sigma=noise)
    atlas_ch = ChannelPair(tmpl.intensity, reassign_label_intensities(tmpl.labels))
    arms = {"guided": (0.5, 0.5), "intensity_only": (1.0, 0.0)}
    out = {}
    for name, w in arms.items():
        results = []
        for s in subjects:
            subj = ChannelPair(s.intensity, _binary_guidance(s.labels), w)
            results.append(atlas_label_transfer(tmpl.labels, atlas_ch, s.labels, subj, schedule))
        out[name] = {
            "success_rate": labeling_success_rate(results),
            "per_subject": [r.success_rate for r in results],
            "mean_dsc": float(np.mean([np.mean(list(r.best_dsc.values())) for r in results])),
        }
    return out


def linear_recovery_experiment(seed: int = 0, dims: int = 64, spacing: float = 0.6,
                               translation=(2.4, -1.2, 0.8), angle_deg: float = 5.0,
                               axis=(0.0, 0.0, 1.0)) -> dict:
    """Known rigid motion applied to a phantom; recover it with rigid registration."""
    from .register.transforms import RigidTransform

    tmpl = phantom.generate_template(seed, dims, spacing)
    fixed = ChannelPair(tmpl.intensity, reassign_label_intensities(tmpl.labels))
    center = fixed.foreground_centroid()
    axis = np.asarray(axis, dtype=float) / np.linalg.norm(axis)
    truth = RigidTransform.from_rotvec(np.deg2rad(angle_deg) * axis, translation, center)
    # moving(x) = fixed(truth^-1 x): moving content is fixed content moved by ``truth``
    inv = truth.inverse()
    geom = tmpl.geometry
    moving = ChannelPair(VolumeGrid(geom, sample_physical(fixed.intensity.data, geom, map_points(geom, inv))),
                         VolumeGrid(geom, sample_physical(fixed.guidance.data, geom, map_points(geom, inv))))
    t0 = time.perf_counter()
    est = register_linear(fixed, moving, "rigid")
    seconds = time.perf_counter() - t0
    # est maps fixed points to moving points, so it should equal ``truth``
    err = est.compose(truth.inverse())
    grid = geom.physical_grid()[:, ::4, ::4, ::4].reshape(3, -1)
    fg = (np.asarray(fixed.guidance.data) > 0)[::4, ::4, ::4].reshape(-1)
    disp = est.apply(grid[:, fg]) - truth.apply(grid[:, fg])
    return {
        "translation_error_voxels": float(np.linalg.norm(est.translation - truth.translation) / spacing),
        "foreground_point_error_voxels": float(np.sqrt((disp ** 2).sum(axis=0)).max() / spacing),
        "rotation_error_deg": float(np.rad2deg(err.angle)),
        "seconds": seconds,
    }


def syn_recovery_experiment(seed: int = 0, dims: int = 64, spacing: float = 0.6, amplitude: float = 2.0,
                            subject_seed: int = 7) -> dict:
    """Register a phantom subject back to its template and compare with the true field."""
    from .register.fields import min_interior_jacobian, roundtrip_residual

    tmpl = phantom.generate_template(seed, dims, spacing)
    s = phantom.synthesize_subject(tmpl, subject_seed, amplitude)
    fixed = ChannelPair(tmpl.intensity, reassign_label_intensities(tmpl.labels))
    moving = ChannelPair(s.intensity, reassign_label_intensities(s.labels))
    t0 = time.perf_counter()
    res = register_syn(fixed, moving)
    seconds = time.perf_counter() - t0
    fg = np.asarray(tmpl.labels.data) > 0
    err = np.sqrt(((res.pair.forward.vectors - s.forward_field.vectors) ** 2).sum(axis=0)) / spacing
    return {
        "endpoint_error_voxels": float(err[fg].mean()),
        "true_field_norm_voxels": float(s.forward_field.norm_voxels()[fg].mean()),
        "min_jacobian": min_interior_jacobian(res.pair.forward),
        "roundtrip_residual_voxels": roundtrip_residual(res.pair),
        "seconds": seconds,
        "_result": res,
    }
