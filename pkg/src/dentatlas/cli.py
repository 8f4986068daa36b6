"""Command-line entry point.

Exit status: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 1 anything else (including failed ``eval`` assertions).
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, io, phantom
from .config import PipelineConfig, default_config, load_config
from .errors import ConfigError, DataError, DentAtlasError, InvalidArgument

log = logging.getLogger("dentatlas")


# ---- helpers ---------------------------------------------------------------

def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else default_config()
    if getattr(args, "workers", None):
        from dataclasses import replace

        cfg = replace(cfg, workers=args.workers)
    return cfg


def _versions():
    import scipy
    import skimage

    from .kernels import BACKEND

    return {"dentatlas": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "scikit-image": skimage.__version__, "python": platform.python_version(),
            "kernel_backend": BACKEND}


def _provenance(out_dir, command, cfg: PipelineConfig, args, seeds=None, inputs=None):
    """Config hash, seeds and library versions; no timestamps so reruns are byte-identical."""
    skip = {"func", "config", "verbose"}
    arguments = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
                 if k not in skip}
    io.write_json(Path(out_dir) / "provenance.json", {
        "command": command,
        "arguments": arguments,
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "seeds": seeds if seeds is not None else [],
        "inputs": inputs or [],
        "versions": _versions(),
    })


def _load_manifest(path):
    path = Path(path)
    data = io.read_json(path)
    if isinstance(data, dict):
        data = data.get("subjects")
    if not isinstance(data, list):
        raise DataError(f"{path}: manifest must be a JSON list of subjects (or {{'subjects': [...]}})")
    subjects = []
    for k, item in enumerate(data):
        if not isinstance(item, dict) or "volume" not in item or "labels" not in item:
            raise DataError(f"{path}: manifest entry {k} needs 'volume' and 'labels' paths")
        subjects.append({"id": str(item.get("id", f"subject{k:03d}")),
                         "volume": io.resolve(path.parent, item["volume"]),
                         "labels": io.resolve(path.parent, item["labels"])})
    return subjects


def _enhanced_pair(volume_path, labels_path, cfg: PipelineConfig, weights=None):
    from .register.schedule import ChannelPair
    from .volgrid import enhance

    vol = io.read_volume(volume_path)
    lab = io.read_labels(labels_path)
    e = enhance(vol, lab, cfg.enhancement)
    return ChannelPair(e.intensity, e.guidance, weights or cfg.atlas.channel_weights), e


# ---- subcommands -------------------------------------------------------------

def cmd_config_init(args):
    text = default_config().to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_enhance(args):
    cfg = _config(args)
    vol = io.read_volume(args.volume)
    lab = io.read_labels(args.labels)
    from .volgrid import enhance

    e = enhance(vol, lab, cfg.enhancement)
    out = Path(args.out)
    io.write_volume(out / "intensity.mhd", e.intensity)
    io.write_volume(out / "guidance.mhd", e.guidance)
    io.write_labels(out / "labels.mhd", e.labels)
    io.write_labels(out / "mask.mhd", e.mask)
    io.write_json(out / "crop.json", {"box_lo": list(e.box.lo), "box_hi": list(e.box.hi),
                                      "margin_voxels": cfg.enhancement.margin_voxels,
                                      "dims": list(e.labels.geometry.dims),
                                      "origin": list(e.labels.geometry.origin)})
    _provenance(out, "enhance", cfg, args)
    print(f"enhanced volume {e.labels.geometry.dims} written to {out}")
    return 0


def cmd_register(args):
    from .register import ChannelPair, register_linear, register_syn, warp_volume
    from .register.fields import min_interior_jacobian, roundtrip_residual

    cfg = _config(args)
    w = (1.0, 0.0) if args.intensity_only else cfg.atlas.channel_weights
    fixed = ChannelPair(io.read_volume(args.fixed[0]), io.read_volume(args.fixed[1]), w)
    moving = ChannelPair(io.read_volume(args.moving[0]), io.read_volume(args.moving[1]), w)
    sched = cfg.registration
    out = Path(args.out)
    rigid = register_linear(fixed, moving, "rigid", sched)
    t = rigid
    if args.mode in ("affine", "syn"):
        t = register_linear(fixed, moving, "affine", sched, init=rigid)
    io.write_transform(out / "linear.json", t)
    chain = [t]
    report = {"mode": args.mode, "transform": t.to_dict()}
    if args.mode == "syn":
        res = register_syn(fixed, moving, init=t, schedule=sched)
        io.write_field(out / "forward.mhd", res.pair.forward)
        io.write_field(out / "inverse.mhd", res.pair.inverse)
        chain = [t, res.pair.forward]
        report.update(metric=res.metric, min_jacobian=min_interior_jacobian(res.pair.forward),
                      roundtrip_residual_voxels=roundtrip_residual(res.pair))
    io.write_volume(out / "warped_intensity.mhd", warp_volume(moving.intensity, chain, fixed.geometry))
    io.write_json(out / "report.json", report)
    _provenance(out, "register", cfg, args)
    print(json.dumps({k: v for k, v in report.items() if k != "transform"}, sort_keys=True))
    return 0


def cmd_atlas_build(args):
    from .atlas import AtlasRun, build_atlas

    cfg = _config(args)
    subjects = _load_manifest(args.manifest)
    if len(subjects) < 2:
        raise InvalidArgument(f"atlas build needs a cohort of at least 2 subjects, manifest lists {len(subjects)}")
    pairs, labels = [], []
    for s in subjects:
        pair, e = _enhanced_pair(s["volume"], s["labels"], cfg)
        pairs.append(pair)
        labels.append(e.labels)
    iterations = args.iterations or cfg.atlas.outer_iterations
    run = AtlasRun(pairs, cfg.registration, outer_iterations=iterations,
                   shape_update_step=cfg.atlas.shape_update_step, weights=cfg.atlas.channel_weights,
                   working_spacing=cfg.working_spacing, labels=labels, workers=cfg.effective_workers())
    res = build_atlas(run, progress=lambda r: log.info(
        "iteration %d: mean metric %.5f, mean field %.4f voxel", r.iteration, r.mean_metric, r.mean_field_norm))
    out = Path(args.out)
    io.write_volume(out / "intensity_template.mhd", res.templates.intensity_template)
    io.write_volume(out / "guidance_template.mhd", res.templates.guidance_template)
    io.write_labels(out / "atlas_labels.mhd", res.labels)
    for s, a, p in zip(subjects, res.affines, res.pairs):
        io.write_transform(out / "transforms" / f"{s['id']}_affine.json", a)
        io.write_field(out / "transforms" / f"{s['id']}_forward.mhd", p.forward)
        io.write_field(out / "transforms" / f"{s['id']}_inverse.mhd", p.inverse)
    io.write_trace(out / "trace.csv", res.trace)
    io.write_json(out / "summary.json", {
        "subjects": [s["id"] for s in subjects],
        "iterations": iterations,
        "generation": res.templates.generation,
        "mean_final_field_norm_voxels": res.unbiasedness(),
        "final_metrics": res.metrics,
        "atlas_labels": res.labels.labels(),
    })
    _provenance(out, "atlas build", cfg, args, inputs=[str(s["volume"]) for s in subjects])
    print(f"atlas ({res.templates.geometry.dims}) written to {out}")
    return 0


def cmd_label(args):
    from .atlas import atlas_label_transfer
    from .register.schedule import ChannelPair
    from .volgrid import VolumeGrid

    cfg = _config(args)
    atlas_dir = Path(args.atlas)
    w = (1.0, 0.0) if args.intensity_only else cfg.atlas.channel_weights
    atlas_ch = ChannelPair(io.read_volume(atlas_dir / "intensity_template.mhd"),
                           io.read_volume(atlas_dir / "guidance_template.mhd"), w)
    atlas_labels = io.read_labels(atlas_dir / "atlas_labels.mhd")
    vol = io.read_volume(args.volume)
    lab = io.read_labels(args.labels)
    # identities stay hidden from the registration: the guidance channel is the tooth mask
    subj = ChannelPair(vol, VolumeGrid(lab.geometry, (np.asarray(lab.data) > 0).astype(np.float32)), w)
    res = atlas_label_transfer(atlas_labels, atlas_ch, lab, subj, cfg.registration,
                               known_truth=not args.no_truth)
    report = {
        "teeth": res.true_labels,
        "assigned": {str(k): v for k, v in res.assigned.items()},
        "best_dsc": {str(k): v for k, v in res.best_dsc.items()},
        "success": {str(k): v for k, v in res.success.items()},
        "success_rate": res.success_rate,
    }
    out = Path(args.out)
    io.write_json(out / "labeling.json", report)
    _provenance(out, "label", cfg, args)
    print(f"labelling success rate {res.success_rate:.4f} ({res.n_success}/{res.n_teeth})")
    return 0


def cmd_mesh(args):
    from .shape.mesh import extract_surface

    cfg = _config(args)
    grid = io.read_image(args.input)
    out = Path(args.out)
    if args.label is not None:
        teeth = [args.label]
    elif hasattr(grid, "labels"):
        teeth = grid.labels()
    else:
        teeth = [None]
    for t in teeth:
        m = extract_surface(grid, iso=args.iso, label=t)
        io.write_ply(out / (f"tooth_{t}.ply" if t is not None else "surface.ply"), m)
    _provenance(out, "mesh", cfg, args)
    print(f"{len(teeth)} mesh(es) written to {out}")
    return 0


def cmd_correspond(args):
    from .shape.correspond import dentition_correspondence, shape_set, tooth_correspondence, tooth_meshes

    cfg = _config(args)
    template_labels = io.read_labels(args.template)
    subjects = _load_manifest(args.manifest)
    out = Path(args.out)
    if args.tooth is not None:
        tmpl = tooth_meshes(template_labels, [args.tooth])[args.tooth]
    else:
        tmpl_teeth = tooth_meshes(template_labels)
    shapes, ids = [], []
    for s in subjects:
        lab = io.read_labels(s["labels"])
        if args.tooth is not None:
            subj = tooth_meshes(lab, [args.tooth])[args.tooth]
            mesh = tooth_correspondence(tmpl, subj, cfg.shape.cpd)
        else:
            mesh, _ = dentition_correspondence(tmpl_teeth, tooth_meshes(lab, sorted(tmpl_teeth)), cfg.shape.cpd)
        io.write_ply(out / "meshes" / f"{s['id']}.ply", mesh)
        shapes.append(mesh)
        ids.append(s["id"])
    io.write_shape_set(out / "shapes.json", shape_set(shapes, ids))
    _provenance(out, "correspond", cfg, args, inputs=[str(s["labels"]) for s in subjects])
    print(f"{len(shapes)} corresponded shapes written to {out}")
    return 0


def cmd_pca(args):
    from .shape.pca import explained_variance_report, pca_fit

    cfg = _config(args)
    threshold = args.threshold if args.threshold is not None else cfg.shape.pca_threshold
    shapes = io.read_shape_set(args.shapes)
    model = pca_fit(shapes)
    k = explained_variance_report(model, threshold)
    if args.out:
        out = Path(args.out)
        io.write_shape_model(out / "model.json", model)
        io.write_json(out / "report.json", {"threshold": threshold, "k": k, "n_modes": model.n_modes,
                                            "explained_variance_ratio": model.explained_variance_ratio.tolist()})
        _provenance(out, "pca", cfg, args)
    print(f"k = {k} mode(s) explain >= {threshold:g} of the shape variance "
          f"({np.cumsum(model.explained_variance_ratio)[k - 1]:.4f})")
    return 0


def _parse_sd_range(text):
    try:
        lo, hi = (float(x) for x in text.split(".."))
    except ValueError:
        raise ConfigError(f"--sd expects LO..HI, got {text!r}") from None
    return lo, hi


def cmd_synth(args):
    from .shape.mesh import SurfaceMesh
    from .shape.pca import pca_synthesize

    cfg = _config(args)
    model = io.read_shape_model(args.model)
    if not 1 <= args.pc <= model.n_modes:
        raise InvalidArgument(f"--pc must lie in 1..{model.n_modes}")
    lo, hi = _parse_sd_range(args.sd)
    out = Path(args.out)
    for i, sd in enumerate(np.linspace(lo, hi, args.steps)):
        c = np.zeros(args.pc)
        c[-1] = sd
        verts = pca_synthesize(model, c).reshape(-1, 3)
        io.write_ply(out / f"pc{args.pc}_{i:02d}_{sd:+.2f}sd.ply", SurfaceMesh(verts, model.triangles))
    _provenance(out, "synth", cfg, args)
    print(f"{args.steps} shapes along PC{args.pc} written to {out}")
    return 0


def cmd_phantom_make(args):
    cfg = _config(args)
    out = Path(args.out)
    tmpl = phantom.generate_template(args.seed, args.dims, args.spacing)
    seeds = [args.seed * 1000 + 1000 + 17 * k for k in range(args.n // 2)]
    subjects = phantom.cohort(tmpl, args.n, seeds=seeds, amplitude_voxels=args.amplitude,
                              noise_sigma=args.noise)
    io.write_volume(out / "template" / "intensity.mhd", tmpl.intensity)
    io.write_labels(out / "template" / "labels.mhd", tmpl.labels)
    for t, m in sorted(tmpl.meshes.items()):
        io.write_ply(out / "template" / "meshes" / f"tooth_{t}.ply", m)
    manifest = []
    for k, s in enumerate(subjects):
        sid = f"subject{k:03d}"
        d = out / "subjects" / sid
        io.write_volume(d / "intensity.mhd", s.intensity)
        io.write_labels(d / "labels.mhd", s.labels)
        io.write_field(d / "forward_field.mhd", s.forward_field)
        io.write_field(d / "inverse_field.mhd", s.inverse_field)
        for t, m in sorted(s.meshes(tmpl).items()):
            io.write_ply(d / "meshes" / f"tooth_{t}.ply", m)
        manifest.append({"id": sid, "volume": f"subjects/{sid}/intensity.mhd",
                         "labels": f"subjects/{sid}/labels.mhd", "seed": s.seed, "sign": s.sign})
    io.write_json(out / "manifest.json", manifest)
    _provenance(out, "phantom make", cfg, args, seeds=[args.seed] + seeds)
    print(f"phantom template and {len(subjects)} subjects written to {out}")
    return 0


def cmd_eval(args):
    from . import evaluation

    cfg = _config(args)
    quick = args.quick
    checks = []

    def check(name, ok, **detail):
        checks.append({"name": name, "passed": bool(ok), **detail})
        print(f"{'PASS' if ok else 'FAIL'}  {name}")

    lin = evaluation.linear_recovery_experiment()
    check("linear recovery", lin["translation_error_voxels"] < 0.2 and lin["rotation_error_deg"] < 0.5,
          **lin)
    syn = evaluation.syn_recovery_experiment()
    syn.pop("_result")
    check("syn recovery", syn["endpoint_error_voxels"] < 1.0 and syn["min_jacobian"] > 0
          and syn["roundtrip_residual_voxels"] < 0.5, **syn)
    n = 4 if quick else 16
    lab = evaluation.labeling_experiment(n=n, schedule=cfg.registration)
    g, i = lab["guided"]["success_rate"], lab["intensity_only"]["success_rate"]
    check("guided labelling", g >= i and g >= 0.9, guided=g, intensity_only=i)
    if not quick:
        atl = evaluation.unbiased_atlas_experiment(schedule=cfg.registration, workers=cfg.effective_workers())
        atl.pop("_result")
        ok = (atl["atlas_surface_distance_mm"] < min(atl["subject_surface_distance_mm"])
              and atl["mean_final_field_norm_voxels"] < 0.5)
        check("unbiased atlas", ok, **atl)
    report = {"checks": checks, "all_passed": all(c["passed"] for c in checks), "versions": _versions()}
    out = Path(args.out)
    io.write_json(out / "eval_report.json", report)
    _provenance(out, "eval", cfg, args)
    print(f"{sum(c['passed'] for c in checks)}/{len(checks)} checks passed")
    return 0 if report["all_passed"] else 1


# ---- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON (defaults when omitted)")
    common.add_argument("--workers", type=int, help="parallel registrations (default: config, else all cores)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="dentatlas", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"dentatlas {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("config", help="configuration utilities")
    csub = c.add_subparsers(dest="action", required=True)
    ci = csub.add_parser("init", help="write the full default configuration")
    ci.add_argument("--out", help="output path (stdout when omitted)")
    ci.set_defaults(func=cmd_config_init)

    e = sub.add_parser("enhance", parents=[common], help="crop, mask and build the guidance channel")
    e.add_argument("--volume", required=True)
    e.add_argument("--labels", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_enhance)

    r = sub.add_parser("register", parents=[common], help="pairwise two-channel registration")
    r.add_argument("--fixed", nargs=2, required=True, metavar=("INTENSITY", "GUIDANCE"))
    r.add_argument("--moving", nargs=2, required=True, metavar=("INTENSITY", "GUIDANCE"))
    r.add_argument("--mode", choices=("rigid", "affine", "syn"), default="syn")
    r.add_argument("--intensity-only", action="store_true", help="ignore the guidance channel")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_register)

    a = sub.add_parser("atlas", help="groupwise atlas construction")
    asub = a.add_subparsers(dest="action", required=True)
    ab = asub.add_parser("build", parents=[common], help="build the unbiased two-channel template")
    ab.add_argument("--manifest", required=True, help="JSON list of {id, volume, labels}")
    ab.add_argument("--iterations", type=int, help="outer iterations (default: config)")
    ab.add_argument("--out", required=True)
    ab.set_defaults(func=cmd_atlas_build)

    lb = sub.add_parser("label", parents=[common], help="atlas-based tooth labelling of one subject")
    lb.add_argument("--atlas", required=True, help="directory written by 'atlas build'")
    lb.add_argument("--volume", required=True)
    lb.add_argument("--labels", required=True, help="subject tooth segmentation")
    lb.add_argument("--intensity-only", action="store_true")
    lb.add_argument("--no-truth", action="store_true", help="subject label ids are not ground truth")
    lb.add_argument("--out", required=True)
    lb.set_defaults(func=cmd_label)

    m = sub.add_parser("mesh", parents=[common], help="marching-cubes surfaces as ASCII PLY")
    m.add_argument("--input", required=True, help="label or volume MetaImage")
    m.add_argument("--label", type=int, help="single tooth id (default: every label)")
    m.add_argument("--iso", type=float, default=0.5)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mesh)

    co = sub.add_parser("correspond", parents=[common], help="CPD correspondence to template teeth")
    co.add_argument("--template", required=True, help="template (atlas) label map")
    co.add_argument("--manifest", required=True)
    co.add_argument("--tooth", type=int, help="per-tooth model for this id (default: whole dentition)")
    co.add_argument("--out", required=True)
    co.set_defaults(func=cmd_correspond)

    def add_pca(sp):
        q = sp.add_parser("pca", parents=[common], help="fit a PCA shape model")
        q.add_argument("--shapes", required=True, help="shape set JSON from 'correspond'")
        q.add_argument("--threshold", type=float, help="explained-variance threshold (default: config)")
        q.add_argument("--out", help="directory for model.json and report.json")
        q.set_defaults(func=cmd_pca)

    def add_synth(sp):
        q = sp.add_parser("synth", parents=[common], help="shapes along one principal component")
        q.add_argument("--model", required=True)
        q.add_argument("--pc", type=int, default=1)
        q.add_argument("--sd", default="-3..3", help="coefficient range in SD units, LO..HI")
        q.add_argument("--steps", type=int, default=7)
        q.add_argument("--out", required=True)
        q.set_defaults(func=cmd_synth)

    add_pca(sub)
    add_synth(sub)
    sh = sub.add_parser("shape", help="shape-model commands (aliases of pca / synth)")
    shsub = sh.add_subparsers(dest="action", required=True)
    add_pca(shsub)
    add_synth(shsub)

    ph = sub.add_parser("phantom", help="synthetic phantom cohorts")
    phsub = ph.add_subparsers(dest="action", required=True)
    pm = phsub.add_parser("make", parents=[common], help="template + antithetic subject cohort")
    pm.add_argument("--seed", type=int, default=0)
    pm.add_argument("--n", type=int, default=8)
    pm.add_argument("--dims", type=int, default=96)
    pm.add_argument("--spacing", type=float, default=0.4)
    pm.add_argument("--amplitude", type=float, default=2.0, help="deformation amplitude in voxels")
    pm.add_argument("--noise", type=float, default=0.0)
    pm.add_argument("--out", required=True)
    pm.set_defaults(func=cmd_phantom_make)

    ev = sub.add_parser("eval", parents=[common], help="phantom labelling experiment and acceptance checks")
    ev.add_argument("--quick", action="store_true", help="small cohorts, skip the 96^3 atlas")
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)
    return p


STAGES = {"atlas": "atlas build", "phantom": "phantom make", "config": "config init", "shape": "shape"}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = STAGES.get(args.command, args.command)
    if args.command == "shape":
        stage = f"shape {args.action}"
    try:
        return args.func(args)
    except DentAtlasError as exc:
        print(f"dentatlas {stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"dentatlas {stage}: missing file {exc.filename}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
