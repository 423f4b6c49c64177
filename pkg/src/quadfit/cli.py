"""Single entry point: synth | zoomout | init-cameras | fit | eval | inspect.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 RANSAC found no
consensus. Every subcommand takes --seed and is bit-reproducible for a fixed
seed. QUADFIT_LOG sets the log level (DEBUG/INFO/WARNING).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import InputError, NoConsensusError, NumericalError

log = logging.getLogger("quadfit")

EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_NO_CONSENSUS = 4


def _setup_logging():
    level = os.environ.get("QUADFIT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _apply_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise InputError("--threads must be >= 1")
    try:
        import numba
        numba.set_num_threads(n)
    except ImportError:
        pass


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from .synth import generate_scene, synthetic_template, NoiseSpec, default_motion
    from .model import load_template

    template = load_template(args.template) if args.template else synthetic_template()
    noise = NoiseSpec(sigma_px=args.noise_sigma, outlier_frac=args.outlier_frac,
                      dropout_frac=args.dropout_frac)
    motion = default_motion(template, amplitude=args.motion_amplitude)
    generate_scene(args.out, template, frames=args.frames, seed=args.seed, noise=noise,
                   motion=motion, n_pixel_corrs=args.pixel_corrs,
                   n_track_points=args.track_points,
                   orbit_radius=args.orbit_radius, orbit_arc_deg=args.orbit_arc,
                   emit_features=not args.no_features, emit_depth=not args.no_depth)
    print(f"wrote scene with {args.frames} frames to {args.out}")
    return 0


def cmd_zoomout(args) -> int:
    from .fmap import compute_basis, landmark_init, zoomout, save_vertex_map
    from .model import load_template

    src_t = load_template(args.source)
    tgt_t = load_template(args.target)
    if len(src_t.landmarks) < 4 or len(tgt_t.landmarks) < 4:
        raise InputError("both templates must carry at least 4 landmarks")
    n_lm = min(len(src_t.landmarks), len(tgt_t.landmarks))
    k_basis = max(args.k_final, args.k_init) + 4
    src = compute_basis(src_t.rest_vertices, src_t.faces, k_basis)
    tgt = compute_basis(tgt_t.rest_vertices, tgt_t.faces, k_basis)
    C0 = landmark_init(src, tgt, src_t.landmarks[:n_lm], tgt_t.landmarks[:n_lm],
                       args.k_init)
    _, s2t = zoomout(src, tgt, C0, args.k_final, step=args.step)
    save_vertex_map(args.out, s2t)
    print(f"wrote vertex map ({len(s2t)} sources) to {args.out}")
    return 0


def cmd_init_cameras(args) -> int:
    from .cues import load_scene, save_manifest, fallback_fill
    from .camera import init_cameras
    from .model import FrameParams

    scene = load_scene(args.scene, seed=args.seed)
    cues = fallback_fill(scene.cues)
    init_params = FrameParams.rest(scene.template)
    cams = init_cameras(cues, scene.template, init_params, scene.intrinsics,
                        mode=args.mode, solver=args.solver,
                        ransac_iters=args.ransac_iters, inlier_px=args.inlier_px,
                        seed=args.seed)
    manifest = dict(scene.manifest)
    manifest["cameras"] = [c.to_dict() for c in cams]
    save_manifest(manifest, scene.scene_dir)
    print(f"initialized {len(cams)} cameras ({args.mode}, {args.solver})")
    return 0


def cmd_fit(args) -> int:
    from .cues import load_scene
    from .model import load_params, save_params, FrameParams
    from .sched import Schedule, fit

    scene = load_scene(args.scene, part_sample_budget=args.part_samples,
                       seed=args.seed, require_cameras=True)
    schedule = Schedule.from_json(args.schedule) if args.schedule else Schedule()
    if args.epochs is not None and args.epochs != schedule.epochs:
        schedule = schedule.scaled(args.epochs)
    if args.batch_size is not None:
        schedule.batch_size = args.batch_size
    if args.lr is not None:
        schedule.lr = args.lr
    schedule.validate()

    if args.init == "rest" or args.init is None:
        init = None
    elif args.init == "gt":
        if scene.gt_params is None:
            raise InputError("--init gt: scene has no gt_params")
        init = [p.copy() for p in scene.gt_params]
    else:
        init = load_params(args.init)

    result = fit(scene, schedule, mode=args.mode, seed=args.seed, init_params=init,
                 chamfer_budget=args.chamfer_budget,
                 chamfer_boundary=args.chamfer_boundary,
                 optimize_cameras=args.optimize_cameras, net_offsets=args.net_offsets,
                 resample_parts_every=args.resample_parts_every,
                 log_every=args.log_every, checkpoint_every=args.checkpoint_every,
                 out_dir=args.out, resume=args.resume)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_params(out / "params.json", result.params)
    print(f"fit complete: {schedule.epochs} epochs, final total "
          f"{result.total_history[-1]:.6g}; params in {out / 'params.json'}")
    return 0


def cmd_eval(args) -> int:
    from .cues import load_scene, read_depth_maps
    from .evalmetrics import iou_for_params, depth_for_params
    from .model import load_params

    if args.psnr or args.lpips:
        raise InputError("texture metrics (PSNR/LPIPS) are out of scope for this "
                         "engine; only silhouette IoU and depth metrics are available")
    scene = load_scene(args.scene, seed=args.seed, require_cameras=True)
    params = load_params(args.fitted)
    if len(params) != scene.n_frames:
        raise InputError(f"fitted params cover {len(params)} frames, scene has "
                         f"{scene.n_frames}")
    iou = iou_for_params(scene.template, params, scene.cameras, scene.cues.masks)
    rows = [("IoU", iou.mean), ("IoUw5", iou.worst5)]
    depth_path = args.depth or (scene.manifest.get("depth") and
                                scene.scene_dir / scene.manifest["depth"])
    dep = None
    if depth_path:
        ref = read_depth_maps(depth_path, scene.n_frames)
        dep = depth_for_params(scene.template, params, scene.cameras, ref)
        rows += [("AbsRel", dep.abs_rel), ("delta<1.25", dep.deltas[0]),
                 ("delta<1.25^2", dep.deltas[1]), ("delta<1.25^3", dep.deltas[2])]
    if args.out:
        with open(args.out, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["metric", "value"])
            for name, val in rows:
                wr.writerow([name, repr(float(val))])
            for f, v in enumerate(iou.per_frame):
                wr.writerow([f"IoU_frame_{f}", repr(float(v))])
    for name, val in rows:
        print(f"{name}: {val:.4f}")
    return 0


def cmd_inspect(args) -> int:
    from .cues import load_scene

    scene = load_scene(args.scene, seed=args.seed)
    cues = scene.cues
    info = {
        "frames": cues.n_frames,
        "image_size": list(cues.image_size),
        "template_vertices": scene.template.n_vertices,
        "template_joints": scene.template.n_joints,
        "cameras": "present" if scene.cameras else "absent",
        "features": list(scene.features.shape) if scene.features is not None else None,
        "mask_area_mean": float(np.mean([m.area() for m in cues.masks])),
        "part_samples_per_frame": [len(s[0]) for s in cues.part_samples],
        "pixel_corrs_per_frame": [len(c[0]) for c in cues.pixel_corrs],
        "tracks": int(cues.tracks.n_tracks),
        "load_report": cues.load_report,
    }
    print(json.dumps(info, indent=1, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="quadfit",
                                 description="Fit an articulated quadruped template "
                                             "to per-frame 2D video cues.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="rng seed (bit-reproducible)")
        p.add_argument("--threads", type=int, default=None,
                       help="cap kernel worker threads (default: all cores)")

    p = sub.add_parser("synth", help="generate a synthetic scene with ground truth")
    common(p)
    p.add_argument("--out", required=True, help="output scene directory")
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--template", default=None, help="template JSON (default: built-in)")
    p.add_argument("--noise-sigma", type=float, default=0.0, help="pixel noise sigma")
    p.add_argument("--outlier-frac", type=float, default=0.0,
                   help="fraction of pixel corrs replaced by random mask pixels")
    p.add_argument("--dropout-frac", type=float, default=0.0,
                   help="fraction of frames with emptied part/pixel cues")
    p.add_argument("--motion-amplitude", type=float, default=0.25)
    p.add_argument("--pixel-corrs", type=int, default=300, help="per-frame budget")
    p.add_argument("--track-points", type=int, default=500, help="per anchor frame")
    p.add_argument("--orbit-radius", type=float, default=3.4)
    p.add_argument("--orbit-arc", type=float, default=140.0, help="degrees")
    p.add_argument("--no-features", action="store_true")
    p.add_argument("--no-depth", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("zoomout", help="spectral vertex map between two templates")
    common(p)
    p.add_argument("source", help="source template JSON (embedding mesh)")
    p.add_argument("target", help="target template JSON (fitting mesh)")
    p.add_argument("--out", required=True, help="output vertex map CSV")
    p.add_argument("--k-init", type=int, default=20,
                   help="initial map size (default 20, not validated upstream)")
    p.add_argument("--k-final", type=int, default=100, help="final map size")
    p.add_argument("--step", type=int, default=2)
    p.set_defaults(func=cmd_zoomout)

    p = sub.add_parser("init-cameras", help="estimate per-frame cameras from cues")
    common(p)
    p.add_argument("scene", help="scene directory or manifest path")
    p.add_argument("--mode", choices=["part", "pixel", "part+pixel", "org"],
                   default="part+pixel")
    p.add_argument("--solver", choices=["epnp", "epnp-ransac"], default="epnp-ransac")
    p.add_argument("--ransac-iters", type=int, default=256)
    p.add_argument("--inlier-px", type=float, default=8.0)
    p.set_defaults(func=cmd_init_cameras)

    p = sub.add_parser("fit", help="optimize frame parameters against the cues")
    common(p)
    p.add_argument("scene", help="scene directory or manifest path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mode", choices=["direct", "amortized"], default="direct")
    p.add_argument("--epochs", type=int, default=None,
                   help="override epoch count (milestones rescale proportionally)")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--schedule", default=None, help="schedule config JSON")
    p.add_argument("--init", default=None,
                   help="'rest' (default), 'gt', or a params JSON path")
    p.add_argument("--part-samples", type=int, default=200,
                   help="per-frame part sample budget")
    p.add_argument("--chamfer-budget", type=int, default=512)
    p.add_argument("--chamfer-boundary", action="store_true",
                   help="sample mask boundary pixels instead of area")
    p.add_argument("--optimize-cameras", action="store_true",
                   help="also optimize per-frame camera deltas (default: frozen "
                        "after init); fitted cameras land in out/cameras.json")
    p.add_argument("--net-offsets", action="store_true",
                   help="amortized mode: network also emits vertex offsets")
    p.add_argument("--resample-parts-every", type=int, default=0,
                   help="re-draw part/mask samples every N epochs (0 = fixed)")
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", default=None, help="checkpoint to load before fitting")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="IoU and depth metrics for fitted params")
    common(p)
    p.add_argument("scene", help="scene directory or manifest path")
    p.add_argument("--fitted", required=True, help="params JSON from fit")
    p.add_argument("--out", default=None, help="metrics CSV path")
    p.add_argument("--depth", default=None, help="reference depth file override")
    p.add_argument("--psnr", action="store_true", help="refused: texture out of scope")
    p.add_argument("--lpips", action="store_true", help="refused: texture out of scope")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="dump manifest and cue statistics")
    common(p)
    p.add_argument("scene", help="scene directory or manifest path")
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    _setup_logging()
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        _apply_threads(args.threads)
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except NoConsensusError as e:
        print(f"error: no consensus: {e}", file=sys.stderr)
        return EXIT_NO_CONSENSUS
    except NumericalError as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
