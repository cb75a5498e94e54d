"""Command-line tools: synth, train, infer, eval, bench, render.

Exit status: 0 on success, 2 for invalid input (arguments, configs, files),
1 for failures while running.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .cascade import CascadedPoseRegressor
from .config import ConfigError, RunConfig
from .depthcam import (BACKGROUND, DatasetError, camera_from_manifest, generate_dataset, project, read_dataset,
                       read_poses, write_dataset, write_poses)
from .evaluation import benchmark, evaluate, to_positions
from .persistence import ModelFormatError, export_json, load_model, save_model
from .skeleton import SkeletonConfigError

logger = logging.getLogger("depthpose")


class UsageError(Exception):
    """Bad input; reported with exit status 2."""


# ---------------------------------------------------------------------------
# input loading (everything here raises UsageError)

def _config(args) -> RunConfig:
    try:
        cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
        over = {"seed": getattr(args, "seed", None)}
        if getattr(args, "stages", None) is not None:
            over["stage_counts"] = args.stages
        for key in ("n_trees", "max_depth", "probe_offset_mm", "objective"):
            over[key] = getattr(args, key, None)
        cfg = cfg.replace(**over)
        cfg.skeleton_model()
        return cfg
    except (ConfigError, SkeletonConfigError, OSError) as exc:
        raise UsageError(str(exc)) from None


def _dataset(path, with_truth=True):
    try:
        return read_dataset(path, with_truth)
    except (DatasetError, OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read dataset {path}: {exc}") from None


def _model(path):
    try:
        return load_model(path)
    except (ModelFormatError, OSError) as exc:
        raise UsageError(f"cannot load model {path}: {exc}") from None


def _check_hash(expected: str, found: str, what: str) -> None:
    if expected != found:
        raise UsageError(f"skeleton hash mismatch: {what} has {found}, configuration has {expected}")


def _stages(text: str):
    try:
        parts = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected three comma-separated integers") from None
    if len(parts) != 3 or min(parts) < 0:
        raise argparse.ArgumentTypeError("expected three non-negative integers")
    return parts


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    cfg = _config(args)
    skeleton = cfg.skeleton_model()
    ds = generate_dataset(skeleton, cfg.camera_model(), cfg.motion_config(), args.frames, cfg.seed,
                          start=args.start, workers=args.workers)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} frames to {args.out} (seed {cfg.seed}, skeleton {skeleton.config_hash[:12]})")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = _dataset(args.data)
    skeleton = cfg.skeleton_model()
    _check_hash(skeleton.config_hash, ds.manifest.get("skeleton_hash"), f"dataset {args.data}")
    if any(f.truth is None for f in ds.frames):
        raise UsageError(f"dataset {args.data} lacks ground-truth poses")
    camera = camera_from_manifest(ds.manifest)
    est = cfg.estimator(camera, n_jobs=args.workers).fit(ds.images, ds.truths)
    for rec in est.train_trace_:
        print(f"stage {rec['stage']:3d} {rec['section']:<10} beta {rec['beta']:.4f}  "
              f"loss {rec['loss_before']:.6f} -> {rec['loss_after']:.6f}")
    save_model(est.model_, args.out)
    if args.export_json:
        Path(args.export_json).write_text(json.dumps(export_json(est.model_)) + "\n")
    print(f"saved model with {len(est.model_.stages)} stages to {args.out}")
    return 0


def _loaded_estimator(args, ds):
    model = _model(args.model)
    skeleton = _config(args).skeleton_model()
    _check_hash(skeleton.config_hash, model.skeleton_hash, f"model {args.model}")
    _check_hash(skeleton.config_hash, ds.manifest.get("skeleton_hash"), f"dataset {args.data}")
    return CascadedPoseRegressor.from_model(model, skeleton, camera_from_manifest(ds.manifest))


def cmd_infer(args) -> int:
    ds = _dataset(args.data, with_truth=False)
    est = _loaded_estimator(args, ds)
    write_poses(args.out, [f.frame_id for f in ds.frames], est.predict(ds.images))
    print(f"wrote {len(ds)} estimates to {args.out}")
    return 0


def cmd_eval(args) -> int:
    ds = _dataset(args.data)
    if any(f.truth is None for f in ds.frames):
        raise UsageError(f"dataset {args.data} lacks ground-truth poses")
    if (args.model is None) == (args.poses is None):
        raise UsageError("give exactly one of --model or --poses")
    if args.model is not None:
        est = _loaded_estimator(args, ds)
        estimates, model_id = est.predict(ds.images), Path(args.model).name
    else:
        try:
            ids, estimates = read_poses(args.poses)
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot read poses {args.poses}: {exc}") from None
        if list(ids) != [f.frame_id for f in ds.frames]:
            raise UsageError("pose file frame ids do not match the dataset")
        model_id = Path(args.poses).name
    skeleton = _config(args).skeleton_model()
    report = evaluate(estimates, ds.truths, skeleton, model_id=model_id)
    Path(args.out).write_text(report.to_json())
    if args.curve_csv:
        Path(args.curve_csv).write_text(report.curve_csv())
    print(report.table(), end="")
    return 0


def cmd_bench(args) -> int:
    ds = _dataset(args.data, with_truth=False)
    est = _loaded_estimator(args, ds)
    images = ds.images[:args.frames] if args.frames else ds.images
    rep = benchmark(est.model_, images, est.camera_, est.skeleton_, repetitions=args.repetitions)
    print(rep.table(), end="")
    return 0


def _pgm(gray: np.ndarray) -> bytes:
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode() + gray.astype(np.uint8).tobytes()


def _draw_line(img, a, b, value) -> None:
    n = int(max(abs(b[0] - a[0]), abs(b[1] - a[1]))) + 1
    u = np.rint(np.linspace(a[0], b[0], n)).astype(int)
    v = np.rint(np.linspace(a[1], b[1], n)).astype(int)
    ok = (u >= 0) & (u < img.shape[1]) & (v >= 0) & (v < img.shape[0])
    img[v[ok], u[ok]] = value


def depth_to_gray(depth: np.ndarray) -> np.ndarray:
    """Background 0; foreground 64..255 with nearer surfaces brighter."""
    gray = np.zeros(depth.shape, dtype=np.uint8)
    fg = depth < BACKGROUND
    if fg.any():
        z = depth[fg].astype(float)
        span = max(z.max() - z.min(), 1e-9)
        gray[fg] = np.rint(64 + 191 * (z.max() - z) / span).astype(np.uint8)
    return gray


def overlay_skeleton(gray, positions, parents, camera, value) -> None:
    for k in range(1, len(parents)):
        ua, va, _ = project(camera, positions[parents[k]])
        ub, vb, _ = project(camera, positions[k])
        if np.isfinite([ua, va, ub, vb]).all():
            _draw_line(gray, (ua, va), (ub, vb), value)


def cmd_render(args) -> int:
    ds = _dataset(args.data)
    ids = [f.frame_id for f in ds.frames]
    if args.frame not in ids:
        raise UsageError(f"frame {args.frame} is not in {args.data}")
    frame = ds.frames[ids.index(args.frame)]
    skeleton = _config(args).skeleton_model()
    camera = camera_from_manifest(ds.manifest)
    estimate = None
    if args.poses:
        try:
            pids, poses = read_poses(args.poses)
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot read poses {args.poses}: {exc}") from None
        if args.frame not in pids:
            raise UsageError(f"frame {args.frame} missing from {args.poses}")
        estimate = poses[list(pids).index(args.frame)]
    gray = depth_to_gray(frame.image.depth)
    if frame.image.n_foreground == 0:
        logger.warning("frame %d has no foreground; writing the empty raster without overlay", args.frame)
    else:
        if frame.truth is not None and not args.no_truth:
            overlay_skeleton(gray, to_positions(skeleton, frame.truth[None])[0], skeleton.parents, camera, 128)
        if estimate is not None:
            overlay_skeleton(gray, to_positions(skeleton, estimate[None])[0], skeleton.parents, camera, 255)
    Path(args.out).write_bytes(_pgm(gray))
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="depthpose", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=False, workers=False):
        sp.add_argument("--config", help="JSON run configuration")
        if seed:
            sp.add_argument("--seed", type=int, help="random seed (default: config value, 0)")
        if workers:
            sp.add_argument("--workers", type=_positive, default=1, help="parallel workers; outputs do not change")

    sp = sub.add_parser("synth", help="render a synthetic dataset")
    common(sp, seed=True, workers=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--frames", type=_positive, required=True)
    sp.add_argument("--start", type=int, default=0, help="first frame id")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a cascade model")
    common(sp, seed=True, workers=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--stages", type=_stages, help="root,torso,limb stage counts")
    sp.add_argument("--trees", dest="n_trees", type=_positive)
    sp.add_argument("--depth", dest="max_depth", type=_positive)
    sp.add_argument("--probe-offset-mm", dest="probe_offset_mm", type=float)
    sp.add_argument("--objective", choices=("gradient", "euler_delta", "position"))
    sp.add_argument("--export-json", help="also dump the model as JSON")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="estimate poses for a dataset")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="score a model or a pose file against ground truth")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--model")
    sp.add_argument("--poses")
    sp.add_argument("--out", required=True)
    sp.add_argument("--curve-csv", help="write the accuracy curve as CSV")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="single-threaded inference throughput")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--frames", type=_positive)
    sp.add_argument("--repetitions", type=_positive, default=1)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("render", help="write a PGM of a depth frame with skeleton overlay")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--frame", type=int, required=True)
    sp.add_argument("--poses", help="estimates to overlay (drawn white); truth is drawn gray")
    sp.add_argument("--no-truth", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
