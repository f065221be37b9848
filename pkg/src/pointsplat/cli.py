"""Command-line surface: render, fit, gradcheck, loss-eval.

Exit codes: 0 success, 1 validation/usage error, 2 IO error. The
PFGS_THREADS environment variable caps per-camera render parallelism
(0 or unset = auto).
"""

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FitDivergenceError, PointsplatError
from .fit import FitConfig, fit_gaussians, init_from_cloud
from .grad import finite_diff_check
from .losses import (LossWeights, PredictionPyramid, frequency_loss, l1_loss,
                     progressive_multiscale_frequency_loss,
                     progressive_multiscale_image_loss, psnr, total_loss)
from .primitives import DEFAULT_FEATURE_DIM
from .rasterizer import RasterConfig, render
from .storage import (config_hash, load_cameras, load_checkpoint, load_image,
                      load_point_cloud, save_checkpoint, save_feature_planes,
                      save_float_sidecar, save_image)
from .synth import frontal_camera, random_scene


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def thread_budget() -> int:
    raw = os.environ.get("PFGS_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def _parse_size(text: str):
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except Exception:
        raise PointsplatError(f"size must look like 64x48, got {text!r}")


def _parse_vector(text: str):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise PointsplatError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pointsplat",
                     description="Differentiable gaussian splatting for colored point clouds.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb")

    p = sub.add_parser("render", help="splat a point cloud or checkpoint into images")
    p.add_argument("--cloud", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--payload", choices=("color", "feature", "joint"), default="color")
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--feature-dim", type=int, default=DEFAULT_FEATURE_DIM)
    p.add_argument("--background", default=None, help="comma-separated channel values")
    p.add_argument("--sidecar", action="store_true",
                   help="also write raw float64 payload sidecars")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("fit", help="fit gaussian tables to target images")
    p.add_argument("--cloud", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--targets", required=True, help="directory of target PNGs, one per camera")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--config", help="TOML file with FitConfig fields")
    p.add_argument("--report", help="report JSON path (default: <out>.report.json)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("gradcheck", help="finite-difference check on random scenes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", default="32x32")
    p.add_argument("--count", type=int, default=5, help="number of random scenes")
    p.add_argument("--gaussians", type=int, default=12)
    p.add_argument("--payload", choices=("color", "feature", "joint"), default="color")
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("loss-eval", help="evaluate the loss suite on image directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--weights", default=None, help="g1,g2,g3")
    p.add_argument("--out", help="write the JSON summary here instead of stdout")
    p.set_defaults(func=cmd_loss_eval)
    return parser


def _load_scene(args):
    if args.checkpoint:
        scene, _, _ = load_checkpoint(args.checkpoint)
        return scene
    cloud = load_point_cloud(args.cloud)
    return init_from_cloud(cloud, args.feature_dim, args.seed)


def cmd_render(args) -> int:
    cameras = load_cameras(args.cameras)
    scene = _load_scene(args)
    config = RasterConfig(background=None if args.background is None
                          else _parse_vector(args.background))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(i_cam):
        i, camera = i_cam
        buffers = render(scene, camera, config, args.payload)
        stem = out_dir / f"render_{i:03d}"
        if args.payload == "color":
            save_image(buffers, f"{stem}.png")
        elif args.payload == "feature":
            save_feature_planes(buffers, stem)
        else:
            save_image(buffers.payload[:, :, :3], f"{stem}.png")
            save_feature_planes(buffers.payload[:, :, 3:], stem)
        if args.sidecar:
            save_float_sidecar(f"{stem}_payload.bin", buffers.payload)
        return i

    workers = min(thread_budget(), max(len(cameras), 1))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(one, enumerate(cameras)))
    print(f"wrote {len(cameras)} render(s) to {out_dir}")
    return 0


def _load_fit_config(args) -> FitConfig:
    fields = {}
    if args.config:
        if sys.version_info >= (3, 11):
            import tomllib as toml
        else:
            import tomli as toml
        with open(args.config, "rb") as f:
            doc = toml.load(f)
        valid = set(FitConfig.__dataclass_fields__)
        unknown = set(doc) - valid
        if unknown:
            raise PointsplatError(f"unknown fit config keys: {sorted(unknown)}")
        fields.update(doc)
    for key in ("steps", "seed", "eval_every"):
        val = getattr(args, key)
        if val is not None:
            fields[key] = val
    return FitConfig(**fields)


def _png_dir(path) -> list:
    d = Path(path)
    if not d.is_dir():
        raise FileNotFoundError(f"no such directory: {d}")
    return sorted(d.glob("*.png"))


def cmd_fit(args) -> int:
    cameras = load_cameras(args.cameras)
    target_paths = _png_dir(args.targets)
    if len(target_paths) != len(cameras):
        raise PointsplatError(
            f"found {len(target_paths)} target PNGs for {len(cameras)} cameras")
    views = []
    for camera, path in zip(cameras, target_paths):
        img = load_image(path)
        if img.shape[2] != 3:
            raise PointsplatError(f"target {path} must be RGB, has {img.shape[2]} channel(s)")
        views.append((camera, img))

    cloud = load_point_cloud(args.cloud)
    config = _load_fit_config(args)
    scene, report = fit_gaussians(cloud, views, config)
    provenance = {"seed": config.seed, "config_hash": config_hash(config),
                  "n_views": len(views), "steps": config.steps}
    save_checkpoint(args.out, scene, provenance=provenance)

    report_path = args.report or f"{args.out}.report.json"
    doc = report.trace_dict()
    doc["step_seconds"] = report.step_seconds
    Path(report_path).write_text(json.dumps(doc, indent=2))
    print(f"final loss {report.losses[-1]:.6f}, "
          f"mean PSNR {report.final_mean_psnr():.2f} dB; "
          f"checkpoint -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    w, h = _parse_size(args.size)
    camera = frontal_camera(w, h)
    scenes = []
    for k in range(args.count):
        scene = random_scene(args.seed + 1000 * k, args.gaussians, camera,
                             feature_dim=DEFAULT_FEATURE_DIM)
        rep = finite_diff_check(scene, camera, payload_select=args.payload,
                                epsilon=args.epsilon, tolerance=args.tolerance)
        scenes.append(rep)
    n_checked = sum(r.n_checked for r in scenes)
    n_boundary = sum(r.n_boundary for r in scenes)
    within = sum(int(round(r.fraction_within * r.n_checked)) for r in scenes)
    overall = within / n_checked if n_checked else 1.0
    doc = {
        "seed": args.seed, "size": [w, h], "count": args.count,
        "gaussians": args.gaussians, "payload": args.payload,
        "epsilon": args.epsilon, "tolerance": args.tolerance,
        "overall": {
            "n_checked": n_checked,
            "n_boundary_excluded": n_boundary,
            "fraction_within_tolerance": overall,
            "max_rel_error": max((r.max_rel_error for r in scenes), default=0.0),
        },
        "scenes": [json.loads(r.to_json()) for r in scenes],
    }
    text = json.dumps(doc, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    ok = overall >= 0.99
    print(f"gradcheck {'PASS' if ok else 'FAIL'}: "
          f"{overall:.4%} of {n_checked} parameters within {args.tolerance:g} "
          f"({n_boundary} boundary-excluded)", file=sys.stderr)
    return 0 if ok else 1


def cmd_loss_eval(args) -> int:
    pred_paths = _png_dir(args.pred)
    gt_paths = _png_dir(args.gt)
    if not pred_paths:
        raise PointsplatError(f"no PNGs found in {args.pred}")
    if len(pred_paths) != len(gt_paths):
        raise PointsplatError(
            f"{len(pred_paths)} prediction(s) vs {len(gt_paths)} target(s)")
    if args.weights is not None:
        g = _parse_vector(args.weights)
        if len(g) != 3:
            raise PointsplatError("expected exactly three weights g1,g2,g3")
        weights = LossWeights(*g)
    else:
        weights = LossWeights()

    pairs = []
    for pp, gp in zip(pred_paths, gt_paths):
        pred, gt = load_image(pp), load_image(gp)
        if pred.shape != gt.shape:
            raise PointsplatError(f"{pp.name}: shape {pred.shape} vs {gt.shape}")
        pyr = PredictionPyramid.from_image(pred)
        pairs.append({
            "pred": pp.name, "gt": gp.name,
            "l1": l1_loss(pred, gt),
            "frequency": frequency_loss(pred, gt),
            "psnr": psnr(pred, gt),
            "multiscale_image": progressive_multiscale_image_loss(pyr, gt, weights.loop_weights),
            "multiscale_frequency": progressive_multiscale_frequency_loss(pyr, gt, weights.loop_weights),
        })
    mean = lambda key: float(np.mean([p[key] for p in pairs]))
    summary = {"l_gs": mean("l1"), "l_mim": mean("multiscale_image"),
               "l_mfr": mean("multiscale_frequency")}
    summary["total"] = total_loss(summary["l_gs"], summary["l_mim"],
                                  summary["l_mfr"], weights)
    doc = {"pairs": pairs, "summary": summary,
           "weights": [weights.gamma1, weights.gamma2, weights.gamma3]}
    text = json.dumps(doc, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ValueError, FitDivergenceError) as exc:
        # PointsplatError and json decoding errors are ValueErrors
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


def entrypoint():
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    entrypoint()
