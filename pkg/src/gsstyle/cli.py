"""Command-line entry point wiring the pipeline stages into subcommands.

Exit codes: 0 success, 2 bad arguments / missing file, 3 validation error,
4 numeric error.  Logs go to stderr as line-delimited JSON events.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import images, figures
from .consistency import consistency_report, perceptual_metrics
from .diffusion import CVSA_BLOCKS
from .errors import ConfigError, NumericError, ValidationError
from .grouping import IdentityClassifier
from .pipeline import (RunConfig, derive_seed, run_ablation, run_pipeline,
                       stylize_stage, write_trace)
from .scene import (ViewSet, load_scene, load_viewset, make_orbit_cameras,
                    make_scene, save_scene, save_viewset, validate_scene)
from .splat import render
from .styling import (FeatureExtractor, TransferConfig, optimize_scene,
                      select_key_views)
from .selftest import run_selftest


def log_event(**fields) -> None:
    print(json.dumps(fields, sort_keys=True), file=sys.stderr)


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gsstyle")
    ap.add_argument("--workers", type=int, default=1,
                    help="worker count (1 reproduces reference outputs)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a synthetic scene")
    p.add_argument("--preset", default="blocks")
    p.add_argument("--gaussians", type=int, default=500)
    p.add_argument("--groups", type=int, default=4)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--cams-out", help="also write an orbit camera rig here")
    p.add_argument("--cameras", type=int, default=8)

    p = sub.add_parser("render", help="render a scene at a camera")
    p.add_argument("--scene", required=True)
    p.add_argument("--camera", required=True, help="camera or viewset JSON")
    p.add_argument("--view", type=int, default=0, help="camera index in a viewset")
    p.add_argument("--out-prefix", required=True)

    p = sub.add_parser("select-keyviews", help="farthest-point key view selection")
    p.add_argument("--cameras", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("stylize-keyviews", help="stylize rendered key views")
    p.add_argument("--scene", required=True)
    p.add_argument("--style", required=True)
    p.add_argument("--views", type=int, default=2, help="number of key views")
    p.add_argument("--cameras", help="viewset JSON; orbit rig generated if omitted")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--cvsa-block", default="dec2-last", choices=CVSA_BLOCKS)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)

    p = sub.add_parser("transfer", help="optimize scene colors onto stylized key views")
    p.add_argument("--scene", required=True)
    p.add_argument("--keyviews", required=True, help="stylize-keyviews output dir")
    p.add_argument("--mode", default="ist", choices=["ist", "direct"])
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.006)
    p.add_argument("--lambda-style", type=float, default=1.0)
    p.add_argument("--lambda-content", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", required=True)

    p = sub.add_parser("metrics", help="consistency and perceptual metrics")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--style", required=True)
    p.add_argument("--content-scene", help="unstylized scene for the content loss")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)

    p = sub.add_parser("selftest", help="run the built-in oracle/invariant suite")

    p = sub.add_parser("pipeline", help="run every stage into one directory")
    p.add_argument("--config", help="JSON config; flags win over file values")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--ablation", action="store_true",
                   help="run the 4-variant ablation harness instead")
    return ap


def dispatch(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _run(args)
    except (ConfigError, FileNotFoundError) as exc:
        log_event(level="error", kind="config", message=str(exc))
        return 2
    except ValidationError as exc:
        log_event(level="error", kind="validation", message=str(exc))
        return 3
    except NumericError as exc:
        log_event(level="error", kind="numeric", message=str(exc))
        return 4


def _run(args) -> int:
    cmd = args.command
    log_event(level="info", stage=cmd, event="start")

    if cmd == "gen-scene":
        if args.gaussians < 1 or args.groups < 1:
            raise ValidationError("gaussians and groups must be positive")
        scene = make_scene(args.preset, args.gaussians, args.groups, args.seed)
        save_scene(scene, args.out)
        if args.cams_out:
            save_viewset(ViewSet(make_orbit_cameras(args.cameras)), args.cams_out)
        log_event(level="info", stage=cmd, event="done", out=args.out)
        return 0

    if cmd == "render":
        scene = load_scene(args.scene)
        vs = load_viewset(args.camera)
        cam = vs.cameras[args.view]
        out = render(scene, cam)
        pre = args.out_prefix
        images.save_png(out.color, pre + ".png")
        images.save_pfm(out.depth, pre + "_depth.pfm")
        images.save_pfm(out.coverage, pre + "_coverage.pfm")
        images.save_pfm(out.id_features, pre + "_id.pfm")
        log_event(level="info", stage=cmd, event="done", prefix=pre)
        return 0

    if cmd == "select-keyviews":
        vs = load_viewset(args.cameras)
        vs.key_indices = select_key_views(vs.cameras, args.k)
        save_viewset(vs, args.out)
        log_event(level="info", stage=cmd, event="done",
                  key_indices=vs.key_indices)
        return 0

    if cmd == "stylize-keyviews":
        scene = load_scene(args.scene)
        if args.cameras:
            vs = load_viewset(args.cameras)
        else:
            vs = ViewSet(make_orbit_cameras(8))
        if not vs.key_indices:
            vs.key_indices = select_key_views(vs.cameras, args.views)
        style_img = images.load_png(args.style)
        cfg = RunConfig.load(overrides={
            "seed": args.seed, "steps": args.steps, "cvsa_block": args.cvsa_block,
            "key_views": args.views})
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        key_cams = [vs.cameras[i] for i in vs.key_indices]
        key_renders = [render(scene, c) for c in key_cams]
        stylize_stage(cfg, key_renders, style_img, outdir)
        save_viewset(ViewSet(key_cams, list(range(len(key_cams)))),
                     outdir / "key_cams.json")
        save_viewset(vs, outdir / "cams.json")
        log_event(level="info", stage=cmd, event="done", out=str(outdir))
        return 0

    if cmd == "transfer":
        scene = load_scene(args.scene)
        kd = Path(args.keyviews)
        key_vs = load_viewset(kd / "key_cams.json")
        all_vs = load_viewset(kd / "cams.json")
        key_images = [images.load_png(kd / f"view_{i}.png")
                      for i in range(len(key_vs.cameras))]
        cfg = TransferConfig(iterations=args.iters, lr=args.lr,
                             lambda_style=args.lambda_style,
                             lambda_content=args.lambda_content,
                             mode=args.mode, seed=args.seed)
        fx = FeatureExtractor(derive_seed(args.seed, "features"))
        clf = IdentityClassifier.embedding(scene.n_groups)
        styled, trace = optimize_scene(scene, key_images, key_vs.cameras,
                                       all_vs.cameras, cfg, fx, clf)
        save_scene(styled, args.out)
        write_trace(trace, args.trace)
        figures.save_trace_figure(trace, str(Path(args.trace).with_suffix(".png")))
        log_event(level="info", stage=cmd, event="done", out=args.out)
        return 0

    if cmd == "metrics":
        scene = load_scene(args.scene)
        vs = load_viewset(args.cameras)
        style_img = images.load_png(args.style)
        fx = FeatureExtractor(derive_seed(args.seed, "features"))
        rep = consistency_report(scene, vs.cameras, fx)
        content = load_scene(args.content_scene) if args.content_scene else None
        gram_vals, content_vals = [], []
        for cam in vs.cameras:
            img = render(scene, cam).color
            ref = render(content, cam).color if content is not None else None
            pm = perceptual_metrics(img, style_img, ref, fx)
            gram_vals.append(pm["style_loss"])
            if "content_loss" in pm:
                content_vals.append(pm["content_loss"])
        payload = {
            "short_range": rep.short_range,
            "long_range": rep.long_range,
            "pairs": rep.pairs,
            "gram_style_loss": float(np.mean(gram_vals)),
            "content_loss": float(np.mean(content_vals)) if content_vals else None,
        }
        Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=2))
        figures.save_consistency_figure(payload, str(Path(args.out).with_suffix(".png")))
        log_event(level="info", stage=cmd, event="done", out=args.out)
        return 0

    if cmd == "selftest":
        failures = run_selftest(log=lambda msg: print(msg))
        log_event(level="info", stage=cmd, event="done", failures=failures)
        return 0 if failures == 0 else 3

    if cmd == "pipeline":
        cfg = RunConfig.load(args.config, overrides={"seed": args.seed})
        if args.ablation:
            path = run_ablation(cfg, args.out)
        else:
            path = run_pipeline(cfg, args.out)
        log_event(level="info", stage=cmd, event="done", manifest=str(path))
        return 0

    raise ConfigError(f"unknown command {cmd!r}")


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
