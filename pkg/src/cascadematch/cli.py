"""Command-line harness.

Subcommands: gen-data, train, match, eval-homography, eval-pose, bench,
grad-check.  A single JSON run config (--config) drives everything;
--set key.path=value patches it.  Exit codes: 0 success, 2 validation
error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, load_into
from .config import ConfigError, RunConfig, load_run_config
from .data import (corpus_pair_dirs, generate_corpus, load_image, load_pair)
from .evaluate import (EvalReport, bench, detector_ablation, evaluate_pairs,
                       match_images, resolution_sweep, save_error_curves,
                       save_match_overlay)
from .matcher import CascadeMatcher, PipelineConfig
from .training import (GradCheckReport, progressive_schedule,
                       standard_grad_checks, train)

log = logging.getLogger(__name__)


def parse_detector(text: str) -> dict:
    """'none' | 'nms-5' | 'grid-4' | 'threshold-0.5' -> detector dict."""
    if text == "none":
        return {"kind": "none"}
    kind, sep, arg = text.partition("-")
    try:
        if kind == "nms" and sep:
            return {"kind": "nms", "nms_kernel": int(arg)}
        if kind == "grid" and sep:
            return {"kind": "grid", "grid_cell": int(arg)}
        if kind == "threshold" and sep:
            return {"kind": "threshold", "conf_threshold": float(arg)}
    except ValueError:
        pass
    raise ConfigError(f"bad detector spec {text!r} "
                      "(try none, nms-5, grid-4, threshold-0.5)")


def _detector_from(run: RunConfig, args) -> dict:
    if getattr(args, "detector", None):
        return parse_detector(args.detector)
    return dict(run.section("detector"))


def _load_corpus(path) -> list:
    dirs = corpus_pair_dirs(path)
    if not dirs:
        raise ConfigError(f"no pairs found under {path}")
    return [load_pair(d) for d in dirs]


def _build_model(run: RunConfig, checkpoint=None) -> CascadeMatcher:
    cfg = run.pipeline_config()
    state = manifest = None
    if checkpoint is not None:
        state, manifest = load_checkpoint(checkpoint)
        if "model" in manifest:  # checkpoints carry their own geometry
            cfg = PipelineConfig.from_dict(manifest["model"])
    torch.manual_seed(run.seed)
    model = CascadeMatcher(cfg)
    if state is not None:
        if any(k.startswith("ladder.") for k in state):
            model.enable_ladder()
        load_into(checkpoint, model)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, run: RunConfig) -> int:
    d = run.section("data")
    out = generate_corpus(args.out,
                          n_pairs=args.n or d["n_pairs"],
                          mode=args.mode or d["mode"],
                          seed=run.seed,
                          size=tuple(d["size"]),
                          noise_sigma=d["noise_sigma"],
                          image_dir=args.image_dir or d["image_dir"])
    print(f"wrote corpus to {out}")
    return 0


def cmd_train(args, run: RunConfig) -> int:
    corpus_dir = args.corpus or run.section("data")["corpus"]
    if corpus_dir is None:
        raise ConfigError("train needs --corpus or data.corpus")
    corpus = _load_corpus(corpus_dir)
    model = _build_model(run)
    stage = args.stage or run.section("train")["stage"]
    if stage == "progressive":
        logs = progressive_schedule(model, corpus,
                                    run.train_config(stage="coarse_only",
                                                     steps=args.steps),
                                    out_dir=args.out)
        for name, rows in logs.items():
            print(f"{name}: {len(rows)} steps, "
                  f"final total {rows[-1]['total']:.4f}")
    else:
        cfg = run.train_config(stage=stage, steps=args.steps)
        rows = train(model, corpus, cfg, out_dir=args.out,
                     init_checkpoint=args.init)
        print(f"{stage}: {len(rows)} steps, "
              f"final total {rows[-1]['total']:.4f}")
    print(f"checkpoints under {args.out}")
    return 0


def cmd_match(args, run: RunConfig) -> int:
    model = _build_model(run, args.checkpoint)
    if args.pair:
        pair = load_pair(args.pair)
        image_a, image_b = pair.image_a, pair.image_b
    else:
        if not (args.image_a and args.image_b):
            raise ConfigError("match needs --pair or --image-a/--image-b")
        image_a = load_image(args.image_a)
        image_b = load_image(args.image_b)
    det = _detector_from(run, args)
    matches, _, timings = match_images(model, image_a, image_b, det)
    matches.to_jsonl(args.out)
    print(f"{len(matches)} matches -> {args.out} "
          f"({timings['total'] * 1e3:.1f} ms)")
    if args.overlay:
        save_match_overlay(image_a, image_b, matches, args.overlay)
        print(f"overlay -> {args.overlay}")
    return 0


def _cmd_eval(args, run: RunConfig, task: str) -> int:
    eval_cfg = run.section("eval")
    det = _detector_from(run, args)
    if args.sizes:
        model = _build_model(run, args.checkpoint)
        sizes = [int(s) for s in args.sizes.split(",")]
        report = resolution_sweep(model, sizes, run.section("data")["n_pairs"],
                                  task, det, eval_cfg, seed=run.seed,
                                  noise_sigma=run.section("data")["noise_sigma"])
    else:
        corpus_dir = args.corpus or run.section("data")["holdout"] \
            or run.section("data")["corpus"]
        if corpus_dir is None:
            raise ConfigError("eval needs --corpus (or data.holdout/corpus)")
        pairs = _load_corpus(corpus_dir)
        if args.inject_gt:
            row = evaluate_pairs(None, pairs, task, det, eval_cfg,
                                 seed=run.seed, inject_gt=True)
            report = EvalReport(task, [row])
        elif args.detectors:
            model = _build_model(run, args.checkpoint)
            dets = [parse_detector(t) for t in args.detectors.split(",")]
            report = detector_ablation(model, pairs, dets, task, eval_cfg,
                                       seed=run.seed)
        else:
            model = _build_model(run, args.checkpoint)
            row = evaluate_pairs(model, pairs, task, det, eval_cfg,
                                 seed=run.seed)
            report = EvalReport(task, [row])
    print(report.render())
    if args.out:
        report.to_json(args.out)
        print(f"report -> {args.out}")
    if args.plots:
        plot_dir = Path(args.plots)
        plot_dir.mkdir(parents=True, exist_ok=True)
        curve = save_error_curves(report, plot_dir / f"{task}_recall.png")
        print(f"plot -> {curve}")
    return 0


def cmd_eval_homography(args, run: RunConfig) -> int:
    return _cmd_eval(args, run, "homography")


def cmd_eval_pose(args, run: RunConfig) -> int:
    return _cmd_eval(args, run, "pose")


def cmd_bench(args, run: RunConfig) -> int:
    model = _build_model(run, args.checkpoint)
    size = (args.size, args.size)
    report = bench(model, size, runs=args.runs,
                   det=_detector_from(run, args), seed=run.seed)
    print(report.render())
    if args.out:
        report.to_json(args.out)
        print(f"report -> {args.out}")
    return 0


def cmd_grad_check(args, run: RunConfig) -> int:
    reports = standard_grad_checks(step=args.step, tol=args.tol)
    failed = False
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        extra = f" skipped={sum(r.skipped.values())}" if r.skipped else ""
        print(f"{status}  {r.name:<24} worst rel err {r.worst:.3e}{extra}")
        if not r.passed:
            failed = True
            for name in r.failures():
                print(f"      offending tensor: {name} "
                      f"rel err {r.per_tensor[name]:.3e}")
    return 3 if failed else 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cascadematch",
        description="Cascaded transformer image matching: data, training, "
                    "matching, evaluation, benchmarks.")
    parser.add_argument("--config", help="run config JSON file")
    parser.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                        help="override a config entry (repeatable)")
    parser.add_argument("--seed", type=int, help="override the run seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="number of pairs")
    p.add_argument("--mode", choices=["homography", "two_view"])
    p.add_argument("--image-dir", help="warp user images instead of textures")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a matcher")
    p.add_argument("--corpus", help="corpus directory")
    p.add_argument("--out", required=True, help="metrics + checkpoint dir")
    p.add_argument("--stage",
                   choices=["coarse_only", "cascade_4c", "cascade_2c", "pmt",
                            "progressive"])
    p.add_argument("--steps", type=int, help="step budget (unit budget for "
                                             "the progressive 1:2:1 schedule)")
    p.add_argument("--init", help="initial checkpoint (required for pmt)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("match", help="match two images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image-a")
    p.add_argument("--image-b")
    p.add_argument("--pair", help="corpus pair directory instead of images")
    p.add_argument("--out", required=True, help="matches JSONL path")
    p.add_argument("--detector", help="none | nms-K | grid-C | threshold-T")
    p.add_argument("--overlay", help="write a match-overlay PNG here")
    p.set_defaults(func=cmd_match)

    for task in ("homography", "pose"):
        p = sub.add_parser(f"eval-{task}", help=f"{task} AUC evaluation")
        p.add_argument("--checkpoint")
        p.add_argument("--corpus")
        p.add_argument("--detector", help="none | nms-K | grid-C | threshold-T")
        p.add_argument("--detectors",
                       help="comma-separated detector ablation rows")
        p.add_argument("--sizes", help="comma-separated resolution sweep, "
                                       "e.g. 256,384,512")
        p.add_argument("--inject-gt", action="store_true",
                       help="oracle bypass: score exact GT matches")
        p.add_argument("--out", help="report JSON path")
        p.add_argument("--plots", help="directory for PNG plots")
        p.set_defaults(func=cmd_eval_homography if task == "homography"
                       else cmd_eval_pose)

    p = sub.add_parser("bench", help="per-stage timing benchmark")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--detector", help="none | nms-K | grid-C | threshold-T")
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("grad-check", help="finite-difference gradient checks")
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.set or ())
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        run = load_run_config(args.config, tuple(overrides))
        return args.func(args, run)
    except ValueError as exc:
        # every package error type derives from ValueError: bad inputs
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
