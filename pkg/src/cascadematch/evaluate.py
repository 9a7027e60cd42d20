"""Evaluation harness: AUC tables, detector ablations, sweeps, benchmarks.

Reports are JSON documents of rows; rows are sorted before writing so that
aggregation order never matters, and a saved report re-renders to the
identical table.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import pad_to_multiple, render_homography_pair, render_two_view_pair
from .detect import ConfidenceMap, grid_detect, nms_detect, threshold_filter
from .geometry import (EstimationFailure, MatchSet, SyntheticPair, auc,
                       corner_error, estimate_homography_ransac,
                       estimate_pose_ransac, grid_cell_centers,
                       gt_correspondence, pose_error)
from .matcher import CascadeMatcher


class EvalError(ValueError):
    pass


STAGE_ORDER = ("encode", "coarse_attention", "coarse_match",
               "cascade4_attention", "cascade4_match",
               "cascade2_attention", "cascade2_match",
               "refine", "detect", "total")


def detector_label(det: dict) -> str:
    kind = det.get("kind", "none")
    if kind == "nms":
        return f"nms-{det['nms_kernel']}"
    if kind == "grid":
        return f"grid-{det['grid_cell']}"
    if kind == "threshold":
        return f"threshold-{det['conf_threshold']:g}"
    return "none"


def apply_detector(matches: MatchSet, cmap: ConfidenceMap,
                   det: dict) -> MatchSet:
    kind = det.get("kind", "none")
    if kind == "none":
        return matches
    if kind == "nms":
        return nms_detect(cmap, det["nms_kernel"], matches)
    if kind == "grid":
        return grid_detect(cmap, det["grid_cell"], matches)
    if kind == "threshold":
        return threshold_filter(matches, det["conf_threshold"])
    raise EvalError(f"unknown detector kind {kind!r}")


def match_images(model: CascadeMatcher, image_a, image_b, det=None,
                 scales=None):
    """Reflect-pad both images to the model's coarse stride, run the
    pipeline, and crop matches back to the original pixel frames.

    ``scales`` truncates the cascade to a prefix of the model's scales
    (e.g. ``(8,)`` stops after the coarse stage).  Returns (matches,
    finest confidence map, timings in seconds).
    """
    ha, wa = image_a.shape[:2]
    hb, wb = image_b.shape[:2]
    mult = model.cfg.scales[0]
    a = pad_to_multiple(image_a, mult)
    b = pad_to_multiple(image_b, mult)
    with torch.no_grad():
        result = model(a, b, scales=scales)
    matches = result.matches
    if len(matches):
        keep = ((matches.xa < wa) & (matches.ya < ha) &
                (matches.xb < wb) & (matches.yb < hb))
        matches = matches.take(keep)
    timings = dict(result.timings)
    t0 = time.perf_counter()
    if det is not None:
        matches = apply_detector(matches, result.confidence, det)
    timings["detect"] = time.perf_counter() - t0
    return matches, result.confidence, timings


def gt_matches(pair: SyntheticPair, stride: int = 8) -> MatchSet:
    """Exact ground-truth correspondences on the stride grid (oracle
    bypass): validates the estimation/metric layer with the model out of
    the loop."""
    tgt, valid = gt_correspondence(pair, stride)
    centers = grid_cell_centers(valid.shape, stride).reshape(-1, 2)
    v = valid.reshape(-1)
    t = tgt.reshape(-1, 2)
    n = int(v.sum())
    return MatchSet(xa=centers[v, 0], ya=centers[v, 1],
                    xb=t[v, 0], yb=t[v, 1],
                    conf=np.ones(n), scale=np.full(n, 1.0 / stride))


def evaluate_pairs(model, pairs: list[SyntheticPair], task: str, det: dict,
                   eval_cfg: dict, seed: int = 0, inject_gt: bool = False,
                   label: str | None = None, scales=None) -> dict:
    """One report row: AUC table, match count, failures, mean timings."""
    if task not in ("homography", "pose"):
        raise EvalError(f"unknown eval task {task!r}")
    if not pairs:
        raise EvalError("no pairs to evaluate")
    errors: list[float] = []
    counts: list[int] = []
    times: dict[str, list[float]] = {}
    for i, pair in enumerate(pairs):
        if pair.is_homography != (task == "homography"):
            raise EvalError(f"pair {i} truth does not fit the {task} task")
        if inject_gt:
            matches = gt_matches(pair)
            timings = {}
        else:
            matches, _, timings = match_images(model, pair.image_a,
                                               pair.image_b, det, scales)
        counts.append(len(matches))
        for key, value in timings.items():
            times.setdefault(key, []).append(value)
        try:
            if task == "homography":
                est, _ = estimate_homography_ransac(
                    matches, threshold_px=eval_cfg["ransac_threshold"],
                    iters=eval_cfg["ransac_iters"], seed=seed + i)
                err = corner_error(est, pair.truth, pair.image_a.shape[:2])
            else:
                est, _ = estimate_pose_ransac(
                    matches, pair.truth.k, pair.truth.k,
                    threshold_px=eval_cfg["ransac_threshold"],
                    iters=eval_cfg["ransac_iters"], seed=seed + i)
                err = pose_error(est, pair.truth.pose)
        except EstimationFailure:
            err = float("inf")
        errors.append(float(err))

    unit = "px" if task == "homography" else "deg"
    thresholds = eval_cfg["auc_px" if task == "homography" else "auc_deg"]
    return {
        "task": task,
        "label": label or detector_label(det) + (":gt" if inject_gt else ""),
        "detector": dict(det),
        "size": [int(s) for s in pairs[0].image_a.shape[:2]],
        "n_pairs": len(pairs),
        "auc": {f"{t:g}{unit}": auc(errors, t) for t in thresholds},
        "mean_matches": float(np.mean(counts)),
        "failures": int(sum(np.isinf(errors))),
        "errors": errors,
        "timings_ms": {k: float(np.mean(v) * 1e3) for k, v in times.items()},
    }


def eval_homography(model, pairs, det, eval_cfg, seed=0,
                    inject_gt=False) -> "EvalReport":
    row = evaluate_pairs(model, pairs, "homography", det, eval_cfg,
                         seed=seed, inject_gt=inject_gt)
    return EvalReport("homography", [row])


def eval_pose(model, pairs, det, eval_cfg, seed=0,
              inject_gt=False) -> "EvalReport":
    row = evaluate_pairs(model, pairs, "pose", det, eval_cfg,
                         seed=seed, inject_gt=inject_gt)
    return EvalReport("pose", [row])


def detector_ablation(model, pairs, detectors: list[dict], task: str,
                      eval_cfg: dict, seed: int = 0) -> "EvalReport":
    rows = [evaluate_pairs(model, pairs, task, det, eval_cfg, seed=seed)
            for det in detectors]
    return EvalReport(task, rows)


def resolution_sweep(model, sizes, n_pairs: int, task: str, det: dict,
                     eval_cfg: dict, seed: int = 0,
                     noise_sigma: float = 0.02) -> "EvalReport":
    """One row per image size; pairs rendered fresh at each resolution."""
    render = (render_homography_pair if task == "homography"
              else render_two_view_pair)
    rows = []
    for size in sizes:
        pairs = [render(seed * 100_003 + i, (size, size),
                        noise_sigma=noise_sigma) for i in range(n_pairs)]
        rows.append(evaluate_pairs(model, pairs, task, det, eval_cfg,
                                   seed=seed,
                                   label=f"{detector_label(det)}@{size}"))
    return EvalReport(task, rows)


def bench(model, size=(256, 256), runs: int = 5, det: dict | None = None,
          seed: int = 0) -> "EvalReport":
    """Median per-stage wall clock over warm runs, in milliseconds."""
    if runs < 5:
        raise EvalError("bench wants the median of at least 5 runs")
    det = det if det is not None else {"kind": "nms", "nms_kernel": 5}
    pair = render_homography_pair(seed, tuple(size))

    def once() -> dict:
        _, _, timings = match_images(model, pair.image_a, pair.image_b, det)
        timings["total"] = timings["total"] + timings["detect"]
        return timings

    once()  # warm-up: lazy allocations, first-touch caches
    samples = [once() for _ in range(runs)]
    keys = sorted(set().union(*(s.keys() for s in samples)))
    rows = [{"stage": k,
             "ms": float(statistics.median(s[k] for s in samples)) * 1e3}
            for k in keys]
    return EvalReport("bench", rows)


def _bench_key(row: dict):
    name = row["stage"]
    known = name in STAGE_ORDER
    return (0 if known else 1,
            STAGE_ORDER.index(name) if known else 0, name)


@dataclass
class EvalReport:
    """Rows of one evaluation or benchmark; JSON round-trips exactly."""

    task: str
    rows: list[dict]

    def __post_init__(self):
        self.rows = self.sorted_rows()
        self.validate()

    def sorted_rows(self) -> list[dict]:
        if self.task == "bench":
            return sorted(self.rows, key=_bench_key)
        return sorted(self.rows,
                      key=lambda r: (str(r.get("label")), str(r.get("size"))))

    def validate(self) -> None:
        for row in self.rows:
            for key, value in row.get("auc", {}).items():
                if not 0.0 <= value <= 1.0:
                    raise EvalError(f"AUC {key} out of [0,1]: {value}")
            for key, value in row.get("timings_ms", {}).items():
                if value < 0:
                    raise EvalError(f"negative timing {key}: {value}")
            if row.get("ms", 0.0) < 0:
                raise EvalError("negative benchmark timing")

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"task": self.task, "rows": self.rows}, fh,
                      indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "EvalReport":
        with open(path) as fh:
            doc = json.load(fh)
        return cls(doc["task"], doc["rows"])

    def render(self) -> str:
        if self.task == "bench":
            width = max(len(r["stage"]) for r in self.rows)
            lines = [f"{'stage':<{width}}  ms",
                     *(f"{r['stage']:<{width}}  {r['ms']:.2f}"
                       for r in self.rows)]
            return "\n".join(lines)
        auc_keys = sorted({k for r in self.rows for k in r["auc"]},
                          key=lambda k: float(k.rstrip("pxdeg")))
        header = ["label", "size", "pairs", "matches", "fail"]
        header += [f"AUC@{k}" for k in auc_keys]
        table = [header]
        for r in self.rows:
            table.append([r["label"], "x".join(map(str, r["size"])),
                          str(r["n_pairs"]), f"{r['mean_matches']:.1f}",
                          str(r["failures"])]
                         + [f"{r['auc'][k]:.4f}" for k in auc_keys])
        widths = [max(len(row[i]) for row in table)
                  for i in range(len(header))]
        return "\n".join("  ".join(cell.ljust(w)
                                   for cell, w in zip(row, widths)).rstrip()
                         for row in table)


# ---------------------------------------------------------------------------
# plots (static PNG artifacts)
# ---------------------------------------------------------------------------


def save_error_curves(report: EvalReport, path) -> Path:
    """Cumulative error curves (recall vs error), one line per row."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5.5, 4))
    xmax = 0.0
    for row in report.rows:
        e = np.sort(np.asarray(row["errors"], dtype=np.float64))
        n = len(e)
        finite = e[np.isfinite(e)]
        if n == 0:
            continue
        recall = np.arange(1, len(finite) + 1) / n
        ax.step(np.concatenate([[0.0], finite]),
                np.concatenate([[0.0], recall]),
                where="post", label=row["label"])
        thr = max((float(k.rstrip("pxdeg")) for k in row["auc"]), default=0.0)
        xmax = max(xmax, thr)
    unit = "px" if report.task == "homography" else "deg"
    ax.set_xlim(0.0, xmax * 1.2 if xmax else None)
    ax.set_ylim(0.0, 1.02)
    ax.set_xlabel(f"error ({unit})")
    ax.set_ylabel("recall")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_match_overlay(image_a: np.ndarray, image_b: np.ndarray,
                       matches: MatchSet, path,
                       max_lines: int = 200) -> Path:
    """Side-by-side images with correspondence lines (subsampled)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ha, wa = image_a.shape[:2]
    hb, wb = image_b.shape[:2]
    canvas = np.zeros((max(ha, hb), wa + wb))
    canvas[:ha, :wa] = image_a
    canvas[:hb, wa:] = image_b
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.imshow(canvas, cmap="gray", vmin=0.0, vmax=1.0)
    n = len(matches)
    idx = np.arange(n)
    if n > max_lines:
        idx = np.linspace(0, n - 1, max_lines).astype(int)
    for i in idx:
        ax.plot([matches.xa[i], matches.xb[i] + wa],
                [matches.ya[i], matches.yb[i]],
                linewidth=0.5, alpha=0.6,
                color=plt.cm.viridis(matches.conf[i]))
    ax.set_axis_off()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
