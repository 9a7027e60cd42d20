"""Losses, supervision, progressive training schedule, and gradient checks.

Per-scale focal classification losses drive the matcher; refinement adds a
teacher-forced L2 residual term at the finest scale.  The progressive
schedule trains coarse-only first, then finetunes deeper cascades
(step ratios 1:2:1), and the incremental mode (PMT) freezes the encoder +
coarse blocks, routing cascade features through the trainable ladder.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_into, save_checkpoint
from .geometry import SyntheticPair, gt_correspondence
from .matcher import CascadeMatcher, StageResult

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


STAGES = ("coarse_only", "cascade_4c", "cascade_2c", "pmt")

_STAGE_SCALES = {"coarse_only": (8,), "cascade_4c": (8, 4),
                 "cascade_2c": (8, 4, 2), "pmt": (8, 4, 2)}


@dataclass
class TrainConfig:
    stage: str = "coarse_only"
    steps: int = 200
    lr: float = 1e-3
    seed: int = 0
    gamma: float = 2.0
    loss_kind: str = "focal"  # "ce" drops the modulating factor
    cosine_decay: bool = True
    weight_refine: float = 1.0
    refine_cap: int = 1024  # max residual pairs per step; 0 = unlimited

    def __post_init__(self):
        if self.stage not in STAGES:
            raise TrainingError(f"unknown stage {self.stage!r}")
        if self.loss_kind not in ("focal", "ce"):
            raise TrainingError(f"unknown loss kind {self.loss_kind!r}")
        if self.steps < 1:
            raise TrainingError("steps must be positive")
        if self.refine_cap < 0:
            raise TrainingError("refine_cap must be >= 0")

    @property
    def scales(self) -> tuple[int, ...]:
        return _STAGE_SCALES[self.stage]


@dataclass
class StageSupervision:
    """Ground-truth slots for one stage: rows into StageResult.prob."""

    stride: int
    query_rows: torch.Tensor
    gt_slots: torch.Tensor
    gt_cells: torch.Tensor    # target cell per supervised row
    residual: torch.Tensor    # (gt - cell center) / stride, in cells

    def __len__(self) -> int:
        return len(self.query_rows)


def focal_loss(p_gt: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """Mean of (1 - P)^gamma * (-log P) over ground-truth probabilities."""
    if p_gt.numel() == 0:
        return torch.zeros(())
    # only the log needs the clamp; (1 - P)^gamma is fine at P = 0
    return ((1.0 - p_gt) ** gamma * (-torch.log(p_gt.clamp(min=1e-6)))).mean()


def cross_entropy_loss(p_gt: torch.Tensor) -> torch.Tensor:
    if p_gt.numel() == 0:
        return torch.zeros(())
    return -torch.log(p_gt.clamp(min=1e-6)).mean()


def _classification(p_gt: torch.Tensor, cfg: TrainConfig) -> torch.Tensor:
    if cfg.loss_kind == "ce":
        return cross_entropy_loss(p_gt)
    return focal_loss(p_gt, cfg.gamma)


def _gt_cells(pair: SyntheticPair, stride: int):
    """Target cell per source cell, from the exact warp; -1 where invalid."""
    tgt, valid = gt_correspondence(pair, stride)
    hb, wb = pair.image_b.shape[0] // stride, pair.image_b.shape[1] // stride
    cols = np.floor(tgt[..., 0] / stride).astype(np.int64)
    rows = np.floor(tgt[..., 1] / stride).astype(np.int64)
    inb = valid & (rows >= 0) & (rows < hb) & (cols >= 0) & (cols < wb)
    cells = np.where(inb, rows * wb + cols, -1)
    return (torch.from_numpy(cells.reshape(-1)),
            torch.from_numpy(tgt.reshape(-1, 2)))


def coarse_supervision(pair: SyntheticPair, stage: StageResult):
    """(source cells, gt target cells) for the full-matrix coarse stage."""
    cells, _ = _gt_cells(pair, stage.stride)
    src = torch.arange(len(cells))
    keep = cells >= 0
    return src[keep], cells[keep]


def coarse_loss(stage: StageResult, src_cells: torch.Tensor,
                gt_cells: torch.Tensor, cfg: TrainConfig) -> torch.Tensor:
    """Focal form applied to the full dual-softmax matrix."""
    if len(src_cells) == 0:
        log.warning("coarse stage has no supervised cells; contributing 0")
        return torch.zeros(())
    return _classification(stage.prob[src_cells, gt_cells], cfg)


def build_supervision(pair: SyntheticPair, stage: StageResult) -> StageSupervision:
    """Queries whose GT target lands inside their candidate set.

    The GT slot is the candidate holding the cell that contains the warped
    source center; queries whose GT leaves their window are excluded.
    """
    if stage.cand is None:
        raise TrainingError("coarse stages are supervised via coarse_loss")
    cells, tgt = _gt_cells(pair, stage.stride)
    q = stage.query_cells
    want = cells[q]
    hit = (stage.cand.indices == want[:, None]) & stage.cand.valid
    has = hit.any(dim=1) & (want >= 0)
    rows = has.nonzero(as_tuple=True)[0]
    slots = hit[rows].float().argmax(dim=1)
    gt_cell = want[rows]
    wb = stage.hw_b[1]
    centers = torch.stack([(gt_cell % wb).double() + 0.5,
                           (gt_cell // wb).double() + 0.5], dim=1)
    residual = tgt[q[rows]] / stage.stride - centers
    return StageSupervision(stage.stride, rows, slots, gt_cell,
                            residual.float())


def stage_loss(stage: StageResult, sup: StageSupervision,
               cfg: TrainConfig) -> torch.Tensor:
    if len(sup) == 0:
        log.warning("stride-%d stage has no supervised queries; contributing 0",
                    stage.stride)
        return torch.zeros(())
    return _classification(stage.prob[sup.query_rows, sup.gt_slots], cfg)


def refine_loss(model: CascadeMatcher, result, sup: StageSupervision,
                cap: int = 0) -> torch.Tensor:
    """Teacher-forced L2: refine GT cell pairs toward the exact residual.

    The GT target cell contains the warped point, so the true residual is
    within half a cell and always inside the refinement window.  With
    ``cap`` > 0 at most that many pairs are refined per step (an evenly
    strided subsample over the supervised rows) to bound the step cost on
    dense grids.
    """
    if model.refiner is None or result.final_features is None or len(sup) == 0:
        return torch.zeros(())
    fa, fb = result.final_features
    if fa.stride != sup.stride:
        return torch.zeros(())
    ha, wa = fa.hw
    hb, wb = fb.hw
    stage = result.stages[-1]
    rows = torch.arange(len(sup))
    if cap and len(sup) > cap:
        rows = torch.linspace(0, len(sup) - 1, cap).round().long()
    cells_a = stage.query_cells[sup.query_rows[rows]]
    pred = model.refiner.refine_cells(fa.features.view(ha, wa, -1),
                                      fb.features.view(hb, wb, -1),
                                      cells_a, sup.gt_cells[rows])
    return ((pred - sup.residual[rows]) ** 2).sum(dim=1).mean()


def compute_losses(model: CascadeMatcher, pair: SyntheticPair,
                   cfg: TrainConfig) -> dict[str, torch.Tensor]:
    """All loss terms for one pair; keys 'coarse', 'stage4', 'stage2', 'refine'."""
    result = model(pair.image_a, pair.image_b, scales=cfg.scales,
                   collect_matches=False)
    terms: dict[str, torch.Tensor] = {}
    coarse = result.stages[0]
    src, gt = coarse_supervision(pair, coarse)
    terms["coarse"] = coarse_loss(coarse, src, gt, cfg)
    last_sup = None
    for stage in result.stages[1:]:
        sup = build_supervision(pair, stage)
        terms[f"stage{stage.stride}"] = stage_loss(stage, sup, cfg)
        if stage.stride == cfg.scales[-1]:
            last_sup = sup
    if cfg.scales[-1] == 2 and last_sup is not None:
        terms["refine"] = cfg.weight_refine * refine_loss(
            model, result, last_sup, cap=cfg.refine_cap)
    return terms


def trainable_parameters(model: CascadeMatcher, pmt: bool):
    params = []
    for mod in model.trainable_modules(pmt):
        params.extend(mod.parameters())
    return params


def frozen_hash(model: CascadeMatcher) -> str:
    """Digest of the frozen block (encoder + coarse attention) parameters."""
    digest = hashlib.sha256()
    for mod in model.frozen_modules():
        for name, p in sorted(mod.named_parameters()):
            digest.update(name.encode())
            digest.update(p.detach().numpy().tobytes())
    return digest.hexdigest()


def train(model: CascadeMatcher, corpus: list[SyntheticPair], cfg: TrainConfig,
          out_dir=None, init_checkpoint=None) -> list[dict]:
    """Optimize the model on the corpus; returns the per-step metric rows.

    PMT freezes the encoder + coarse blocks (their gradients never exist)
    and requires a checkpoint to start from.
    """
    if not corpus:
        raise TrainingError("empty training corpus")
    pmt = cfg.stage == "pmt"
    if pmt:
        if init_checkpoint is None:
            raise TrainingError("pmt stage requires an initial checkpoint")
        load_into(init_checkpoint, model)
        model.enable_ladder()
        model.pmt_mode = True
    elif init_checkpoint is not None:
        load_into(init_checkpoint, model)

    torch.manual_seed(cfg.seed)
    params = trainable_parameters(model, pmt)
    opt = torch.optim.Adam(params, lr=cfg.lr)
    sched = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.steps)
             if cfg.cosine_decay else None)

    metrics: list[dict] = []
    model.train()
    for step in range(cfg.steps):
        # deterministic cycling: every window of len(corpus) steps sees the
        # same pair multiset, so windowed loss means compare cleanly
        pair = corpus[step % len(corpus)]
        terms = compute_losses(model, pair, cfg)
        live = [t for t in terms.values() if t.requires_grad]
        if not live:
            raise TrainingError("no loss term carries gradients; "
                                "check stage/scales configuration")
        total = sum(live)
        opt.zero_grad()
        total.backward()
        opt.step()
        if sched is not None:
            sched.step()
        row = {"step": step, "stage": cfg.stage,
               "total": float(sum(t.detach() for t in terms.values())),
               "lr": float(opt.param_groups[0]["lr"])}
        row.update({k: float(v.detach()) for k, v in terms.items()})
        metrics.append(row)
    model.eval()

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.jsonl", "w") as fh:
            for row in metrics:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        save_checkpoint(out / "checkpoint", model,
                        manifest={"stage": cfg.stage, "steps": cfg.steps,
                                  "seed": cfg.seed,
                                  "model": model.cfg.to_dict()})
    return metrics


SCHEDULE = (("coarse_only", 1), ("cascade_4c", 2), ("cascade_2c", 1))


def progressive_schedule(model: CascadeMatcher, corpus: list[SyntheticPair],
                         base: TrainConfig, out_dir=None
                         ) -> dict[str, list[dict]]:
    """coarse_only -> cascade_4c -> cascade_2c at step ratios 1:2:1.

    ``base.steps`` is the unit budget; each stage checkpoint lands in
    ``out_dir/<stage>/checkpoint``.
    """
    logs = {}
    for stage, ratio in SCHEDULE:
        cfg = replace(base, stage=stage, steps=ratio * base.steps)
        stage_dir = None if out_dir is None else Path(out_dir) / stage
        logs[stage] = train(model, corpus, cfg, out_dir=stage_dir)
    return logs


def moving_average(values, window: int) -> list[float]:
    """Trailing window means, one per full window position."""
    values = list(values)
    if len(values) < window:
        return []
    return [sum(values[i:i + window]) / window
            for i in range(len(values) - window + 1)]


# -- gradient checking --------------------------------------------------------


@dataclass
class GradCheckReport:
    name: str
    tol: float
    per_tensor: dict[str, float] = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.per_tensor.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(v < self.tol for v in self.per_tensor.values())

    def failures(self) -> list[str]:
        return sorted(k for k, v in self.per_tensor.items() if v >= self.tol)


def grad_check(loss_fn, tensors: dict[str, torch.Tensor], name: str = "check",
               step: float = 1e-3, tol: float = 1e-4,
               max_entries: int = 3, seed: int = 0,
               kink_rel: float = 1e-3) -> GradCheckReport:
    """Central finite differences vs autograd, per parameter tensor.

    Central differences are only meaningful where the loss is smooth along
    the probed coordinate; a probe whose forward and backward one-sided
    differences disagree straddles a kink (ReLU boundary) and is re-drawn
    instead of counted.  Relative error uses max(|grad|_inf, |fd|_inf, 1e-8)
    as denominator so near-zero gradient tensors do not inflate the ratio.
    Tensors must be float64 leaves with requires_grad.
    """
    for name_, t in tensors.items():
        if t.dtype != torch.float64:
            raise TrainingError(f"grad_check needs float64 tensors ({name_})")
    loss = loss_fn()
    base = loss.item()
    grads = torch.autograd.grad(loss, list(tensors.values()),
                                allow_unused=True)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(name, tol)
    for (tname, t), g in zip(tensors.items(), grads):
        g = torch.zeros_like(t) if g is None else g
        flat = t.detach().reshape(-1)
        n = flat.numel()
        order = rng.permutation(n)
        taken = skipped = 0
        worst, fd_scale = 0.0, 0.0
        fallback = None  # least-asymmetric probe, if every entry is kinked
        for i in order:
            if taken >= min(max_entries, n):
                break
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
                hi = loss_fn().item()
                flat[i] = orig - step
                lo = loss_fn().item()
                flat[i] = orig
            fd_fwd = (hi - base) / step
            fd_bwd = (base - lo) / step
            gap = abs(fd_fwd - fd_bwd)
            err = abs((hi - lo) / (2 * step) - g.reshape(-1)[i].item())
            if gap > kink_rel * max(abs(fd_fwd), abs(fd_bwd), 1.0):
                skipped += 1
                if fallback is None or gap < fallback[0]:
                    fallback = (gap, err, abs((hi - lo) / (2 * step)))
                continue
            taken += 1
            worst = max(worst, err)
            fd_scale = max(fd_scale, abs((hi - lo) / (2 * step)))
        if taken == 0 and fallback is not None:
            _, worst, fd_scale = fallback
        denom = max(g.abs().max().item(), fd_scale, 1e-8)
        report.per_tensor[tname] = worst / denom
        if skipped:
            report.skipped[tname] = skipped
    return report


def _check_focal(step: float) -> GradCheckReport:
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(8, 5, generator=g, dtype=torch.float64,
                         requires_grad=True)
    gt = torch.arange(8) % 5

    def loss():
        p = torch.softmax(logits, dim=1)
        return focal_loss(p[torch.arange(8), gt])

    return grad_check(loss, {"logits": logits}, "focal_loss", step=step)


def _check_soft_argmax(step: float) -> GradCheckReport:
    from .refine import soft_argmax_2d

    g = torch.Generator().manual_seed(1)
    sim = torch.randn(4, 25, generator=g, dtype=torch.float64,
                      requires_grad=True)

    def loss():
        heat = torch.softmax(sim, dim=1).view(4, 5, 5)
        return soft_argmax_2d(heat).pow(2).sum()

    return grad_check(loss, {"similarity": sim}, "soft_argmax", step=step)


def _check_cross_attention(kind: str, step: float) -> GradCheckReport:
    from .attention import (AttentionConfig, CrossAttentionBlock, TokenGrid,
                            build_candidates_lw, build_candidates_mt)

    torch.manual_seed(4)
    block = CrossAttentionBlock(AttentionConfig(dim=8, heads=2)).double()
    g = torch.Generator().manual_seed(5)
    qf = torch.randn(16, 8, generator=g, dtype=torch.float64,
                     requires_grad=True)
    kf = torch.randn(36, 8, generator=g, dtype=torch.float64,
                     requires_grad=True)
    if kind == "lw":
        top1 = torch.randint(0, 9, (16,), generator=g)
        cand = build_candidates_lw(top1, (3, 3), window=4)
    else:
        topt = torch.stack([torch.randperm(9, generator=g)[:2]
                            for _ in range(16)])
        cand = build_candidates_mt(topt, (3, 3))

    def loss():
        out = block(TokenGrid(qf, (4, 4), 4), TokenGrid(kf, (6, 6), 4), cand)
        return out.features.pow(2).sum()

    tensors = {"query": qf, "key": kf}
    tensors.update({f"param.{n}": p for n, p in block.named_parameters()})
    return grad_check(loss, tensors, f"cross_attention[{kind}]", step=step)


def _check_coarse_loss(step: float) -> GradCheckReport:
    from .matcher import dual_softmax

    g = torch.Generator().manual_seed(6)
    fa = torch.randn(12, 8, generator=g, dtype=torch.float64,
                     requires_grad=True)
    fb = torch.randn(12, 8, generator=g, dtype=torch.float64,
                     requires_grad=True)
    gt = torch.randperm(12, generator=g)

    def loss():
        sim = (F.normalize(fa, dim=1) @ F.normalize(fb, dim=1).T) / 0.1
        return focal_loss(dual_softmax(sim)[torch.arange(12), gt])

    return grad_check(loss, {"features_a": fa, "features_b": fb},
                      "coarse_loss", step=step)


def _check_attention_variant(variant: str, step: float) -> GradCheckReport:
    from .attention import AttentionConfig, SelfAttentionBlock, TokenGrid

    torch.manual_seed(2)
    cfg = AttentionConfig(variant=variant, dim=8, heads=2, lsa_window=3,
                          gsa_rate=2, topk=4, pola_query=3, pola_key=5)
    block = SelfAttentionBlock(cfg).double()
    g = torch.Generator().manual_seed(3)
    feats = torch.randn(36, 8, generator=g, dtype=torch.float64,
                        requires_grad=True)
    extras = {}
    if variant == "topk":
        prob = torch.softmax(torch.randn(9, 9, generator=g,
                                         dtype=torch.float64), dim=1)
        extras = dict(coarse_prob=prob, coarse_hw=(3, 3), side="a")

    def loss():
        return block(TokenGrid(feats, (6, 6), 4), **extras).features.pow(2).sum()

    tensors = {"features": feats}
    tensors.update({f"param.{n}": p for n, p in block.named_parameters()})
    return grad_check(loss, tensors, f"self_attention[{variant}]", step=step)


def standard_grad_checks(step: float = 1e-3, tol: float = 1e-4
                         ) -> list[GradCheckReport]:
    """The canned verification battery behind the grad-check CLI command."""
    from .attention import SELF_VARIANTS

    reports = [_check_focal(step), _check_coarse_loss(step),
               _check_soft_argmax(step), _check_cross_attention("lw", step),
               _check_cross_attention("mt", step)]
    for variant in SELF_VARIANTS:
        reports.append(_check_attention_variant(variant, step))
    for r in reports:
        r.tol = tol
    return reports
