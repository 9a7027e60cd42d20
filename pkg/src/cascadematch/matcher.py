"""Cascaded matching: coarse dual-softmax + candidate-restricted stages.

The pipeline encodes both images, matches at the coarse stride with
dual-softmax + mutual-nearest selection, then walks the cascade strides:
matched parents spawn their 2x2 children as queries, children inherit
local candidates (LW window or MT top-t children) from their parent's
match, attention blocks run per the stage's interleave pattern, and the
local similarity softmax plus a cycle filter decide the stage's matches.
Coordinates are cell centers; the refinement module adds sub-pixel
residuals at the finest scale.

Similarity heads L2-normalize features before the temperature division,
bounding logits to +-1/tau for stable small-scale training.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import (
    AttentionConfig,
    CandidateSet,
    CrossAttentionBlock,
    FullCrossAttentionBlock,
    SelfAttentionBlock,
    TokenGrid,
    build_candidates_lw,
    build_candidates_mt,
    positional_encode,
)
from .detect import ConfidenceMap
from .encoder import LadderEncoder, PyramidEncoder
from .geometry import MatchSet
from .refine import SubpixelRefiner


class MatcherError(ValueError):
    pass


_DEFAULT_PATTERNS = {4: ("self", "cross", "self", "cross"),
                     2: ("cross", "self", "cross")}


@dataclass
class PipelineConfig:
    """Scales are strides, coarse first; patterns index by stride."""

    scales: tuple[int, ...] = (8, 4, 2)
    channels: tuple[int, int, int] = (32, 64, 96)
    heads: int = 4
    temperature: float = 0.1
    threshold: float = 0.2
    coarse_blocks: int = 6
    coarse_self_variant: str = "linear"
    coarse_cross_kernel: str = "linear"
    self_variant: str = "lsa"
    cross_variant: str = "lw"
    lw_window: int = 10
    mt_topt: int = 32
    self_params: dict = field(default_factory=dict)
    refine: bool = True
    train_hw: tuple[int, int] | None = None
    stage_patterns: dict = field(default_factory=lambda: dict(_DEFAULT_PATTERNS))

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        if not self.scales or any(s not in (16, 8, 4, 2) for s in self.scales):
            raise MatcherError(f"unsupported scales {self.scales}")
        for a, b in zip(self.scales, self.scales[1:]):
            if a != 2 * b:
                raise MatcherError("scales must halve stride stage by stage")
        if not 0.0 <= self.threshold <= 1.0:
            raise MatcherError("threshold must lie in [0, 1]")
        if self.temperature <= 0:
            raise MatcherError("temperature must be positive")
        if self.cross_variant not in ("lw", "mt"):
            raise MatcherError(f"unknown cross variant {self.cross_variant!r}")
        self.stage_patterns = {int(k): tuple(v)
                               for k, v in self.stage_patterns.items()}
        for s in self.scales[1:]:
            pattern = self.stage_patterns.get(s)
            if not pattern or any(kind not in ("self", "cross") for kind in pattern):
                raise MatcherError(f"missing or bad block pattern for stride {s}")

    def to_dict(self) -> dict:
        """JSON-safe form (tuples to lists, pattern keys to strings)."""
        return {
            "scales": list(self.scales),
            "channels": list(self.channels),
            "heads": self.heads,
            "temperature": self.temperature,
            "threshold": self.threshold,
            "coarse_blocks": self.coarse_blocks,
            "coarse_self_variant": self.coarse_self_variant,
            "coarse_cross_kernel": self.coarse_cross_kernel,
            "self_variant": self.self_variant,
            "cross_variant": self.cross_variant,
            "lw_window": self.lw_window,
            "mt_topt": self.mt_topt,
            "self_params": dict(self.self_params),
            "refine": self.refine,
            "train_hw": list(self.train_hw) if self.train_hw else None,
            "stage_patterns": {str(k): list(v)
                               for k, v in self.stage_patterns.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        for key in ("scales", "channels"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("train_hw") is not None:
            d["train_hw"] = tuple(d["train_hw"])
        if "stage_patterns" in d:
            if d["stage_patterns"] is None:
                d.pop("stage_patterns")
            else:
                d["stage_patterns"] = {int(k): tuple(v)
                                       for k, v in d["stage_patterns"].items()}
        return cls(**d)

    def stride_channels(self, stride: int) -> int:
        c1, c2, c3 = self.channels
        return {16: c3, 8: c3, 4: c2, 2: c1}[stride]

    def attention_config(self, stride: int, variant: str) -> AttentionConfig:
        return AttentionConfig(variant=variant, dim=self.stride_channels(stride),
                               heads=self.heads, lw_window=self.lw_window,
                               mt_topt=self.mt_topt, **self.self_params)


@dataclass
class StageResult:
    """Per-query matching state at one stride.

    ``prob`` is [Q, k] over candidates (coarse stage: [Q, N_target] over the
    full grid, cand=None).  ``top1`` holds target cell indices.
    """

    stride: int
    hw_a: tuple[int, int]
    hw_b: tuple[int, int]
    query_cells: torch.Tensor
    prob: torch.Tensor
    top1: torch.Tensor
    conf: torch.Tensor
    matched: torch.Tensor
    cand: CandidateSet | None = None

    def validate(self):
        if len(self.query_cells):
            if self.prob.min() < 0 or self.prob.max() > 1 + 1e-6:
                raise MatcherError("probabilities must lie in [0, 1]")
            if self.cand is not None:
                # dual-softmax (coarse) rows are products and sum below 1;
                # candidate softmax rows must be proper distributions
                sums = (self.prob * self.cand.valid).sum(dim=1)
                if (sums - 1.0).abs().max() > 1e-6:
                    raise MatcherError("probability rows must sum to 1 over valid slots")
            if (self.conf - self.prob.max(dim=1).values).abs().max() > 1e-7:
                raise MatcherError("confidence must equal the row maximum")
        return self

    def matched_pairs(self) -> tuple[torch.Tensor, torch.Tensor]:
        sel = self.matched
        return self.query_cells[sel], self.top1[sel]


@dataclass
class PipelineResult:
    matches: MatchSet
    stages: list
    confidence_maps: dict
    timings: dict
    final_features: tuple | None = None  # finest-stage (grid_a, grid_b)

    @property
    def confidence(self) -> ConfidenceMap:
        """Finest-scale map, the one detection consumes."""
        return self.confidence_maps[min(self.confidence_maps)]


def dual_softmax(sim: torch.Tensor) -> torch.Tensor:
    return torch.softmax(sim, dim=1) * torch.softmax(sim, dim=0)


def _unit(feats: torch.Tensor) -> torch.Tensor:
    return F.normalize(feats, p=2, dim=-1, eps=1e-8)


def cycle_filter(top1: torch.Tensor, query_cells: torch.Tensor,
                 rev_top1: torch.Tensor, rev_has: torch.Tensor) -> torch.Tensor:
    """Keep query i iff its target's reverse top-1 is i's own cell.

    ``rev_top1[t]`` is the best source cell of target cell t (lowest index
    on ties); ``rev_has`` marks targets with any reverse score.
    """
    if top1.numel() == 0:
        return torch.zeros(0, dtype=torch.bool)
    return rev_has[top1] & (rev_top1[top1] == query_cells)


def reverse_from_matrix(prob: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-target best source cell from a full [N_src, N_tgt] matrix."""
    rev = prob.argmax(dim=0)
    return rev, torch.ones(prob.shape[1], dtype=torch.bool)


def reverse_from_candidates(prob: torch.Tensor, cand: CandidateSet,
                            query_cells: torch.Tensor,
                            n_targets: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-target best source over the union of candidate slots.

    Ties resolve to the lowest source cell; targets outside every valid
    candidate row report rev_has=False.
    """
    flat_t = cand.indices.reshape(-1)
    flat_v = cand.valid.reshape(-1)
    flat_s = prob.reshape(-1).detach()
    flat_q = query_cells[:, None].expand_as(cand.indices).reshape(-1)

    flat_t = flat_t[flat_v]
    flat_s = flat_s[flat_v]
    flat_q = flat_q[flat_v]

    best = torch.full((n_targets,), -1.0, dtype=flat_s.dtype)
    best.scatter_reduce_(0, flat_t, flat_s, reduce="amax", include_self=True)
    has = best >= 0.0
    winner = flat_s == best[flat_t]
    rev = torch.full((n_targets,), torch.iinfo(torch.long).max, dtype=torch.long)
    rev.scatter_reduce_(0, flat_t[winner], flat_q[winner], reduce="amin",
                        include_self=True)
    rev = torch.where(has, rev, torch.zeros_like(rev))
    return rev, has


def coarse_match(grid_a: TokenGrid, grid_b: TokenGrid, cfg: PipelineConfig,
                 blocks: tuple = (), timings: dict | None = None) -> StageResult:
    """Interleaved blocks + dual-softmax + mutual-nearest over full grids."""
    if grid_a.dim != grid_b.dim:
        raise MatcherError(f"channel mismatch {grid_a.dim} vs {grid_b.dim}")
    t0 = time.perf_counter()
    ga, gb = grid_a, grid_b
    for kind, block in blocks:
        if kind == "self":
            ga, gb = block(ga), block(gb)
        else:
            ga, gb = block(ga, gb), block(gb, ga)
    t1 = time.perf_counter()
    sim = _unit(ga.features) @ _unit(gb.features).T / cfg.temperature
    prob = dual_softmax(sim)
    conf, top1 = prob.max(dim=1)
    cells = torch.arange(prob.shape[0])
    rev, has = reverse_from_matrix(prob)
    matched = cycle_filter(top1, cells, rev, has) & (conf > cfg.threshold)
    if timings is not None:
        timings["coarse_attention"] = t1 - t0
        timings["coarse_match"] = time.perf_counter() - t1
    return StageResult(grid_a.stride, grid_a.hw, grid_b.hw, cells, prob,
                       top1, conf, matched, cand=None)


def _parent_index_map(fine_hw: tuple[int, int],
                      parent_hw: tuple[int, int]) -> torch.Tensor:
    fh, fw = fine_hw
    ph, pw = parent_hw
    up = fh // ph
    rows = torch.arange(fh) // up
    cols = torch.arange(fw) // up
    return (rows[:, None] * pw + cols[None, :]).reshape(-1)


def spawn_children(parent: StageResult, upsample: int = 2) -> torch.Tensor:
    """Child source cells of matched parents on the 2x-finer grid."""
    pa, _ = parent.matched_pairs()
    if pa.numel() == 0:
        return torch.zeros(0, dtype=torch.long)
    ph, pw = parent.hw_a
    fw = pw * upsample
    r = (pa // pw) * upsample
    c = (pa % pw) * upsample
    d = torch.arange(upsample)
    cells = ((r[:, None, None] + d[None, :, None]) * fw
             + c[:, None, None] + d[None, None, :])
    return cells.reshape(-1)


def _parent_topt(parent: StageResult, side: str, t: int
                 ) -> tuple[torch.Tensor, torch.Tensor]:
    """Top-t target cells per parent source cell for the MT candidates.

    Returns ([Np, t] target cells, [Np, t] valid).  For side "b" the roles
    swap; at cascade stages reverse scores exist only over the candidate
    union, so B-side rows may have fewer valid entries.
    """
    if parent.cand is None:
        prob = parent.prob if side == "a" else parent.prob.T
        n_src = prob.shape[0]
        t_eff = min(t, prob.shape[1])
        vals, idx = prob.topk(t_eff, dim=1)
        valid = torch.ones_like(idx, dtype=torch.bool)
        if t_eff < t:  # pad to the configured width
            pad = t - t_eff
            idx = torch.cat([idx, idx[:, :1].expand(n_src, pad)], dim=1)
            valid = torch.cat([valid, torch.zeros(n_src, pad, dtype=torch.bool)], 1)
        return idx, valid
    n_a = parent.hw_a[0] * parent.hw_a[1]
    n_b = parent.hw_b[0] * parent.hw_b[1]
    if side == "a":
        idx = torch.zeros(n_a, t, dtype=torch.long)
        valid = torch.zeros(n_a, t, dtype=torch.bool)
        k = parent.cand.k
        t_eff = min(t, k)
        vals, slots = parent.prob.topk(t_eff, dim=1)
        cells = parent.cand.indices.gather(1, slots)
        ok = parent.cand.valid.gather(1, slots)
        idx[parent.query_cells, :t_eff] = cells
        valid[parent.query_cells, :t_eff] = ok
        return idx, valid
    # side "b": reverse scores over the candidate union, per target cell
    idx = torch.zeros(n_b, t, dtype=torch.long)
    valid = torch.zeros(n_b, t, dtype=torch.bool)
    flat_t = parent.cand.indices.reshape(-1)
    flat_v = parent.cand.valid.reshape(-1)
    flat_s = parent.prob.detach().reshape(-1)
    flat_q = parent.query_cells[:, None].expand_as(parent.cand.indices).reshape(-1)
    flat_t, flat_s, flat_q = flat_t[flat_v], flat_s[flat_v], flat_q[flat_v]
    order = torch.argsort(flat_s, descending=True, stable=True)
    flat_t, flat_s, flat_q = flat_t[order], flat_s[order], flat_q[order]
    fill = torch.zeros(n_b, dtype=torch.long)
    for tc, qc in zip(flat_t.tolist(), flat_q.tolist()):
        slot = fill[tc]
        if slot < t:
            idx[tc, slot] = qc
            valid[tc, slot] = True
            fill[tc] = slot + 1
    return idx, valid


def stage_candidates(parent: StageResult, cfg: PipelineConfig, side: str,
                     fine_hw_src: tuple[int, int],
                     fine_hw_tgt: tuple[int, int]) -> CandidateSet:
    """Per-fine-source-cell candidates inherited from the parent stage.

    Every child of a matched parent gets the parent's window (LW) or
    top-t children (MT); all other cells get fully-invalid rows and pass
    through cross blocks untouched.
    """
    if side == "a":
        src_hw, tgt_hw = parent.hw_a, parent.hw_b
        pa, pb = parent.matched_pairs()
        top1 = torch.zeros(src_hw[0] * src_hw[1], dtype=torch.long)
        ok = torch.zeros(src_hw[0] * src_hw[1], dtype=torch.bool)
        top1[pa], ok[pa] = pb, True
    else:
        src_hw, tgt_hw = parent.hw_b, parent.hw_a
        pa, pb = parent.matched_pairs()
        top1 = torch.zeros(src_hw[0] * src_hw[1], dtype=torch.long)
        ok = torch.zeros(src_hw[0] * src_hw[1], dtype=torch.bool)
        top1[pb], ok[pb] = pa, True  # cycle consistency: mutual partners

    if cfg.cross_variant == "lw":
        cand = build_candidates_lw(top1, tgt_hw, cfg.lw_window)
        valid = cand.valid & ok[:, None]
    else:
        cells, cvalid = _parent_topt(parent, side, cfg.mt_topt)
        cand = build_candidates_mt(cells, tgt_hw, valid=cvalid)
        valid = cand.valid & ok[:, None]

    expand = _parent_index_map(fine_hw_src, src_hw)
    return CandidateSet(cand.indices[expand], valid[expand], fine_hw_tgt,
                        groups=expand)


def local_similarity_prob(feat_q: torch.Tensor, feat_t: torch.Tensor,
                          cand: CandidateSet, temperature: float
                          ) -> torch.Tensor:
    """Eq.-style local similarity: unit-normalized dot products over the
    candidate slots, softmax across valid slots."""
    fq = _unit(feat_q)
    ft = _unit(feat_t)
    gathered = ft[cand.indices.clamp(min=0)]
    sim = torch.einsum("qc,qkc->qk", fq, gathered) / temperature
    sim = sim.masked_fill(~cand.valid, float("-inf"))
    empty = ~cand.valid.any(dim=1)
    if empty.any():
        sim = sim.masked_fill(empty[:, None], 0.0)
    prob = torch.softmax(sim, dim=1)
    return prob * cand.valid


def cascade_stage(grid_a: TokenGrid, grid_b: TokenGrid, parent: StageResult,
                  cfg: PipelineConfig, blocks: tuple = (),
                  coarse_ctx: tuple | None = None,
                  timings: dict | None = None) -> StageResult:
    """One cascade stride: attention per pattern, then local matching."""
    stride = grid_a.stride
    if parent.stride != 2 * stride:
        raise MatcherError(f"parent stride {parent.stride} does not halve to {stride}")
    cand_ab = stage_candidates(parent, cfg, "a", grid_a.hw, grid_b.hw)
    cand_ba = stage_candidates(parent, cfg, "b", grid_b.hw, grid_a.hw)

    extras_a, extras_b = {}, {}
    if cfg.self_variant == "topk":
        if coarse_ctx is None:
            raise MatcherError("topk self-attention needs the coarse probability")
        prob_c, hw_c = coarse_ctx
        extras_a = dict(coarse_prob=prob_c.detach(), coarse_hw=hw_c, side="a")
        extras_b = dict(coarse_prob=prob_c.detach(), coarse_hw=hw_c, side="b")

    t0 = time.perf_counter()
    ga, gb = grid_a, grid_b
    for kind, block in blocks:
        if kind == "self":
            ga, gb = block(ga, **extras_a), block(gb, **extras_b)
        else:
            ga, gb = block(ga, gb, cand_ab), block(gb, ga, cand_ba)
    t1 = time.perf_counter()

    spawned = cand_ab.valid.any(dim=1)
    q_cells = spawned.nonzero(as_tuple=True)[0]
    sub = CandidateSet(cand_ab.indices[q_cells], cand_ab.valid[q_cells],
                       cand_ab.key_hw)
    prob = local_similarity_prob(ga.features[q_cells], gb.features, sub,
                                 cfg.temperature)
    if len(q_cells):
        conf, slot = prob.max(dim=1)
        top1 = sub.indices.gather(1, slot[:, None])[:, 0]
    else:
        conf = torch.zeros(0)
        top1 = torch.zeros(0, dtype=torch.long)
    n_b = grid_b.hw[0] * grid_b.hw[1]
    rev, has = reverse_from_candidates(prob, sub, q_cells, n_b)
    matched = cycle_filter(top1, q_cells, rev, has) & (conf > cfg.threshold)
    t2 = time.perf_counter()
    if timings is not None:
        timings[f"cascade{stride}_attention"] = t1 - t0
        timings[f"cascade{stride}_match"] = t2 - t1
    return StageResult(stride, grid_a.hw, grid_b.hw, q_cells, prob, top1,
                       conf, matched, sub)


class CascadeMatcher(nn.Module):
    """Full matching model: encoder, coarse blocks, cascade blocks, refiner."""

    def __init__(self, cfg: PipelineConfig):
        super().__init__()
        self.cfg = cfg
        coarse_stride = cfg.scales[0]
        self.encoder = PyramidEncoder(cfg.channels,
                                      include_sixteenth=16 in cfg.scales)
        self.ladder: LadderEncoder | None = None
        self.pmt_mode = False

        kinds, blocks = [], []
        for i in range(cfg.coarse_blocks):
            if i % 2 == 0:
                kinds.append("self")
                blocks.append(SelfAttentionBlock(
                    cfg.attention_config(coarse_stride, cfg.coarse_self_variant)))
            else:
                kinds.append("cross")
                blocks.append(FullCrossAttentionBlock(
                    cfg.attention_config(coarse_stride, "global"),
                    kernel=cfg.coarse_cross_kernel))
        self.coarse_kinds = tuple(kinds)
        self.coarse_modules = nn.ModuleList(blocks)

        self.stage_kinds = {}
        self.stage_modules = nn.ModuleDict()
        for stride in cfg.scales[1:]:
            pattern = cfg.stage_patterns[stride]
            mods = []
            for kind in pattern:
                if kind == "self":
                    mods.append(SelfAttentionBlock(
                        cfg.attention_config(stride, cfg.self_variant)))
                else:
                    mods.append(CrossAttentionBlock(
                        cfg.attention_config(stride, "global")))
            self.stage_kinds[stride] = pattern
            self.stage_modules[str(stride)] = nn.ModuleList(mods)

        self.refiner = None
        if cfg.refine and cfg.scales[-1] == 2:
            self.refiner = SubpixelRefiner(cfg.stride_channels(2), cfg.heads)

    # -- parameter partitions ------------------------------------------------

    def enable_ladder(self):
        if self.ladder is None:
            self.ladder = LadderEncoder(self.cfg.channels)
        return self.ladder

    def frozen_modules(self) -> list[nn.Module]:
        return [self.encoder, self.coarse_modules]

    def trainable_modules(self, pmt: bool) -> list[nn.Module]:
        mods = [self.stage_modules]
        if self.refiner is not None:
            mods.append(self.refiner)
        if pmt:
            if self.ladder is None:
                raise MatcherError("PMT mode requires the ladder encoder")
            mods.append(self.ladder)
        else:
            mods = [self.encoder, self.coarse_modules] + mods
        return mods

    # -- forward -------------------------------------------------------------

    def _tokens(self, pyr_maps: dict, stride: int) -> TokenGrid:
        m = pyr_maps[stride]
        h, w, c = m.shape
        # standardize each channel over the cells: content-free offsets
        # (bias/DC responses, identical in every cell) vanish and texture
        # contrast is amplified to unit variance, entering attention at the
        # same scale as the unit-amplitude position encoding added below
        feats = m.reshape(h * w, c)
        feats = ((feats - feats.mean(dim=0))
                 / feats.std(dim=0, unbiased=False).clamp_min(1e-5))
        grid = TokenGrid(feats, (h, w), stride)
        if self.cfg.train_hw is not None:
            factor = self.cfg.scales[0] // stride
            thw = (self.cfg.train_hw[0] * factor, self.cfg.train_hw[1] * factor)
            return positional_encode(grid, "infer", thw)
        return positional_encode(grid)

    def forward(self, image_a, image_b, scales=None,
                collect_matches: bool = True) -> PipelineResult:
        cfg = self.cfg
        if scales is None:
            scales = cfg.scales
        else:
            scales = tuple(int(s) for s in scales)
            if scales != cfg.scales[:len(scales)]:
                raise MatcherError(
                    f"scales {scales} must be a prefix of {cfg.scales}")
        timings: dict[str, float] = {}
        t0 = time.perf_counter()

        frozen = torch.no_grad if self.pmt_mode else contextlib.nullcontext
        with frozen():
            pyr_a = self.encoder(image_a)
            pyr_b = self.encoder(image_b)
        timings["encode"] = time.perf_counter() - t0

        coarse_stride = cfg.scales[0]
        with frozen():
            ga = self._tokens(pyr_a.maps, coarse_stride)
            gb = self._tokens(pyr_b.maps, coarse_stride)
            coarse = coarse_match(ga, gb, cfg,
                                  tuple(zip(self.coarse_kinds, self.coarse_modules)),
                                  timings=timings)
        stages = [coarse]

        maps_a, maps_b = pyr_a.maps, pyr_b.maps
        if self.ladder is not None:
            lad_a = self.ladder(pyr_a)
            lad_b = self.ladder(pyr_b)
            maps_a = {**maps_a, **lad_a.maps}
            maps_b = {**maps_b, **lad_b.maps}

        final_feats = None
        for stride in scales[1:]:
            parent = stages[-1]
            if not bool(parent.matched.any()):
                break
            fa = self._tokens(maps_a, stride)
            fb = self._tokens(maps_b, stride)
            blocks = tuple(zip(self.stage_kinds[stride],
                               self.stage_modules[str(stride)]))
            result = cascade_stage(fa, fb, parent, cfg, blocks,
                                   coarse_ctx=(coarse.prob, coarse.hw_a),
                                   timings=timings)
            stages.append(result)
            final_feats = (fa, fb)

        if collect_matches:
            result = self._collect(stages, final_feats, timings)
        else:
            # loss-only forward: losses read stages/final_features, so skip
            # the refined MatchSet and confidence maps entirely
            result = PipelineResult(MatchSet.empty(), stages, {}, {},
                                    final_feats)
        timings["total"] = time.perf_counter() - t0
        result.timings.update(timings)
        return result

    def _collect(self, stages, final_feats, timings) -> PipelineResult:
        cfg = self.cfg
        final = stages[-1]
        cells_a, cells_b = final.matched_pairs()
        conf = final.conf[final.matched]
        stride = final.stride
        ha, wa = final.hw_a
        hb, wb = final.hw_b

        xa = ((cells_a % wa).double() + 0.5) * stride
        ya = ((cells_a // wa).double() + 0.5) * stride
        xb = ((cells_b % wb).double() + 0.5) * stride
        yb = ((cells_b // wb).double() + 0.5) * stride

        t0 = time.perf_counter()
        if (self.refiner is not None and stride == 2 and cells_a.numel()
                and final_feats is not None):
            fa, fb = final_feats
            feat_a = fa.features.view(ha, wa, -1)
            feat_b = fb.features.view(hb, wb, -1)
            residual = self.refiner.refine_cells(feat_a, feat_b,
                                                 cells_a, cells_b)
            xb = xb + residual[:, 0].double() * stride
            yb = yb + residual[:, 1].double() * stride
        timings["refine"] = time.perf_counter() - t0

        matches = MatchSet(
            xa=xa.detach().numpy(), ya=ya.detach().numpy(),
            xb=xb.detach().numpy(), yb=yb.detach().numpy(),
            conf=conf.detach().clamp(0.0, 1.0).numpy().astype(np.float64),
            scale=np.full(len(cells_a), 1.0 / stride))

        cmaps = {s.stride: stage_confidence_map(s) for s in stages}
        return PipelineResult(matches, stages, cmaps, {}, final_feats)


def stage_confidence_map(stage: StageResult) -> ConfidenceMap:
    """Scatter matched-query confidences onto the stage's source grid."""
    h, w = stage.hw_a
    cells, _ = stage.matched_pairs()
    conf = stage.conf[stage.matched]
    values = torch.zeros(h * w)
    valid = torch.zeros(h * w, dtype=torch.bool)
    values[cells] = conf.detach().clamp(0.0, 1.0).float()
    valid[cells] = True
    return ConfidenceMap(values.view(h, w).numpy().astype(np.float64),
                         valid.view(h, w).numpy(), stage.stride)


def run_pipeline(model: CascadeMatcher, image_a, image_b) -> PipelineResult:
    """Match a padded image pair; empty coarse stage short-circuits to an
    empty MatchSet."""
    return model(image_a, image_b)
