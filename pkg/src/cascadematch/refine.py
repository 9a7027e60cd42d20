"""Sub-pixel refinement: 5x5 patch attention + soft-argmax residual.

For each match, 5x5 feature patches are unfolded around the source and
target cells on the 1/2 maps (edge-clamped near borders).  One standard
self-attention block and one cross-attention block run over the 25-token
patches (brute-force softmax attention, no kernel approximation), then the
attended source center token is correlated against all 25 target tokens;
the softmax expectation over the offset grid gives a residual strictly
inside (-half, half) cells per axis.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def soft_argmax_2d(heat: torch.Tensor) -> torch.Tensor:
    """Spatial expectation of [M, K, K] heatmaps over centered offsets.

    Returns [M, 2] (dx, dy) in cells; K odd, offsets -(K//2)..K//2.
    """
    m, kh, kw = heat.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"heatmap must be square and odd, got {kh}x{kw}")
    offs = torch.arange(kh, dtype=heat.dtype, device=heat.device) - kh // 2
    dx = (heat.sum(dim=1) * offs).sum(dim=1)
    dy = (heat.sum(dim=2) * offs).sum(dim=1)
    return torch.stack([dx, dy], dim=1)


def unfold_patches(feat: torch.Tensor, cells: torch.Tensor,
                   window: int = 5) -> torch.Tensor:
    """Gather [M, window^2, C] patches around cells of a [H, W, C] map.

    Coordinates are clamped to the map, so border patches repeat edge
    cells instead of introducing padding values.
    """
    h, w, _ = feat.shape
    half = window // 2
    r = (cells // w)[:, None, None]
    c = (cells % w)[:, None, None]
    d = torch.arange(window, device=feat.device) - half
    rows = (r + d[None, :, None]).clamp(0, h - 1)
    cols = (c + d[None, None, :]).clamp(0, w - 1)
    idx = (rows * w + cols).reshape(cells.shape[0], -1)
    return feat.reshape(h * w, -1)[idx]


class _PatchBlock(nn.Module):
    """Batched standard attention block over short token sequences."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim, bias=False)
        self.k_proj = nn.Linear(dim, dim, bias=False)
        self.v_proj = nn.Linear(dim, dim, bias=False)
        self.merge = nn.Linear(dim, dim, bias=False)
        self.norm1 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim * 2, dim * 2, bias=False),
            nn.ReLU(inplace=True),
            nn.Linear(dim * 2, dim, bias=False),
        )
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, source: torch.Tensor | None = None):
        s = x if source is None else source
        m, t, _ = x.shape
        q = self.q_proj(x).view(m, t, self.heads, self.head_dim)
        k = self.k_proj(s).view(m, s.shape[1], self.heads, self.head_dim)
        v = self.v_proj(s).view(m, s.shape[1], self.heads, self.head_dim)
        logits = torch.einsum("mqhd,mkhd->mhqk", q, k) / math.sqrt(self.head_dim)
        msg = torch.einsum("mhqk,mkhd->mqhd", torch.softmax(logits, dim=-1), v)
        msg = self.norm1(self.merge(msg.reshape(m, t, -1)))
        msg = self.norm2(self.mlp(torch.cat([x, msg], dim=-1)))
        return x + msg


class SubpixelRefiner(nn.Module):
    """One self + one cross block over patch pairs, then correlation."""

    def __init__(self, dim: int, heads: int = 4, window: int = 5):
        super().__init__()
        if window % 2 == 0:
            raise ValueError("refinement window must be odd")
        self.window = window
        self.self_block = _PatchBlock(dim, heads)
        self.cross_block = _PatchBlock(dim, heads)

    def forward(self, src_patch: torch.Tensor,
                tgt_patch: torch.Tensor) -> torch.Tensor:
        """src_patch, tgt_patch: [M, window^2, C] -> residual [M, 2] cells."""
        m, t, c = src_patch.shape
        center = t // 2
        s = self.self_block(src_patch)
        g = self.self_block(tgt_patch)
        s2 = self.cross_block(s, g)
        g2 = self.cross_block(g, s)
        sim = torch.einsum("mc,mtc->mt", s2[:, center], g2) / math.sqrt(c)
        heat = torch.softmax(sim, dim=1).view(m, self.window, self.window)
        return soft_argmax_2d(heat)

    def refine_cells(self, feat_a: torch.Tensor, feat_b: torch.Tensor,
                     cells_a: torch.Tensor, cells_b: torch.Tensor) -> torch.Tensor:
        """Residual [M, 2] (dx, dy) in cells for matched cell pairs on
        channel-last maps."""
        if cells_a.numel() == 0:
            return torch.zeros(0, 2, dtype=feat_a.dtype, device=feat_a.device)
        src = unfold_patches(feat_a, cells_a, self.window)
        tgt = unfold_patches(feat_b, cells_b, self.window)
        return self(src, tgt)
