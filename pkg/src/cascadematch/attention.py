"""Attention blocks and candidate construction.

Six interchangeable self-attention mixers (linear, lsa, gsa, topk, lka,
pola), full and candidate-restricted cross-attention, sinusoidal position
encoding with inference-time renormalization, and the LW/MT candidate-set
builders used by the cascade stages.

All blocks share one layout: attention message -> merge projection ->
LayerNorm -> feed-forward on [x, message] -> LayerNorm -> residual add.
Tokens are kept unbatched ([N, C] with an attached grid shape); the
pipeline processes one image pair at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


class AttentionError(ValueError):
    pass


@dataclass
class TokenGrid:
    """Features [Hs*Ws, C] with the (Hs, Ws) grid shape and stride tag."""

    features: torch.Tensor
    hw: tuple[int, int]
    stride: int = 1

    def __post_init__(self):
        if self.features.shape[0] != self.hw[0] * self.hw[1]:
            raise AttentionError(
                f"token count {self.features.shape[0]} != grid {self.hw}")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def with_features(self, feats: torch.Tensor) -> "TokenGrid":
        return TokenGrid(feats, self.hw, self.stride)


@dataclass
class CandidateSet:
    """Per-query target-cell indices [Q, k] with a validity mask.

    ``groups`` is an optional performance hint: a [Q] tensor of group ids
    where every query row in a group carries an identical indices/valid
    row (e.g. siblings inheriting one parent's window).  Attention then
    gathers keys once per group instead of once per query.
    """

    indices: torch.Tensor
    valid: torch.Tensor
    key_hw: tuple[int, int]
    groups: torch.Tensor | None = None

    def __post_init__(self):
        if self.indices.shape != self.valid.shape:
            raise AttentionError("indices/valid shape mismatch")
        if self.groups is not None and self.groups.shape[0] != self.indices.shape[0]:
            raise AttentionError("groups must have one id per query row")

    @property
    def k(self) -> int:
        return self.indices.shape[1]


@dataclass
class AttentionConfig:
    """Variant selection plus per-variant geometry parameters."""

    variant: str = "lsa"
    dim: int = 64
    heads: int = 4
    lsa_window: int = 7
    gsa_rate: int = 4
    topk: int = 64
    lka_local: int = 5
    lka_dilated: int = 7
    lka_dilation: int = 3
    pola_query: int = 7
    pola_key: int = 21
    lw_window: int = 10
    mt_topt: int = 32

    def __post_init__(self):
        if self.dim % self.heads:
            raise AttentionError(f"dim {self.dim} not divisible by heads {self.heads}")


# ---------------------------------------------------------------------------
# position encoding
# ---------------------------------------------------------------------------


def positional_encode(grid: TokenGrid, mode: str = "train",
                      train_hw: tuple[int, int] | None = None) -> TokenGrid:
    """Add 2D sinusoidal encoding; channels interleave (sin x, cos x, sin y, cos y).

    In infer mode the cell coordinates are rescaled by train_size/test_size
    per axis so fractional positions match the training distribution.
    """
    h, w = grid.hw
    c = grid.dim
    if c % 4:
        raise AttentionError("channel count must divide 4 for position encoding")
    feats = grid.features
    device, dtype = feats.device, feats.dtype

    ys = torch.arange(h, device=device, dtype=dtype)
    xs = torch.arange(w, device=device, dtype=dtype)
    if mode == "infer":
        if train_hw is None:
            raise AttentionError("infer mode needs the training grid size")
        ys = ys * (train_hw[0] / h)
        xs = xs * (train_hw[1] / w)
    elif mode != "train":
        raise AttentionError(f"unknown position-encoding mode {mode!r}")

    n_freq = c // 4
    div = torch.exp(torch.arange(n_freq, device=device, dtype=dtype)
                    * (-math.log(10000.0) / n_freq))
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    pe = torch.zeros(h, w, c, device=device, dtype=dtype)
    pe[..., 0::4] = torch.sin(gx[..., None] * div)
    pe[..., 1::4] = torch.cos(gx[..., None] * div)
    pe[..., 2::4] = torch.sin(gy[..., None] * div)
    pe[..., 3::4] = torch.cos(gy[..., None] * div)
    return grid.with_features(feats + pe.reshape(h * w, c))


# ---------------------------------------------------------------------------
# attention mixers
# ---------------------------------------------------------------------------


class _ProjectedAttention(nn.Module):
    """q/k/v linear projections shared by the softmax-style mixers."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim, bias=False)
        self.k_proj = nn.Linear(dim, dim, bias=False)
        self.v_proj = nn.Linear(dim, dim, bias=False)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        return x.view(x.shape[0], self.heads, self.head_dim)


def _softmax_attention(q, k, v, mask=None):
    """Brute-force multi-head attention.

    q: [Q, h, d]; k, v: [N, h, d]; mask: [Q, N] bool (False = blocked).
    """
    logits = torch.einsum("qhd,nhd->qhn", q, k) / math.sqrt(q.shape[-1])
    if mask is not None:
        logits = logits.masked_fill(~mask[:, None, :], float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    out = torch.einsum("qhn,nhd->qhd", weights, v)
    return out.reshape(q.shape[0], -1)


class FullSelfAttention(_ProjectedAttention):
    """Reference O(N^2) global attention."""

    def forward(self, x, hw):
        q = self._split(self.q_proj(x))
        k = self._split(self.k_proj(x))
        v = self._split(self.v_proj(x))
        return _softmax_attention(q, k, v)


class LinearSelfAttention(_ProjectedAttention):
    """Kernelized attention with the elu(x)+1 feature map."""

    def forward(self, x, hw):
        q = F.elu(self._split(self.q_proj(x))) + 1.0
        k = F.elu(self._split(self.k_proj(x))) + 1.0
        v = self._split(self.v_proj(x))
        kv = torch.einsum("nhd,nhe->hde", k, v / x.shape[0])
        z = 1.0 / (torch.einsum("qhd,hd->qh", q, k.sum(dim=0)) + 1e-6)
        out = torch.einsum("qhd,hde,qh->qhe", q, kv, z) * x.shape[0]
        return out.reshape(x.shape[0], -1)


class LsaSelfAttention(_ProjectedAttention):
    """Attention within non-overlapping window x window tiles."""

    def __init__(self, dim, heads, window=7):
        super().__init__(dim, heads)
        self.window = window

    def forward(self, x, hw):
        h, w = hw
        ww = self.window
        ph, pw = (-h) % ww, (-w) % ww
        grid = x.view(h, w, -1)
        valid = torch.ones(h, w, dtype=torch.bool, device=x.device)
        if ph or pw:
            grid = F.pad(grid.permute(2, 0, 1), (0, pw, 0, ph)).permute(1, 2, 0)
            valid = F.pad(valid, (0, pw, 0, ph))
        hp, wp = h + ph, w + pw

        def windows(t):
            c = t.shape[-1] if t.dim() == 3 else 1
            t = t.view(hp // ww, ww, wp // ww, ww, -1)
            return t.permute(0, 2, 1, 3, 4).reshape(-1, ww * ww, c)

        tiles = windows(grid)
        vmask = windows(valid[..., None].float()).squeeze(-1) > 0.5
        nw = tiles.shape[0]
        q = self.q_proj(tiles).view(nw, ww * ww, self.heads, self.head_dim)
        k = self.k_proj(tiles).view(nw, ww * ww, self.heads, self.head_dim)
        v = self.v_proj(tiles).view(nw, ww * ww, self.heads, self.head_dim)
        logits = torch.einsum("wqhd,wnhd->wqhn", q, k) / math.sqrt(self.head_dim)
        logits = logits.masked_fill(~vmask[:, None, None, :], float("-inf"))
        msg = torch.einsum("wqhn,wnhd->wqhd", torch.softmax(logits, -1), v)
        msg = msg.reshape(hp // ww, wp // ww, ww, ww, -1).permute(0, 2, 1, 3, 4)
        return msg.reshape(hp, wp, -1)[:h, :w].reshape(h * w, -1)


class GsaSelfAttention(_ProjectedAttention):
    """Global attention against rate x rate average-pooled keys/values."""

    def __init__(self, dim, heads, rate=4):
        super().__init__(dim, heads)
        self.rate = rate

    def forward(self, x, hw):
        h, w = hw
        q = self._split(self.q_proj(x))
        img = x.view(h, w, -1).permute(2, 0, 1)[None]
        img = F.avg_pool2d(img, self.rate, self.rate, ceil_mode=True,
                           count_include_pad=False)
        pooled = img[0].permute(1, 2, 0).reshape(-1, x.shape[-1])
        k = self._split(self.k_proj(pooled))
        v = self._split(self.v_proj(pooled))
        return _softmax_attention(q, k, v)


def _grouped_gather_attention(q, k_all, v_all, indices, valid, groups):
    """Gather-attention specialization for shared candidate blocks.

    Queries in the same group attend to one gathered key block, and
    fully-invalid rows are skipped outright (their message is zero and
    they are flagged empty, exactly as the per-query path leaves them).
    Returns None when group sizes are uneven; the caller then falls back.
    """
    qn, heads, dim = q.shape
    live = valid.any(dim=1)
    rows = live.nonzero(as_tuple=True)[0]
    empty = None if bool(live.all()) else ~live
    if rows.numel() == 0:
        return q.new_zeros(qn, heads * dim), empty
    rows = rows[torch.argsort(groups[rows], stable=True)]
    _, counts = torch.unique_consecutive(groups[rows], return_counts=True)
    if counts.min() != counts.max():
        return None
    size = int(counts[0])
    rep = rows.view(-1, size)[:, 0]
    idx = indices[rep].clamp(min=0)
    k = k_all[idx.reshape(-1)].view(len(rep), -1, heads, dim)
    v = v_all[idx.reshape(-1)].view(len(rep), -1, heads, dim)
    vmask = valid[rep]
    logits = torch.einsum("gchd,gkhd->gchk", q[rows].view(len(rep), size, heads, dim),
                          k) / math.sqrt(dim)
    logits = logits.masked_fill(~vmask[:, None, None, :], float("-inf"))
    v = v.masked_fill(~vmask[:, :, None, None], 0.0)
    weights = torch.softmax(logits, dim=-1)
    out = torch.einsum("gchk,gkhd->gchd", weights, v)
    message = q.new_zeros(qn, heads * dim)
    message[rows] = out.reshape(-1, heads * dim)
    return message, empty


def _gather_attention(q, k_all, v_all, indices, valid=None, groups=None):
    """Per-query attention over gathered candidate keys.

    q: [Q, h, d]; k_all/v_all: [N, h, d]; indices: [Q, k] into N.
    Invalid candidates are overwritten (logits -inf, values 0) before any
    arithmetic, so their stored features can never reach the output.
    Returns (message [Q, h*d], empty-query mask or None).
    """
    if groups is not None and valid is not None:
        grouped = _grouped_gather_attention(q, k_all, v_all, indices, valid, groups)
        if grouped is not None:
            return grouped
    qn, heads, dim = q.shape
    idx = indices.clamp(min=0).reshape(-1)
    k = k_all[idx].view(qn, -1, heads, dim)
    v = v_all[idx].view(qn, -1, heads, dim)
    logits = torch.einsum("qhd,qkhd->qhk", q, k) / math.sqrt(dim)
    empty = None
    if valid is not None:
        logits = logits.masked_fill(~valid[:, None, :], float("-inf"))
        v = v.masked_fill(~valid[:, :, None, None], 0.0)
        empty = ~valid.any(dim=1)
        if empty.any():
            logits = logits.masked_fill(empty[:, None, None], 0.0)
        else:
            empty = None
    weights = torch.softmax(logits, dim=-1)
    out = torch.einsum("qhk,qkhd->qhd", weights, v)
    return out.reshape(qn, heads * dim), empty


class TopkSelfAttention(_ProjectedAttention):
    """Per-query attention over keys chosen by the coarse cross-view cycle.

    Each fine cell inherits its coarse parent's top-1 cross-view match;
    the top-t same-image coarse cells under that match's reverse scores
    are expanded to their fine children and used as keys (t * up^2 = topk).
    """

    def __init__(self, dim, heads, topk=64):
        super().__init__(dim, heads)
        self.topk = topk

    def candidate_indices(self, hw, coarse_prob, coarse_hw, side="a"):
        h, w = hw
        ch, cw = coarse_hw
        if h % ch or w % cw or h // ch != w // cw:
            raise AttentionError(f"fine grid {hw} not a multiple of coarse {coarse_hw}")
        up = h // ch
        t = self.topk // (up * up)
        if t * up * up != self.topk or t < 1:
            raise AttentionError(f"topk={self.topk} not divisible by upsample^2={up * up}")
        prob = coarse_prob if side == "a" else coarse_prob.T
        t = min(t, prob.shape[0])

        top1 = prob.argmax(dim=1)                      # [Nc] best cross cell
        reverse = prob[:, top1].T                      # [Nc, Nc_own] scores of own cells
        coarse_keys = reverse.topk(t, dim=1).indices   # [Nc, t] own coarse cells
        fine_keys = _children_of(coarse_keys, (ch, cw), up)  # [Nc, t*up^2]

        rows = torch.arange(h, device=coarse_prob.device) // up
        cols = torch.arange(w, device=coarse_prob.device) // up
        parent = (rows[:, None] * cw + cols[None, :]).reshape(-1)
        return fine_keys[parent]

    def forward(self, x, hw, coarse_prob=None, coarse_hw=None, side="a"):
        if coarse_prob is None or coarse_hw is None:
            raise AttentionError("topk attention requires the coarse probability matrix")
        indices = self.candidate_indices(hw, coarse_prob, coarse_hw, side)

        q = self._split(self.q_proj(x))
        k_all = self._split(self.k_proj(x))
        v_all = self._split(self.v_proj(x))
        msg, _ = _gather_attention(q, k_all, v_all, indices)
        return msg


class LkaMixer(nn.Module):
    """Large-kernel convolutional gating: depthwise + dilated depthwise + 1x1.

    Channel-wise modulation, no softmax.  Replicate padding keeps constant
    inputs constant across the borders.
    """

    def __init__(self, dim, local=5, dilated=7, dilation=3):
        super().__init__()
        self.proj_1 = nn.Conv2d(dim, dim, 1)
        self.conv_local = nn.Conv2d(dim, dim, local, padding=local // 2,
                                    groups=dim, padding_mode="replicate")
        self.conv_spatial = nn.Conv2d(dim, dim, dilated, padding=(dilated // 2) * dilation,
                                      groups=dim, dilation=dilation,
                                      padding_mode="replicate")
        self.conv_point = nn.Conv2d(dim, dim, 1)
        self.proj_2 = nn.Conv2d(dim, dim, 1)

    def forward(self, x, hw):
        h, w = hw
        img = x.view(h, w, -1).permute(2, 0, 1)[None]
        u = F.gelu(self.proj_1(img))
        attn = self.conv_point(self.conv_spatial(self.conv_local(u)))
        out = self.proj_2(u * attn)
        return out[0].permute(1, 2, 0).reshape(h * w, -1)


class PolaSelfAttention(_ProjectedAttention):
    """Non-overlapping query windows attending overlapping key windows.

    Query tiles of qw x qw attend a kw x kw neighborhood centered on the
    tile, with a learned relative-position bias per head.
    """

    def __init__(self, dim, heads, query_window=7, key_window=21):
        super().__init__(dim, heads)
        if (key_window - query_window) % 2:
            raise AttentionError("key window must extend the query window evenly")
        self.qw = query_window
        self.kw = key_window
        span = query_window + key_window - 1  # relative offsets per axis
        self.rel_bias = nn.Parameter(torch.zeros(heads, span, span))
        nn.init.trunc_normal_(self.rel_bias, std=0.02)

        qi = torch.arange(query_window)
        ki = torch.arange(key_window) - (key_window - query_window) // 2
        rel = qi[:, None] - ki[None, :] + key_window - 1 - (key_window - query_window) // 2
        self.register_buffer("rel_idx", rel.long(), persistent=False)

    def forward(self, x, hw):
        h, w = hw
        qw, kw = self.qw, self.kw
        pad_h, pad_w = (-h) % qw, (-w) % qw
        hp, wp = h + pad_h, w + pad_w
        c = x.shape[-1]
        img = x.view(h, w, c).permute(2, 0, 1)[None]
        img = F.pad(img, (0, pad_w, 0, pad_h))
        valid = F.pad(torch.ones(1, 1, h, w, device=x.device, dtype=x.dtype),
                      (0, pad_w, 0, pad_h))

        nq = (hp // qw) * (wp // qw)
        q_tiles = img[0].view(c, hp // qw, qw, wp // qw, qw) \
            .permute(1, 3, 2, 4, 0).reshape(nq, qw * qw, c)
        halo = (kw - qw) // 2
        k_tiles = F.unfold(img, kw, stride=qw, padding=halo)[0] \
            .view(c, kw * kw, nq).permute(2, 1, 0)
        k_valid = F.unfold(valid, kw, stride=qw, padding=halo)[0] \
            .view(kw * kw, nq).T > 0.5

        q = self.q_proj(q_tiles).view(nq, qw * qw, self.heads, self.head_dim)
        k = self.k_proj(k_tiles).view(nq, kw * kw, self.heads, self.head_dim)
        v = self.v_proj(k_tiles).view(nq, kw * kw, self.heads, self.head_dim)
        logits = torch.einsum("wqhd,wnhd->whqn", q, k) / math.sqrt(self.head_dim)

        ry = self.rel_idx.view(qw, 1, kw, 1).expand(qw, qw, kw, kw)
        rx = self.rel_idx.view(1, qw, 1, kw).expand(qw, qw, kw, kw)
        bias = self.rel_bias[:, ry.reshape(-1), rx.reshape(-1)]
        logits = logits + bias.view(self.heads, qw * qw, kw * kw)[None]

        logits = logits.masked_fill(~k_valid[:, None, None, :], float("-inf"))
        msg = torch.einsum("whqn,wnhd->wqhd", torch.softmax(logits, -1), v)
        msg = msg.reshape(hp // qw, wp // qw, qw, qw, c).permute(0, 2, 1, 3, 4)
        return msg.reshape(hp, wp, c)[:h, :w].reshape(h * w, c)


def _children_of(cells: torch.Tensor, parent_hw: tuple[int, int], up: int) -> torch.Tensor:
    """Map parent cell indices [..., t] to their up x up children [..., t*up^2]."""
    ph, pw = parent_hw
    fw = pw * up
    r = (cells // pw) * up
    c = (cells % pw) * up
    d = torch.arange(up, device=cells.device)
    offs = (d[:, None] * fw + d[None, :]).reshape(-1)
    base = r * fw + c
    out = base[..., None] + offs
    return out.reshape(*cells.shape[:-1], cells.shape[-1] * up * up)


# ---------------------------------------------------------------------------
# block wrappers
# ---------------------------------------------------------------------------


class _BlockTail(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.merge = nn.Linear(dim, dim, bias=False)
        self.norm1 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim * 2, dim * 2, bias=False),
            nn.ReLU(inplace=True),
            nn.Linear(dim * 2, dim, bias=False),
        )
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, message, empty=None):
        message = self.norm1(self.merge(message))
        message = self.norm2(self.mlp(torch.cat([x, message], dim=-1)))
        out = x + message
        if empty is not None and empty.any():
            out = torch.where(empty[:, None], x, out)
        return out


SELF_VARIANTS = ("linear", "lsa", "gsa", "topk", "lka", "pola", "global")


class SelfAttentionBlock(nn.Module):
    """One self-attention block: mixer + merge/FFN tail, residual."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        if cfg.variant not in SELF_VARIANTS:
            raise AttentionError(f"unknown self-attention variant {cfg.variant!r}")
        self.variant = cfg.variant
        dim, heads = cfg.dim, cfg.heads
        if cfg.variant == "linear":
            self.mixer = LinearSelfAttention(dim, heads)
        elif cfg.variant == "lsa":
            self.mixer = LsaSelfAttention(dim, heads, cfg.lsa_window)
        elif cfg.variant == "gsa":
            self.mixer = GsaSelfAttention(dim, heads, cfg.gsa_rate)
        elif cfg.variant == "topk":
            self.mixer = TopkSelfAttention(dim, heads, cfg.topk)
        elif cfg.variant == "lka":
            self.mixer = LkaMixer(dim, cfg.lka_local, cfg.lka_dilated,
                                  cfg.lka_dilation)
        elif cfg.variant == "pola":
            self.mixer = PolaSelfAttention(dim, heads, cfg.pola_query, cfg.pola_key)
        else:  # global reference
            self.mixer = FullSelfAttention(dim, heads)
        self.tail = _BlockTail(dim)

    def forward(self, grid: TokenGrid, **extras) -> TokenGrid:
        message = self.mixer(grid.features, grid.hw, **extras)
        return grid.with_features(self.tail(grid.features, message))


class CrossAttentionBlock(nn.Module):
    """Candidate-restricted cross-attention (LW/MT candidate sets)."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.attn = _ProjectedAttention(cfg.dim, cfg.heads)
        self.tail = _BlockTail(cfg.dim)

    def forward(self, query_grid: TokenGrid, key_grid: TokenGrid,
                cand: CandidateSet) -> TokenGrid:
        if cand.indices.shape[0] != query_grid.features.shape[0]:
            raise AttentionError("candidate rows must match query count")
        a = self.attn
        q = a._split(a.q_proj(query_grid.features))
        k_all = a._split(a.k_proj(key_grid.features))
        v_all = a._split(a.v_proj(key_grid.features))
        message, empty = _gather_attention(q, k_all, v_all, cand.indices,
                                           cand.valid, cand.groups)
        return query_grid.with_features(
            self.tail(query_grid.features, message, empty))


class FullCrossAttentionBlock(nn.Module):
    """Unrestricted cross-attention; kernel is softmax or linear."""

    def __init__(self, cfg: AttentionConfig, kernel: str = "softmax"):
        super().__init__()
        if kernel not in ("softmax", "linear"):
            raise AttentionError(f"unknown cross kernel {kernel!r}")
        self.kernel = kernel
        self.attn = _ProjectedAttention(cfg.dim, cfg.heads)
        self.tail = _BlockTail(cfg.dim)

    def forward(self, query_grid: TokenGrid, key_grid: TokenGrid) -> TokenGrid:
        a = self.attn
        if self.kernel == "softmax":
            q = a._split(a.q_proj(query_grid.features))
            k = a._split(a.k_proj(key_grid.features))
            v = a._split(a.v_proj(key_grid.features))
            message = _softmax_attention(q, k, v)
        else:
            q = F.elu(a._split(a.q_proj(query_grid.features))) + 1.0
            k = F.elu(a._split(a.k_proj(key_grid.features))) + 1.0
            v = a._split(a.v_proj(key_grid.features))
            n = k.shape[0]
            kv = torch.einsum("nhd,nhe->hde", k, v / n)
            z = 1.0 / (torch.einsum("qhd,hd->qh", q, k.sum(dim=0)) + 1e-6)
            message = (torch.einsum("qhd,hde,qh->qhe", q, kv, z) * n)
            message = message.reshape(q.shape[0], -1)
        return query_grid.with_features(self.tail(query_grid.features, message))


# ---------------------------------------------------------------------------
# candidate construction
# ---------------------------------------------------------------------------


def build_candidates_lw(parent_top1: torch.Tensor, parent_hw: tuple[int, int],
                        window: int, upsample: int = 2,
                        expected_k: int | None = None) -> CandidateSet:
    """Window x window block around each query's upsampled parent target.

    The block spans [c - w//2, c - w//2 + w - 1] per axis with
    c = upsample * parent_cell (even windows round toward the lower index).
    Out-of-bounds slots are masked invalid.
    """
    if expected_k is not None and window * window != expected_k:
        raise AttentionError(f"window {window}^2 != configured k {expected_k}")
    ph, pw = parent_hw
    fh, fw = ph * upsample, pw * upsample
    cr = (parent_top1 // pw) * upsample - window // 2
    cc = (parent_top1 % pw) * upsample - window // 2
    d = torch.arange(window, device=parent_top1.device)
    rows = cr[:, None, None] + d[None, :, None]
    cols = cc[:, None, None] + d[None, None, :]
    valid = (rows >= 0) & (rows < fh) & (cols >= 0) & (cols < fw)
    idx = rows.clamp(0, fh - 1) * fw + cols.clamp(0, fw - 1)
    q = parent_top1.shape[0]
    return CandidateSet(idx.reshape(q, -1), valid.reshape(q, -1), (fh, fw))


def build_candidates_mt(parent_topt: torch.Tensor, parent_hw: tuple[int, int],
                        upsample: int = 2, valid: torch.Tensor | None = None,
                        expected_k: int | None = None) -> CandidateSet:
    """2x2 children of each query's top-t parent cells (k = 4t)."""
    t = parent_topt.shape[1]
    k = t * upsample * upsample
    if expected_k is not None and k != expected_k:
        raise AttentionError(f"4*t = {k} != configured k {expected_k}")
    ph, pw = parent_hw
    idx = _children_of(parent_topt, parent_hw, upsample)
    if valid is None:
        vmask = torch.ones_like(idx, dtype=torch.bool)
    else:
        vmask = valid.repeat_interleave(upsample * upsample, dim=1)
    return CandidateSet(idx, vmask, (ph * upsample, pw * upsample))
