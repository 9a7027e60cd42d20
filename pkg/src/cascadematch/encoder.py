"""Multi-scale feature extraction: conv trunk + FPN, and the ladder FPN.

The trunk downsamples to 1/2, 1/4, 1/8 (optionally 1/16) with residual
conv blocks; a top-down FPN fuses scales.  No normalization layers: the
maps stay exactly translation-covariant for whole-cell shifts, which the
tests rely on.  Each output scale ends in a single conv, so zeroing those
layers provably zeroes the maps.

The ladder encoder is a small separate FPN for frozen-backbone finetuning:
it consumes a detached FeaturePyramid and emits fresh 1/4 and 1/2 maps;
gradients reach only ladder parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import AttentionConfig, SelfAttentionBlock, TokenGrid


class EncoderError(ValueError):
    pass


@dataclass
class FeaturePyramid:
    """Per-stride feature maps, channel-last [H/s, W/s, C_s]."""

    maps: dict[int, torch.Tensor]

    def __post_init__(self):
        for s, m in self.maps.items():
            if m.dim() != 3:
                raise EncoderError(f"map at stride {s} must be [H, W, C]")
            if not torch.isfinite(m).all():
                raise EncoderError(f"non-finite values in stride-{s} map")

    @property
    def channels(self) -> dict[int, int]:
        return {s: m.shape[-1] for s, m in self.maps.items()}

    def grid(self, stride: int) -> TokenGrid:
        m = self.maps[stride]
        h, w, c = m.shape
        return TokenGrid(m.reshape(h * w, c), (h, w), stride)


@dataclass
class LadderPyramid:
    """Trainable 1/4 and 1/2 maps layered on a frozen pyramid."""

    maps: dict[int, torch.Tensor]


def _as_batch(image) -> torch.Tensor:
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
    if image.dim() != 2:
        raise EncoderError(f"expected a single-channel [H, W] image, got {tuple(image.shape)}")
    return image[None, None].float()


def _channel_last(x: torch.Tensor) -> torch.Tensor:
    return x[0].permute(1, 2, 0)


def _channel_first(x: torch.Tensor) -> torch.Tensor:
    return x.permute(2, 0, 1)[None]


def _up2(x: torch.Tensor) -> torch.Tensor:
    # align_corners=False keeps the resampling grid uniform, so the fused
    # maps stay translation-covariant and centered on the coarse cells
    return F.interpolate(x, scale_factor=2.0, mode="bilinear", align_corners=False)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.proj = (None if stride == 1 and cin == cout
                     else nn.Conv2d(cin, cout, 1, stride))

    def forward(self, x):
        y = self.conv2(F.relu(self.conv1(x)))
        s = x if self.proj is None else self.proj(x)
        return F.relu(y + s)


class PyramidEncoder(nn.Module):
    """Residual trunk with strides 2/4/8 and a top-down FPN.

    ``coarse_attention`` optionally runs one self-attention block on the
    1/8 trunk features before the FPN head (ablation hook).  With
    ``include_sixteenth`` an extra 1/16 stage is produced and fused into
    the 1/8 path.
    """

    def __init__(self, channels: tuple[int, int, int] = (32, 64, 96),
                 include_sixteenth: bool = False,
                 coarse_attention: AttentionConfig | None = None):
        super().__init__()
        c1, c2, c3 = channels
        self.channels = tuple(channels)
        self.include_sixteenth = include_sixteenth
        self.stem = nn.Sequential(
            nn.Conv2d(1, c1, 3, 2, 1), nn.ReLU(inplace=True), ResBlock(c1, c1))
        self.stage2 = nn.Sequential(ResBlock(c1, c2, 2), ResBlock(c2, c2))
        self.stage3 = nn.Sequential(ResBlock(c2, c3, 2), ResBlock(c3, c3))
        self.attn = (SelfAttentionBlock(coarse_attention)
                     if coarse_attention is not None else None)
        if include_sixteenth:
            self.stage4 = ResBlock(c3, c3, 2)
            self.lat4 = nn.Conv2d(c3, c3, 1)
        # each scale's map is produced by exactly one final conv
        self.lat3 = nn.Conv2d(c3, c3, 1)
        self.lat2 = nn.Conv2d(c2, c3, 1)
        self.smooth2 = nn.Sequential(
            nn.Conv2d(c3, c3, 3, 1, 1), nn.LeakyReLU(inplace=True),
            nn.Conv2d(c3, c2, 3, 1, 1))
        self.lat1 = nn.Conv2d(c1, c2, 1)
        self.smooth1 = nn.Sequential(
            nn.Conv2d(c2, c2, 3, 1, 1), nn.LeakyReLU(inplace=True),
            nn.Conv2d(c2, c1, 3, 1, 1))

    def forward(self, image) -> FeaturePyramid:
        x = _as_batch(image)
        h, w = x.shape[-2:]
        mult = 16 if self.include_sixteenth else 8
        if h % mult or w % mult:
            raise EncoderError(f"image dims {h}x{w} must divide {mult}")

        o1 = self.stem(x)
        o2 = self.stage2(o1)
        o3 = self.stage3(o2)
        if self.attn is not None:
            hw = o3.shape[-2:]
            grid = TokenGrid(_channel_last(o3).reshape(-1, o3.shape[1]),
                             (int(hw[0]), int(hw[1])), 8)
            o3 = _channel_first(self.attn(grid).features.view(
                int(hw[0]), int(hw[1]), -1))

        maps: dict[int, torch.Tensor] = {}
        p8 = self.lat3(o3)
        if self.include_sixteenth:
            p16 = self.lat4(self.stage4(o3))
            maps[16] = _channel_last(p16)
            p8 = p8 + _up2(p16)
        p4 = self.smooth2(self.lat2(o2) + _up2(p8))
        p2 = self.smooth1(self.lat1(o1) + _up2(p4))
        maps[8] = _channel_last(p8)
        maps[4] = _channel_last(p4)
        maps[2] = _channel_last(p2)
        return FeaturePyramid(maps)

    def zero_output_layers(self):
        """Zero every scale's final conv (testing hook for the FPN contract)."""
        finals = [self.lat3, self.smooth2[-1], self.smooth1[-1]]
        if self.include_sixteenth:
            finals.append(self.lat4)
        with torch.no_grad():
            for conv in finals:
                conv.weight.zero_()
                conv.bias.zero_()


class LadderEncoder(nn.Module):
    """Small FPN over a frozen pyramid; emits trainable 1/4 and 1/2 maps.

    Frozen maps are detached on entry, so backward never touches backbone
    parameters, and lateral features are concatenated with the top-down
    path before fusion.
    """

    def __init__(self, channels: tuple[int, int, int] = (32, 64, 96)):
        super().__init__()
        c1, c2, c3 = channels
        self.lat8 = nn.Conv2d(c3, c3, 1)
        self.lat4 = nn.Conv2d(c2, c2, 1)
        self.fuse4 = nn.Sequential(
            nn.Conv2d(c2 + c3, c2, 3, 1, 1), nn.LeakyReLU(inplace=True),
            nn.Conv2d(c2, c2, 3, 1, 1))
        self.lat2 = nn.Conv2d(c1, c1, 1)
        self.fuse2 = nn.Sequential(
            nn.Conv2d(c1 + c2, c1, 3, 1, 1), nn.LeakyReLU(inplace=True),
            nn.Conv2d(c1, c1, 3, 1, 1))

    def forward(self, frozen: FeaturePyramid) -> LadderPyramid:
        for s in (8, 4, 2):
            if s not in frozen.maps:
                raise EncoderError(f"frozen pyramid missing stride-{s} map")
        f8 = _channel_first(frozen.maps[8].detach())
        f4 = _channel_first(frozen.maps[4].detach())
        f2 = _channel_first(frozen.maps[2].detach())
        h8 = F.relu(self.lat8(f8))
        h4 = self.fuse4(torch.cat([self.lat4(f4), _up2(h8)], dim=1))
        h2 = self.fuse2(torch.cat([self.lat2(f2), _up2(F.relu(h4))], dim=1))
        return LadderPyramid({4: _channel_last(h4), 2: _channel_last(h2)})
