"""Five-stage residual backbone with dilated deep stages.

Spatial contract: each downsampling step is a 2x2 stride-2 convolution,
whose output side is exactly floor(s/2) for any input side s. Three such
steps (stages 1..3) give floor(s/8) overall, so 127 -> 15 and 255 -> 31.
Stages 4 and 5 keep stride 8 and widen their receptive field with
dilation 2 and 4 instead of further downsampling. The deepest three
stage outputs are mapped to a common width by linear 1x1 convolutions
(no activation) so downstream correlation sees uniform channels.

GroupNorm is used throughout: it is batch-size independent, which keeps
single-sample inference, small desk-scale batches, and bit-identical
determinism checks all on the same code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .config import BackboneConfig

DEEP_STAGES = ("stage3", "stage4", "stage5")


@dataclass
class StageBundle:
    """Per-stage feature maps for one crop batch.

    stage1/stage2 are raw early features (strides 2 and 4). stage3..5
    are the channel-adjusted deep features, all at the final stride.
    """

    stage1: Tensor
    stage2: Tensor
    stage3: Tensor
    stage4: Tensor
    stage5: Tensor
    strides: tuple[int, int, int, int, int] = (2, 4, 8, 8, 8)

    def deep(self) -> list[Tensor]:
        return [self.stage3, self.stage4, self.stage5]


def _norm(groups: int, channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(groups, channels)


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions with a skip; dilation keeps spatial size."""

    def __init__(self, cin: int, cout: int, groups: int, dilation: int = 1):
        super().__init__()
        pad = dilation
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=pad, dilation=dilation,
                               bias=False)
        self.norm1 = _norm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=pad, dilation=dilation,
                               bias=False)
        self.norm2 = _norm(groups, cout)
        self.relu = nn.ReLU(inplace=True)
        if cin != cout:
            self.skip: nn.Module = nn.Sequential(
                nn.Conv2d(cin, cout, 1, bias=False), _norm(groups, cout))
        else:
            self.skip = nn.Identity()

    def forward(self, x: Tensor) -> Tensor:
        out = self.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return self.relu(out + self.skip(x))


class Downsample(nn.Module):
    """2x2 stride-2 convolution: output side is exactly floor(s/2)."""

    def __init__(self, cin: int, cout: int, groups: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 2, stride=2, bias=False)
        self.norm = _norm(groups, cout)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x: Tensor) -> Tensor:
        return self.relu(self.norm(self.conv(x)))


class Backbone(nn.Module):
    """Residual feature extractor producing a five-stage bundle."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c = cfg.channels_per_stage
        g = cfg.norm_groups
        n = cfg.blocks_per_stage

        def blocks(cin: int, cout: int, dilation: int = 1) -> nn.Sequential:
            layers: list[nn.Module] = [ResidualBlock(cin, cout, g, dilation)]
            layers += [ResidualBlock(cout, cout, g, dilation)
                       for _ in range(n - 1)]
            return nn.Sequential(*layers)

        self.stage1 = nn.Sequential(Downsample(3, c[0], g), blocks(c[0], c[0]))
        self.stage2 = nn.Sequential(Downsample(c[0], c[1], g),
                                    blocks(c[1], c[1]))
        self.stage3 = nn.Sequential(Downsample(c[1], c[2], g),
                                    blocks(c[2], c[2]))
        self.stage4 = blocks(c[2], c[3], dilation=2)
        self.stage5 = blocks(c[3], c[4], dilation=4)
        # Linear channel adjustment: no norm, no activation.
        self.adjust3 = nn.Conv2d(c[2], cfg.adjusted_channels, 1)
        self.adjust4 = nn.Conv2d(c[3], cfg.adjusted_channels, 1)
        self.adjust5 = nn.Conv2d(c[4], cfg.adjusted_channels, 1)

    def check_crop(self, side_h: int, side_w: int) -> None:
        """Enforce the crop-size precondition for this mode."""
        if side_h != side_w:
            raise ValueError(f"crop must be square, got {side_h}x{side_w}")
        s = side_h
        standard = s in (127, 255)
        if self.cfg.tiny_mode:
            if not standard and (s % self.cfg.final_stride != 0 or s < 16):
                raise ValueError(
                    f"tiny-mode crop side must be 127, 255 or a multiple of "
                    f"{self.cfg.final_stride} >= 16, got {s}")
        elif not standard:
            raise ValueError(f"crop side must be 127 or 255, got {s}")

    def forward(self, x: Tensor) -> StageBundle:
        """Map a float image batch (B,3,H,W) in [0,255] to features."""
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B,3,H,W) input, got {tuple(x.shape)}")
        self.check_crop(x.shape[2], x.shape[3])
        x = x / 127.5 - 1.0
        s1 = self.stage1(x)
        s2 = self.stage2(s1)
        s3 = self.stage3(s2)
        s4 = self.stage4(s3)
        s5 = self.stage5(s4)
        return StageBundle(
            stage1=s1,
            stage2=s2,
            stage3=self.adjust3(s3),
            stage4=self.adjust4(s4),
            stage5=self.adjust5(s5),
        )


def feature_side(crop_side: int, stride: int = 8) -> int:
    """Spatial side of the deep feature maps for a square crop."""
    return crop_side // stride


def feature_offset(crop_side: int, feat_side: int, stride: int = 8) -> float:
    """Crop-pixel coordinate of feature cell (0, 0).

    The feature grid is centred in the crop: cell j sits at
    offset + j * stride in crop pixels.
    """
    return (crop_side - 1) / 2.0 - (feat_side - 1) / 2.0 * stride
