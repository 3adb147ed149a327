"""Per-stage correlation heads and their weighted fusion.

Each deep stage gets a classification head (2 channels per anchor
shape: background then foreground blocks) and a regression head (4 per
shape). Template features are centre-cropped to a small kernel before
correlation so the response keeps useful spatial extent; with 31x31
search features and a 7x7 kernel the response is 25x25. The three
stages' maps are averaged with softmax-normalised learned weights.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .anchors import AnchorGrid, decode_deltas


def center_crop(feat: Tensor, size: int) -> Tensor:
    """Crop the spatial centre ``size x size`` window of (B, C, H, W).

    Requires the crop to fit and parity to match so the window is
    exactly centred.
    """
    h, w = feat.shape[-2], feat.shape[-1]
    if size > h or size > w:
        raise ValueError(f"cannot crop {size} from {h}x{w}")
    if (h - size) % 2 or (w - size) % 2:
        raise ValueError(
            f"crop {size} from {h}x{w} is not centre-aligned")
    top = (h - size) // 2
    left = (w - size) // 2
    return feat[..., top:top + size, left:left + size]


def depthwise_xcorr(search: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel valid cross-correlation of search by kernel.

    search (B, C, Hs, Ws), kernel (B, C, Hk, Wk) with Hk <= Hs; output
    (B, C, Hs-Hk+1, Ws-Wk+1). Each batch element is correlated with its
    own kernel, channel by channel.
    """
    b, c, hs, ws = search.shape
    bk, ck, hk, wk = kernel.shape
    if (bk, ck) != (b, c):
        raise ValueError(
            f"search/kernel mismatch: {tuple(search.shape)} vs "
            f"{tuple(kernel.shape)}")
    if hk > hs or wk > ws:
        raise ValueError("kernel larger than search features")
    out = F.conv2d(search.reshape(1, b * c, hs, ws),
                   kernel.reshape(b * c, 1, hk, wk), groups=b * c)
    return out.reshape(b, c, hs - hk + 1, ws - wk + 1)


class _BranchAdjust(nn.Module):
    """3x3 adjustment applied to one branch before correlation."""

    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm = nn.GroupNorm(groups, channels)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x: Tensor) -> Tensor:
        return self.relu(self.norm(self.conv(x)))


class RpnHead(nn.Module):
    """One correlation head: per-branch adjust, xcorr, 1x1 output."""

    def __init__(self, channels: int, out_channels: int, template_crop: int,
                 norm_groups: int):
        super().__init__()
        self.template_crop = template_crop
        self.kernel_adjust = _BranchAdjust(channels, norm_groups)
        self.search_adjust = _BranchAdjust(channels, norm_groups)
        self.head = nn.Sequential(
            nn.Conv2d(channels, channels, 1, bias=False),
            nn.GroupNorm(norm_groups, channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, out_channels, 1),
        )

    def forward(self, template: Tensor, search: Tensor) -> Tensor:
        kernel = self.kernel_adjust(template)
        if kernel.shape[-1] > self.template_crop:
            kernel = center_crop(kernel, self.template_crop)
        response = depthwise_xcorr(self.search_adjust(search), kernel)
        return self.head(response)


class RpnBlock(nn.Module):
    """Classification and regression heads for one stage."""

    def __init__(self, channels: int, num_anchor_shapes: int,
                 template_crop: int, norm_groups: int):
        super().__init__()
        self.num_anchor_shapes = num_anchor_shapes
        self.cls = RpnHead(channels, 2 * num_anchor_shapes, template_crop,
                           norm_groups)
        self.reg = RpnHead(channels, 4 * num_anchor_shapes, template_crop,
                           norm_groups)

    def forward(self, template: Tensor, search: Tensor) -> tuple[Tensor, Tensor]:
        return self.cls(template, search), self.reg(template, search)


class StageFusion(nn.Module):
    """Softmax-weighted average of per-stage maps, trained end to end."""

    def __init__(self, num_stages: int = 3):
        super().__init__()
        self.cls_logits = nn.Parameter(torch.zeros(num_stages))
        self.reg_logits = nn.Parameter(torch.zeros(num_stages))

    @staticmethod
    def _fuse(maps: list[Tensor], logits: Tensor) -> Tensor:
        weights = F.softmax(logits, dim=0)
        out = maps[0] * weights[0]
        for m, w in zip(maps[1:], weights[1:]):
            out = out + m * w
        return out

    def forward(self, cls_maps: list[Tensor],
                reg_maps: list[Tensor]) -> tuple[Tensor, Tensor]:
        if len(cls_maps) != self.cls_logits.shape[0]:
            raise ValueError(
                f"expected {self.cls_logits.shape[0]} stage maps, got "
                f"{len(cls_maps)}")
        return (self._fuse(cls_maps, self.cls_logits),
                self._fuse(reg_maps, self.reg_logits))


def foreground_scores(cls_map: Tensor) -> np.ndarray:
    """Per-anchor foreground probabilities, flattened anchor-major.

    cls_map is (2k, S, S) or (1, 2k, S, S); channels split into k
    background maps then k foreground maps, softmaxed pairwise.
    """
    if cls_map.dim() == 4:
        if cls_map.shape[0] != 1:
            raise ValueError("foreground_scores expects a single sample")
        cls_map = cls_map[0]
    two_k, s, _ = cls_map.shape
    k = two_k // 2
    pair = cls_map.view(2, k, s, s)
    probs = F.softmax(pair, dim=0)[1]  # (k, S, S)
    return probs.reshape(-1).detach().cpu().numpy().astype(np.float64)


def flatten_deltas(reg_map: Tensor) -> np.ndarray:
    """(4k, S, S) or (1, 4k, S, S) -> (k*S*S, 4) anchor-major deltas."""
    if reg_map.dim() == 4:
        if reg_map.shape[0] != 1:
            raise ValueError("flatten_deltas expects a single sample")
        reg_map = reg_map[0]
    four_k, s, _ = reg_map.shape
    k = four_k // 4
    out = reg_map.view(k, 4, s, s).permute(0, 2, 3, 1)
    return out.reshape(-1, 4).detach().cpu().numpy().astype(np.float64)


def select_best(scores: np.ndarray, deltas: np.ndarray,
                grid: AnchorGrid) -> tuple[np.ndarray, float, int]:
    """Highest-scoring proposal; ties resolved to the lowest flat index.

    Returns (box center-format in crop pixels, score, flat index).
    np.argmax returns the first maximum, which is the tie rule.
    """
    if scores.shape[0] != grid.boxes.shape[0]:
        raise ValueError(
            f"score count {scores.shape[0]} does not match anchor count "
            f"{grid.boxes.shape[0]}")
    idx = int(np.argmax(scores))
    box = decode_deltas(deltas[idx], grid.boxes[idx])
    return box, float(scores[idx]), idx
