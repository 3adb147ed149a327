"""Siamese attention block: self-attention, cross-attention, deformation.

Each deep backbone stage feeds one block that refines the template and
search features jointly:

* spatial self-attention: 1x1 projections to C/8 query/key and C value;
  the N x N map is column-normalised and mixes value columns.
* channel self-attention: the C x C Gram of the raw (unprojected)
  feature against itself, softmax-normalised, mixes channels.
* cross-attention: each branch is mixed by the channel Gram of the
  *other* branch, which is how template information keeps steering the
  search features after initialisation (and vice versa during training).

Every sub-module output is `scale * attended + input` with the scale a
learned scalar starting at zero, so an untrained block is exactly the
identity. The three outputs are summed elementwise and passed through a
deformable convolution that aligns sampling with object geometry.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import AttentionConfig
from .deform import DeformableConv2d


def flatten_spatial(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C, N) with N = H*W, row-major."""
    return x.reshape(x.shape[0], x.shape[1], -1)


def spatial_attention_map(query: Tensor, key: Tensor) -> Tensor:
    """Column-normalised N x N map from projected features (B, C', N).

    Entry (i, j) is the weight of position i in the mix for output
    position j; each column sums to one.
    """
    logits = torch.bmm(query.transpose(1, 2), key)  # (B, N, N)
    return F.softmax(logits, dim=1)


def channel_attention_map(feat: Tensor, other: Tensor,
                          axis: str = "row") -> Tensor:
    """Softmax-normalised C x C Gram map between two (B, C, N) features.

    ``feat @ other^T`` scores channel pairs; ``axis`` picks which way
    the softmax runs ("row": each row sums to one).
    """
    logits = torch.bmm(feat, other.transpose(1, 2))  # (B, C, C)
    dim = 2 if axis == "row" else 1
    return F.softmax(logits, dim=dim)


class SpatialSelfAttention(nn.Module):
    """Projection set for spatial self-attention, shared by both branches."""

    def __init__(self, channels: int):
        super().__init__()
        if channels % 8 != 0:
            raise ValueError(
                f"spatial attention needs channels divisible by 8, got "
                f"{channels}")
        reduced = channels // 8
        self.query = nn.Conv2d(channels, reduced, 1)
        self.key = nn.Conv2d(channels, reduced, 1)
        self.value = nn.Conv2d(channels, channels, 1)

    def attention_map(self, x: Tensor) -> Tensor:
        q = flatten_spatial(self.query(x))
        k = flatten_spatial(self.key(x))
        return spatial_attention_map(q, k)

    def forward(self, x: Tensor, scale: Tensor) -> Tensor:
        b, c, h, w = x.shape
        attn = self.attention_map(x)
        v = flatten_spatial(self.value(x))
        mixed = torch.bmm(v, attn)  # (B, C, N)
        return scale * mixed.view(b, c, h, w) + x


def channel_self_attention(x: Tensor, scale: Tensor,
                           axis: str = "row") -> Tensor:
    """Parameter-free channel self-attention with residual."""
    b, c, h, w = x.shape
    flat = flatten_spatial(x)
    attn = channel_attention_map(flat, flat, axis)
    mixed = torch.bmm(attn, flat)
    return scale * mixed.view(b, c, h, w) + x


def cross_attention(x: Tensor, other: Tensor, scale: Tensor,
                    axis: str = "row") -> Tensor:
    """Mix x's channels by the channel Gram of the other branch.

    The map depends only on ``other``, so for tracking it can be built
    once from the cached template features.
    """
    b, c, h, w = x.shape
    flat_other = flatten_spatial(other)
    attn = channel_attention_map(flat_other, flat_other, axis)
    return apply_cross_map(x, attn, scale)


def apply_cross_map(x: Tensor, attn: Tensor, scale: Tensor) -> Tensor:
    """Apply a precomputed C x C cross map to x with residual."""
    b, c, h, w = x.shape
    mixed = torch.bmm(attn, flatten_spatial(x))
    return scale * mixed.view(b, c, h, w) + x


class SiameseAttentionBlock(nn.Module):
    """One stage's full attention block for a template/search pair.

    The spatial projections are shared by both branches; each branch
    owns its residual scales and its deformable convolution, because
    template and search statistics differ. Sub-modules can be toggled
    independently; with everything off the block reduces to the
    deformable convolution of the raw features, and with the whole
    block disabled upstream the features pass through untouched.
    """

    def __init__(self, channels: int, cfg: AttentionConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.spatial = SpatialSelfAttention(channels) if cfg.spatial_sa else None
        zero = lambda: nn.Parameter(torch.tensor(0.0))
        self.alpha_t = zero()
        self.alpha_s = zero()
        self.beta_t = zero()
        self.beta_s = zero()
        self.gamma_t = zero()
        self.gamma_s = zero()
        if cfg.deform_position == "after_sum":
            self.deform_t = DeformableConv2d(channels, channels,
                                             active=cfg.deform_conv)
            self.deform_s = DeformableConv2d(channels, channels,
                                             active=cfg.deform_conv)
        else:
            n_branches = max(1, int(cfg.spatial_sa) + int(cfg.channel_sa)
                             + int(cfg.cross_attn))
            self.deform_t = nn.ModuleList(
                DeformableConv2d(channels, channels, active=cfg.deform_conv)
                for _ in range(n_branches))
            self.deform_s = nn.ModuleList(
                DeformableConv2d(channels, channels, active=cfg.deform_conv)
                for _ in range(n_branches))

    def _combine(self, parts: list[Tensor], x: Tensor,
                 deform: nn.Module | nn.ModuleList) -> Tensor:
        if not parts:
            parts = [x]
        if self.cfg.deform_position == "after_sum":
            total = parts[0]
            for p in parts[1:]:
                total = total + p
            return deform(total)
        out = deform[0](parts[0])
        for conv, p in zip(list(deform)[1:], parts[1:]):
            out = out + conv(p)
        return out

    def _search_parts(self, x: Tensor, cross_map: Tensor | None) -> list[Tensor]:
        parts = []
        if self.cfg.spatial_sa:
            parts.append(self.spatial(x, self.alpha_s))
        if self.cfg.channel_sa:
            parts.append(channel_self_attention(
                x, self.beta_s, self.cfg.channel_softmax_axis))
        if self.cfg.cross_attn and cross_map is not None:
            parts.append(apply_cross_map(x, cross_map, self.gamma_s))
        return parts

    def template_cross_map(self, template: Tensor) -> Tensor:
        """C x C map built from template features, fixed after init."""
        flat = flatten_spatial(template)
        return channel_attention_map(flat, flat,
                                     self.cfg.channel_softmax_axis)

    def forward(self, template: Tensor, search: Tensor) -> tuple[Tensor, Tensor]:
        parts_t = []
        if self.cfg.spatial_sa:
            parts_t.append(self.spatial(template, self.alpha_t))
        if self.cfg.channel_sa:
            parts_t.append(channel_self_attention(
                template, self.beta_t, self.cfg.channel_softmax_axis))
        if self.cfg.cross_attn:
            parts_t.append(cross_attention(
                template, search, self.gamma_t,
                self.cfg.channel_softmax_axis))
        cross_map = (self.template_cross_map(template)
                     if self.cfg.cross_attn else None)
        parts_s = self._search_parts(search, cross_map)
        out_t = self._combine(parts_t, template, self.deform_t)
        out_s = self._combine(parts_s, search, self.deform_s)
        return out_t, out_s

    def forward_search(self, search: Tensor,
                       cross_map: Tensor | None) -> Tensor:
        """Search branch only, with the template's cross map cached."""
        parts = self._search_parts(search, cross_map)
        return self._combine(parts, search, self.deform_s)
