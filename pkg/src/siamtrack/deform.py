"""Deformable sampling primitives: 3x3 convolution and RoI pooling.

Both operators sample their input at learned fractional locations via
bilinear interpolation with zero padding outside the feature map. Both
offset branches are zero-initialised, so a freshly built module computes
exactly its regular counterpart (plain same-padding convolution, plain
aligned average pooling); training then learns where to look.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn


def bilinear_sample(feat: Tensor, xs: Tensor, ys: Tensor) -> Tensor:
    """Sample feat (B,C,H,W) at float coords xs/ys (B,K) -> (B,C,K).

    Coordinates are in feature pixels; locations outside [0, W-1] x
    [0, H-1] contribute zero (zero padding). Differentiable in both the
    features and the coordinates.
    """
    b, c, h, w = feat.shape
    x0 = torch.floor(xs)
    y0 = torch.floor(ys)
    fx = xs - x0
    fy = ys - y0
    flat = feat.reshape(b, c, h * w)
    out = torch.zeros(b, c, xs.shape[1], dtype=feat.dtype, device=feat.device)
    for dx, dy, wt in (
        (0.0, 0.0, (1 - fx) * (1 - fy)),
        (1.0, 0.0, fx * (1 - fy)),
        (0.0, 1.0, (1 - fx) * fy),
        (1.0, 1.0, fx * fy),
    ):
        cx = x0 + dx
        cy = y0 + dy
        valid = (cx >= 0) & (cx <= w - 1) & (cy >= 0) & (cy <= h - 1)
        xi = cx.clamp(0, w - 1).long()
        yi = cy.clamp(0, h - 1).long()
        idx = (yi * w + xi).unsqueeze(1).expand(b, c, -1)
        vals = flat.gather(2, idx)
        out = out + vals * (wt * valid).unsqueeze(1)
    return out


class DeformableConv2d(nn.Module):
    """3x3 same-padding convolution with learned per-tap offsets.

    A side branch predicts 18 channels (dx, dy for each of the 9 taps,
    row-major); each tap reads the input at its regular location plus
    that offset. With the side branch at zero this equals the plain
    convolution with the same weights. ``active=False`` skips the
    sampling entirely and runs the plain convolution.
    """

    def __init__(self, cin: int, cout: int, active: bool = True):
        super().__init__()
        self.active = active
        self.weight = nn.Parameter(torch.empty(cout, cin, 3, 3))
        self.bias = nn.Parameter(torch.zeros(cout))
        nn.init.kaiming_uniform_(self.weight, a=5 ** 0.5)
        self.offset_conv = nn.Conv2d(cin, 18, 3, padding=1)
        nn.init.zeros_(self.offset_conv.weight)
        nn.init.zeros_(self.offset_conv.bias)

    def forward(self, x: Tensor) -> Tensor:
        if not self.active:
            return F.conv2d(x, self.weight, self.bias, padding=1)
        b, c, h, w = x.shape
        offsets = self.offset_conv(x)  # (B, 18, H, W)
        offsets = offsets.view(b, 9, 2, h, w)
        dev = x.device
        base_y, base_x = torch.meshgrid(
            torch.arange(h, dtype=x.dtype, device=dev),
            torch.arange(w, dtype=x.dtype, device=dev), indexing="ij")
        tap_dy, tap_dx = torch.meshgrid(
            torch.arange(-1, 2, dtype=x.dtype, device=dev),
            torch.arange(-1, 2, dtype=x.dtype, device=dev), indexing="ij")
        # (9, H, W) regular grid per tap, then learned offsets on top
        xs = base_x.unsqueeze(0) + tap_dx.reshape(9, 1, 1) + offsets[:, :, 0]
        ys = base_y.unsqueeze(0) + tap_dy.reshape(9, 1, 1) + offsets[:, :, 1]
        sampled = bilinear_sample(x, xs.reshape(b, -1), ys.reshape(b, -1))
        sampled = sampled.view(b, c, 9, h * w)
        kernel = self.weight.view(self.weight.shape[0], c, 9)
        out = torch.einsum("oct,bctk->bok", kernel, sampled)
        out = out.view(b, -1, h, w) + self.bias.view(1, -1, 1, 1)
        return out


class DeformableRoIPool(nn.Module):
    """Aligned RoI pooling with learned per-bin offsets.

    Each output bin takes one bilinear sample at its centre (aligned,
    no coordinate rounding). A small network on the plainly pooled
    feature predicts per-bin offsets, expressed as fractions of the box
    size so deformation is scale-invariant; the final layer starts at
    zero, making the module exactly plain pooling until trained.
    """

    def __init__(self, channels: int, out_size: int,
                 offset_scale: float = 0.1, active: bool = True,
                 hidden: int = 64):
        super().__init__()
        self.out_size = out_size
        self.offset_scale = offset_scale
        self.active = active
        n = out_size * out_size
        self.offset_net = nn.Sequential(
            nn.Linear(channels * n, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, 2 * n),
        )
        last = self.offset_net[-1]
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)

    def _bin_centers(self, rois: Tensor) -> tuple[Tensor, Tensor]:
        """Regular bin-centre grid per RoI -> xs, ys of shape (R, n*n)."""
        n = self.out_size
        cx, cy, w, h = rois[:, 1], rois[:, 2], rois[:, 3], rois[:, 4]
        steps = (torch.arange(n, dtype=rois.dtype, device=rois.device)
                 + 0.5) / n
        gy, gx = torch.meshgrid(steps, steps, indexing="ij")
        xs = cx.view(-1, 1) - (w / 2).view(-1, 1) + gx.reshape(1, -1) * w.view(-1, 1)
        ys = cy.view(-1, 1) - (h / 2).view(-1, 1) + gy.reshape(1, -1) * h.view(-1, 1)
        return xs, ys

    def _sample(self, feat: Tensor, rois: Tensor, xs: Tensor,
                ys: Tensor) -> Tensor:
        """Gather per-RoI samples from the right batch element."""
        r = rois.shape[0]
        c = feat.shape[1]
        out = torch.zeros(r, c, xs.shape[1], dtype=feat.dtype,
                          device=feat.device)
        batch_idx = rois[:, 0].long()
        for b in torch.unique(batch_idx):
            sel = batch_idx == b
            vals = bilinear_sample(feat[b:b + 1], xs[sel].reshape(1, -1),
                                   ys[sel].reshape(1, -1))
            out[sel] = vals.view(feat.shape[1], int(sel.sum()), -1
                                 ).permute(1, 0, 2)
        return out

    def forward(self, feat: Tensor, rois: Tensor) -> Tensor:
        """Pool feat (B,C,H,W) over rois (R,5)=(batch,cx,cy,w,h) -> (R,C,n,n).

        RoI coordinates are in feature pixels; non-positive box sizes
        are rejected.
        """
        if rois.dim() != 2 or rois.shape[1] != 5:
            raise ValueError(f"rois must be (R,5), got {tuple(rois.shape)}")
        if bool((rois[:, 3] <= 0).any()) or bool((rois[:, 4] <= 0).any()):
            raise ValueError("degenerate RoI: non-positive width or height")
        n = self.out_size
        xs, ys = self._bin_centers(rois)
        plain = self._sample(feat, rois, xs, ys)
        plain = plain.view(rois.shape[0], feat.shape[1], n, n)
        if not self.active:
            return plain
        off = self.offset_net(plain.flatten(1))  # (R, 2*n*n)
        off = off.view(rois.shape[0], n * n, 2) * self.offset_scale
        dx = off[:, :, 0] * rois[:, 3].view(-1, 1)
        dy = off[:, :, 1] * rois[:, 4].view(-1, 1)
        out = self._sample(feat, rois, xs + dx, ys + dy)
        return out.view(rois.shape[0], feat.shape[1], n, n)
