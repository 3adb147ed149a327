"""Region refinement: fused correlation pyramid, box and mask heads.

The per-stage attentional features are correlated depthwise (template
kernel centre-cropped as in the coarse heads), aligned by 1x1
convolutions and summed into one trunk. The trunk feeds two branches:
a box branch at response resolution and a mask branch upsampled to
64x64 that also ingests the two early search stages for detail. Both
branches are pooled per candidate region with deformable RoI pooling;
the box head regresses a center/size delta from a 4x4 pool through two
512-wide fully connected layers, and the mask head decodes a 16x16 pool
through four 3x3 convolutions and a single x4 deconvolution to 64x64
logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import RefinementConfig
from .deform import DeformableRoIPool, bilinear_sample
from .rpn import center_crop, depthwise_xcorr


@dataclass(frozen=True)
class CoordMap:
    """Affine map from search-crop pixels to one branch's feature pixels."""

    offset: float
    stride: float

    def to_feature(self, boxes: np.ndarray) -> np.ndarray:
        """Center-format crop boxes -> feature coordinates."""
        boxes = np.asarray(boxes, dtype=np.float64)
        out = boxes.copy()
        out[..., 0] = (boxes[..., 0] - self.offset) / self.stride
        out[..., 1] = (boxes[..., 1] - self.offset) / self.stride
        out[..., 2] = boxes[..., 2] / self.stride
        out[..., 3] = boxes[..., 3] / self.stride
        return out


def branch_coord_maps(crop_size: int, response_size: int, stride: int,
                      mask_size: int) -> tuple[CoordMap, CoordMap]:
    """Coordinate maps for the box (SxS) and mask (64x64) branches.

    The mask branch is the trunk resized with corner alignment, so its
    cell m lies where trunk cell m*(S-1)/(mask_size-1) lies.
    """
    offset = (crop_size - 1) / 2.0 - (response_size - 1) / 2.0 * stride
    box_map = CoordMap(offset=offset, stride=float(stride))
    mask_map = CoordMap(offset=offset,
                        stride=stride * (response_size - 1) / (mask_size - 1))
    return box_map, mask_map


def clip_box_to_crop(box: np.ndarray, crop_size: int,
                     min_size: float = 1.0) -> np.ndarray:
    """Clip a center-format box to crop bounds; reject if it collapses."""
    x0, y0 = box[0] - box[2] / 2, box[1] - box[3] / 2
    x1, y1 = box[0] + box[2] / 2, box[1] + box[3] / 2
    x0, x1 = np.clip([x0, x1], 0, crop_size - 1)
    y0, y1 = np.clip([y0, y1], 0, crop_size - 1)
    if x1 - x0 < min_size or y1 - y0 < min_size:
        raise ValueError(f"box degenerate after clipping to crop: {box!r}")
    return np.array([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0],
                    dtype=np.float64)


def boxes_to_rois(boxes: np.ndarray, batch_idx: np.ndarray,
                  cmap: CoordMap, device: torch.device) -> Tensor:
    """Stack (R,4) crop boxes into an (R,5) feature-space RoI tensor."""
    feats = cmap.to_feature(np.asarray(boxes, dtype=np.float64))
    rois = np.concatenate(
        [np.asarray(batch_idx, dtype=np.float64)[:, None], feats], axis=1)
    return torch.from_numpy(rois).to(device=device, dtype=torch.float32)


def mask_target_for_region(mask: np.ndarray, box: np.ndarray,
                           out_size: int) -> np.ndarray:
    """Resample a crop-space binary mask over a region box to out_size^2.

    Uses the same aligned bin-centre grid as the pooling operators so
    targets and pooled features line up. Returns float32 in [0, 1].
    """
    m = torch.from_numpy(np.ascontiguousarray(mask)).float()[None, None]
    cx, cy, w, h = [float(v) for v in box]
    steps = (torch.arange(out_size, dtype=torch.float32) + 0.5) / out_size
    gy, gx = torch.meshgrid(steps, steps, indexing="ij")
    xs = (cx - w / 2 + gx * w).reshape(1, -1)
    ys = (cy - h / 2 + gy * h).reshape(1, -1)
    vals = bilinear_sample(m, xs, ys)
    return vals.view(out_size, out_size).numpy().astype(np.float32)


class RefinementModule(nn.Module):
    """Box and mask refinement over the fused correlation pyramid."""

    def __init__(self, attn_channels: int, low_channels: tuple[int, int],
                 cfg: RefinementConfig, template_crop: int,
                 norm_groups: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.template_crop = template_crop
        c = cfg.channels
        g = min(norm_groups, c)
        self.stage_align = nn.ModuleList(
            nn.Conv2d(attn_channels, c, 1) for _ in range(3))
        self.box_neck = nn.Sequential(
            nn.Conv2d(c, c, 1, bias=False), nn.GroupNorm(g, c),
            nn.ReLU(inplace=True))
        self.mask_neck = nn.Conv2d(c, c, 1)
        self.low_align1 = nn.Conv2d(low_channels[0], c, 1)
        self.low_align2 = nn.Conv2d(low_channels[1], c, 1)
        self.mask_post = nn.Sequential(nn.GroupNorm(g, c),
                                       nn.ReLU(inplace=True))
        self.box_pool = DeformableRoIPool(
            c, cfg.box_pool, cfg.offset_scale, active=cfg.deform_pool)
        self.mask_pool = DeformableRoIPool(
            c, cfg.mask_pool, cfg.offset_scale, active=cfg.deform_pool)
        flat = c * cfg.box_pool * cfg.box_pool
        self.box_head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(flat, cfg.fc_width), nn.ReLU(inplace=True),
            nn.Linear(cfg.fc_width, cfg.fc_width), nn.ReLU(inplace=True),
            nn.Linear(cfg.fc_width, 4),
        )
        nn.init.zeros_(self.box_head[-1].weight)
        nn.init.zeros_(self.box_head[-1].bias)
        convs: list[nn.Module] = []
        for _ in range(4):
            convs += [nn.Conv2d(c, c, 3, padding=1, bias=False),
                      nn.GroupNorm(g, c), nn.ReLU(inplace=True)]
        self.mask_convs = nn.Sequential(*convs)
        self.mask_up = nn.ConvTranspose2d(c, c, 4, stride=4)
        self.mask_out = nn.Conv2d(c, 1, 1)

    def fuse(self, templates: list[Tensor], searches: list[Tensor],
             low1: Tensor, low2: Tensor) -> tuple[Tensor, Tensor]:
        """Build (box_feat SxS, mask_feat 64x64) from stage features."""
        trunk: Tensor | None = None
        for align, t, s in zip(self.stage_align, templates, searches):
            kernel = t
            if kernel.shape[-1] > self.template_crop:
                kernel = center_crop(kernel, self.template_crop)
            corr = depthwise_xcorr(s, kernel)
            part = align(corr)
            trunk = part if trunk is None else trunk + part
        assert trunk is not None
        box_feat = self.box_neck(trunk)
        ms = self.cfg.mask_size
        up = F.interpolate(trunk, size=(ms, ms), mode="bilinear",
                           align_corners=True)
        mask_feat = self.mask_neck(up)
        mask_feat = mask_feat + self.low_align1(F.interpolate(
            low1, size=(ms, ms), mode="bilinear", align_corners=True))
        mask_feat = mask_feat + self.low_align2(F.interpolate(
            low2, size=(ms, ms), mode="bilinear", align_corners=True))
        return box_feat, self.mask_post(mask_feat)

    def refine_boxes(self, box_feat: Tensor, rois: Tensor) -> Tensor:
        """(R,5) feature-space RoIs -> (R,4) deltas in anchor coding."""
        pooled = self.box_pool(box_feat, rois)
        return self.box_head(pooled)

    def predict_masks(self, mask_feat: Tensor, rois: Tensor) -> Tensor:
        """(R,5) mask-feature RoIs -> (R,1,64,64) logits."""
        pooled = self.mask_pool(mask_feat, rois)
        x = self.mask_convs(pooled)
        x = F.relu(self.mask_up(x))
        return self.mask_out(x)
