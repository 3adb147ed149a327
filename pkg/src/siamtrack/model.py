"""Full tracking network: backbone, attention blocks, heads, refinement.

Templates and searches share the backbone. The three deep stages each
pass through their own attention block and correlation heads; head maps
are fused with learned weights. For inference the template-side
attentional features and the template's channel Gram are computed once
at initialisation and cached, so per-frame work touches only the search
branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .attention import SiameseAttentionBlock
from .anchors import AnchorGrid, build_anchor_grid
from .backbone import Backbone, StageBundle, feature_side
from .config import RunConfig
from .refinement import RefinementModule, branch_coord_maps
from .rpn import RpnBlock, StageFusion


def response_size(cfg: RunConfig, search_size: int | None = None) -> int:
    """Side of the correlation response for a given search crop."""
    side = search_size or cfg.data.search_size
    feat = feature_side(side, cfg.backbone.final_stride)
    kernel = min(cfg.rpn.template_crop,
                 feature_side(cfg.data.exemplar_size,
                              cfg.backbone.final_stride))
    return feat - kernel + 1


def make_anchor_grid(cfg: RunConfig,
                     search_size: int | None = None) -> AnchorGrid:
    side = search_size or cfg.data.search_size
    return build_anchor_grid(
        response_size(cfg, side), cfg.backbone.final_stride,
        cfg.rpn.anchor_ratios, cfg.rpn.anchor_base_scale, side)


@dataclass
class PairOutput:
    """Everything the training loss needs from one template/search batch."""

    cls_map: Tensor                 # (B, 2k, S, S) fused
    reg_map: Tensor                 # (B, 4k, S, S) fused
    box_feat: Tensor | None         # (B, C, S, S) refinement trunk
    mask_feat: Tensor | None        # (B, C, 64, 64)
    search_bundle: StageBundle


class SiamTrackNet(nn.Module):
    """Siamese attention tracker network."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone)
        channels = cfg.backbone.adjusted_channels
        groups = min(cfg.backbone.norm_groups, channels)
        k = len(cfg.rpn.anchor_ratios)
        if cfg.attention.enabled:
            self.attention: nn.ModuleList | None = nn.ModuleList(
                SiameseAttentionBlock(channels, cfg.attention)
                for _ in range(3))
        else:
            self.attention = None
        self.rpn = nn.ModuleList(
            RpnBlock(channels, k, cfg.rpn.template_crop, groups)
            for _ in range(3))
        self.fusion = StageFusion(3)
        if cfg.refinement.enabled:
            low = (cfg.backbone.channels_per_stage[0],
                   cfg.backbone.channels_per_stage[1])
            self.refine: RefinementModule | None = RefinementModule(
                channels, low, cfg.refinement, cfg.rpn.template_crop, groups)
        else:
            self.refine = None

    # -- feature extraction --------------------------------------------

    def extract(self, crop: Tensor) -> StageBundle:
        return self.backbone(crop)

    def attend_pair(self, template: StageBundle,
                    search: StageBundle) -> tuple[list[Tensor], list[Tensor]]:
        """Run the attention blocks over the deep stages of both branches."""
        t_deep = template.deep()
        s_deep = search.deep()
        if self.attention is None:
            return t_deep, s_deep
        t_out, s_out = [], []
        for block, t, s in zip(self.attention, t_deep, s_deep):
            ot, os_ = block(t, s)
            t_out.append(ot)
            s_out.append(os_)
        return t_out, s_out

    def heads(self, t_feats: list[Tensor],
              s_feats: list[Tensor]) -> tuple[Tensor, Tensor]:
        cls_maps, reg_maps = [], []
        for block, t, s in zip(self.rpn, t_feats, s_feats):
            c, r = block(t, s)
            cls_maps.append(c)
            reg_maps.append(r)
        return self.fusion(cls_maps, reg_maps)

    # -- training path ---------------------------------------------------

    def forward_pair(self, exemplar: Tensor, search: Tensor) -> PairOutput:
        zb = self.extract(exemplar)
        xb = self.extract(search)
        t_feats, s_feats = self.attend_pair(zb, xb)
        cls_map, reg_map = self.heads(t_feats, s_feats)
        box_feat = mask_feat = None
        if self.refine is not None:
            box_feat, mask_feat = self.refine.fuse(
                t_feats, s_feats, xb.stage1, xb.stage2)
        return PairOutput(cls_map=cls_map, reg_map=reg_map,
                          box_feat=box_feat, mask_feat=mask_feat,
                          search_bundle=xb)

    forward = forward_pair

    # -- inference path ----------------------------------------------------

    @torch.no_grad()
    def template_state(self, exemplar: Tensor,
                       first_search: Tensor) -> dict[str, list[Tensor]]:
        """Cacheable template-side state from the first frame.

        The template branch's own attention needs a search partner, so
        the crop around the initial box serves as it; afterwards both
        the attended template features and the template cross maps stay
        fixed.
        """
        zb = self.extract(exemplar)
        xb = self.extract(first_search)
        t_feats, _ = self.attend_pair(zb, xb)
        cross_maps: list[Tensor] = []
        if self.attention is not None:
            for block, t in zip(self.attention, zb.deep()):
                if block.cfg.cross_attn:
                    cross_maps.append(block.template_cross_map(t))
                else:
                    cross_maps.append(None)  # type: ignore[arg-type]
        return {"template_feats": t_feats, "cross_maps": cross_maps}

    @torch.no_grad()
    def track_response(self, search: Tensor,
                       state: dict[str, list[Tensor]]) -> PairOutput:
        xb = self.extract(search)
        s_deep = xb.deep()
        if self.attention is not None:
            s_feats = [
                block.forward_search(s, cm)
                for block, s, cm in zip(self.attention, s_deep,
                                        state["cross_maps"])]
        else:
            s_feats = s_deep
        t_feats = state["template_feats"]
        cls_map, reg_map = self.heads(t_feats, s_feats)
        box_feat = mask_feat = None
        if self.refine is not None:
            box_feat, mask_feat = self.refine.fuse(
                t_feats, s_feats, xb.stage1, xb.stage2)
        return PairOutput(cls_map=cls_map, reg_map=reg_map,
                          box_feat=box_feat, mask_feat=mask_feat,
                          search_bundle=xb)

    def coord_maps(self, search_size: int | None = None):
        side = search_size or self.cfg.data.search_size
        return branch_coord_maps(side, response_size(self.cfg, side),
                                 self.cfg.backbone.final_stride,
                                 self.cfg.refinement.mask_size)
