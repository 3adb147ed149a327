"""Training objective: classification, regression, refinement terms.

total = cls + 0.2 * reg + 0.2 * refine_box + 0.1 * refine_mask

Classification is negative log-likelihood over sampled anchors,
regression and box refinement are smooth-L1 on positives, the mask term
is binary cross-entropy on refined regions. Terms without eligible
elements contribute exactly zero and are flagged, never NaN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .anchors import POS_LABEL


@dataclass(frozen=True)
class LossWeights:
    reg: float = 0.2
    refine_box: float = 0.2
    refine_mask: float = 0.1


@dataclass
class LossBreakdown:
    """Weighted total plus unweighted parts; floats follow the tensors."""

    total: Tensor
    rpn_cls: Tensor
    rpn_reg: Tensor
    refine_box: Tensor
    refine_mask: Tensor
    no_positives: bool

    def detached(self) -> dict[str, float]:
        return {
            "loss": float(self.total.detach()),
            "cls": float(self.rpn_cls.detach()),
            "reg": float(self.rpn_reg.detach()),
            "refine_box": float(self.refine_box.detach()),
            "refine_mask": float(self.refine_mask.detach()),
            "no_positives": self.no_positives,
        }


def _zero(ref: Tensor) -> Tensor:
    return torch.zeros((), dtype=ref.dtype, device=ref.device)


def cls_logits_per_anchor(cls_map: Tensor) -> Tensor:
    """(B, 2k, S, S) -> (B, k*S*S, 2) anchor-major (background, foreground)."""
    b, two_k, s, _ = cls_map.shape
    k = two_k // 2
    out = cls_map.view(b, 2, k, s, s).permute(0, 2, 3, 4, 1)
    return out.reshape(b, k * s * s, 2)


def reg_deltas_per_anchor(reg_map: Tensor) -> Tensor:
    """(B, 4k, S, S) -> (B, k*S*S, 4) anchor-major deltas."""
    b, four_k, s, _ = reg_map.shape
    k = four_k // 4
    out = reg_map.view(b, k, 4, s, s).permute(0, 1, 3, 4, 2)
    return out.reshape(b, k * s * s, 4)


def rpn_cls_loss(cls_map: Tensor, labels: np.ndarray,
                 sample_idx: list[np.ndarray]) -> Tensor:
    """NLL over the sampled anchors of every batch element, pooled."""
    logits = cls_logits_per_anchor(cls_map)
    picked_logits, picked_labels = [], []
    for b, idx in enumerate(sample_idx):
        if idx.size == 0:
            continue
        picked_logits.append(logits[b, torch.from_numpy(idx).long()])
        picked_labels.append(torch.from_numpy(labels[b, idx]).long())
    if not picked_logits:
        return _zero(cls_map)
    return F.cross_entropy(torch.cat(picked_logits),
                           torch.cat(picked_labels))


def rpn_reg_loss(reg_map: Tensor, targets: np.ndarray,
                 labels: np.ndarray) -> tuple[Tensor, bool]:
    """Smooth-L1 over positive anchors; zero (flagged) when none exist."""
    deltas = reg_deltas_per_anchor(reg_map)
    pos_mask = torch.from_numpy(labels == POS_LABEL)
    if not bool(pos_mask.any()):
        return _zero(reg_map), True
    pred = deltas[pos_mask]
    tgt = torch.from_numpy(targets).to(deltas.dtype)[pos_mask]
    return F.smooth_l1_loss(pred, tgt), False


def refine_box_loss(pred_deltas: Tensor | None,
                    target_deltas: np.ndarray | None) -> Tensor:
    if pred_deltas is None or target_deltas is None:
        return torch.zeros(())
    tgt = torch.from_numpy(target_deltas).to(pred_deltas.dtype)
    return F.smooth_l1_loss(pred_deltas, tgt)


def refine_mask_loss(logits: Tensor | None,
                     targets: np.ndarray | None) -> Tensor:
    """BCE over region masks; absent masks contribute exactly zero."""
    if logits is None or targets is None or targets.size == 0:
        return torch.zeros(()) if logits is None else _zero(logits)
    tgt = torch.from_numpy(targets).to(logits.dtype)
    return F.binary_cross_entropy_with_logits(logits.squeeze(1), tgt)


def assemble_loss(rpn_cls: Tensor, rpn_reg: Tensor, refine_box: Tensor,
                  refine_mask: Tensor, weights: LossWeights,
                  no_positives: bool) -> LossBreakdown:
    total = (rpn_cls + weights.reg * rpn_reg
             + weights.refine_box * refine_box
             + weights.refine_mask * refine_mask)
    if not torch.isfinite(total):
        raise FloatingPointError(
            f"non-finite loss: cls={float(rpn_cls)} reg={float(rpn_reg)} "
            f"box={float(refine_box)} mask={float(refine_mask)}")
    return LossBreakdown(total=total, rpn_cls=rpn_cls, rpn_reg=rpn_reg,
                         refine_box=refine_box, refine_mask=refine_mask,
                         no_positives=no_positives)
