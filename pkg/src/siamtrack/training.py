"""Optimisation loop: schedule, target assembly, region sampling.

SGD with momentum, warm-up followed by geometric decay, backbone frozen
for the first half of the schedule then trained at a reduced rate. Each
step samples augmented pairs, labels anchors against the ground truth,
draws high-overlap candidate regions for the refinement heads, and
minimises the weighted objective. Progress is logged as JSON lines and
a checkpoint is written per epoch.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from . import losses
from .anchors import AnchorGrid, encode_deltas, iou_center, label_anchors, \
    sample_cls_indices
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash
from .data import CropPair, PairSampler, SequenceRecord
from .losses import LossBreakdown, LossWeights, assemble_loss
from .model import PairOutput, SiamTrackNet, make_anchor_grid
from .refinement import boxes_to_rois, clip_box_to_crop, \
    mask_target_for_region
from .rpn import flatten_deltas, foreground_scores
from .synthetic import synthetic_benchmark


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the step context."""


def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.Generator(np.random.PCG64(seed))


def lr_at(epoch: int, cfg: RunConfig) -> float:
    """Base learning rate: constant warm-up, then geometric decay.

    The warm-up epochs run at warmup_lr; the remaining epochs
    interpolate geometrically so the first decay epoch gets
    decay_lr_start and the final epoch gets decay_lr_end exactly.
    """
    t = cfg.training
    if epoch < 0 or epoch >= t.epochs:
        raise ValueError(f"epoch {epoch} outside schedule of {t.epochs}")
    if epoch < t.warmup_epochs:
        return t.warmup_lr
    span = t.epochs - 1 - t.warmup_epochs
    if span <= 0:
        return t.decay_lr_start
    frac = (epoch - t.warmup_epochs) / span
    return t.decay_lr_start * (t.decay_lr_end / t.decay_lr_start) ** frac


def backbone_lr_at(epoch: int, cfg: RunConfig) -> float:
    """Backbone group rate: zero while frozen, then a fixed fraction."""
    if epoch < cfg.training.backbone_frozen_epochs:
        return 0.0
    return lr_at(epoch, cfg) * cfg.training.backbone_lr_factor


def _jitter_until_overlap(gt: np.ndarray, min_iou: float,
                          rng: np.random.Generator) -> np.ndarray:
    """A random box guaranteed to overlap gt above min_iou."""
    for _ in range(50):
        cand = gt.copy()
        cand[0] += rng.uniform(-0.15, 0.15) * gt[2]
        cand[1] += rng.uniform(-0.15, 0.15) * gt[3]
        cand[2] *= np.exp(rng.uniform(-0.12, 0.12))
        cand[3] *= np.exp(rng.uniform(-0.12, 0.12))
        if float(iou_center(cand, gt)) > min_iou:
            return cand
    return gt.copy()


def sample_refine_regions(proposals: np.ndarray, gt: np.ndarray, count: int,
                          min_iou: float,
                          rng: np.random.Generator) -> np.ndarray:
    """(count, 4) candidate regions overlapping gt above min_iou.

    Qualifying proposals are drawn without replacement when plentiful,
    with replacement when scarce; with none at all, jittered copies of
    the ground truth keep the refinement heads training.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    valid = (proposals[:, 2] > 0) & (proposals[:, 3] > 0)
    ious = np.where(valid, iou_center(proposals, gt[None, :]), 0.0)
    qual = np.flatnonzero(ious > min_iou)
    if len(qual) >= count:
        picked = rng.choice(qual, size=count, replace=False)
        return proposals[picked]
    if len(qual) > 0:
        picked = rng.choice(qual, size=count, replace=True)
        return proposals[picked]
    return np.stack([_jitter_until_overlap(gt, min_iou, rng)
                     for _ in range(count)])


def pairs_to_tensors(pairs: list[CropPair]) -> tuple[Tensor, Tensor]:
    """Stack crop pairs into float (B,3,H,W) exemplar/search batches."""
    def stack(imgs: list[np.ndarray]) -> Tensor:
        arr = np.stack([i.transpose(2, 0, 1) for i in imgs])
        return torch.from_numpy(arr).float()
    return stack([p.exemplar for p in pairs]), stack([p.search for p in pairs])


class Trainer:
    """Drives optimisation of a SiamTrackNet over pair samples."""

    def __init__(self, cfg: RunConfig, work_dir: str | Path,
                 sequences: list[SequenceRecord] | None = None,
                 log_name: str = "train_log.jsonl"):
        cfg.validate()
        self.cfg = cfg
        self.work_dir = Path(work_dir)
        self.work_dir.mkdir(parents=True, exist_ok=True)
        self.rng = seed_everything(cfg.seed)
        self.model = SiamTrackNet(cfg)
        if sequences is None:
            sequences = synthetic_benchmark(cfg.data.synthetic,
                                            base_seed=cfg.seed * 1000 + 1)
        self.sampler = PairSampler(sequences, cfg.data, cfg.training,
                                   self.rng)
        self.grid: AnchorGrid = make_anchor_grid(cfg)
        self.box_map, self.mask_map = self.model.coord_maps()
        self.weights = LossWeights(cfg.training.lambda_reg,
                                   cfg.training.lambda_refine_box,
                                   cfg.training.lambda_refine_mask)
        self.optimizer = torch.optim.SGD(
            self._param_groups(), lr=cfg.training.warmup_lr,
            momentum=cfg.training.momentum,
            weight_decay=cfg.training.weight_decay)
        self.epoch = 0
        self.log_path = self.work_dir / log_name
        self._log_file = None

    def _param_groups(self) -> list[dict]:
        backbone_params = list(self.model.backbone.parameters())
        backbone_ids = {id(p) for p in backbone_params}
        rest = [p for p in self.model.parameters()
                if id(p) not in backbone_ids]
        return [{"params": rest, "name": "main"},
                {"params": backbone_params, "name": "backbone"}]

    def _log(self, record: dict) -> None:
        if self._log_file is None:
            self._log_file = open(self.log_path, "a")
            header = {"event": "config",
                      "config_hash": config_hash(self.cfg),
                      "config": self.cfg.to_dict()}
            self._log_file.write(json.dumps(header) + "\n")
        self._log_file.write(json.dumps(record) + "\n")
        self._log_file.flush()

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch
        base = lr_at(epoch, self.cfg)
        bb = backbone_lr_at(epoch, self.cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = bb if group["name"] == "backbone" else base
        frozen = epoch < self.cfg.training.backbone_frozen_epochs
        for p in self.model.backbone.parameters():
            p.requires_grad_(not frozen)

    # -- one optimisation step -----------------------------------------

    def _rpn_targets(self, pairs: list[CropPair]
                     ) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
        labels = np.empty((len(pairs), self.grid.boxes.shape[0]),
                          dtype=np.int64)
        targets = np.empty((len(pairs), self.grid.boxes.shape[0], 4))
        sample_idx = []
        r = self.cfg.rpn
        for b, pair in enumerate(pairs):
            lab, tgt = label_anchors(self.grid, pair.gt_box_in_search,
                                     r.pos_iou, r.neg_iou)
            labels[b] = lab
            targets[b] = tgt
            sample_idx.append(sample_cls_indices(
                lab, r.cls_sample_total, r.cls_sample_pos, self.rng))
        return labels, targets, sample_idx

    def _refine_targets(self, out: PairOutput, pairs: list[CropPair]
                        ) -> tuple[Tensor, np.ndarray, Tensor | None,
                                   np.ndarray | None]:
        """Sample regions, pool them, and build their training targets."""
        rcfg = self.cfg.refinement
        crop = self.cfg.data.search_size
        boxes_all, batch_idx, delta_targets = [], [], []
        mask_targets, mask_region = [], []
        for b, pair in enumerate(pairs):
            proposals = self._decode_sample(out.reg_map[b:b + 1])
            regions = sample_refine_regions(
                proposals, pair.gt_box_in_search, rcfg.samples_per_pair,
                rcfg.sample_iou, self.rng)
            for region in regions:
                region = clip_box_to_crop(region, crop)
                boxes_all.append(region)
                batch_idx.append(b)
                delta_targets.append(
                    encode_deltas(pair.gt_box_in_search, region))
                if pair.gt_mask_in_search is not None:
                    mask_targets.append(mask_target_for_region(
                        pair.gt_mask_in_search, region, rcfg.mask_size))
                    mask_region.append(len(boxes_all) - 1)
        boxes_arr = np.stack(boxes_all)
        idx_arr = np.asarray(batch_idx)
        device = out.box_feat.device
        rois_box = boxes_to_rois(boxes_arr, idx_arr, self.box_map, device)
        deltas = self.model.refine.refine_boxes(out.box_feat, rois_box)
        mask_logits = None
        masks_np = None
        if mask_targets:
            sel = np.asarray(mask_region)
            rois_mask = boxes_to_rois(boxes_arr[sel], idx_arr[sel],
                                      self.mask_map, device)
            mask_logits = self.model.refine.predict_masks(
                out.mask_feat, rois_mask)
            masks_np = np.stack(mask_targets)
        return deltas, np.stack(delta_targets), mask_logits, masks_np

    def _decode_sample(self, reg_map: Tensor) -> np.ndarray:
        from .anchors import decode_deltas
        deltas = flatten_deltas(reg_map.detach())
        return decode_deltas(deltas, self.grid.boxes)

    def train_step(self, pairs: list[CropPair]) -> LossBreakdown:
        self.model.train()
        exemplar, search = pairs_to_tensors(pairs)
        out = self.model.forward_pair(exemplar, search)
        labels, targets, sample_idx = self._rpn_targets(pairs)
        cls_loss = losses.rpn_cls_loss(out.cls_map, labels, sample_idx)
        reg_loss, no_pos = losses.rpn_reg_loss(out.reg_map, targets, labels)
        if self.model.refine is not None:
            deltas, delta_targets, mask_logits, mask_targets = \
                self._refine_targets(out, pairs)
            box_loss = losses.refine_box_loss(deltas, delta_targets)
            mask_loss = losses.refine_mask_loss(mask_logits, mask_targets)
        else:
            box_loss = torch.zeros(())
            mask_loss = torch.zeros(())
        try:
            breakdown = assemble_loss(cls_loss, reg_loss, box_loss,
                                      mask_loss, self.weights, no_pos)
        except FloatingPointError as e:
            raise TrainingDiverged(
                f"epoch {self.epoch}: {e}") from e
        self.optimizer.zero_grad()
        breakdown.total.backward()
        self.optimizer.step()
        return breakdown

    def run(self, epochs: int | None = None,
            checkpoint_every: int = 1) -> Path:
        """Full training; returns the final checkpoint path."""
        t = self.cfg.training
        n_epochs = epochs if epochs is not None else t.epochs
        final = self.work_dir / "checkpoint_final.pt"
        for epoch in range(self.epoch, n_epochs):
            self.set_epoch(epoch)
            tic = time.time()
            for step in range(t.steps_per_epoch):
                pairs = self.sampler.sample_batch(t.batch_size)
                breakdown = self.train_step(pairs)
                rec = {"epoch": epoch, "step": step,
                       "lr": lr_at(epoch, self.cfg)}
                rec.update(breakdown.detached())
                self._log(rec)
            # wall-clock time goes to stdout, not the log: the log file
            # must be identical between same-seed runs
            self._log({"event": "epoch_end", "epoch": epoch})
            print(f"epoch {epoch}: {time.time() - tic:.1f}s "
                  f"loss {breakdown.detached()['loss']:.4f}")
            if (epoch + 1) % checkpoint_every == 0 or epoch == n_epochs - 1:
                save_checkpoint(self.work_dir / f"checkpoint_e{epoch:03d}.pt",
                                self.model, self.cfg, epoch, self.optimizer)
        save_checkpoint(final, self.model, self.cfg, n_epochs - 1,
                        self.optimizer)
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None
        return final

    def resume(self, path: str | Path) -> None:
        payload = load_checkpoint(path, self.model, self.cfg,
                                  self.optimizer)
        self.epoch = int(payload.get("epoch", -1)) + 1


def overfit_pair(cfg: RunConfig, steps: int, lr: float = 5e-3,
                 log_every: int = 0) -> list[float]:
    """Train on one fixed pair; returns the loss history.

    A sanity probe: with everything wired correctly the objective on a
    single memorised example collapses quickly.
    """
    rng = seed_everything(cfg.seed)
    from .synthetic import generate_synthetic_sequence
    seq = generate_synthetic_sequence(cfg.data.synthetic, cfg.seed + 7)
    sampler = PairSampler([seq], cfg.data, cfg.training, rng)
    pairs = [sampler.sample_pair()]
    trainer = Trainer.__new__(Trainer)
    trainer.cfg = cfg
    trainer.rng = rng
    trainer.model = SiamTrackNet(cfg)
    trainer.grid = make_anchor_grid(cfg)
    trainer.box_map, trainer.mask_map = trainer.model.coord_maps()
    trainer.weights = LossWeights(cfg.training.lambda_reg,
                                  cfg.training.lambda_refine_box,
                                  cfg.training.lambda_refine_mask)
    trainer.optimizer = torch.optim.SGD(trainer.model.parameters(), lr=lr,
                                        momentum=cfg.training.momentum)
    trainer.epoch = 0
    history = []
    for step in range(steps):
        breakdown = trainer.train_step(pairs)
        history.append(float(breakdown.total.detach()))
        if log_every and step % log_every == 0:
            print(f"step {step}: loss {history[-1]:.4f}")
    return history
