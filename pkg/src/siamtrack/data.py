"""Sequences on disk, context crops, and training pair sampling.

Dataset layout (one directory per sequence under the dataset root):

    <root>/<seq_id>/annotations.txt   one line per annotated frame:
                                      frame_index cx cy w h [mask_relpath]
    <root>/<seq_id>/frames/<frame:06d>.png
    <root>/<seq_id>/masks/...         referenced by mask_relpath
    <root>/<seq_id>/visible.txt       optional: one 0/1 per annotation
                                      line (all frames visible if absent)

Boxes are center-format in frame pixels. Malformed annotation lines and
missing frame files are skipped and counted as warnings; a sequence
directory without an annotation file is an error.

Crops follow the usual Siamese convention: the exemplar is the target
box grown by half its perimeter of context, resampled to a fixed square;
the search window scales the same context window up by the
search/exemplar ratio. Out-of-frame area is filled with the frame's
channel means. The affine transform of every crop is kept so boxes map
between frame and crop coordinates exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .config import DataConfig, TrainConfig


class DataError(ValueError):
    """Dataset root/sequence level problems that cannot be skipped."""


@dataclass(frozen=True)
class CropTransform:
    """Affine frame->crop map: u = (x - x0 + 0.5) * scale - 0.5."""

    x0: float
    y0: float
    scale: float

    def box_to_crop(self, box: np.ndarray) -> np.ndarray:
        box = np.asarray(box, dtype=np.float64)
        out = box.copy()
        out[..., 0] = (box[..., 0] - self.x0 + 0.5) * self.scale - 0.5
        out[..., 1] = (box[..., 1] - self.y0 + 0.5) * self.scale - 0.5
        out[..., 2] = box[..., 2] * self.scale
        out[..., 3] = box[..., 3] * self.scale
        return out

    def box_to_frame(self, box: np.ndarray) -> np.ndarray:
        box = np.asarray(box, dtype=np.float64)
        out = box.copy()
        out[..., 0] = (box[..., 0] + 0.5) / self.scale - 0.5 + self.x0
        out[..., 1] = (box[..., 1] + 0.5) / self.scale - 0.5 + self.y0
        out[..., 2] = box[..., 2] / self.scale
        out[..., 3] = box[..., 3] / self.scale
        return out


@dataclass
class CropPair:
    """One training example: exemplar/search crops plus search-space truth."""

    exemplar: np.ndarray
    search: np.ndarray
    gt_box_in_search: np.ndarray
    gt_mask_in_search: np.ndarray | None
    transform: CropTransform


@dataclass
class SequenceRecord:
    """One annotated sequence; frames may be paths (lazy) or arrays."""

    seq_id: str
    frames: list
    boxes: np.ndarray
    visible: np.ndarray
    masks: list | None = None

    def __len__(self) -> int:
        return len(self.frames)

    def load_frame(self, i: int) -> np.ndarray:
        f = self.frames[i]
        if isinstance(f, np.ndarray):
            return f
        img = cv2.imread(str(f), cv2.IMREAD_COLOR)
        if img is None:
            raise DataError(f"unreadable frame file: {f}")
        return img

    def load_mask(self, i: int) -> np.ndarray | None:
        if self.masks is None or self.masks[i] is None:
            return None
        m = self.masks[i]
        if isinstance(m, np.ndarray):
            return m.astype(np.float32)
        img = cv2.imread(str(m), cv2.IMREAD_GRAYSCALE)
        if img is None:
            raise DataError(f"unreadable mask file: {m}")
        return (img > 127).astype(np.float32)


def context_side(box: np.ndarray, context_amount: float) -> float:
    """Square context window side for a target box (geometric mean)."""
    w, h = float(box[2]), float(box[3])
    pad = context_amount * (w + h)
    return float(np.sqrt((w + pad) * (h + pad)))


def get_subwindow(img: np.ndarray, center: tuple[float, float],
                  out_size: int, source_size: float,
                  pad_value: np.ndarray | float | None = None
                  ) -> tuple[np.ndarray, CropTransform]:
    """Resample a centred square window to out_size, mean-filling outside.

    Returns the patch and the exact frame->crop transform used.
    """
    src = max(2, int(round(source_size)))
    h, w = img.shape[:2]
    if pad_value is None:
        pad_value = img.mean(axis=(0, 1)) if img.ndim == 3 else float(img.mean())
    x0 = int(np.floor(center[0] - (src - 1) / 2.0 + 0.5))
    y0 = int(np.floor(center[1] - (src - 1) / 2.0 + 0.5))
    x1 = x0 + src
    y1 = y0 + src
    if img.ndim == 3:
        patch = np.empty((src, src, img.shape[2]), dtype=np.float64)
        patch[:] = np.asarray(pad_value, dtype=np.float64)
    else:
        patch = np.full((src, src), float(pad_value), dtype=np.float64)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x1, w), min(y1, h)
    if sx1 > sx0 and sy1 > sy0:
        patch[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = img[sy0:sy1, sx0:sx1]
    resized = cv2.resize(patch, (out_size, out_size),
                         interpolation=cv2.INTER_LINEAR)
    if img.dtype == np.uint8:
        resized = np.clip(resized, 0, 255).astype(np.uint8)
    else:
        resized = resized.astype(img.dtype)
    tf = CropTransform(x0=float(x0), y0=float(y0), scale=out_size / src)
    return resized, tf


def crop_exemplar_search(frame_z: np.ndarray, box_z: np.ndarray,
                         frame_x: np.ndarray, box_x: np.ndarray,
                         cfg: DataConfig,
                         mask_x: np.ndarray | None = None,
                         shift: tuple[float, float] = (0.0, 0.0),
                         scale_jitter: float = 1.0) -> CropPair:
    """Build the exemplar/search crop pair for one training example.

    ``shift`` displaces the search window centre (frame pixels) and
    ``scale_jitter`` scales its source side, both for augmentation; the
    ground-truth box is mapped through the exact crop transform.
    """
    for name, b in (("exemplar", box_z), ("search", box_x)):
        b = np.asarray(b, dtype=np.float64)
        if b[2] <= 0 or b[3] <= 0:
            raise DataError(f"degenerate {name} box: {b!r}")
    s_z = context_side(box_z, cfg.context_amount)
    exemplar, _ = get_subwindow(frame_z, (float(box_z[0]), float(box_z[1])),
                                cfg.exemplar_size, s_z)
    ratio = cfg.search_size / cfg.exemplar_size
    s_x = context_side(box_x, cfg.context_amount) * ratio * scale_jitter
    center = (float(box_x[0]) + shift[0], float(box_x[1]) + shift[1])
    search, tf = get_subwindow(frame_x, center, cfg.search_size, s_x)
    gt = tf.box_to_crop(np.asarray(box_x, dtype=np.float64))
    mask_crop = None
    if mask_x is not None:
        mask_crop, _ = get_subwindow(mask_x.astype(np.float32), center,
                                     cfg.search_size, s_x, pad_value=0.0)
        mask_crop = np.clip(mask_crop, 0.0, 1.0)
    return CropPair(exemplar=exemplar, search=search, gt_box_in_search=gt,
                    gt_mask_in_search=mask_crop, transform=tf)


def _parse_annotation_line(line: str, seq_dir: Path
                           ) -> tuple[int, np.ndarray, Path | None] | None:
    parts = line.split()
    if len(parts) not in (5, 6):
        return None
    try:
        idx = int(parts[0])
        box = np.array([float(v) for v in parts[1:5]], dtype=np.float64)
    except ValueError:
        return None
    if idx < 0 or box[2] <= 0 or box[3] <= 0:
        return None
    mask_path = (seq_dir / parts[5]) if len(parts) == 6 else None
    return idx, box, mask_path


def load_sequence(seq_dir: Path, warnings: list[str]) -> SequenceRecord | None:
    ann = seq_dir / "annotations.txt"
    if not ann.is_file():
        raise DataError(f"missing annotation file: {ann}")
    vis_file = seq_dir / "visible.txt"
    vis_flags: list[bool] | None = None
    if vis_file.is_file():
        tokens = vis_file.read_text().split()
        if all(t in ("0", "1") for t in tokens):
            vis_flags = [t == "1" for t in tokens]
        else:
            warnings.append(f"{vis_file}: malformed visibility file ignored")
    frames, boxes, visible, masks = [], [], [], []
    any_mask = False
    entry = -1
    for ln, line in enumerate(ann.read_text().splitlines(), 1):
        if not line.strip():
            continue
        entry += 1
        parsed = _parse_annotation_line(line, seq_dir)
        if parsed is None:
            warnings.append(f"{ann}:{ln}: malformed annotation line skipped")
            continue
        idx, box, mask_path = parsed
        frame = seq_dir / "frames" / f"{idx:06d}.png"
        if not frame.is_file():
            warnings.append(f"{ann}:{ln}: frame file missing, entry skipped")
            continue
        if mask_path is not None and not mask_path.is_file():
            warnings.append(f"{ann}:{ln}: mask file missing, mask dropped")
            mask_path = None
        frames.append(frame)
        boxes.append(box)
        visible.append(vis_flags[entry]
                       if vis_flags is not None and entry < len(vis_flags)
                       else True)
        masks.append(mask_path)
        any_mask = any_mask or mask_path is not None
    if len(frames) < 2:
        warnings.append(f"{seq_dir.name}: fewer than 2 usable frames, "
                        "sequence skipped")
        return None
    return SequenceRecord(
        seq_id=seq_dir.name, frames=frames,
        boxes=np.stack(boxes), visible=np.array(visible, dtype=bool),
        masks=masks if any_mask else None)


def load_dataset(root: str | Path) -> tuple[list[SequenceRecord], list[str]]:
    """All usable sequences under root, plus the warning messages."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root not found: {root}")
    warnings: list[str] = []
    records = []
    for seq_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        rec = load_sequence(seq_dir, warnings)
        if rec is not None:
            records.append(rec)
    return records, warnings


@dataclass
class PairSampler:
    """Draws augmented exemplar/search pairs from annotated sequences."""

    sequences: list[SequenceRecord]
    data_cfg: DataConfig
    train_cfg: TrainConfig
    rng: np.random.Generator
    _usable: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._usable = [i for i, s in enumerate(self.sequences)
                        if int(s.visible.sum()) >= 2]
        if not self._usable:
            raise DataError("no sequence has two visible annotated frames")

    def sample_pair(self) -> CropPair:
        seq = self.sequences[self._usable[self.rng.integers(len(self._usable))]]
        vis_idx = np.flatnonzero(seq.visible)
        zi = int(vis_idx[self.rng.integers(len(vis_idx))])
        gap = self.train_cfg.pair_max_gap
        near = vis_idx[np.abs(vis_idx - zi) <= gap]
        xi = int(near[self.rng.integers(len(near))])
        shift_amp = float(self.train_cfg.shift_jitter)
        # jitter in frame pixels, scaled to the search window's source size
        s_x = context_side(seq.boxes[xi], self.data_cfg.context_amount)
        unit = s_x / self.data_cfg.exemplar_size
        shift = tuple(self.rng.uniform(-shift_amp, shift_amp) * unit
                      for _ in range(2))
        scale_jitter = float(np.exp(self.rng.uniform(
            -self.train_cfg.scale_jitter, self.train_cfg.scale_jitter)))
        return crop_exemplar_search(
            seq.load_frame(zi), seq.boxes[zi], seq.load_frame(xi),
            seq.boxes[xi], self.data_cfg,
            mask_x=seq.load_mask(xi), shift=shift, scale_jitter=scale_jitter)

    def sample_batch(self, n: int) -> list[CropPair]:
        return [self.sample_pair() for _ in range(n)]
