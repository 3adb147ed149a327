"""Procedural video sequences for training and benchmarking.

Each sequence shows one textured elliptical target moving with momentum
over a smooth cluttered background, with optional look-alike distractor
blobs and brief full occlusions. The mask is rasterised analytically on
pixel centres and the box is its exact tight bounding box, so box, mask
and frame are consistent by construction. All randomness flows from one
seeded generator: the same seed always yields bit-identical sequences.
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .config import SyntheticConfig
from .data import SequenceRecord


def _smooth_background(rng: np.random.Generator, size: int) -> np.ndarray:
    low = rng.uniform(60, 180, size=(size // 16 + 2, size // 16 + 2, 3))
    bg = cv2.resize(low, (size, size), interpolation=cv2.INTER_CUBIC)
    return bg


def _ellipse_mask(size: int, cx: float, cy: float, a: float, b: float,
                  theta: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx = xs - cx
    dy = ys - cy
    ct, st = np.cos(theta), np.sin(theta)
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _tight_box(mask: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    x0, x1 = xs.min(), xs.max()
    y0, y1 = ys.min(), ys.max()
    return np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0,
                     float(x1 - x0 + 1), float(y1 - y0 + 1)])


def _paint_blob(frame: np.ndarray, mask: np.ndarray, color: np.ndarray,
                grad: np.ndarray) -> None:
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return
    tex = (color[None, :] + (xs - xs.mean())[:, None] * grad[0]
           + (ys - ys.mean())[:, None] * grad[1])
    frame[ys, xs] = np.clip(tex, 0, 255)


class _Walker:
    """Momentum random walk confined to the frame with a margin."""

    def __init__(self, rng: np.random.Generator, size: int, margin: float,
                 speed: float):
        self.rng = rng
        self.size = size
        self.margin = margin
        self.speed = speed
        self.pos = rng.uniform(margin, size - margin, size=2)
        angle = rng.uniform(0, 2 * np.pi)
        self.vel = speed * np.array([np.cos(angle), np.sin(angle)])

    def step(self) -> np.ndarray:
        self.vel = 0.85 * self.vel + self.rng.normal(0, self.speed * 0.4, 2)
        norm = np.linalg.norm(self.vel)
        if norm > 2 * self.speed:
            self.vel *= 2 * self.speed / norm
        self.pos = self.pos + self.vel
        for d in range(2):
            if self.pos[d] < self.margin:
                self.pos[d] = 2 * self.margin - self.pos[d]
                self.vel[d] = abs(self.vel[d])
            hi = self.size - self.margin
            if self.pos[d] > hi:
                self.pos[d] = 2 * hi - self.pos[d]
                self.vel[d] = -abs(self.vel[d])
        return self.pos


def generate_synthetic_sequence(spec: SyntheticConfig, seed: int,
                                seq_id: str | None = None) -> SequenceRecord:
    """Render one sequence; fully determined by (spec, seed)."""
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    size = spec.frame_size
    half = spec.target_size / 2.0
    margin = half * (1 + spec.deformation_amplitude) + 4
    background = _smooth_background(rng, size)
    target_color = rng.uniform(40, 220, 3)
    target_grad = rng.uniform(-2.5, 2.5, 2)
    walker = _Walker(rng, size, margin, spec.speed)
    theta0 = rng.uniform(0, np.pi)
    spin = rng.uniform(-0.15, 0.15)
    phase_a, phase_b = rng.uniform(0, 2 * np.pi, 2)
    wobble = 2 * np.pi / max(8.0, spec.length / 2.0)

    distractors = []
    for _ in range(spec.distractor_count):
        distractors.append({
            "walker": _Walker(rng, size, half + 2, spec.speed),
            "color": np.clip(target_color + rng.uniform(-40, 40, 3), 30, 225),
            "grad": rng.uniform(-2.5, 2.5, 2),
            "axes": (half * rng.uniform(0.7, 1.1),
                     half * rng.uniform(0.7, 1.1)),
            "theta": rng.uniform(0, np.pi),
        })

    occluded = np.zeros(spec.length, dtype=bool)
    for _ in range(spec.occlusion_events):
        if spec.length <= spec.occlusion_length + 4:
            break
        start = int(rng.integers(2, spec.length - spec.occlusion_length - 1))
        occluded[start:start + spec.occlusion_length] = True

    frames, boxes, masks, visible = [], [], [], []
    for t in range(spec.length):
        frame = background + rng.normal(0, spec.noise_level, (size, size, 3))
        cx, cy = walker.step()
        a = half * (1 + spec.deformation_amplitude * np.sin(wobble * t + phase_a))
        b = half * (1 + spec.deformation_amplitude * np.sin(1.7 * wobble * t + phase_b))
        theta = theta0 + spin * t
        for d in distractors:
            dpos = d["walker"].step()
            dmask = _ellipse_mask(size, dpos[0], dpos[1], d["axes"][0],
                                  d["axes"][1], d["theta"])
            _paint_blob(frame, dmask, d["color"], d["grad"])
        mask = _ellipse_mask(size, cx, cy, a, b, theta)
        _paint_blob(frame, mask, target_color, target_grad)
        box = _tight_box(mask)
        if occluded[t]:
            x0 = int(max(0, np.floor(box[0] - box[2] / 2 - 2)))
            y0 = int(max(0, np.floor(box[1] - box[3] / 2 - 2)))
            x1 = int(min(size, np.ceil(box[0] + box[2] / 2 + 2)))
            y1 = int(min(size, np.ceil(box[1] + box[3] / 2 + 2)))
            frame[y0:y1, x0:x1] = background[y0:y1, x0:x1] * 0.5 + 40
        frames.append(np.clip(frame, 0, 255).astype(np.uint8))
        boxes.append(box)
        masks.append(mask.astype(np.float32))
        visible.append(not occluded[t])

    return SequenceRecord(
        seq_id=seq_id or f"synthetic_{seed:04d}",
        frames=frames,
        boxes=np.stack(boxes),
        visible=np.array(visible, dtype=bool),
        masks=masks,
    )


def synthetic_benchmark(spec: SyntheticConfig,
                        base_seed: int) -> list[SequenceRecord]:
    """A reproducible bank of sequences, one seed offset per sequence."""
    return [generate_synthetic_sequence(spec, base_seed + i,
                                        f"synthetic_{base_seed + i:04d}")
            for i in range(spec.num_sequences)]


def write_sequence(record: SequenceRecord, out_dir: str | Path,
                   with_masks: bool = True) -> Path:
    """Write a sequence to disk in the documented dataset layout."""
    seq_dir = Path(out_dir) / record.seq_id
    (seq_dir / "frames").mkdir(parents=True, exist_ok=True)
    if with_masks and record.masks is not None:
        (seq_dir / "masks").mkdir(exist_ok=True)
    lines = []
    for i in range(len(record)):
        frame = record.load_frame(i)
        cv2.imwrite(str(seq_dir / "frames" / f"{i:06d}.png"), frame)
        box = record.boxes[i]
        entry = f"{i} {box[0]:.2f} {box[1]:.2f} {box[2]:.2f} {box[3]:.2f}"
        if with_masks and record.masks is not None:
            mask = record.load_mask(i)
            rel = f"masks/{i:06d}.png"
            cv2.imwrite(str(seq_dir / rel),
                        (np.asarray(mask) * 255).astype(np.uint8))
            entry += f" {rel}"
        lines.append(entry)
    (seq_dir / "annotations.txt").write_text("\n".join(lines) + "\n")
    if not record.visible.all():
        (seq_dir / "visible.txt").write_text(
            "\n".join("1" if v else "0" for v in record.visible) + "\n")
    return seq_dir
