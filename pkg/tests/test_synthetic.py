"""Procedural sequences: determinism, exact boxes, disk round trip."""

from __future__ import annotations

import numpy as np
import pytest

from siamtrack.config import SyntheticConfig, tiny_config
from siamtrack.data import load_sequence
from siamtrack.synthetic import (generate_synthetic_sequence,
                                 synthetic_benchmark, write_sequence)


def small_spec(**kwargs) -> SyntheticConfig:
    base = dict(frame_size=96, target_size=20, length=12,
                distractor_count=2, occlusion_events=1, occlusion_length=3)
    base.update(kwargs)
    return SyntheticConfig(**base)


def test_same_seed_bit_identical():
    spec = small_spec()
    a = generate_synthetic_sequence(spec, 42)
    b = generate_synthetic_sequence(spec, 42)
    assert len(a) == len(b) == 12
    for i in range(len(a)):
        assert np.array_equal(a.load_frame(i), b.load_frame(i))
        assert np.array_equal(a.load_mask(i), b.load_mask(i))
    assert np.array_equal(a.boxes, b.boxes)
    assert np.array_equal(a.visible, b.visible)


def test_different_seeds_differ():
    spec = small_spec()
    a = generate_synthetic_sequence(spec, 1)
    b = generate_synthetic_sequence(spec, 2)
    assert not np.array_equal(a.boxes, b.boxes)


def test_box_is_exact_tight_bbox_of_mask():
    spec = small_spec(length=10)
    rec = generate_synthetic_sequence(spec, 7)
    for i in range(len(rec)):
        mask = rec.load_mask(i)
        ys, xs = np.nonzero(mask)
        want = np.array([(xs.min() + xs.max()) / 2.0,
                         (ys.min() + ys.max()) / 2.0,
                         float(xs.max() - xs.min() + 1),
                         float(ys.max() - ys.min() + 1)])
        assert np.array_equal(rec.boxes[i], want)


def test_target_stays_in_frame():
    spec = small_spec(length=40)
    rec = generate_synthetic_sequence(spec, 3)
    corners_x0 = rec.boxes[:, 0] - rec.boxes[:, 2] / 2
    corners_x1 = rec.boxes[:, 0] + rec.boxes[:, 2] / 2
    assert np.all(corners_x0 >= 0)
    assert np.all(corners_x1 <= spec.frame_size)
    # the target actually moves
    assert np.ptp(rec.boxes[:, 0]) + np.ptp(rec.boxes[:, 1]) > 2.0


def test_occlusion_flags():
    spec = small_spec(length=20, occlusion_events=1, occlusion_length=4)
    rec = generate_synthetic_sequence(spec, 11)
    assert (~rec.visible).sum() == 4
    # occluded frames still carry the analytic box and mask
    occ = int(np.flatnonzero(~rec.visible)[0])
    assert rec.boxes[occ, 2] > 0
    assert rec.load_mask(occ).sum() > 0
    # no occlusions requested: everything visible
    rec2 = generate_synthetic_sequence(small_spec(occlusion_events=0), 11)
    assert rec2.visible.all()


def test_benchmark_bank():
    spec = small_spec(num_sequences=5, length=6)
    bank = synthetic_benchmark(spec, base_seed=9000)
    assert len(bank) == 5
    assert [r.seq_id for r in bank] == [
        f"synthetic_{9000 + i:04d}" for i in range(5)]
    again = synthetic_benchmark(spec, base_seed=9000)
    assert all(np.array_equal(a.boxes, b.boxes)
               for a, b in zip(bank, again))


def test_default_benchmark_spec_is_20_sequences():
    spec = tiny_config(0).data.synthetic
    assert spec.num_sequences == 20
    assert spec.distractor_count >= 1
    assert spec.occlusion_events >= 1


def test_write_and_reload_roundtrip(tmp_path):
    spec = small_spec(length=8, occlusion_events=1, occlusion_length=2)
    rec = generate_synthetic_sequence(spec, 21)
    seq_dir = write_sequence(rec, tmp_path)
    warnings: list[str] = []
    back = load_sequence(seq_dir, warnings)
    assert not warnings
    assert len(back) == len(rec)
    # boxes go through %.2f text: exact to the printed precision
    assert np.max(np.abs(back.boxes - rec.boxes)) <= 0.005 + 1e-12
    assert np.array_equal(back.visible, rec.visible)
    # masks binarise identically
    for i in range(len(rec)):
        assert np.array_equal(back.load_mask(i), rec.load_mask(i))
        assert np.array_equal(back.load_frame(i), rec.load_frame(i))


def test_write_all_visible_omits_sidecar(tmp_path):
    rec = generate_synthetic_sequence(small_spec(occlusion_events=0), 5)
    seq_dir = write_sequence(rec, tmp_path)
    assert not (seq_dir / "visible.txt").exists()
    rec2 = generate_synthetic_sequence(
        small_spec(length=20, occlusion_events=1), 5)
    seq_dir2 = write_sequence(rec2, tmp_path)
    assert (seq_dir2 / "visible.txt").exists()
