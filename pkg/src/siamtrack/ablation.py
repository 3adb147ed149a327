"""Component toggle matrix: train/evaluate variants, compare directions.

Variants cover the four architectural toggles (self-attention,
cross-attention, region refinement, deformable sampling), the plain
correlation baseline with everything off, and the full model. Each
variant is evaluated by mean IoU over a fixed synthetic benchmark; the
expected direction is that the full model is at least as good as the
baseline and as most single-toggle-off variants.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np

from .config import RunConfig, config_from_dict, config_hash
from .data import SequenceRecord
from .metrics import MetricReport, iou_tlwh, score_sequence
from .model import SiamTrackNet
from .tracker import Tracker

VARIANTS = ("full", "no_self_attention", "no_cross_attention",
            "no_refinement", "no_deform", "baseline")

# the four single-toggle variants checked against the full model
TOGGLE_VARIANTS = ("no_self_attention", "no_cross_attention",
                   "no_refinement", "no_deform")


def variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    """A deep copy of cfg with one component switched off."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown ablation variant: {variant!r}")
    out = config_from_dict(copy.deepcopy(cfg.to_dict()))
    if variant == "no_self_attention":
        out.attention.spatial_sa = False
        out.attention.channel_sa = False
    elif variant == "no_cross_attention":
        out.attention.cross_attn = False
    elif variant == "no_refinement":
        out.refinement.enabled = False
    elif variant == "no_deform":
        out.attention.deform_conv = False
        out.refinement.deform_pool = False
    elif variant == "baseline":
        out.attention.enabled = False
        out.refinement.enabled = False
    return out


def evaluate_model(model: SiamTrackNet, cfg: RunConfig,
                   sequences: list[SequenceRecord],
                   precision_px: float | None = None) -> MetricReport:
    """Track every sequence from its first-frame truth and score it."""
    tracker = Tracker(model, cfg)
    px = precision_px if precision_px is not None else cfg.eval.precision_px
    report = MetricReport(config_hash=config_hash(cfg))
    for rec in sequences:
        gt_tl = rec.boxes.copy()
        gt_tl[:, 0] -= gt_tl[:, 2] / 2
        gt_tl[:, 1] -= gt_tl[:, 3] / 2
        state = tracker.init(rec.load_frame(0), gt_tl[0])
        preds = []
        for i in range(1, len(rec)):
            out, state = tracker.track(rec.load_frame(i), state)
            preds.append(out.box)
        report.sequences.append(score_sequence(
            rec.seq_id, np.stack(preds), gt_tl[1:], px,
            cfg.eval.success_steps))
    return report


def ablation_rows(reports: dict[str, list[MetricReport]]) -> list[dict]:
    """Aggregate per-variant reports (one per seed) into table rows."""
    rows = []
    for variant, reps in reports.items():
        ious = [r.mean_iou for r in reps]
        rows.append({
            "variant": variant,
            "seeds": len(reps),
            "mean_iou": float(np.mean(ious)),
            "iou_per_seed": [float(v) for v in ious],
            "precision": float(np.mean([r.precision for r in reps])),
            "auc": float(np.mean([r.auc for r in reps])),
        })
    return rows


def direction_check(rows: list[dict]) -> dict:
    """Expected ordering: full beats baseline and most toggle-offs."""
    by_name = {r["variant"]: r for r in rows}
    if "full" not in by_name:
        # partial matrix without the reference point: nothing to compare
        return {"full_mean_iou": None, "beats_baseline": False,
                "toggle_wins": [], "toggle_count": 0, "passes": False}
    full = by_name["full"]["mean_iou"]
    beats_baseline = ("baseline" not in by_name
                      or full >= by_name["baseline"]["mean_iou"])
    wins = [v for v in TOGGLE_VARIANTS
            if v in by_name and full >= by_name[v]["mean_iou"]]
    present = [v for v in TOGGLE_VARIANTS if v in by_name]
    return {
        "full_mean_iou": full,
        "beats_baseline": bool(beats_baseline),
        "toggle_wins": wins,
        "toggle_count": len(present),
        "passes": bool(beats_baseline) and len(wins) >= min(3, len(present)),
    }


def write_ablation_report(rows: list[dict], check: dict,
                          out_dir: str | Path, cfg_hash: str) -> Path:
    """Machine-readable JSON plus a delimited text table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"config_hash": cfg_hash, "rows": rows, "direction": check}
    (out / "ablation.json").write_text(json.dumps(payload, indent=2) + "\n")
    lines = ["variant\tseeds\tmean_iou\tprecision\tauc"]
    for r in rows:
        lines.append(f"{r['variant']}\t{r['seeds']}\t{r['mean_iou']:.4f}"
                     f"\t{r['precision']:.4f}\t{r['auc']:.4f}")
    lines.append(f"# config_hash={cfg_hash}")
    path = out / "ablation.tsv"
    path.write_text("\n".join(lines) + "\n")
    return path
