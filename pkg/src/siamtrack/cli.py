"""Command-line entry points: train, track, eval, ablate, demo-attention.

Every command takes a single YAML configuration file; unknown keys are
rejected by name. All outputs embed the configuration hash. Failures
print exactly one machine-parsable line to stderr:

    ERROR:<CODE>: <message>

with CODE one of USAGE, CONFIG, DATA, CHECKPOINT, DIVERGED, INTERNAL,
and a matching exit status (2, 2, 3, 4, 5, 1).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import ablation as ab
from .attention import channel_attention_map, flatten_spatial
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, config_hash, load_config
from .data import DataError, load_dataset, load_sequence
from .metrics import MetricReport, precision_curve, center_error, \
    iou_tlwh, score_sequence
from .model import SiamTrackNet
from .plots import save_heatmap, save_overlay, save_precision_plot, \
    save_success_plot
from .synthetic import synthetic_benchmark
from .tracker import Tracker
from .training import Trainer, TrainingDiverged

EXIT_CODES = {"USAGE": 2, "CONFIG": 2, "DATA": 3, "CHECKPOINT": 4,
              "DIVERGED": 5, "INTERNAL": 1}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _fail(code: str, message: str) -> "CliError":
    return CliError(code, message.replace("\n", " "))


def _load_cfg(path: str) -> RunConfig:
    try:
        return load_config(path)
    except ConfigError as e:
        raise _fail("CONFIG", str(e)) from e


def _build_model(cfg: RunConfig, checkpoint: str | None) -> SiamTrackNet:
    model = SiamTrackNet(cfg)
    if checkpoint:
        try:
            load_checkpoint(checkpoint, model, cfg)
        except CheckpointError as e:
            raise _fail("CHECKPOINT", str(e)) from e
    return model


def _sequence_from_dir(path: str):
    warnings: list[str] = []
    try:
        rec = load_sequence(Path(path), warnings)
    except DataError as e:
        raise _fail("DATA", str(e)) from e
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    if rec is None:
        raise _fail("DATA", f"sequence unusable: {path}")
    return rec


# -- train ---------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args.config)
    sequences = None
    if cfg.data.root is not None:
        try:
            sequences, warnings = load_dataset(cfg.data.root)
        except DataError as e:
            raise _fail("DATA", str(e)) from e
        for w in warnings:
            print(f"warning: {w}", file=sys.stderr)
        if not sequences:
            raise _fail("DATA", f"no usable sequences under {cfg.data.root}")
    trainer = Trainer(cfg, args.output_dir, sequences)
    if args.resume:
        try:
            trainer.resume(args.resume)
        except CheckpointError as e:
            raise _fail("CHECKPOINT", str(e)) from e
    try:
        final = trainer.run()
    except TrainingDiverged as e:
        raise _fail("DIVERGED", str(e)) from e
    print(json.dumps({"checkpoint": str(final),
                      "config_hash": config_hash(cfg)}))
    return 0


# -- track ---------------------------------------------------------------


def cmd_track(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args.config)
    if args.mode:
        cfg.tracker.mode = args.mode
        cfg.tracker.validate()
    model = _build_model(cfg, args.checkpoint)
    rec = _sequence_from_dir(args.sequence)
    tracker = Tracker(model, cfg)
    gt_tl = rec.boxes.copy()
    gt_tl[:, 0] -= gt_tl[:, 2] / 2
    gt_tl[:, 1] -= gt_tl[:, 3] / 2
    if args.init_box:
        try:
            init = np.array([float(v) for v in args.init_box.split(",")])
            assert init.shape == (4,)
        except (ValueError, AssertionError):
            raise _fail("USAGE",
                        f"--init-box must be x,y,w,h, got {args.init_box!r}")
    else:
        init = gt_tl[0]
    out_path = Path(args.output)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    mask_dir = Path(args.mask_dir) if args.mask_dir else None
    if mask_dir:
        mask_dir.mkdir(parents=True, exist_ok=True)
    state = tracker.init(rec.load_frame(0), init)
    with open(out_path, "w") as f:
        f.write(json.dumps({"event": "config",
                            "config_hash": config_hash(cfg),
                            "sequence": rec.seq_id,
                            "mode": cfg.tracker.mode}) + "\n")
        f.write(json.dumps({"frame": 0,
                            "box": [float(v) for v in init],
                            "score": 1.0, "init": True}) + "\n")
        for i in range(1, len(rec)):
            out, state = tracker.track(rec.load_frame(i), state)
            line = {"frame": i, "box": [float(v) for v in out.box],
                    "score": out.score}
            if out.rotated is not None:
                line["rotated"] = [float(v) for v in out.rotated]
            if out.mask is not None and mask_dir is not None:
                import cv2
                mp = mask_dir / f"{i:06d}.png"
                cv2.imwrite(str(mp),
                            (np.clip(out.mask, 0, 1) * 255).astype(np.uint8))
                line["mask"] = str(mp)
            f.write(json.dumps(line) + "\n")
    print(json.dumps({"results": str(out_path), "frames": len(rec),
                      "config_hash": config_hash(cfg)}))
    return 0


# -- eval ----------------------------------------------------------------


def read_result_file(path: Path) -> tuple[np.ndarray, list[int]]:
    """Boxes and frame indices from a results JSONL file (init excluded)."""
    boxes, frames = [], []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("event") or rec.get("init"):
            continue
        boxes.append(rec["box"])
        frames.append(int(rec["frame"]))
    return np.array(boxes, dtype=np.float64).reshape(-1, 4), frames


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args.config)
    try:
        sequences, warnings = load_dataset(args.dataset)
    except DataError as e:
        raise _fail("DATA", str(e)) from e
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    if not sequences:
        raise _fail("DATA", f"no usable sequences under {args.dataset}")
    by_id = {s.seq_id: s for s in sequences}
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.checkpoint:
        model = _build_model(cfg, args.checkpoint)
        report = ab.evaluate_model(model, cfg, sequences)
        all_errors = None
    elif args.results_dir:
        report = MetricReport(config_hash=config_hash(cfg))
        errors_acc = []
        files = sorted(Path(args.results_dir).glob("*.jsonl"))
        if not files:
            raise _fail("DATA", f"no .jsonl results in {args.results_dir}")
        for path in files:
            seq_id = path.stem
            if seq_id not in by_id:
                raise _fail("DATA",
                            f"results for unknown sequence: {seq_id}")
            rec = by_id[seq_id]
            pred, frames = read_result_file(path)
            gt_tl = rec.boxes.copy()
            gt_tl[:, 0] -= gt_tl[:, 2] / 2
            gt_tl[:, 1] -= gt_tl[:, 3] / 2
            if max(frames, default=0) >= len(rec):
                raise _fail("DATA",
                            f"{path.name}: frame index out of range")
            gt = gt_tl[np.array(frames, dtype=int)]
            report.sequences.append(score_sequence(
                seq_id, pred, gt, cfg.eval.precision_px,
                cfg.eval.success_steps))
            errors_acc.append(center_error(pred, gt))
        all_errors = np.concatenate(errors_acc) if errors_acc else None
    else:
        raise _fail("USAGE", "eval needs --checkpoint or --results-dir")

    report.save(out_dir / "report.json")
    if args.plots:
        curves = {s.seq_id: s.success for s in report.sequences}
        curves["mean"] = np.mean([s.success for s in report.sequences],
                                 axis=0)
        save_success_plot(curves, out_dir / "success.png")
        if all_errors is not None:
            save_precision_plot({"all frames": precision_curve(all_errors)},
                                50.0, out_dir / "precision.png")
    print(json.dumps({"report": str(out_dir / "report.json"),
                      "precision": report.precision, "auc": report.auc,
                      "mean_iou": report.mean_iou,
                      "config_hash": config_hash(cfg)}))
    return 0


# -- ablate ----------------------------------------------------------------


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args.config)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [0]
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bench = synthetic_benchmark(cfg.data.synthetic,
                                base_seed=args.benchmark_seed)
    ckpt_dir = Path(args.checkpoints_dir) if args.checkpoints_dir else None
    variants = args.variants.split(",") if args.variants else list(ab.VARIANTS)
    for v in variants:
        if v not in ab.VARIANTS:
            raise _fail("USAGE", f"unknown ablation variant: {v}")
    reports: dict[str, list[MetricReport]] = {v: [] for v in variants}
    for variant in variants:
        for seed in seeds:
            vcfg = ab.variant_config(cfg, variant)
            vcfg.seed = seed
            name = f"{variant}_s{seed}"
            model = SiamTrackNet(vcfg)
            ckpt = (ckpt_dir / f"{name}.pt") if ckpt_dir else None
            if ckpt and ckpt.is_file():
                try:
                    load_checkpoint(ckpt, model, vcfg)
                except CheckpointError as e:
                    raise _fail("CHECKPOINT", f"{name}: {e}") from e
            else:
                if not args.train_missing:
                    raise _fail("CHECKPOINT",
                                f"missing checkpoint for {name}; pass "
                                "--train-missing to train it")
                trainer = Trainer(vcfg, out_dir / "runs" / name)
                try:
                    final = trainer.run()
                except TrainingDiverged as e:
                    raise _fail("DIVERGED", f"{name}: {e}") from e
                model = trainer.model
                if ckpt_dir:
                    ckpt_dir.mkdir(parents=True, exist_ok=True)
                    save_checkpoint(ckpt_dir / f"{name}.pt", model, vcfg,
                                    vcfg.training.epochs - 1)
            reports[variant].append(ab.evaluate_model(model, vcfg, bench))
    rows = ab.ablation_rows(reports)
    check = ab.direction_check(rows)
    ab.write_ablation_report(rows, check, out_dir, config_hash(cfg))
    curves = {v: np.mean([s.success for r in reps for s in r.sequences],
                         axis=0)
              for v, reps in reports.items()}
    save_success_plot(curves, out_dir / "ablation_success.png")
    print(json.dumps({"report": str(out_dir / "ablation.json"),
                      "direction": check,
                      "config_hash": config_hash(cfg)}))
    return 0


# -- demo-attention ----------------------------------------------------------


def collect_attention_maps(model: SiamTrackNet, exemplar: torch.Tensor,
                           search: torch.Tensor) -> dict[str, np.ndarray]:
    """Per-stage attention matrices for one pair, keyed by file stem."""
    maps: dict[str, np.ndarray] = {}
    with torch.no_grad():
        zb = model.extract(exemplar)
        xb = model.extract(search)
        if model.attention is not None:
            for k, (block, z, x) in enumerate(
                    zip(model.attention, zb.deep(), xb.deep()), start=3):
                side = x.shape[-1]
                if block.cfg.spatial_sa:
                    attn = block.spatial.attention_map(x)[0]
                    centre = attn.shape[1] // 2
                    maps[f"stage{k}_spatial_search"] = \
                        attn[:, centre].reshape(side, side).numpy()
                    attn_t = block.spatial.attention_map(z)[0]
                    zside = z.shape[-1]
                    maps[f"stage{k}_spatial_template"] = \
                        attn_t[:, attn_t.shape[1] // 2].reshape(
                            zside, zside).numpy()
                if block.cfg.channel_sa:
                    flat = flatten_spatial(x)
                    maps[f"stage{k}_channel_search"] = channel_attention_map(
                        flat, flat, block.cfg.channel_softmax_axis)[0].numpy()
                if block.cfg.cross_attn:
                    maps[f"stage{k}_cross_from_template"] = \
                        block.template_cross_map(z)[0].numpy()
        t_feats, s_feats = model.attend_pair(zb, xb)
        cls_map, _ = model.heads(t_feats, s_feats)
        b, two_k, s, _ = cls_map.shape
        k_anchors = two_k // 2
        probs = torch.softmax(cls_map.view(2, k_anchors, s, s), dim=0)[1]
        maps["response_foreground"] = probs.max(dim=0).values.numpy()
    return maps


def cmd_demo_attention(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args.config)
    model = _build_model(cfg, args.checkpoint)
    rec = _sequence_from_dir(args.sequence)
    idx = args.frame if args.frame is not None else min(1, len(rec) - 1)
    if not (0 <= idx < len(rec)):
        raise _fail("USAGE", f"--frame {idx} outside sequence of {len(rec)}")
    from .data import crop_exemplar_search
    pair = crop_exemplar_search(rec.load_frame(0), rec.boxes[0],
                                rec.load_frame(idx), rec.boxes[idx],
                                cfg.data)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    import cv2
    cv2.imwrite(str(out_dir / "exemplar.png"), pair.exemplar)
    cv2.imwrite(str(out_dir / "search.png"), pair.search)
    from .training import pairs_to_tensors
    ez, sx = pairs_to_tensors([pair])
    maps = collect_attention_maps(model, ez, sx)
    written = []
    for stem, data in maps.items():
        path = out_dir / f"{stem}.png"
        save_heatmap(data, path, title=stem)
        written.append(str(path))
    meta = {"config_hash": config_hash(cfg), "frame": idx,
            "files": written}
    (out_dir / "manifest.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(json.dumps(meta))
    return 0


# -- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="siamtrack",
        description="Siamese attention tracker: train, track, evaluate.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config")
    t.add_argument("--config", required=True)
    t.add_argument("--output-dir", required=True)
    t.add_argument("--resume", default=None,
                   help="checkpoint to continue from")
    t.set_defaults(fn=cmd_train)

    tr = sub.add_parser("track", help="run the tracker over one sequence")
    tr.add_argument("--config", required=True)
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--sequence", required=True,
                    help="sequence directory in the dataset layout")
    tr.add_argument("--output", required=True, help="results JSONL path")
    tr.add_argument("--init-box", default=None,
                    help="x,y,w,h top-left override for the first frame")
    tr.add_argument("--mode", default=None,
                    choices=["axis_aligned", "rotated_from_mask"])
    tr.add_argument("--mask-dir", default=None,
                    help="directory for per-frame mask PNGs")
    tr.set_defaults(fn=cmd_track)

    e = sub.add_parser("eval", help="score results against a dataset")
    e.add_argument("--config", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--results-dir", default=None,
                   help="directory of <seq_id>.jsonl result files")
    e.add_argument("--checkpoint", default=None,
                   help="run this model instead of reading results")
    e.add_argument("--output-dir", required=True)
    e.add_argument("--plots", action="store_true")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train/evaluate the toggle matrix")
    a.add_argument("--config", required=True)
    a.add_argument("--output-dir", required=True)
    a.add_argument("--checkpoints-dir", default=None,
                   help="load/store per-variant checkpoints here")
    a.add_argument("--train-missing", action="store_true")
    a.add_argument("--seeds", default="0", help="comma-separated seeds")
    a.add_argument("--variants", default=None,
                   help="comma-separated subset of variants")
    a.add_argument("--benchmark-seed", type=int, default=9000)
    a.set_defaults(fn=cmd_ablate)

    d = sub.add_parser("demo-attention",
                       help="dump attention maps for one pair")
    d.add_argument("--config", required=True)
    d.add_argument("--checkpoint", default=None)
    d.add_argument("--sequence", required=True)
    d.add_argument("--frame", type=int, default=None)
    d.add_argument("--output-dir", required=True)
    d.set_defaults(fn=cmd_demo_attention)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        if e.code not in (0, None):
            print("ERROR:USAGE: invalid arguments", file=sys.stderr)
            return EXIT_CODES["USAGE"]
        return 0
    try:
        return args.fn(args)
    except CliError as e:
        print(f"ERROR:{e.code}: {e}", file=sys.stderr)
        return EXIT_CODES.get(e.code, 1)
    except Exception as e:  # last resort: keep the one-line contract
        print(f"ERROR:INTERNAL: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_CODES["INTERNAL"]


if __name__ == "__main__":
    sys.exit(main())
