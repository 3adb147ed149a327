"""End-to-end command-line tests: exit codes, error lines, artifacts."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from siamtrack.cli import EXIT_CODES, main, read_result_file
from siamtrack.config import tiny_config
from siamtrack.synthetic import generate_synthetic_sequence, write_sequence


def error_lines(capsys) -> list[str]:
    err = capsys.readouterr().err
    return [line for line in err.splitlines() if line.startswith("ERROR:")]


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    """Config file, on-disk dataset, and one trained checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_config(0)
    d = cfg.to_dict()
    d["training"].update(epochs=2, steps_per_epoch=2, batch_size=2,
                         warmup_epochs=1, backbone_frozen_epochs=1)
    d["data"]["synthetic"].update(num_sequences=4, length=8, frame_size=96,
                                  target_size=20, distractor_count=1,
                                  occlusion_events=0, occlusion_length=2)
    cfg_path = root / "cfg.yaml"
    cfg_path.write_text(yaml.safe_dump(d))

    from siamtrack.config import config_from_dict
    spec = config_from_dict(d).data.synthetic
    data_root = root / "data"
    seq_ids = []
    for seed in (700, 701):
        rec = generate_synthetic_sequence(spec, seed)
        write_sequence(rec, data_root)
        seq_ids.append(rec.seq_id)

    run_dir = root / "run"
    rc = main(["train", "--config", str(cfg_path),
               "--output-dir", str(run_dir)])
    assert rc == 0
    ckpt = run_dir / "checkpoint_final.pt"
    assert ckpt.is_file()
    return {"root": root, "cfg": cfg_path, "data": data_root,
            "seq_ids": seq_ids, "ckpt": ckpt, "run": run_dir}


def test_exit_code_table():
    assert EXIT_CODES == {"USAGE": 2, "CONFIG": 2, "DATA": 3,
                          "CHECKPOINT": 4, "DIVERGED": 5, "INTERNAL": 1}


def test_no_command_is_usage_error(capsys):
    assert main([]) == 2
    lines = error_lines(capsys)
    assert len(lines) == 1 and lines[0].startswith("ERROR:USAGE:")


def test_missing_required_arg(capsys):
    assert main(["track", "--config", "x.yaml"]) == 2
    assert error_lines(capsys)[0].startswith("ERROR:USAGE:")


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "train" in capsys.readouterr().out


def test_config_not_found(capsys, tmp_path):
    rc = main(["train", "--config", str(tmp_path / "none.yaml"),
               "--output-dir", str(tmp_path / "o")])
    assert rc == 2
    lines = error_lines(capsys)
    assert len(lines) == 1 and lines[0].startswith("ERROR:CONFIG:")


def test_config_unknown_key(capsys, tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("trainig:\n  epochs: 2\n")
    rc = main(["train", "--config", str(p),
               "--output-dir", str(tmp_path / "o")])
    assert rc == 2
    assert "trainig" in error_lines(capsys)[0]


def test_train_stdout_and_log(env, capsys):
    # the module fixture already trained; re-run to capture stdout
    out_dir = env["root"] / "run2"
    rc = main(["train", "--config", str(env["cfg"]),
               "--output-dir", str(out_dir)])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert Path(payload["checkpoint"]).is_file()
    assert len(payload["config_hash"]) == 12
    log = (out_dir / "train_log.jsonl").read_text().splitlines()
    assert json.loads(log[0])["event"] == "config"


def test_train_resume_bad_checkpoint(env, capsys, tmp_path):
    rc = main(["train", "--config", str(env["cfg"]),
               "--output-dir", str(tmp_path / "o"),
               "--resume", str(tmp_path / "missing.pt")])
    assert rc == 4
    assert error_lines(capsys)[0].startswith("ERROR:CHECKPOINT:")


def test_track_missing_checkpoint(env, capsys, tmp_path):
    rc = main(["track", "--config", str(env["cfg"]),
               "--checkpoint", str(tmp_path / "none.pt"),
               "--sequence", str(env["data"] / env["seq_ids"][0]),
               "--output", str(tmp_path / "r.jsonl")])
    assert rc == 4
    assert error_lines(capsys)[0].startswith("ERROR:CHECKPOINT:")


def test_track_missing_sequence(env, capsys, tmp_path):
    rc = main(["track", "--config", str(env["cfg"]),
               "--checkpoint", str(env["ckpt"]),
               "--sequence", str(tmp_path / "nowhere"),
               "--output", str(tmp_path / "r.jsonl")])
    assert rc == 3
    assert error_lines(capsys)[0].startswith("ERROR:DATA:")


def test_track_bad_init_box(env, capsys, tmp_path):
    rc = main(["track", "--config", str(env["cfg"]),
               "--checkpoint", str(env["ckpt"]),
               "--sequence", str(env["data"] / env["seq_ids"][0]),
               "--output", str(tmp_path / "r.jsonl"),
               "--init-box", "1,2,3"])
    assert rc == 2
    assert error_lines(capsys)[0].startswith("ERROR:USAGE:")


def test_track_writes_results(env, capsys, tmp_path):
    out = tmp_path / "results" / f"{env['seq_ids'][0]}.jsonl"
    rc = main(["track", "--config", str(env["cfg"]),
               "--checkpoint", str(env["ckpt"]),
               "--sequence", str(env["data"] / env["seq_ids"][0]),
               "--output", str(out)])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert payload["frames"] == 8
    lines = [json.loads(l) for l in out.read_text().splitlines()]
    assert lines[0]["event"] == "config"
    assert lines[0]["mode"] == "axis_aligned"
    assert lines[1]["init"] and lines[1]["frame"] == 0
    assert len(lines) == 2 + 7  # header, init, 7 tracked frames
    for rec in lines[2:]:
        assert len(rec["box"]) == 4 and 0.0 <= rec["score"] <= 1.0
    boxes, frames = read_result_file(out)
    assert boxes.shape == (7, 4)
    assert frames == list(range(1, 8))


def test_track_rotated_mode(env, tmp_path):
    out = tmp_path / "rot.jsonl"
    mask_dir = tmp_path / "masks"
    rc = main(["track", "--config", str(env["cfg"]),
               "--checkpoint", str(env["ckpt"]),
               "--sequence", str(env["data"] / env["seq_ids"][0]),
               "--output", str(out),
               "--mode", "rotated_from_mask",
               "--mask-dir", str(mask_dir)])
    assert rc == 0
    lines = [json.loads(l) for l in out.read_text().splitlines()]
    assert lines[0]["mode"] == "rotated_from_mask"
    tracked = lines[2:]
    assert all(len(rec["rotated"]) == 5 for rec in tracked)
    assert all((mask_dir / f"{rec['frame']:06d}.png").is_file()
               for rec in tracked)


def test_eval_requires_a_route(env, capsys, tmp_path):
    rc = main(["eval", "--config", str(env["cfg"]),
               "--dataset", str(env["data"]),
               "--output-dir", str(tmp_path)])
    assert rc == 2
    assert error_lines(capsys)[0].startswith("ERROR:USAGE:")


def test_eval_checkpoint_route(env, capsys, tmp_path):
    rc = main(["eval", "--config", str(env["cfg"]),
               "--dataset", str(env["data"]),
               "--checkpoint", str(env["ckpt"]),
               "--output-dir", str(tmp_path), "--plots"])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert 0.0 <= payload["precision"] <= 1.0
    assert 0.0 <= payload["auc"] <= 1.0
    report = json.loads((tmp_path / "report.json").read_text())
    assert len(report["sequences"]) == 2
    assert (tmp_path / "success.png").is_file()


def test_eval_results_route(env, capsys, tmp_path):
    results = tmp_path / "results"
    results.mkdir()
    for seq_id in env["seq_ids"]:
        rc = main(["track", "--config", str(env["cfg"]),
                   "--checkpoint", str(env["ckpt"]),
                   "--sequence", str(env["data"] / seq_id),
                   "--output", str(results / f"{seq_id}.jsonl")])
        assert rc == 0
    capsys.readouterr()
    out_dir = tmp_path / "eval"
    rc = main(["eval", "--config", str(env["cfg"]),
               "--dataset", str(env["data"]),
               "--results-dir", str(results),
               "--output-dir", str(out_dir), "--plots"])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert "mean_iou" in payload
    assert (out_dir / "report.json").is_file()
    assert (out_dir / "precision.png").is_file()


def test_eval_unknown_sequence_results(env, capsys, tmp_path):
    results = tmp_path / "results"
    results.mkdir()
    (results / "mystery.jsonl").write_text(
        json.dumps({"frame": 1, "box": [0, 0, 5, 5], "score": 1.0}) + "\n")
    rc = main(["eval", "--config", str(env["cfg"]),
               "--dataset", str(env["data"]),
               "--results-dir", str(results),
               "--output-dir", str(tmp_path / "o")])
    assert rc == 3
    assert "mystery" in error_lines(capsys)[0]


def test_eval_empty_results_dir(env, capsys, tmp_path):
    empty = tmp_path / "results"
    empty.mkdir()
    rc = main(["eval", "--config", str(env["cfg"]),
               "--dataset", str(env["data"]),
               "--results-dir", str(empty),
               "--output-dir", str(tmp_path / "o")])
    assert rc == 3
    assert error_lines(capsys)[0].startswith("ERROR:DATA:")


def test_ablate_unknown_variant(env, capsys, tmp_path):
    rc = main(["ablate", "--config", str(env["cfg"]),
               "--output-dir", str(tmp_path),
               "--variants", "bogus"])
    assert rc == 2
    assert "bogus" in error_lines(capsys)[0]


def test_ablate_missing_checkpoint(env, capsys, tmp_path):
    rc = main(["ablate", "--config", str(env["cfg"]),
               "--output-dir", str(tmp_path),
               "--variants", "baseline"])
    assert rc == 4
    assert "--train-missing" in error_lines(capsys)[0]


def test_ablate_single_variant(env, capsys, tmp_path):
    rc = main(["ablate", "--config", str(env["cfg"]),
               "--output-dir", str(tmp_path),
               "--checkpoints-dir", str(tmp_path / "ckpts"),
               "--variants", "baseline", "--train-missing"])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert "direction" in payload
    data = json.loads((tmp_path / "ablation.json").read_text())
    assert [r["variant"] for r in data["rows"]] == ["baseline"]
    assert (tmp_path / "ablation.tsv").is_file()
    assert (tmp_path / "ckpts" / "baseline_s0.pt").is_file()
    assert (tmp_path / "ablation_success.png").is_file()


def test_demo_attention(env, capsys, tmp_path):
    rc = main(["demo-attention", "--config", str(env["cfg"]),
               "--checkpoint", str(env["ckpt"]),
               "--sequence", str(env["data"] / env["seq_ids"][0]),
               "--frame", "3",
               "--output-dir", str(tmp_path)])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert payload["frame"] == 3
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["files"] == payload["files"]
    for f in payload["files"]:
        assert Path(f).is_file()
    stems = {Path(f).stem for f in payload["files"]}
    assert "response_foreground" in stems
    assert any(s.endswith("spatial_search") for s in stems)
    assert any(s.endswith("cross_from_template") for s in stems)
    assert (tmp_path / "exemplar.png").is_file()
    assert (tmp_path / "search.png").is_file()


def test_demo_attention_frame_out_of_range(env, capsys, tmp_path):
    rc = main(["demo-attention", "--config", str(env["cfg"]),
               "--sequence", str(env["data"] / env["seq_ids"][0]),
               "--frame", "99",
               "--output-dir", str(tmp_path)])
    assert rc == 2
    assert error_lines(capsys)[0].startswith("ERROR:USAGE:")


def test_read_result_file_skips_meta(tmp_path):
    p = tmp_path / "r.jsonl"
    p.write_text("\n".join([
        json.dumps({"event": "config", "config_hash": "x"}),
        json.dumps({"frame": 0, "box": [0, 0, 1, 1], "score": 1.0,
                    "init": True}),
        "",
        json.dumps({"frame": 1, "box": [2, 3, 4, 5], "score": 0.5}),
    ]) + "\n")
    boxes, frames = read_result_file(p)
    assert boxes.shape == (1, 4)
    assert np.array_equal(boxes[0], [2, 3, 4, 5])
    assert frames == [1]
