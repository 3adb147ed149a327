"""Checkpoint save/load with configuration compatibility checking.

A checkpoint stores named parameter/buffer tensors, optimizer state,
the epoch counter, the full resolved configuration and its hash. On
load the architecture-bearing config sections are compared field by
field and any differences are reported by name, so a mismatched
checkpoint fails loudly instead of half-loading.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

import torch

from .config import RunConfig, config_from_dict, config_hash

# sections that determine the parameter shapes / module set
_ARCH_SECTIONS = ("backbone", "attention", "rpn", "refinement")


class CheckpointError(RuntimeError):
    """Raised for unreadable files or configuration mismatches."""


def save_checkpoint(path: str | Path, model: torch.nn.Module,
                    cfg: RunConfig, epoch: int,
                    optimizer: torch.optim.Optimizer | None = None,
                    extra: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload: dict[str, Any] = {
        "model_state": model.state_dict(),
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "epoch": epoch,
    }
    if optimizer is not None:
        payload["optimizer_state"] = optimizer.state_dict()
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)
    return path


def _config_diffs(saved: dict[str, Any], current: RunConfig) -> list[str]:
    cur = current.to_dict()
    diffs = []
    for section in _ARCH_SECTIONS:
        a = saved.get(section, {})
        b = cur.get(section, {})
        for key in sorted(set(a) | set(b)):
            if a.get(key) != b.get(key):
                diffs.append(f"{section}.{key}: checkpoint={a.get(key)!r} "
                             f"config={b.get(key)!r}")
    return diffs


def load_checkpoint(path: str | Path, model: torch.nn.Module,
                    cfg: RunConfig,
                    optimizer: torch.optim.Optimizer | None = None
                    ) -> dict[str, Any]:
    """Load weights into model, verifying architecture compatibility."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint file not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    if "model_state" not in payload or "config" not in payload:
        raise CheckpointError(f"not a checkpoint file: {path}")
    diffs = _config_diffs(payload["config"], cfg)
    if diffs:
        raise CheckpointError(
            "checkpoint/config mismatch: " + "; ".join(diffs))
    model.load_state_dict(payload["model_state"])
    if optimizer is not None and "optimizer_state" in payload:
        optimizer.load_state_dict(payload["optimizer_state"])
    return payload


def peek_config(path: str | Path) -> RunConfig:
    """Read just the configuration out of a checkpoint."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint file not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if "config" not in payload:
        raise CheckpointError(f"not a checkpoint file: {path}")
    return config_from_dict(payload["config"])
