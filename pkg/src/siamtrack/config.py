"""Run configuration: typed sections, strict YAML loading, stable hashing.

A run is described by a single YAML file. Unknown keys are rejected by
name so typos never silently fall back to defaults. Every output the
package writes (checkpoints, logs, result files, reports) embeds the
12-hex-digit hash of the fully resolved configuration.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Raised for unknown keys, bad types, or invalid values."""


@dataclass
class BackboneConfig:
    """Five-stage residual feature extractor contract.

    The last two stages trade stride for dilation, so the deepest three
    stages all sit at ``final_stride``. Their outputs are mapped to
    ``adjusted_channels`` by linear 1x1 convolutions. ``tiny_mode``
    relaxes the crop-size precondition to any multiple of the stride so
    reduced-width desk runs can use small crops in unit tests.
    """

    num_stages: int = 5
    channels_per_stage: list[int] = field(
        default_factory=lambda: [64, 128, 256, 384, 512])
    final_stride: int = 8
    adjusted_channels: int = 256
    tiny_mode: bool = False
    blocks_per_stage: int = 1
    norm_groups: int = 8

    def validate(self) -> None:
        if self.num_stages != 5:
            raise ConfigError(
                f"backbone.num_stages must be 5, got {self.num_stages}")
        if len(self.channels_per_stage) != self.num_stages:
            raise ConfigError(
                "backbone.channels_per_stage must list "
                f"{self.num_stages} values, got {len(self.channels_per_stage)}")
        if self.final_stride != 8:
            raise ConfigError(
                f"backbone.final_stride must be 8, got {self.final_stride}")
        if self.adjusted_channels % 8 != 0:
            raise ConfigError(
                "backbone.adjusted_channels must be divisible by 8, got "
                f"{self.adjusted_channels}")
        for c in self.channels_per_stage:
            if c < self.norm_groups or c % self.norm_groups != 0:
                raise ConfigError(
                    f"backbone channel width {c} not divisible by "
                    f"norm_groups={self.norm_groups}")
        if self.blocks_per_stage < 1:
            raise ConfigError("backbone.blocks_per_stage must be >= 1")


@dataclass
class AttentionConfig:
    """Toggles for the attention block between backbone and heads.

    ``enabled`` switches the whole block (off means features pass
    through untouched, matching the plain-correlation baseline). The
    per-branch softmax axis of the channel map and the placement of the
    deformable convolution are explicit switches because the reference
    description leaves them open; defaults are row-normalisation and a
    single deformable convolution after the sub-module sum.
    """

    enabled: bool = True
    spatial_sa: bool = True
    channel_sa: bool = True
    cross_attn: bool = True
    deform_conv: bool = True
    channel_softmax_axis: str = "row"
    deform_position: str = "after_sum"

    def validate(self) -> None:
        if self.channel_softmax_axis not in ("row", "col"):
            raise ConfigError(
                "attention.channel_softmax_axis must be 'row' or 'col', got "
                f"{self.channel_softmax_axis!r}")
        if self.deform_position not in ("after_sum", "per_branch"):
            raise ConfigError(
                "attention.deform_position must be 'after_sum' or "
                f"'per_branch', got {self.deform_position!r}")


@dataclass
class RpnConfig:
    """Anchor layout and per-stage correlation head settings."""

    anchor_ratios: list[float] = field(
        default_factory=lambda: [0.33, 0.5, 1.0, 2.0, 3.0])
    anchor_base_scale: int = 8
    template_crop: int = 7
    pos_iou: float = 0.6
    neg_iou: float = 0.3
    cls_sample_total: int = 64
    cls_sample_pos: int = 16

    def validate(self) -> None:
        if not self.anchor_ratios:
            raise ConfigError("rpn.anchor_ratios must be non-empty")
        for r in self.anchor_ratios:
            if r <= 0:
                raise ConfigError(f"rpn.anchor_ratios entries must be > 0, got {r}")
        if self.template_crop < 1:
            raise ConfigError("rpn.template_crop must be >= 1")
        if not (0.0 <= self.neg_iou <= self.pos_iou <= 1.0):
            raise ConfigError(
                "rpn thresholds must satisfy 0 <= neg_iou <= pos_iou <= 1, "
                f"got neg={self.neg_iou} pos={self.pos_iou}")
        if self.cls_sample_pos > self.cls_sample_total:
            raise ConfigError(
                "rpn.cls_sample_pos must not exceed rpn.cls_sample_total")


@dataclass
class RefinementConfig:
    """Region refinement branch: pooled box regression plus mask head."""

    enabled: bool = True
    deform_pool: bool = True
    channels: int = 256
    box_pool: int = 4
    mask_pool: int = 16
    mask_size: int = 64
    fc_width: int = 512
    offset_scale: float = 0.1
    samples_per_pair: int = 16
    sample_iou: float = 0.5

    def validate(self) -> None:
        if self.mask_size != 4 * self.mask_pool:
            raise ConfigError(
                "refinement.mask_size must be 4 * mask_pool (single x4 "
                f"deconv), got {self.mask_size} vs pool {self.mask_pool}")
        if self.box_pool < 1 or self.mask_pool < 1:
            raise ConfigError("refinement pool sizes must be >= 1")
        if self.samples_per_pair < 1:
            raise ConfigError("refinement.samples_per_pair must be >= 1")
        if not (0.0 < self.sample_iou < 1.0):
            raise ConfigError(
                f"refinement.sample_iou must be in (0, 1), got {self.sample_iou}")


@dataclass
class TrainConfig:
    """Optimisation schedule and loss weights."""

    epochs: int = 20
    steps_per_epoch: int = 200
    batch_size: int = 12
    warmup_epochs: int = 5
    warmup_lr: float = 1.0e-3
    decay_lr_start: float = 5.0e-3
    decay_lr_end: float = 5.0e-4
    backbone_frozen_epochs: int = 10
    backbone_lr_factor: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1.0e-5
    lambda_reg: float = 0.2
    lambda_refine_box: float = 0.2
    lambda_refine_mask: float = 0.1
    pair_max_gap: int = 50
    shift_jitter: int = 32
    scale_jitter: float = 0.05

    def validate(self) -> None:
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("training epochs/steps/batch must all be >= 1")
        if not (0 <= self.warmup_epochs <= self.epochs):
            raise ConfigError(
                f"training.warmup_epochs must lie in [0, epochs], got "
                f"{self.warmup_epochs}")
        for name in ("warmup_lr", "decay_lr_start", "decay_lr_end"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"training.{name} must be > 0")
        for name in ("lambda_reg", "lambda_refine_box", "lambda_refine_mask"):
            if getattr(self, name) < 0:
                raise ConfigError(f"training.{name} must be >= 0")


@dataclass
class TrackerConfig:
    """Inference-time smoothing: shape penalty, window, size update."""

    penalty_k: float = 0.05
    window_influence: float = 0.4
    size_lr: float = 0.3
    mode: str = "axis_aligned"
    mask_threshold: float = 0.5

    def validate(self) -> None:
        if self.mode not in ("axis_aligned", "rotated_from_mask"):
            raise ConfigError(
                "tracker.mode must be 'axis_aligned' or "
                f"'rotated_from_mask', got {self.mode!r}")
        if not (0.0 <= self.window_influence <= 1.0):
            raise ConfigError(
                "tracker.window_influence must lie in [0, 1], got "
                f"{self.window_influence}")
        if not (0.0 < self.mask_threshold < 1.0):
            raise ConfigError(
                f"tracker.mask_threshold must lie in (0, 1), got "
                f"{self.mask_threshold}")


@dataclass
class SyntheticConfig:
    """Procedural benchmark sequences: moving deforming blob plus clutter."""

    num_sequences: int = 20
    length: int = 30
    frame_size: int = 192
    target_size: int = 28
    speed: float = 4.0
    deformation_amplitude: float = 0.25
    distractor_count: int = 2
    occlusion_events: int = 1
    occlusion_length: int = 3
    noise_level: float = 8.0

    def validate(self) -> None:
        if self.length < 2:
            raise ConfigError("synthetic.length must be >= 2")
        if self.frame_size < 4 * self.target_size:
            raise ConfigError(
                "synthetic.frame_size must be at least 4x target_size, got "
                f"{self.frame_size} vs {self.target_size}")
        if self.deformation_amplitude < 0 or self.deformation_amplitude >= 0.9:
            raise ConfigError(
                "synthetic.deformation_amplitude must lie in [0, 0.9)")


@dataclass
class DataConfig:
    """Crop geometry and dataset location. ``root`` None means synthetic."""

    root: str | None = None
    exemplar_size: int = 127
    search_size: int = 255
    context_amount: float = 0.5
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def validate(self) -> None:
        if self.exemplar_size >= self.search_size:
            raise ConfigError(
                "data.exemplar_size must be smaller than data.search_size")
        if self.context_amount < 0:
            raise ConfigError("data.context_amount must be >= 0")
        self.synthetic.validate()


@dataclass
class EvalConfig:
    """Metric settings for precision / success / reset evaluation."""

    precision_px: float = 20.0
    success_steps: int = 101
    reset_burn_in: int = 5

    def validate(self) -> None:
        if self.success_steps < 2:
            raise ConfigError("eval.success_steps must be >= 2")
        if self.reset_burn_in < 0:
            raise ConfigError("eval.reset_burn_in must be >= 0")


@dataclass
class RunConfig:
    """Top-level configuration: one instance describes one run."""

    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    rpn: RpnConfig = field(default_factory=RpnConfig)
    refinement: RefinementConfig = field(default_factory=RefinementConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "validate"):
                v.validate()

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _coerce(value: Any, target_type: Any, path: str) -> Any:
    """Check and lightly coerce a YAML scalar/list against a field type."""
    import types as _types
    import typing as _typing
    if isinstance(target_type, _types.UnionType) or \
            _typing.get_origin(target_type) is _typing.Union:
        args = _typing.get_args(target_type)
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(f"{path}: null not allowed")
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    origin = getattr(target_type, "__origin__", None)
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {value!r}")
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected integer, got {value!r}")
        return value
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected boolean, got {value!r}")
        return value
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {value!r}")
        return value
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected list, got {value!r}")
        inner = target_type.__args__[0]
        return [_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value)]
    return value


def _build_section(cls: type, data: dict[str, Any], path: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected mapping, got {data!r}")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key: {path}.{key}" if path
                              else f"unknown config key: {key}")
    kwargs: dict[str, Any] = {}
    for name, f in known.items():
        if name not in data:
            continue
        sub_path = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(f.type) or (
                isinstance(f.type, str) and f.type in _SECTION_TYPES):
            sub_cls = _SECTION_TYPES[f.type] if isinstance(f.type, str) else f.type
            kwargs[name] = _build_section(sub_cls, data[name], sub_path)
        else:
            ftype = _FIELD_TYPES[cls].get(name, f.type)
            kwargs[name] = _coerce(data[name], ftype, sub_path)
    return cls(**kwargs)


# `from __future__ import annotations` turns field types into strings, so
# resolve them once from each dataclass's real annotations.
_SECTION_TYPES: dict[str, type] = {
    c.__name__: c for c in (
        BackboneConfig, AttentionConfig, RpnConfig, RefinementConfig,
        TrainConfig, TrackerConfig, SyntheticConfig, DataConfig,
        EvalConfig, RunConfig)
}


def _resolved_field_types() -> dict[type, dict[str, Any]]:
    import typing
    out: dict[type, dict[str, Any]] = {}
    for c in _SECTION_TYPES.values():
        hints = typing.get_type_hints(c)
        out[c] = hints
    return out


_FIELD_TYPES = _resolved_field_types()


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    """Build and validate a RunConfig from a plain mapping.

    Raises ConfigError naming the first unknown or invalid key.
    """
    cfg = _build_section(RunConfig, data or {}, "")
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    """Load a YAML run configuration from disk."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"config file is not valid YAML: {e}") from e
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return config_from_dict(raw)


def config_hash(cfg: RunConfig) -> str:
    """Stable 12-hex-digit digest of the fully resolved configuration."""
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def tiny_config(seed: int = 0) -> RunConfig:
    """Reduced-width configuration sized for single-core desk runs."""
    cfg = RunConfig(seed=seed)
    cfg.backbone = BackboneConfig(
        channels_per_stage=[8, 16, 16, 16, 16],
        adjusted_channels=16,
        tiny_mode=True,
        norm_groups=4,
    )
    cfg.refinement.channels = 16
    cfg.refinement.fc_width = 64
    cfg.training.batch_size = 4
    cfg.training.steps_per_epoch = 20
    return cfg
