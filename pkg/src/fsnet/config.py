"""Run configuration: training/eval knobs, JSON documents, named presets.

A run config JSON document has up to five sections — backbone, regressor,
train, eval, paths — and may start from a named preset::

    {"preset": "desk", "train": {"epochs": 30, "lr": 0.05}}

Section contents overlay the preset field by field; unknown keys anywhere are
rejected rather than ignored, so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from fsnet.backbone import BackboneConfig, preset_backbone
from fsnet.errors import ConfigError
from fsnet.regressor import RegressorConfig

__all__ = [
    "TrainConfig",
    "EvalConfig",
    "PathsConfig",
    "RunConfig",
    "preset_run_config",
    "run_config_from_json",
    "load_run_config",
    "backbone_to_dict",
    "backbone_from_dict",
    "regressor_to_dict",
    "regressor_from_dict",
]

STAGES = ("detector", "regressor")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 8
    lr: float = 0.03
    momentum: float = 0.9
    clip_norm: float = 5.0  # global gradient-norm ceiling; 0 disables
    seed: int = 0
    target_offset: int = 0  # >0 trains against the boxes of frame t+offset
    stage: str = "detector"

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr < 0:  # 0 = measure without updating (identity-run mode)
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.clip_norm < 0:
            raise ConfigError(f"clip_norm must be >= 0, got {self.clip_norm}")
        if self.target_offset < 0:
            raise ConfigError(f"target_offset must be >= 0, got {self.target_offset}")
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")


@dataclass(frozen=True)
class EvalConfig:
    iou: float = 0.5
    score_threshold: float = 0.25
    nms_iou: float = 0.45
    top_k: int = 50

    def __post_init__(self) -> None:
        for name in ("iou", "score_threshold", "nms_iou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")


@dataclass(frozen=True)
class PathsConfig:
    data: str | None = None
    out: str | None = None


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig
    regressor: RegressorConfig
    train: TrainConfig
    eval: EvalConfig
    paths: PathsConfig


_RUN_PRESETS = {
    "paper": dict(
        backbone={"preset": "paper"},
        regressor={"k": 10, "delta": 30},  # one second at 30 fps
        train={"epochs": 20, "lr": 0.01},
        eval={},
        paths={},
    ),
    "desk": dict(
        backbone={"preset": "desk"},
        regressor={"k": 2, "delta": 5},
        train={"epochs": 8, "lr": 0.05},
        eval={},
        paths={},
    ),
}


def _build_section(cls, given: dict, defaults: dict, what: str):
    merged = {**defaults, **given}
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(merged) - fields
    if unknown:
        raise ConfigError(f"{what}: unknown keys {sorted(unknown)}")
    try:
        return cls(**merged)
    except TypeError as e:
        raise ConfigError(f"{what}: {e}") from e


def _build_backbone(given: dict, defaults: dict) -> BackboneConfig:
    merged = {**defaults, **given}
    preset = merged.pop("preset", None)
    for key, val in merged.items():
        if isinstance(val, list):
            merged[key] = tuple(val)
    fields = {f.name for f in dataclasses.fields(BackboneConfig)}
    unknown = set(merged) - (fields - {"name"} if preset else fields)
    if unknown:
        raise ConfigError(f"backbone: unknown keys {sorted(unknown)}")
    if preset is not None:
        return preset_backbone(preset, **merged)
    try:
        return BackboneConfig(**merged)
    except TypeError as e:
        raise ConfigError(f"backbone: {e}") from e


def run_config_from_json(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    doc = dict(doc)
    preset = doc.pop("preset", None)
    if preset is not None and preset not in _RUN_PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; have {sorted(_RUN_PRESETS)}")
    base = _RUN_PRESETS[preset] if preset else dict(
        backbone={}, regressor={}, train={}, eval={}, paths={}
    )
    unknown = set(doc) - set(base)
    if unknown:
        raise ConfigError(f"run config: unknown sections {sorted(unknown)}")
    for section, val in doc.items():
        if not isinstance(val, dict):
            raise ConfigError(f"section {section!r} must be an object")
    backbone = _build_backbone(doc.get("backbone", {}), base["backbone"])
    reg_given = {**base["regressor"], **doc.get("regressor", {})}
    reg_given.setdefault("bottleneck_channels", backbone.bottleneck_channels)
    regressor = _build_section(RegressorConfig, reg_given, {}, "regressor")
    if regressor.bottleneck_channels != backbone.bottleneck_channels:
        raise ConfigError(
            f"regressor bottleneck {regressor.bottleneck_channels} != "
            f"backbone bottleneck {backbone.bottleneck_channels}"
        )
    train = _build_section(TrainConfig, doc.get("train", {}), base["train"], "train")
    evalc = _build_section(EvalConfig, doc.get("eval", {}), base["eval"], "eval")
    paths = _build_section(PathsConfig, doc.get("paths", {}), base["paths"], "paths")
    return RunConfig(backbone, regressor, train, evalc, paths)


def preset_run_config(name: str) -> RunConfig:
    return run_config_from_json({"preset": name})


def load_run_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: bad JSON: {e.msg}") from e
    return run_config_from_json(doc)


# ------------------------------------------------ checkpoint-header encoding

def backbone_to_dict(cfg: BackboneConfig) -> dict:
    return dataclasses.asdict(cfg)


def backbone_from_dict(d: dict) -> BackboneConfig:
    fields = {f.name for f in dataclasses.fields(BackboneConfig)}
    if set(d) != fields:
        raise ConfigError(f"backbone dict keys {sorted(d)} != {sorted(fields)}")
    clean = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return BackboneConfig(**clean)


def regressor_to_dict(cfg: RegressorConfig) -> dict:
    return dataclasses.asdict(cfg)


def regressor_from_dict(d: dict) -> RegressorConfig:
    fields = {f.name for f in dataclasses.fields(RegressorConfig)}
    if set(d) != fields:
        raise ConfigError(f"regressor dict keys {sorted(d)} != {sorted(fields)}")
    return RegressorConfig(**d)
