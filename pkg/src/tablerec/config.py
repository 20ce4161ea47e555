"""Run configuration: one JSON document drives every CLI subcommand.

Each section is a dataclass whose defaults are the documented defaults;
loading rejects unknown keys so config typos fail loudly instead of being
silently ignored.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .model import ModelConfig, config_from_dict


class ConfigError(ValueError):
    """Bad configuration or usage; maps to exit code 1."""


class DataFormatError(ValueError):
    """Malformed data files; maps to exit code 2."""


@dataclass
class DataConfig:
    train_path: str = ""
    val_path: str = ""
    profile: str = "desk"          # generator profile for gen-data
    gen_count: int = 100
    gen_seed: int = 0


@dataclass
class TrainingConfig:
    epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-3
    lr_drop_epoch: int = -1        # epoch index at which lr is scaled; -1 = never
    lr_drop_factor: float = 0.1
    seed: int = 0
    val_every_epoch: bool = True
    val_max_samples: int = 64
    checkpoint_every_epoch: bool = True


@dataclass
class EvalConfig:
    iou_threshold: float = 0.5
    metrics: tuple[str, ...] = ("teds", "teds-struct", "map")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("image_size", "backbone_channels", "backbone_strides"):
            d["model"][key] = list(d["model"][key])
        d["eval"]["metrics"] = list(d["eval"]["metrics"])
        return d

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _check_keys(section: str, data: dict, cls) -> None:
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")


def run_config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(data) - {"model", "data", "training", "eval"}
    if unknown:
        raise ConfigError(f"unknown top-level section(s): {', '.join(sorted(unknown))}")
    cfg = RunConfig()
    if "model" in data:
        _check_keys("model", data["model"], ModelConfig)
        merged = {**asdict(cfg.model), **data["model"]}
        cfg.model = config_from_dict(merged)
    if "data" in data:
        _check_keys("data", data["data"], DataConfig)
        cfg.data = DataConfig(**{**asdict(cfg.data), **data["data"]})
    if "training" in data:
        _check_keys("training", data["training"], TrainingConfig)
        cfg.training = TrainingConfig(**{**asdict(cfg.training), **data["training"]})
    if "eval" in data:
        _check_keys("eval", data["eval"], EvalConfig)
        merged = {**asdict(cfg.eval), **data["eval"]}
        merged["metrics"] = tuple(merged["metrics"])
        cfg.eval = EvalConfig(**merged)
    try:
        cfg.model.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_run_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return run_config_from_dict(data)
