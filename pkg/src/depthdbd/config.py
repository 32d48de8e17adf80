"""Run configuration: one YAML file with ``model``, ``train``, ``distill``,
``data`` and ``eval`` sections, plus command-line overrides."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .distillation import DistillConfig, TrainConfig
from .evaluation import DEFAULT_THRESHOLDS, MetricConfig
from .exceptions import ConfigurationError
from .model import ModelConfig

OUTPUT_ROOT_ENV = "DEPTHDBD_OUTPUT_ROOT"


@dataclass
class DataConfig:
    dataset_root: Optional[str] = None
    manifest: Optional[str] = None
    polarity_flag: str = "defocus"


@dataclass
class EvalConfig:
    beta_squared: float = 0.3
    binarize_threshold: float = 0.5
    thresholds_for_pr: List[float] = field(default_factory=lambda: list(DEFAULT_THRESHOLDS))

    def metric_config(self) -> MetricConfig:
        return MetricConfig(self.beta_squared, self.binarize_threshold,
                            tuple(self.thresholds_for_pr))


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs"
    seed: int = 0

    def resolved_output_dir(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "distill": DistillConfig,
             "data": DataConfig, "eval": EvalConfig}


def _build(cls, values: Dict[str, Any]):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**values)


def run_config_from_dict(raw: Optional[dict]) -> RunConfig:
    raw = dict(raw or {})
    if "seed" in raw:
        train = dict(raw.get("train") or {})
        train.setdefault("seed", raw["seed"])
        raw["train"] = train
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = raw.pop(name, None) or {}
        if not isinstance(section, dict):
            raise ConfigurationError(f"config section {name!r} must be a mapping")
        kwargs[name] = _build(cls, section)
    for key in ("output_dir", "seed"):
        if key in raw:
            kwargs[key] = raw.pop(key)
    if raw:
        raise ConfigurationError(f"unknown config keys: {sorted(raw)}")
    return RunConfig(**kwargs)


def load_run_config(path=None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Read a YAML config (or defaults) and apply dotted-key overrides such
    as ``{"train.max_epochs": 5}``. The top-level ``seed`` propagates to
    ``train.seed``."""
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError as exc:
            raise ConfigurationError(f"config file {path} not found") from exc
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    cfg = run_config_from_dict(raw)
    cfg.model.validate()
    cfg.train.validate()
    cfg.distill.validate()
    return cfg
