"""Experiment configuration: a nested YAML document validated with pydantic.

Unknown keys are rejected everywhere so every run directory documents exactly
what produced it.  Omitted keys take the defaults below, which are the
full-scale defense hyperparameters.  The grammar is documented in the README
and by ``configs/*.yaml``.
"""
from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .losses import MixMatchConfig
from .models import ARCHITECTURES, ModelSpec
from .poisoning import PoisonPolicy, TriggerSpec, noise_pattern
from .pools import SplitConfig, StageSchedule

MODES = ("poison", "train-asd", "train-nodefense", "eval", "plot")


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DatasetSection(_Section):
    source: Literal["cifar10", "synthetic"] = "cifar10"
    root: Optional[str] = None
    subset_fraction: float = Field(1.0, gt=0, le=1)
    subset_seed: int = 0
    # synthetic stand-in only
    train_per_class: int = Field(500, ge=1)
    test_per_class: int = Field(100, ge=1)
    data_seed: int = 1
    max_distractor: float = Field(0.8, ge=0)


class TriggerSection(_Section):
    kind: Literal["badnets", "blend"] = "badnets"
    patch_size: int = Field(2, ge=0)
    patch_value: float = Field(1.0, ge=0, le=1)
    anchor: Tuple[int, int] = (0, 0)
    blend_ratio: float = Field(0.1, ge=0, le=1)
    pattern_seed: int = 7

    def build(self, image_shape):
        if self.kind == "badnets":
            return TriggerSpec.badnets(self.patch_size, self.patch_value, self.anchor, image_shape[-1])
        return TriggerSpec.blend(noise_pattern(image_shape, self.pattern_seed), self.blend_ratio)


class AttackSection(_Section):
    trigger: TriggerSection = TriggerSection()
    target_label: int = Field(3, ge=0)
    poison_rate: float = Field(0.05, ge=0, le=1)
    poison_seed: int = 0

    def policy(self):
        return PoisonPolicy(self.target_label, self.poison_rate, self.poison_seed)


class SplitSection(_Section):
    seeds_per_class: int = Field(10, ge=0)
    quota_step: int = Field(10, ge=0)
    quota_interval: int = Field(5, ge=1)
    agnostic_percent: float = Field(50.0, ge=0, le=100)
    meta_percent: float = Field(50.0, ge=0, le=100)
    virtual_lr: float = Field(0.015, gt=0)
    virtual_optimizer: Literal["sgd", "adam"] = "sgd"
    virtual_batch_size: int = Field(128, ge=1)
    virtual_layers: str = "last3"
    seeds_in_quota: bool = False

    def build(self):
        return SplitConfig(**self.model_dump())


class ScheduleSection(_Section):
    class_aware_end: int = Field(60, ge=1)
    class_agnostic_end: int = Field(90, ge=1)
    total_epochs: int = Field(120, ge=1)

    @model_validator(mode="after")
    def _ordered(self):
        if not self.class_aware_end <= self.class_agnostic_end <= self.total_epochs:
            raise ValueError("need class_aware_end <= class_agnostic_end <= total_epochs")
        return self

    def build(self):
        return StageSchedule(**self.model_dump())


class MixMatchSection(_Section):
    temperature: float = Field(0.5, gt=0)
    lambda_u: float = Field(15.0, ge=0)
    alpha: float = Field(0.75, gt=0)
    augmentations: int = Field(2, ge=1)

    def build(self):
        return MixMatchConfig(**self.model_dump())


class DefenseSection(_Section):
    split: SplitSection = SplitSection()
    schedule: ScheduleSection = ScheduleSection()
    mixmatch: MixMatchSection = MixMatchSection()
    lr: float = Field(0.002, gt=0)
    batch_size: int = Field(64, ge=1)
    seed_sample_seed: int = 0


class ModelSection(_Section):
    arch: Literal[tuple(ARCHITECTURES)] = "resnet18-like"
    width: int = Field(64, ge=1)

    def build(self, num_classes, input_shape):
        return ModelSpec(self.arch, num_classes, tuple(input_shape), self.width)


class BaselineSection(_Section):
    epochs: int = Field(60, ge=1)
    lr: float = Field(0.1, gt=0)
    momentum: float = Field(0.9, ge=0)
    weight_decay: float = Field(5e-4, ge=0)
    batch_size: int = Field(128, ge=2)


class OutputSection(_Section):
    dump_losses: bool = True
    dump_pools: bool = True
    checkpoint: bool = True


class ExperimentConfig(_Section):
    mode: Literal[MODES] = "train-asd"
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: DatasetSection = DatasetSection()
    attack: AttackSection = AttackSection()
    defense: DefenseSection = DefenseSection()
    model: ModelSection = ModelSection()
    baseline: BaselineSection = BaselineSection()
    outputs: OutputSection = OutputSection()
    checkpoint: Optional[str] = None  # eval mode: which checkpoint to score


def _describe(err: ValidationError):
    lines = []
    for e in err.errors():
        key = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{key}: {e['msg']}")
    return "; ".join(lines)


def config_from_dict(d):
    try:
        return ExperimentConfig.model_validate(d or {})
    except ValidationError as err:
        raise ConfigError(_describe(err)) from None


def parse_config(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} does not exist")
    with open(path) as f:
        data = yaml.safe_load(f)
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data)


def config_to_dict(cfg):
    return cfg.model_dump(mode="json")


def dump_config(cfg, path=None):
    text = yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text


def override(cfg, **changes):
    """Copy with top-level overrides applied and re-validated."""
    d = config_to_dict(cfg)
    d.update({k: v for k, v in changes.items() if v is not None})
    return config_from_dict(d)
