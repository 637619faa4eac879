"""Experiment configuration: a versioned YAML document mapped onto dataclasses.

Schema (version 1).  Keys marked * are mandatory; everything else has a default.

.. code-block:: yaml

    version: 1                 # *
    seed: 0                    # *
    output_dir: runs/default   # *
    data:    {num_classes, feature_dim, seq_len, num_sequences, emission_noise_std,
              stay_prob, split: [pretrain, finetune, eval]}
    encoder: {hidden_dim, num_blocks, num_heads, ffn_multiplier, downsample_stride, dropout_rate}
    model:   {top_k, high_level_split, mask_fill, stop_gradient}
    loss:    {mode*, loss_positions, regul_temperature}
    mask:    {prob, span}
    ema:     {tau_start, tau_end, anneal_steps}
    optim:   {lr, warmup_steps}
    teacher: {steps, lr, warmup_steps}
    train:   {steps, batch_size, diag_interval, checkpoint_interval, probe_interval}
    probe:   {steps, lr}
"""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import DEFAULT_SIGMA, SynthConfig
from .encoder import EncoderConfig
from .model import ModelConfig
from .objectives import LossConfig

CONFIG_VERSION = 1
REQUIRED = ("version", "seed", "output_dir", "loss.mode")


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


@dataclass
class DataSection:
    num_classes: int = 8
    feature_dim: int = 16
    seq_len: int = 64
    num_sequences: int = 400
    emission_noise_std: float = DEFAULT_SIGMA
    stay_prob: float = 0.9
    split: list = field(default_factory=lambda: [0.8, 0.05, 0.15])


@dataclass
class EncoderSection:
    hidden_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    ffn_multiplier: int = 4
    downsample_stride: int = 4
    dropout_rate: float = 0.1


@dataclass
class ModelSection:
    top_k: int | None = None
    high_level_split: bool = True
    mask_fill: str = "learned"
    stop_gradient: bool = True


@dataclass
class LossSection:
    mode: str = "trinet"
    loss_positions: str = "masked_only"
    regul_temperature: float = 1.0


@dataclass
class MaskSection:
    prob: float = 0.065
    span: int = 10


@dataclass
class EmaSection:
    tau_start: float = 0.999
    tau_end: float = 0.9999
    anneal_steps: int = 1000


@dataclass
class OptimSection:
    lr: float = 5e-4
    warmup_steps: int = 100


@dataclass
class TeacherSection:
    steps: int = 300
    lr: float = 1e-3
    warmup_steps: int = 50


@dataclass
class TrainSection:
    steps: int = 2000
    batch_size: int = 16
    diag_interval: int = 100
    checkpoint_interval: int = 0
    probe_interval: int = 0


@dataclass
class ProbeSection:
    steps: int = 500
    lr: float = 1e-2


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    version: int = CONFIG_VERSION
    data: DataSection = field(default_factory=DataSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    mask: MaskSection = field(default_factory=MaskSection)
    ema: EmaSection = field(default_factory=EmaSection)
    optim: OptimSection = field(default_factory=OptimSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    train: TrainSection = field(default_factory=TrainSection)
    probe: ProbeSection = field(default_factory=ProbeSection)

    def __post_init__(self):
        self.validate()

    # derived component configs
    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(input_dim=self.data.feature_dim, **dataclasses.asdict(self.encoder))

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(self.encoder_config(), num_classes=self.data.num_classes, top_k=m.top_k,
                           high_level_split=m.high_level_split, mask_fill=m.mask_fill)

    def loss_config(self) -> LossConfig:
        return LossConfig(**dataclasses.asdict(self.loss))

    def synth_config(self) -> SynthConfig:
        d = self.data
        return SynthConfig(num_classes=d.num_classes, feature_dim=d.feature_dim, seq_len=d.seq_len,
                           num_sequences=d.num_sequences, emission_noise_std=d.emission_noise_std,
                           stay_prob=d.stay_prob, seed=self.seed)

    def validate(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"version: expected {CONFIG_VERSION}, got {self.version}")
        checks = [
            ("encoder", self.encoder_config),
            ("model", self.model_config),
            ("loss", self.loss_config),
            ("data", self.synth_config),
        ]
        for name, build in checks:
            try:
                build()
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{name}: {exc}") from exc
        for name in ("steps", "batch_size", "diag_interval", "checkpoint_interval", "probe_interval"):
            if getattr(self.train, name) < 0:
                raise ConfigError(f"train.{name} must be >= 0")
        if self.train.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        for name, value in (("teacher.steps", self.teacher.steps), ("probe.steps", self.probe.steps),
                            ("ema.anneal_steps", self.ema.anneal_steps)):
            if value < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 <= self.ema.tau_start <= self.ema.tau_end <= 1:
            raise ConfigError("ema: need 0 <= tau_start <= tau_end <= 1")
        for name, value in (("optim.lr", self.optim.lr), ("teacher.lr", self.teacher.lr),
                            ("probe.lr", self.probe.lr)):
            if not value > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.mask.prob < 1:
            raise ConfigError("mask.prob must lie in (0, 1)")
        if not 1 <= self.mask.span <= self.data.seq_len:
            raise ConfigError("mask.span must lie in [1, data.seq_len]")
        if self.mask.prob * self.mask.span >= 1:
            raise ConfigError("mask: prob * span must be < 1")
        split = self.data.split
        if len(split) != 3 or any(f < 0 for f in split) or abs(sum(split) - 1) > 1e-9:
            raise ConfigError("data.split must be three nonnegative fractions summing to 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"loss.mode": "trinet"})``."""
        raw = self.to_dict()
        for key, value in changes.items():
            node = raw
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return from_dict(raw)


_SECTIONS = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
_SECTION_TYPES = {
    "data": DataSection, "encoder": EncoderSection, "model": ModelSection, "loss": LossSection,
    "mask": MaskSection, "ema": EmaSection, "optim": OptimSection, "teacher": TeacherSection,
    "train": TrainSection, "probe": ProbeSection,
}


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    for key in REQUIRED:
        node = raw
        for part in key.split("."):
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"missing mandatory field '{key}'")
            node = node[part]
    raw = copy.deepcopy(raw)
    kwargs = {}
    for key, value in raw.items():
        if key not in _SECTIONS:
            raise ConfigError(f"unknown field '{key}'")
        if key in _SECTION_TYPES:
            cls = _SECTION_TYPES[key]
            if not isinstance(value, dict):
                raise ConfigError(f"'{key}' must be a mapping")
            known = {f.name for f in dataclasses.fields(cls)}
            for sub in value:
                if sub not in known:
                    raise ConfigError(f"unknown field '{key}.{sub}'")
            kwargs[key] = cls(**value)
        else:
            kwargs[key] = value
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    return from_dict(raw)


def dump_config(config: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
    return path
