"""Experiment configuration: a strict YAML/JSON schema.

Unknown keys anywhere in the document are rejected. ``DAPAS_SEED`` in the
environment overrides the top-level ``seed``.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from dapas.attacks import DEFAULT_ALPHA
from dapas.dae import DAEConfig
from dapas.noise import derive_seed
from dapas.pipeline import IMAGENET_MEAN, IMAGENET_STD, SegmenterTrainConfig
from dapas.training import TrainConfig
from dapas.types import DEFAULT_IGNORE_INDEX, DIVISOR, NoiseSpec

PAPER_EPSILONS = (0.001, 0.002, 0.004, 0.008, 0.016, 0.032)
SEED_ENV = "DAPAS_SEED"


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetSection(_Strict):
    source: Literal["synthetic", "voc_dir"] = "synthetic"
    root: Optional[str] = None
    resolution: tuple[int, int] = (64, 64)
    num_classes: int = 4
    ignore_index: int = DEFAULT_IGNORE_INDEX
    channels: Literal[1, 3] = 3
    train_count: int = Field(200, ge=1)
    val_count: int = Field(40, ge=1)
    eval_count: int = Field(64, ge=1)

    @field_validator("resolution")
    @classmethod
    def _divisible(cls, v: tuple[int, int]) -> tuple[int, int]:
        if v[0] % DIVISOR or v[1] % DIVISOR:
            raise ValueError(f"resolution {v} must be divisible by {DIVISOR}")
        return v

    @model_validator(mode="after")
    def _needs_root(self) -> DatasetSection:
        if self.source == "voc_dir" and not self.root:
            raise ValueError("dataset.root is required for source 'voc_dir'")
        if self.num_classes < 2:
            raise ValueError("dataset.num_classes must be >= 2")
        return self


class NoiseSection(_Strict):
    kind: Literal["gaussian", "uniform", "bimodal"]
    mean: Optional[float] = None
    std: Optional[float] = None
    low: Optional[float] = None
    high: Optional[float] = None
    mode_centers: Optional[tuple[float, float]] = None
    mode_weights: Optional[tuple[float, float]] = None

    def to_spec(self) -> NoiseSpec:
        raw = {k: v for k, v in self.model_dump().items() if v is not None}
        return NoiseSpec.from_dict(raw)

    @model_validator(mode="after")
    def _valid(self) -> NoiseSection:
        self.to_spec()
        return self


class DAEModelSection(_Strict):
    base_channels: int = 64
    channel_schedule: Optional[tuple[int, int, int, int, int]] = None
    kernel_size: int = 4


class DAETrainSection(_Strict):
    clean_probability: float = Field(0.5, ge=0.0, le=1.0)
    learning_rate: float = Field(5e-4, gt=0)
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(8, ge=1)
    loss: Literal["mse", "bce"] = "mse"


def _default_noises() -> list[NoiseSection]:
    return [NoiseSection(**NoiseSpec.default(k).to_dict()) for k in ("gaussian", "uniform", "bimodal")]


class DAESection(_Strict):
    model: DAEModelSection = DAEModelSection()
    train: DAETrainSection = DAETrainSection()
    noises: list[NoiseSection] = Field(default_factory=_default_noises, min_length=1)


class SegmenterTrainSection(_Strict):
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(16, ge=1)
    learning_rate: float = Field(2e-3, gt=0)
    gate: float = Field(0.85, ge=0.0, le=1.0)
    train_count: int = Field(500, ge=1)
    val_count: int = Field(100, ge=1)


class SegmenterSection(_Strict):
    kind: Literal["reference", "external"] = "reference"
    factory: Optional[str] = None
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD
    widths: tuple[int, int, int] = (32, 64, 128)
    train: SegmenterTrainSection = SegmenterTrainSection()

    @model_validator(mode="after")
    def _factory(self) -> SegmenterSection:
        if self.kind == "external" and not self.factory:
            raise ValueError("segmenter.factory ('module:callable') is required for external segmenters")
        return self


class AttackSection(_Strict):
    families: list[Literal["fgsm", "ifgsm"]] = Field(default_factory=lambda: ["fgsm", "ifgsm"], min_length=1)
    epsilons: list[float] = Field(default_factory=lambda: list(PAPER_EPSILONS), min_length=1)
    alpha: float = Field(DEFAULT_ALPHA, gt=0)
    targeted: bool = False
    target_class: Optional[int] = None
    batch_size: int = Field(16, ge=1)

    @field_validator("epsilons")
    @classmethod
    def _positive(cls, v: list[float]) -> list[float]:
        for eps in v:
            if not 0.0 < eps <= 1.0:
                raise ValueError(f"epsilon {eps} must lie in (0, 1]")
        return v

    @model_validator(mode="after")
    def _target(self) -> AttackSection:
        if self.targeted and self.target_class is None:
            raise ValueError("attack.target_class is required for targeted attacks")
        return self


class EvaluationSection(_Strict):
    batch_size: int = Field(32, ge=1)
    include_background: bool = True


class OutputSection(_Strict):
    directory: str = "runs/default"
    formats: list[Literal["json", "csv"]] = Field(default_factory=lambda: ["json", "csv"])


class ExperimentConfig(_Strict):
    seed: int = 0
    dataset: DatasetSection = DatasetSection()
    dae: DAESection = DAESection()
    segmenter: SegmenterSection = SegmenterSection()
    attack: AttackSection = AttackSection()
    evaluation: EvaluationSection = EvaluationSection()
    output: OutputSection = OutputSection()

    # -- derived objects -----------------------------------------------------

    def dae_config(self) -> DAEConfig:
        m = self.dae.model
        return DAEConfig(
            input_channels=self.dataset.channels,
            base_channels=m.base_channels,
            channel_schedule=m.channel_schedule,
            kernel_size=m.kernel_size,
            resolution=self.dataset.resolution,
        )

    def train_configs(self) -> list[TrainConfig]:
        t = self.dae.train
        return [
            TrainConfig(
                noise_spec=n.to_spec(),
                clean_probability=t.clean_probability,
                learning_rate=t.learning_rate,
                epochs=t.epochs,
                batch_size=t.batch_size,
                seed=self.seed,
                loss=t.loss,
            )
            for n in self.dae.noises
        ]

    def segmenter_train_config(self) -> SegmenterTrainConfig:
        t = self.segmenter.train
        return SegmenterTrainConfig(
            epochs=t.epochs,
            batch_size=t.batch_size,
            learning_rate=t.learning_rate,
            seed=self.seed,
            widths=self.segmenter.widths,
            gate=t.gate,
            mean=self.segmenter.mean,
            std=self.segmenter.std,
        )

    def split_seed(self, split: str) -> int:
        return derive_seed(self.seed, {"train": 1, "val": 2, "eval": 3, "seg_train": 4, "seg_val": 5}[split])

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        where = ".".join(str(p) for p in e["loc"]) or "<root>"
        if e["type"] == "extra_forbidden":
            lines.append(f"unknown key '{where}'")
        else:
            lines.append(f"{where}: {e['msg']}")
    return "; ".join(lines)


def parse_config(raw: dict | None, env: dict[str, str] | None = None) -> ExperimentConfig:
    raw = dict(raw or {})
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            raw["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(path: str | Path | None, env: dict[str, str] | None = None) -> ExperimentConfig:
    if path is None:
        return parse_config({}, env)
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(raw, env)


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)
