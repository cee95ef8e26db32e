"""Configuration models, YAML loading and environment settings."""

from __future__ import annotations

import logging
from functools import lru_cache
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from utils.table_loaders import load_yaml
from weightshare.errors import ConfigError

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1

STRATEGIES: dict[str, tuple[str, ...]] = {
    "single": ("individual",),
    "cotrain": ("individual", "weight_share"),
    "transfer": ("weight_share", "tl_ws_stop", "tl_ws_full", "tl_stop", "tl_full"),
}

STRATEGY_LABELS = {
    "individual": "Baseline",
    "weight_share": "Weight Share",
    "tl_ws_stop": "TL WS Stop Gradient",
    "tl_ws_full": "TL WS Full Gradient",
    "tl_stop": "TL Stop Gradient",
    "tl_full": "TL Full Gradient",
}


class WeightShareSettings(BaseSettings):
    """Process-level knobs read from ``WEIGHTSHARE_*`` variables or ``.env``."""

    model_config = SettingsConfigDict(env_prefix="WEIGHTSHARE_", env_file=".env", extra="ignore")

    log_level: str = "INFO"
    progress: bool = True
    n_jobs: int = 1
    eval_batch_size: int = 1024


@lru_cache
def get_settings() -> WeightShareSettings:
    return WeightShareSettings()


# co-training counts update rounds; transfer fine-tuning counts epochs
COTRAIN_DEFAULTS = {"updates": 50_000, "epochs": None, "patience": 10}
TRANSFER_DEFAULTS = {"updates": None, "epochs": 200, "patience": 50}


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    updates: int | None = Field(None, ge=0)
    epochs: int | None = Field(200, ge=0)
    batch_size: int = Field(128, ge=2)
    learning_rate: float = Field(1e-3, gt=0)
    lr_drop_factor: float = Field(2.0, gt=1)
    patience: int = Field(10, ge=1)
    min_learning_rate: float = Field(3e-5, gt=0)
    stop_at_min_lr: bool = True
    ema_decay: float = Field(0.99, ge=0, lt=1)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_epsilon: float = Field(1e-8, gt=0)
    cotrain_mode: Literal["alternate", "weighted_sum"] = "alternate"
    cost_weights: list[float] | None = None
    seed: int = 0

    @model_validator(mode="after")
    def _check_rates(self) -> "TrainConfig":
        if self.updates is None and self.epochs is None:
            raise ValueError("one of updates or epochs must be set")
        if self.min_learning_rate > self.learning_rate:
            raise ValueError(
                f"min_learning_rate {self.min_learning_rate} exceeds learning_rate {self.learning_rate}"
            )
        return self

    @classmethod
    def cotraining(cls, **overrides) -> "TrainConfig":
        return cls(**{**COTRAIN_DEFAULTS, **overrides})

    @classmethod
    def transfer(cls, **overrides) -> "TrainConfig":
        return cls(**{**TRANSFER_DEFAULTS, **overrides})


class AugmentationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    multiplier: int = Field(10, ge=1)
    offset_scale: float = Field(0.1, ge=0)
    slope_scale: float = Field(0.1, ge=0)
    multiplicative_scale: float = Field(0.1, ge=0, lt=1)
    noise_scale: float = Field(0.0, ge=0)
    seed: int = 0


class SplitCounts(BaseModel):
    train: int = Field(ge=1)
    validation: int = Field(ge=1)
    holdout: int = Field(ge=0)

    @property
    def total(self) -> int:
        return self.train + self.validation + self.holdout


# sample counts per split for the named NIR data sets
TABLE_COUNTS: dict[str, SplitCounts] = {
    "idrc": SplitCounts(train=140, validation=35, holdout=20),
    "wheat": SplitCounts(train=298, validation=75, holdout=42),
    "swri": SplitCounts(train=276, validation=70, holdout=39),
    "chim2018": SplitCounts(train=2813, validation=704, holdout=391),
    "chim2019": SplitCounts(train=4978, validation=1245, holdout=692),
}


class DatasetEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    path: Path
    test_path: Path | None = None
    targets: int = Field(1, ge=1)
    header: bool = False
    counts: SplitCounts | None = None
    rotating_test: int | None = Field(None, ge=1)
    cost: Literal["rmse", "wrmse"] = "rmse"
    decouple_lambda: float = Field(0.0, ge=0)
    fc1: int = Field(10, ge=1)
    fc2: int | None = None
    units: str | None = None

    @model_validator(mode="after")
    def _check_head(self) -> "DatasetEntry":
        if self.fc2 is None:
            self.fc2 = self.targets
        if self.fc2 != self.targets:
            raise ValueError(f"fc2 ({self.fc2}) must equal the number of targets ({self.targets})")
        if self.test_path is None and self.rotating_test is None:
            raise ValueError("either test_path or rotating_test is required")
        return self


class DatasetRegistry(BaseModel):
    version: int = CONFIG_VERSION
    datasets: dict[str, DatasetEntry]
    base_dir: Path = Path(".")

    @field_validator("version")
    @classmethod
    def _check_version(cls, value: int) -> int:
        if value != CONFIG_VERSION:
            raise ValueError(f"unsupported registry version {value}; expected {CONFIG_VERSION}")
        return value

    def entry(self, name: str) -> DatasetEntry:
        try:
            return self.datasets[name]
        except KeyError:
            raise ConfigError(f"dataset {name!r} is not in the registry ({sorted(self.datasets)})") from None

    def counts_for(self, name: str) -> SplitCounts:
        entry = self.entry(name)
        if entry.counts is not None:
            return entry.counts
        if name in TABLE_COUNTS:
            return TABLE_COUNTS[name]
        raise ConfigError(f"dataset {name!r} has no split counts")

    def resolve(self, path: Path) -> Path:
        return path if path.is_absolute() else self.base_dir / path


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: int = CONFIG_VERSION
    registry: Path
    kind: Literal["single", "cotrain", "transfer"]
    datasets: list[str] = Field(min_length=1)
    strategies: list[str] | None = None
    repetitions: int = Field(40, ge=1)
    seed: int = Field(0, ge=0)
    architectures: list[Literal[1, 2]] = [1, 2]
    train: TrainConfig = Field(default_factory=TrainConfig.cotraining)
    transfer_train: TrainConfig = Field(default_factory=TrainConfig.transfer)
    augmentation: AugmentationConfig = Field(default_factory=AugmentationConfig)
    pretrained: dict[int, Path] = {}
    tl_resize: Literal["auto", "pad", "spline"] = "auto"
    pad_mode: Literal["edge", "zero"] = "edge"
    output_dir: Path = Path("runs")
    n_jobs: int | None = None

    @field_validator("version")
    @classmethod
    def _check_version(cls, value: int) -> int:
        if value != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {value}; expected {CONFIG_VERSION}")
        return value

    @field_validator("train", mode="before")
    @classmethod
    def _train_defaults(cls, value):
        if isinstance(value, dict):
            return {**COTRAIN_DEFAULTS, **value}
        return value

    @field_validator("transfer_train", mode="before")
    @classmethod
    def _transfer_defaults(cls, value):
        if isinstance(value, dict):
            return {**TRANSFER_DEFAULTS, **value}
        return value

    @model_validator(mode="after")
    def _check_strategies(self) -> "ExperimentConfig":
        allowed = STRATEGIES[self.kind]
        if self.strategies is None:
            self.strategies = list(allowed)
        unknown = [s for s in self.strategies if s not in allowed]
        if unknown:
            raise ValueError(f"strategies {unknown} are not valid for kind {self.kind!r}; choose from {list(allowed)}")
        if self.kind == "transfer" and len(self.datasets) != 2:
            raise ValueError("transfer experiments name exactly two datasets: the medium source then the small target")
        if self.kind == "cotrain" and len(self.datasets) < 2:
            raise ValueError("cotrain experiments need at least two datasets")
        return self


def _read(path: Path) -> dict:
    try:
        return load_yaml(path)
    except (ValueError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _validated(model, data: dict, source: Path):
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_registry(path: str | Path) -> DatasetRegistry:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"registry file {path} does not exist")
    data = _read(path)
    data.setdefault("base_dir", str(path.parent))
    return _validated(DatasetRegistry, data, path)


def load_experiment_config(path: str | Path, **overrides) -> ExperimentConfig:
    """Load an experiment YAML; ``overrides`` (non-None values) replace top-level keys."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    data = _read(path)
    data.update({k: v for k, v in overrides.items() if v is not None})
    registry = Path(data.get("registry", "datasets.yaml"))
    if not registry.is_absolute():
        data["registry"] = str(path.parent / registry)
    pretrained = data.get("pretrained") or {}
    data["pretrained"] = {
        arch: str(p if Path(p).is_absolute() else path.parent / p) for arch, p in pretrained.items()
    }
    return _validated(ExperimentConfig, data, path)
