"""Configuration management for Covfilt experiments."""

from __future__ import annotations

import hashlib
import json
import logging
import tomllib
from enum import Enum
from pathlib import Path
from typing import Literal, Self

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from covfilt.exceptions import ConfigError

logger = logging.getLogger(__name__)

CONFIG_FILENAME = "covfilt.toml"


class Method(Enum):
    """Ways of supplying the measurement covariance to the filter."""

    FIXED = "fixed"
    MLE_VARIANCE = "mle-variance"
    MLE_COVARIANCE = "mle-covariance"
    KALMAN_COVARIANCE = "kalman-covariance"


class CovarianceSource(Enum):
    """Which part of the predictive covariance a learned method hands to the filter."""

    ALEATORIC = "aleatoric"
    EPISTEMIC = "epistemic"
    COMBINED = "combined"


class TrainMode(Enum):
    """Which parameter groups an MLE run updates."""

    JOINT = "joint"
    MEAN_ONLY = "mean-only"
    COV_ONLY = "cov-only-frozen-mean"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class OodShift(_Section):
    """Feature-space perturbation applied to simulate out-of-domain inputs.

    Each track draws its own offset in ``[-offset, offset]`` and scale in
    ``[1 - scale_jitter, 1 + scale_jitter]`` for every designated feature.
    """

    offset: float = Field(default=0.0, ge=0.0, allow_inf_nan=False)
    scale_jitter: float = Field(default=0.0, ge=0.0, allow_inf_nan=False)
    dims: list[int] = Field(default_factory=lambda: [3, 4, 5, 6, 7])

    @property
    def is_zero(self) -> bool:
        return self.offset == 0.0 and self.scale_jitter == 0.0


class TrackConfig(_Section):
    """Constant-velocity track generation settings (positions in mm, time in s)."""

    duration: int = Field(default=20, ge=2, description="Steps per track")
    dt: float = Field(default=1.0, gt=0.0, description="Seconds between frames")
    speed_min: float = Field(default=10.0, gt=0.0, description="Slowest speed in mm/s")
    speed_max: float = Field(default=200.0, gt=0.0, description="Fastest speed in mm/s")
    box_mm: float = Field(default=1000.0, gt=0.0, description="Edge of the cube start positions are drawn from")
    noise_base_mm: float = Field(default=3.0, ge=0.0, description="Standard deviation of the major noise axis")
    anisotropy: float = Field(default=0.2, gt=0.0, le=1.0, description="Minor-to-major noise axis ratio")
    orientation_coupling: float = Field(
        default=1.0, ge=0.0, le=1.0, description="How strongly the orientation feature rotates the noise ellipsoid"
    )
    distance_scaling: float = Field(
        default=1.0, ge=0.0, description="How strongly depth inflates the noise (0 = depth independent)"
    )
    noise_ar1: float = Field(default=0.0, gt=-1.0, lt=1.0, description="AR(1) coefficient of the measurement noise")
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def validate_speed_range(self) -> Self:
        if self.speed_min > self.speed_max:
            msg = f"speed_min ({self.speed_min}) must not exceed speed_max ({self.speed_max})"
            raise ValueError(msg)
        return self


class DataConfig(_Section):
    """Dataset sizes and generation settings."""

    track: TrackConfig = Field(default_factory=TrackConfig)
    n_train_tracks: int = Field(default=300, ge=1)
    n_test_tracks: int = Field(default=500, ge=1)
    ood: OodShift = Field(default_factory=lambda: OodShift(offset=1.5, scale_jitter=0.5))


class ModelConfig(_Section):
    """Regression network hyperparameters."""

    hidden_sizes: list[int] = Field(default_factory=lambda: [64, 64])
    dropout_rate: float = Field(default=0.1, ge=0.0, lt=1.0)
    rho_scale: float = Field(default=0.99, gt=0.0, le=1.0)

    @model_validator(mode="after")
    def validate_hidden_sizes(self) -> Self:
        if not self.hidden_sizes or any(size < 1 for size in self.hidden_sizes):
            msg = "hidden_sizes must be a non-empty list of positive widths"
            raise ValueError(msg)
        return self


class TrainingConfig(_Section):
    """Optimizer and training-regime settings."""

    epochs: int = Field(default=40, ge=1, description="Epochs of joint MLE training of the base model")
    cov_epochs: int = Field(default=40, ge=1, description="Epochs of covariance-only tuning per method")
    batch_size: int = Field(default=64, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    epsilon: float = Field(default=1e-8, gt=0.0)
    kalman_epochs: int = Field(default=5, ge=1)
    truncation: int = Field(default=10, ge=1, description="Steps gradients flow back through the filter")
    burn_in: int = Field(default=2, ge=0)
    subset: list[int] = Field(default_factory=lambda: [0, 1, 2], description="Supervised state indices (0-based)")
    clip_norm: float = Field(default=10.0, gt=0.0)
    batch_tracks: int = Field(default=8, ge=1)
    pretrain: bool = Field(default=True, description="MLE-pretrain the covariance head before filter training")
    train_mean_in_kalman: bool = False
    residual_tuning: bool = Field(default=False, description="Fit the head to the residual after epistemic covariance")

    @model_validator(mode="after")
    def validate_subset(self) -> Self:
        if not self.subset:
            msg = "subset must name at least one state index"
            raise ValueError(msg)
        return self


class EpistemicConfig(_Section):
    """Dropout Monte-Carlo settings."""

    enabled: bool = True
    samples: int = Field(default=30, ge=1)
    sources: list[CovarianceSource] = Field(
        default_factory=lambda: [CovarianceSource.ALEATORIC, CovarianceSource.EPISTEMIC, CovarianceSource.COMBINED]
    )


class FilterConfig(_Section):
    """Kalman filter variant used at evaluation time."""

    kind: Literal["standard", "time-correlated"] = "standard"
    velocity_std_max: float = Field(default=200.0, gt=0.0, description="Prior velocity standard deviation in mm/s")
    joseph: bool = False


class RainbowConfig(_Section):
    """Settings for the heteroscedastic vector-function demo."""

    n_points: int = Field(default=2000, ge=1)
    noise_scale: float = Field(default=1.0, ge=0.0)
    heteroscedastic: bool = True
    epochs: int = Field(default=150, ge=1)


class ExperimentConfig(_Section):
    """Top-level experiment configuration."""

    seed: int = Field(default=0, ge=0)
    out_dir: str = "runs/default"
    methods: list[Method] = Field(default_factory=lambda: list(Method))
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    epistemic: EpistemicConfig = Field(default_factory=EpistemicConfig)
    filter: FilterConfig = Field(default_factory=FilterConfig)
    rainbow: RainbowConfig = Field(default_factory=RainbowConfig)

    @model_validator(mode="after")
    def validate_methods(self) -> Self:
        if not self.methods:
            msg = "methods must not be empty"
            raise ValueError(msg)
        if len(set(self.methods)) != len(self.methods):
            msg = "methods must not repeat"
            raise ValueError(msg)
        if Method.FIXED not in self.methods:
            msg = "methods must include 'fixed' (the baseline row)"
            raise ValueError(msg)
        return self

    @property
    def output_path(self) -> Path:
        return Path(self.out_dir)


def config_hash(config: ExperimentConfig) -> str:
    """Return a short stable digest of the canonical JSON form of a config."""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def find_config_file(start_path: Path | None = None) -> Path | None:
    """Return the nearest ``covfilt.toml`` in ``start_path`` (default: cwd) or one of its parents."""
    start = (start_path or Path.cwd()).resolve()
    for directory in (start, *start.parents):
        candidate = directory / CONFIG_FILENAME
        if candidate.is_file():
            return candidate
    return None


def _read_toml(path: Path) -> dict[str, object]:
    try:
        with path.open("rb") as handle:
            return tomllib.load(handle)
    except FileNotFoundError as exc:
        msg = f"Config file not found: {path}"
        raise ConfigError(msg) from exc
    except tomllib.TOMLDecodeError as exc:
        msg = f"Invalid TOML in '{path}': {exc}"
        raise ConfigError(msg) from exc
    except OSError as exc:
        msg = f"Cannot read config file '{path}': {exc.strerror or exc}"
        raise ConfigError(msg) from exc


def load_config(config_path: Path | None = None, start_path: Path | None = None) -> ExperimentConfig:
    """Read and validate an experiment config.

    An explicit ``config_path`` must exist. Otherwise the nearest
    ``covfilt.toml`` above ``start_path`` is used, and the defaults apply
    when there is none. An empty file also gives the defaults.

    Raises:
        ConfigError: On a missing or unreadable file, bad TOML, unknown keys
            or invalid values.
    """
    path = config_path or find_config_file(start_path)
    if path is None:
        logger.debug("No %s found; using defaults", CONFIG_FILENAME)
        return ExperimentConfig()
    return parse_config(_read_toml(path))


def _dotted(loc: tuple[int | str, ...]) -> str:
    return ".".join(str(part) for part in loc) or "<root>"


def parse_config(data: dict[str, object]) -> ExperimentConfig:
    """Validate a decoded config mapping.

    Raises:
        ConfigError: Naming every offending field as a dotted path.
    """
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        problems = [f"'{_dotted(error['loc'])}': {error['msg']}" for error in exc.errors()]
        msg = f"Invalid config value for {'; '.join(problems)}"
        raise ConfigError(msg) from exc
