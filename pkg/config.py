"""
Configuration
Runtime settings from the environment plus validated experiment sections and presets
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from errors import ConfigError

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Process-wide settings (env prefix FNOPE_, optional .env file)"""
    model_config = SettingsConfigDict(env_prefix="FNOPE_", env_file=".env", extra="ignore")

    precision: Literal["float64", "float32"] = "float64"
    output_dir: str = "runs"
    log_level: str = "INFO"
    workers: int = Field(1, ge=1)
    progress: bool = True
    seed: int = 0
    cache_entries: int = Field(256, ge=0)


_settings = None


def get_settings() -> Settings:
    """Get or create the global settings instance"""
    global _settings
    if _settings is None:
        _settings = Settings()
    return _settings


# ===================
# Section Models
# ===================

class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GPConfig(Section):
    """Gaussian-process kernel settings; the noise process keeps variance 1"""
    lengthscale: float = Field(..., gt=0)
    variance: float = Field(1.0, gt=0)
    kernel: Literal["squared_exponential", "matern52"] = "squared_exponential"
    jitter: float = Field(1e-8, ge=0)
    max_jitter: float = Field(1e-4, ge=0)


class VelocityNetConfig(Section):
    modes: int = Field(16, ge=1)
    n_blocks: int = Field(5, ge=1)
    channels: int = Field(16, ge=1)
    context_channels: int = Field(8, ge=1)
    pos_embed_channels: int = Field(4, ge=0)
    pos_embed_width: int = Field(32, ge=1)
    time_embed_channels: int = Field(4, ge=1)
    time_features: int = Field(16, ge=1)
    time_feature_scale: float = Field(4.0, gt=0)
    theta_channels: int = Field(1, ge=1)
    x_channels: int = Field(1, ge=1)
    eta_dim: int = Field(0, ge=0)
    eta_embed_width: int = Field(64, ge=1)
    eta_embed_channels: int = Field(16, ge=1)
    head_width: int = Field(64, ge=1)
    spectral_feature_width: int = Field(32, ge=1)
    nonlinearity: Literal["gelu"] = "gelu"
    embed_every_block: bool = True
    transform: Literal["nudft", "fft"] = "nudft"


class BaselineConfig(Section):
    """MLP flow network and observation embedding for the FMPE baselines"""
    hidden_width: int = Field(64, ge=1)
    n_layers: int = Field(5, ge=2)
    embedding: Literal["mlp", "cnn"] = "mlp"
    embed_dim: int = Field(40, ge=1)
    embed_width: int = Field(50, ge=1)
    embed_layers: int = Field(2, ge=1)
    conv_layers: int = Field(2, ge=1)
    conv_channels: int = Field(8, ge=1)
    kernel_size: int = Field(5, ge=1)
    modes: int = Field(50, ge=1)
    pad_width: int = Field(20, ge=0)


class TrainConfig(Section):
    batch_size: int = Field(200, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    max_epochs: int = Field(500, ge=1)
    patience: int = Field(50, ge=0)
    n_ds: int = Field(256, ge=1)
    pos_noise_std: float = Field(1e-3, ge=0)
    val_fraction: float = Field(0.1, gt=0, lt=1)
    seed: int = 0
    augment: bool = True
    target: Literal["rectified", "literal"] = "rectified"


class OdeConfig(Section):
    scheme: Literal["euler", "heun"] = "heun"
    n_steps: int = Field(100, ge=1)
    divergence: Literal["auto", "exact", "hutchinson"] = "auto"
    n_probes: int = Field(16, ge=1)
    exact_max_dim: int = Field(512, ge=1)
    probe_seed: int = 0


class EvalConfig(Section):
    n_test: int = Field(100, ge=1)
    n_post: int = Field(1000, ge=1)
    n_projections: int = Field(50, ge=1)
    sbc_points: int = Field(50, ge=1)
    n_predictive: int = Field(10, ge=1)
    logprob: bool = True


class ExperimentConfig(Section):
    task: str
    method: str = "fnope"
    budget: int = Field(1000, ge=1)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    task_options: Dict[str, Any] = Field(default_factory=dict)
    net: VelocityNetConfig = Field(default_factory=VelocityNetConfig)
    baseline: BaselineConfig = Field(default_factory=BaselineConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    ode: OdeConfig = Field(default_factory=OdeConfig)
    gp: Optional[GPConfig] = None
    evaluation: EvalConfig = Field(default_factory=EvalConfig)
    output_dir: str = "runs"

    @field_validator("seeds")
    @classmethod
    def _nonempty_seeds(cls, v: List[int]) -> List[int]:
        if not v:
            raise ValueError("at least one seed is required")
        return v

    @model_validator(mode="after")
    def _budget_covers_batch(self) -> "ExperimentConfig":
        if self.budget < self.train.batch_size:
            raise ValueError(f"budget {self.budget} is smaller than batch_size {self.train.batch_size}")
        return self


# ===================
# Presets (hyperparameters per task and method)
# ===================

TASK_PRESETS: Dict[str, Dict[str, Any]] = {
    "linear_gaussian": {
        "desk": {"n_points": 256},
        "full": {"n_points": 1000},
        "net": {"modes": 50, "n_blocks": 5, "channels": 16, "context_channels": 8,
                "pos_embed_channels": 4, "time_embed_channels": 4},
        "train": {"batch_size": 512, "learning_rate": 1e-3, "max_epochs": 500, "patience": 50, "n_ds": 256},
        "baseline": {"hidden_width": 64, "n_layers": 5, "embedding": "mlp", "embed_dim": 40,
                     "embed_width": 50, "embed_layers": 2, "modes": 50, "pad_width": 200},
        "evaluation": {"n_test": 100, "n_post": 1000},
    },
    "sird": {
        "desk": {"n_points": 100, "n_eval_points": 40},
        "full": {"n_points": 100, "n_eval_points": 40},
        "net": {"modes": 32, "n_blocks": 5, "channels": 16, "context_channels": 8,
                "pos_embed_channels": 4, "time_embed_channels": 4, "x_channels": 3, "eta_dim": 2,
                "eta_embed_width": 64, "eta_embed_channels": 16, "head_width": 64,
                "spectral_feature_width": 32},
        "train": {"batch_size": 200, "learning_rate": 1e-3, "max_epochs": 1000, "patience": 50, "n_ds": 40},
        "baseline": {"hidden_width": 64, "n_layers": 5, "embedding": "mlp", "modes": 10, "pad_width": 20},
        "evaluation": {"n_test": 100, "n_post": 1000},
    },
    "darcy": {
        # long-running at full scale
        "desk": {"grid_size": 64},
        "full": {"grid_size": 129},
        "net": {"modes": 32, "n_blocks": 5, "channels": 32, "context_channels": 32,
                "pos_embed_channels": 8, "time_embed_channels": 8},
        "train": {"batch_size": 200, "learning_rate": 5e-4, "max_epochs": 300, "patience": 50, "n_ds": 2048},
        # CNN embedding: conv(k=5) + pooling(2) blocks then an MLP; GELU replaces ReLU
        "baseline": {"hidden_width": 256, "n_layers": 8, "embedding": "cnn", "embed_dim": 100,
                     "embed_width": 100, "embed_layers": 4, "conv_layers": 4, "modes": 16, "pad_width": 20},
        "evaluation": {"n_test": 10, "n_post": 100},
        # batched NUDFT matrices grow with batch x points x modes; keep desk runs within memory
        "desk_sections": {
            "net": {"modes": 16, "channels": 16, "context_channels": 16},
            "train": {"batch_size": 32, "n_ds": 1024},
        },
    },
}

METHOD_PRESETS: Dict[str, Dict[str, Any]] = {
    "fnope": {"net": {"transform": "nudft"}, "train": {"augment": True}},
    # fixed discretization: FFT path, no augmentation and no positional embedding
    "fnope_fix": {"net": {"transform": "fft", "pos_embed_channels": 0}, "train": {"augment": False}},
    "fmpe_raw": {"train": {"augment": False, "learning_rate": 1e-4, "batch_size": 200}},
    "fmpe_spectral": {"train": {"augment": False, "learning_rate": 1e-4, "batch_size": 200}},
}


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def preset_config(task: str, method: str = "fnope", scale: str = "desk", **overrides: Any) -> ExperimentConfig:
    """
    Experiment config assembled from task and method presets

    Args:
        task: registered task name
        method: registered method name
        scale: 'desk' or 'full' task size
        overrides: nested dict overrides applied last
    """
    task_preset = TASK_PRESETS.get(task, {})
    raw: Dict[str, Any] = {"task": task, "method": method}
    for section in ("net", "train", "baseline", "evaluation"):
        if section in task_preset:
            raw[section] = dict(task_preset[section])
    raw["task_options"] = dict(task_preset.get(scale, {}))
    raw = _merge(raw, task_preset.get(f"{scale}_sections", {}))
    raw = _merge(raw, METHOD_PRESETS.get(method, {}))
    raw = _merge(raw, overrides)
    return build_config(raw)


def build_config(raw: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment config: {e}") from e


def load_config(path: str) -> ExperimentConfig:
    """Load and validate a JSON experiment config"""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON in {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be an object, got {type(raw).__name__}")
    logger.info(f"Loaded config from {path}")
    return build_config(raw)


def config_schema() -> Dict[str, Any]:
    """Published JSON schema of ExperimentConfig"""
    return ExperimentConfig.model_json_schema()
