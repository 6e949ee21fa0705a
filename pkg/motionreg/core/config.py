from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict
from pathlib import Path
from typing import Any, Literal, Optional
import logging
import sys

import yaml

from motionreg.core.errors import ConfigError

# Load .env file once when config module is imported
load_dotenv()

logger = logging.getLogger(__name__)

LEVELS = 5


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", case_sensitive=True, extra="ignore")

    ENV: str = "development"
    DEBUG: bool = False

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_JSON: bool = False

    # Numerics
    SEED: int = 0
    NUM_THREADS: int = 1
    DEFAULT_DTYPE: Literal["float32", "float64"] = "float32"

    APP_NAME: str = "motionreg"

    @field_validator("ENV")
    @classmethod
    def validate_env(cls, v: str) -> str:
        v = v.strip().lower()
        if v not in ("development", "production"):
            raise ValueError("ENV must be 'development' or 'production'")
        return v

    @field_validator("LOG_LEVEL")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        v = v.strip().upper()
        if not isinstance(logging.getLevelName(v), int):
            raise ValueError(f"Unknown log level: {v}")
        return v

    @field_validator("NUM_THREADS")
    @classmethod
    def validate_num_threads(cls, v: int) -> int:
        if v < 1:
            raise ValueError("NUM_THREADS must be >= 1")
        if v > 1:
            logger.warning(
                "NUM_THREADS > 1: loss traces are no longer guaranteed to be bitwise reproducible."
            )
        return v


def load_settings() -> Settings:
    """Load and validate settings, exit with error if validation fails."""
    try:
        return Settings()
    except ValidationError as e:
        logger.error("Configuration validation failed:")
        for error in e.errors():
            field = ".".join(str(loc) for loc in error["loc"])
            logger.error(f"  - {field}: {error['msg']}")
        logger.error("\nPlease check your .env file and environment variables.")
        sys.exit(1)


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)


class EncoderConfig(_Frozen):
    base_channels: int = 8
    levels: int = LEVELS
    leaky_slope: float = 0.2

    @field_validator("base_channels")
    @classmethod
    def validate_base_channels(cls, v: int) -> int:
        if v < 1:
            raise ValueError("base_channels must be >= 1")
        return v

    @field_validator("levels")
    @classmethod
    def validate_levels(cls, v: int) -> int:
        if v != LEVELS:
            raise ValueError(f"the encoder pyramid has exactly {LEVELS} levels")
        return v

    def channels(self, level: int) -> int:
        """Channel width at encoder level `level` (1 = full resolution)."""
        return self.base_channels * 2 ** (level - 1)


class AttentionConfig(_Frozen):
    heads: int
    head_dim: int = 6
    neighborhood: int = 3

    @field_validator("heads", "head_dim")
    @classmethod
    def validate_positive(cls, v: int, info) -> int:
        if v < 1:
            raise ValueError(f"{info.field_name} must be >= 1")
        return v

    @field_validator("neighborhood")
    @classmethod
    def validate_neighborhood(cls, v: int) -> int:
        if v < 3 or v % 2 == 0:
            raise ValueError("neighborhood must be odd and >= 3")
        return v

    @property
    def channels(self) -> int:
        return self.heads * self.head_dim

    @property
    def radius(self) -> int:
        return (self.neighborhood - 1) // 2

    @property
    def offsets(self) -> int:
        return self.neighborhood ** 3


class ModelConfig(_Frozen):
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    heads_per_level: tuple[int, ...] = (8, 4, 2, 1, 1)
    head_dim: int = 6
    neighborhood: int = 3
    diffeomorphic: bool = False
    ss_steps: int = 7

    @field_validator("heads_per_level")
    @classmethod
    def validate_heads(cls, v: tuple[int, ...]) -> tuple[int, ...]:
        if len(v) != LEVELS:
            raise ValueError(f"heads_per_level needs {LEVELS} entries (coarse to fine)")
        if any(h < 1 for h in v):
            raise ValueError("every level needs at least one head")
        if any(a < b for a, b in zip(v, v[1:])):
            raise ValueError("heads_per_level must be non-increasing from coarse to fine")
        return v

    @field_validator("ss_steps")
    @classmethod
    def validate_ss_steps(cls, v: int) -> int:
        if v < 1:
            raise ValueError("ss_steps must be >= 1")
        return v

    @model_validator(mode="after")
    def validate_attention(self) -> "ModelConfig":
        # Builds every level's AttentionConfig so its invariants are checked eagerly.
        for level in range(1, LEVELS + 1):
            self.attention(level)
        return self

    def attention(self, level: int) -> AttentionConfig:
        """Attention settings for encoder level `level` (1 = finest, 5 = coarsest)."""
        heads = self.heads_per_level[LEVELS - level]
        return AttentionConfig(heads=heads, head_dim=self.head_dim, neighborhood=self.neighborhood)


class LossConfig(_Frozen):
    lam: float = Field(default=1.0, alias="lambda")
    ncc_window: int = 9

    @field_validator("lam")
    @classmethod
    def validate_lam(cls, v: float) -> float:
        if v < 0:
            raise ValueError("lambda must be >= 0")
        return v

    @field_validator("ncc_window")
    @classmethod
    def validate_window(cls, v: int) -> int:
        if v < 3 or v % 2 == 0:
            raise ValueError("ncc_window must be odd and >= 3")
        return v


class OptimConfig(_Frozen):
    lr_init: float = 1e-4
    epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    lam: float = Field(default=1.0, alias="lambda")
    ncc_window: int = 9
    po_iters: int = 50
    optimizer: Literal["adam", "sgd"] = "adam"

    @field_validator("lr_init")
    @classmethod
    def validate_lr(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("lr_init must be > 0")
        return v

    @field_validator("epochs", "po_iters")
    @classmethod
    def validate_counts(cls, v: int, info) -> int:
        if v < 1:
            raise ValueError(f"{info.field_name} must be >= 1")
        return v

    @field_validator("batch_size")
    @classmethod
    def validate_batch_size(cls, v: int) -> int:
        if v != 1:
            raise ValueError("only batch size 1 is supported")
        return v

    @property
    def loss(self) -> LossConfig:
        return LossConfig(lam=self.lam, ncc_window=self.ncc_window)


class SynthConfig(_Frozen):
    dims: tuple[int, int, int] = (32, 32, 32)
    max_disp: float = 2.0
    smoothness: float = 4.0
    spheres: int = 4
    ss_steps: int = 7
    seed: int = 0
    # redraw the velocity until the unregistered mean Dice is at most this; None disables
    max_initial_dsc: Optional[float] = 0.85

    @field_validator("dims")
    @classmethod
    def validate_dims(cls, v: tuple[int, int, int]) -> tuple[int, int, int]:
        if any(d < 16 for d in v):
            raise ValueError("synthetic volumes need at least 16 voxels per axis")
        return v

    @field_validator("max_disp", "smoothness")
    @classmethod
    def validate_non_negative(cls, v: float, info) -> float:
        if v < 0:
            raise ValueError(f"{info.field_name} must be >= 0")
        return v

    @field_validator("max_initial_dsc")
    @classmethod
    def validate_initial_dsc(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and not 0.0 < v <= 1.0:
            raise ValueError("max_initial_dsc must be in (0, 1]")
        return v


PRESETS: dict[str, dict[str, Any]] = {
    "small": {"encoder": {"base_channels": 8}, "heads_per_level": (8, 4, 2, 1, 1), "head_dim": 6},
    "large": {"encoder": {"base_channels": 32}, "heads_per_level": (32, 16, 8, 4, 1), "head_dim": 12},
}
PRESETS["small-diff"] = {**PRESETS["small"], "diffeomorphic": True}
PRESETS["large-diff"] = {**PRESETS["large"], "diffeomorphic": True}


def merge_config(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_config(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config_file(path: Optional[Path]) -> dict:
    """Read an optional YAML config file with `model`, `optim` and `synth` sections."""
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}")
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid YAML in config file {path}: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must contain a mapping")
    unknown = set(data) - {"model", "optim", "synth"}
    if unknown:
        raise ConfigError(f"Unknown config sections in {path}: {sorted(unknown)}")
    return data


def build_config(model_cls: type[BaseModel], data: dict) -> Any:
    """Validate `data` into `model_cls`, reporting failures as ConfigError."""
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(loc) for loc in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"Invalid {model_cls.__name__}: {problems}")


def resolve_config(
    preset: str = "small",
    config_file: Optional[Path] = None,
    model_overrides: Optional[dict] = None,
    optim_overrides: Optional[dict] = None,
) -> tuple[ModelConfig, OptimConfig]:
    """Resolve model and optimiser settings: CLI flag > config file > preset default."""
    if preset not in PRESETS:
        raise ConfigError(f"Unknown preset '{preset}', expected one of {sorted(PRESETS)}")
    file_data = load_config_file(config_file)
    model_data = merge_config(merge_config(PRESETS[preset], file_data.get("model", {})), model_overrides or {})
    optim_data = merge_config(file_data.get("optim", {}), optim_overrides or {})
    model_cfg = build_config(ModelConfig, model_data)
    optim_cfg = build_config(OptimConfig, optim_data)
    logger.debug(f"Resolved config: preset={preset} model={model_cfg} optim={optim_cfg}")
    return model_cfg, optim_cfg


# Create settings instance and validate on import
try:
    settings = load_settings()
    logger.debug(f"Configuration loaded successfully (ENV={settings.ENV})")
except Exception as e:
    logger.error(f"Failed to load configuration: {e}")
    sys.exit(1)
