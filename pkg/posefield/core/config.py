from functools import lru_cache
from pathlib import Path

from dotenv import dotenv_values
from pydantic_settings import BaseSettings, SettingsConfigDict

from posefield.core.errors import ConfigError


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", extra="ignore")

    APP_NAME: str = "posefield"
    APP_VERSION: str = "0.1.0"

    ENCODER_FD: int = 8
    ENCODER_SIGMA_HEAT: float = 7.0
    ENCODER_LIMB_HALFWIDTH: float = 1.0
    ENCODER_OFFSET_VALIDITY: float = 0.4
    ENCODER_HEATMAP_COMBINE: str = "sum_clamped"

    DECODER_PEAK_THRESHOLD: float = 0.1
    DECODER_NUM_SAMPLES: int = 10
    DECODER_BIAS_THRESHOLD: float = 0.5
    DECODER_MIN_ALIGNED_FRACTION: float = 0.8
    DECODER_MATCHER: str = "greedy"
    DECODER_USE_OFFSETS: bool = True
    DECODER_BILINEAR_PAFS: bool = False

    LOSS_GAMMA: float = 9.0
    LOSS_ALPHA: float = 10.0
    LOSS_BETA_SCHEDULE: str = "quadratic_b"
    LOSS_NUM_STAGES: int = 6
    LOSS_KL_EPSILON: float = 1e-8
    LOSS_OFFSET_MASK_THRESHOLD: float = 0.4
    LOSS_PDD_HIGH: float = 0.4
    LOSS_PDD_LOW: float = 0.4
    LOSS_SALM_PROFILE: str = "gaussian"
    LOSS_SELF_SUPERVISION: bool = True
    LOSS_SELF_SUPERVISION_MODE: str = "p2h"

    SYNTH_MAX_ATTEMPTS: int = 2000
    SYNTH_PERSON_HEIGHT_MIN: float = 140.0
    SYNTH_PERSON_HEIGHT_MAX: float = 200.0

    BENCH_SIGMA_CELLS: float = 1.5
    BENCH_GRID_CELLS: int = 8

    WORKER_JOBS: int = 1

    OBS_LOG_JSON: bool = True
    OBS_LOG_LEVEL: str = "INFO"


@lru_cache
def get_settings() -> Settings:
    return Settings()


settings = get_settings()


def load_config_file(path: str | Path) -> dict[str, str]:
    """Read a flat ``key=value`` config file; keys are normalized to lowercase."""
    config_path = Path(path)
    if not config_path.is_file():
        raise ConfigError(f"Config file not found: {config_path}")

    values: dict[str, str] = {}
    for key, value in dotenv_values(config_path, encoding="utf-8").items():
        name = str(key or "").strip().lower()
        if not name:
            continue
        if value is None:
            raise ConfigError(f"Config key '{name}' in {config_path} has no value")
        values[name] = value.strip()
    return values
