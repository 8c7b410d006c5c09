"""
Configuration management for stadv
"""

import os
import json
import logging
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import yaml
from dotenv import load_dotenv

from stadv.errors import ConfigError

logger = logging.getLogger(__name__)

EFFECTIVE_CONFIG_NAME = "effective_config.json"


@dataclass
class StadvSettings:
    """Environment-level defaults"""
    seed: int = 0
    output_dir: str = "./runs"
    jobs: int = 1
    log_level: str = "INFO"

    @classmethod
    def from_env(cls) -> "StadvSettings":
        """Load settings from environment variables (and a .env file)"""
        load_dotenv()
        try:
            return cls(
                seed=int(os.getenv("STADV_SEED", "0")),
                output_dir=os.getenv("STADV_OUTPUT_DIR", "./runs"),
                jobs=int(os.getenv("STADV_JOBS", "1")),
                log_level=os.getenv("STADV_LOG_LEVEL", "INFO").upper(),
            )
        except ValueError as e:
            raise ConfigError(f"invalid STADV_* environment value: {e}") from None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class RunConfig:
    """Parameters shared by every command"""
    seed: int = 0
    output_dir: str = "./runs"
    jobs: int = 1
    # data
    nodes: int = 30
    steps: int = 2000
    window: int = 12
    horizon: int = 12
    resample: int = 1
    # model and training
    hidden: int = 16
    activation: str = "relu"
    epochs: int = 30
    learning_rate: float = 0.05
    batch_size: int = 64
    # attack
    epsilon: float = 0.5
    alpha: float = 0.1
    iterations: int = 5
    eta: float = 0.1
    momentum: float = 1.0
    # defense
    mix_ratio: float = 0.5
    seeds: int = 3
    # bound verification
    trials: int = 200
    bound_epsilon: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.window < 1 or self.horizon < 1:
            raise ConfigError("window and horizon must be >= 1")
        if self.batch_size < 1 or self.epochs < 1 or self.iterations < 1:
            raise ConfigError("batch_size, epochs and iterations must be >= 1")
        if not self.learning_rate > 0 or not self.alpha > 0:
            raise ConfigError("learning_rate and alpha must be > 0")
        if self.epsilon < 0 or self.bound_epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if not 0.0 < self.eta <= 1.0:
            raise ConfigError(f"eta must be in (0, 1], got {self.eta}")
        if self.resample < 1:
            raise ConfigError("resample factor must be >= 1")
        if self.seeds < 1:
            raise ConfigError(f"seeds must be >= 1, got {self.seeds}")

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def from_settings(cls, settings: StadvSettings) -> "RunConfig":
        return cls(seed=settings.seed, output_dir=settings.output_dir, jobs=settings.jobs)

    def merged(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Copy with overrides applied; unknown keys or mistyped values are a ConfigError"""
        known = {f.name: f for f in fields(self)}
        values = {}
        for key, value in overrides.items():
            name = key.replace("-", "_")
            if name not in known:
                raise ConfigError(f"unknown config key '{key}'")
            values[name] = _coerce(name, value, type(getattr(self, name)))
        return replace(self, **values)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _coerce(name: str, value: Any, kind: type) -> Any:
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    try:
        if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        # yaml reads exponents without a dot ("1e-3") as strings
        if kind is float and isinstance(value, str):
            return float(value)
        if kind is str:
            return str(value)
    except (TypeError, ValueError):
        pass
    raise ConfigError(f"config key '{name}' expects {kind.__name__}, got {value!r}")


class ConfigManager:
    """Reads key=value run files and records the effective config as JSON"""

    def __init__(self, config_path: Optional[str] = None):
        """
        Initialize configuration manager

        Args:
            config_path: Path to a key=value file; None means no file
        """
        self.config_path = Path(config_path) if config_path else None

    def load(self) -> Dict[str, Any]:
        """
        Parse the config file

        Values are coerced with yaml.safe_load, so `0.5`, `12` and `true`
        come back as float, int and bool.

        Returns:
            Dictionary of raw overrides, empty when there is no file
        """
        if self.config_path is None:
            return {}
        if not self.config_path.exists():
            raise ConfigError(f"config file not found: {self.config_path}")
        values = {}
        with open(self.config_path, "r", encoding="utf-8") as f:
            for number, line in enumerate(f, start=1):
                text = line.split("#", 1)[0].strip()
                if not text:
                    continue
                if "=" not in text:
                    raise ConfigError(f"{self.config_path}:{number}: expected key = value")
                key, raw = (part.strip() for part in text.split("=", 1))
                if not key:
                    raise ConfigError(f"{self.config_path}:{number}: empty key")
                try:
                    values[key] = yaml.safe_load(raw) if raw else ""
                except yaml.YAMLError:
                    values[key] = raw
        return values

    def resolve(self, settings: StadvSettings, flags: Mapping[str, Any]) -> RunConfig:
        """Defaults < environment < file < flags (flags set to None are ignored)"""
        config = RunConfig.from_settings(settings).merged(self.load())
        return config.merged({k: v for k, v in flags.items() if v is not None})

    @staticmethod
    def save(config: RunConfig, out_dir: str) -> Path:
        """
        Save the effective config to JSON

        Args:
            config: Resolved configuration
            out_dir: Output directory

        Returns:
            Path written
        """
        path = Path(out_dir) / EFFECTIVE_CONFIG_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(config.to_dict(), f, indent=2, ensure_ascii=False)
        logger.debug("Saved effective config to %s", path)
        return path
