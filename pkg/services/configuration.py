"""Configuration management service."""

import io
import math
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from dotenv import dotenv_values, load_dotenv
from dotenv.parser import parse_stream

from hyperseg.errors import ConfigError
from hyperseg.net import NetworkSpec
from hyperseg.training import TrainSettings
from hyperseg.ughr import BlockConfig

SEED_ENV = "UHR_SEED"
_TRUE = ("true", "1", "yes", "on")
_FALSE = ("false", "0", "no", "off")


@dataclass
class RunConfig:
    """Every hyperparameter, ablation switch, seed and path of one run."""
    temperature: float = 0.10
    lambda_ic: float = 1.0
    lambda_aux: float = 0.1
    prototypes: int = 8
    beta: float = 1.0
    eps: float = 1e-8
    scale_min: float = 0.3
    scale_max: float = 0.7
    batch_size: int = 8
    lr: float = 1e-4
    epochs: int = 30
    pretrain_epochs: int = 10
    seed: int = 0
    uoic: bool = True
    base_hr: bool = True
    unc_guidance: bool = True
    fgbg_groups: bool = True
    detach_uncertainty: bool = False
    workers: int = 1
    scales: int = 3
    channels: str = "16,32,64"
    refine_channels: int = 16
    in_channels: int = 1
    embed_scale: int = 1
    activation: str = "silu"
    max_paste_retries: int = 3
    flips: bool = True
    debug_dumps: bool = False
    train_dir: str = ""
    val_dir: str = ""
    data_dir: str = ""
    run_dir: str = "runs/default"
    checkpoint: str = ""
    pretrained: str = ""
    resume: str = ""

    @classmethod
    def keys(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    @classmethod
    def field_type(cls, key: str) -> type:
        return type(getattr(cls(), key))

    def channel_widths(self) -> Tuple[int, ...]:
        try:
            return tuple(int(part) for part in self.channels.split(",") if part.strip())
        except ValueError:
            raise ConfigError(f"channels must be comma-separated integers, got {self.channels!r}")

    def block_config(self) -> BlockConfig:
        return BlockConfig(channels=self.refine_channels, prototypes=self.prototypes, beta=self.beta,
                           base_hr=self.base_hr, unc_guidance=self.unc_guidance,
                           fgbg_groups=self.fgbg_groups, activation=self.activation,
                           detach_uncertainty=self.detach_uncertainty, eps=self.eps,
                           debug=self.debug_dumps)

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(scales=self.scales, channels=self.channel_widths(), in_channels=self.in_channels,
                           refine_channels=self.refine_channels, activation=self.activation,
                           embed_scale=self.embed_scale, block=self.block_config())

    def train_settings(self) -> TrainSettings:
        return TrainSettings(lr=self.lr, batch_size=self.batch_size, lambda_aux=self.lambda_aux,
                             lambda_ic=self.lambda_ic, temperature=self.temperature,
                             scale_range=(self.scale_min, self.scale_max),
                             max_paste_retries=self.max_paste_retries, flips=self.flips,
                             workers=self.workers)

    def with_overrides(self, **values: Any) -> "RunConfig":
        unknown = sorted(set(values) - set(self.keys()))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}; valid keys: {', '.join(self.keys())}")
        return replace(self, **values)


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def coerce_value(key: str, raw: str) -> Any:
    """Convert the text form of ``key`` to its field type."""
    kind = RunConfig.field_type(key)
    text = raw.strip()
    if kind is bool:
        lowered = text.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ConfigError(f"{key}: expected true or false, got {raw!r}")
    if kind is int:
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
    if kind is float:
        try:
            value = float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}")
        if not math.isfinite(value):
            raise ConfigError(f"{key}: value must be finite, got {raw!r}")
        return value
    return text


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    """Parse ``key = value`` lines with python-dotenv, then check keys and coerce types.

    ``#`` starts a comment at line start or after whitespace, so ``runs/a#1``
    stays a single value. Quoted values are unquoted; ``${VAR}`` is not expanded.
    """
    valid = RunConfig.keys()
    for binding in parse_stream(io.StringIO(text)):
        number = binding.original.line
        if binding.error or (binding.key is not None and binding.value is None):
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {binding.original.string.strip()!r}")
        if binding.key is not None and binding.key not in valid:
            raise ConfigError(f"{source}:{number}: unknown key {binding.key!r}; valid keys: {', '.join(valid)}")
    raw_values = dotenv_values(stream=io.StringIO(text), interpolate=False)
    return {key: coerce_value(key, raw) for key, raw in raw_values.items()}


def to_text(config: RunConfig) -> str:
    """Echo every key; parsing the result reproduces an equal RunConfig."""
    return "".join(f"{key} = {format_value(getattr(config, key))}\n" for key in RunConfig.keys())


class IConfigurationProvider(ABC):
    """Interface for configuration providers."""

    @abstractmethod
    def get_run_config(self) -> RunConfig:
        """Get the resolved run configuration."""
        pass


class ConfigurationService(IConfigurationProvider):
    """Resolves defaults < UHR_SEED < config file < explicit overrides."""

    def __init__(self, config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None,
                 environ: Optional[Dict[str, str]] = None):
        load_dotenv()
        self._environ = os.environ if environ is None else environ
        self._config_path = config_path
        self._config = self._resolve(overrides or {})

    def get_run_config(self) -> RunConfig:
        """Get the resolved run configuration."""
        return self._config

    def get_config_text(self) -> str:
        return to_text(self._config)

    def _resolve(self, overrides: Dict[str, Any]) -> RunConfig:
        config = RunConfig()
        env_seed = self._environ.get(SEED_ENV)
        if env_seed:
            config = config.with_overrides(seed=coerce_value("seed", env_seed))
        if self._config_path:
            config = config.with_overrides(**self._load_file(self._config_path))
        return config.with_overrides(**overrides)

    @staticmethod
    def _load_file(path: str) -> Dict[str, Any]:
        config_file = Path(path)
        if not config_file.is_file():
            raise ConfigError(f"config file not found: {path}")
        return parse_config_text(config_file.read_text(), source=str(config_file))
