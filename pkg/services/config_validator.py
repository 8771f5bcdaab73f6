"""Run configuration validation service."""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

from hyperseg.errors import ConfigError
from hyperseg.ughr import ACTIVATIONS

from .configuration import RunConfig


@dataclass
class ValidationResult:
    """Result of config validation."""
    is_valid: bool
    error_message: str = ""


class IConfigValidator(ABC):
    """Interface for config validators."""

    @abstractmethod
    def validate(self, config: RunConfig) -> ValidationResult:
        """Validate a run configuration."""
        pass


class RangeValidator(IConfigValidator):
    """Numeric knobs must lie in their admissible ranges."""

    def validate(self, config: RunConfig) -> ValidationResult:
        checks = [
            (config.temperature > 0.0, f"temperature must be > 0, got {config.temperature}"),
            (config.lambda_ic >= 0.0, f"lambda_ic must be >= 0, got {config.lambda_ic}"),
            (config.lambda_aux >= 0.0, f"lambda_aux must be >= 0, got {config.lambda_aux}"),
            (config.prototypes >= 1, f"prototypes must be >= 1, got {config.prototypes}"),
            (config.beta >= 0.0, f"beta must be >= 0, got {config.beta}"),
            (config.eps > 0.0, f"eps must be > 0, got {config.eps}"),
            (0.0 < config.scale_min <= config.scale_max <= 1.0,
             f"scale range must satisfy 0 < scale_min <= scale_max <= 1, got [{config.scale_min}, {config.scale_max}]"),
            (config.batch_size >= 1, f"batch_size must be >= 1, got {config.batch_size}"),
            (config.lr > 0.0, f"lr must be > 0, got {config.lr}"),
            (config.epochs >= 0 and config.pretrain_epochs >= 0, "epoch counts must be >= 0"),
            (config.workers >= 1, f"workers must be >= 1, got {config.workers}"),
            (config.max_paste_retries >= 0, f"max_paste_retries must be >= 0, got {config.max_paste_retries}"),
        ]
        for ok, message in checks:
            if not ok:
                return ValidationResult(is_valid=False, error_message=message)
        return ValidationResult(is_valid=True)


class ArchitectureValidator(IConfigValidator):
    """Network shape settings must describe a buildable network."""

    def validate(self, config: RunConfig) -> ValidationResult:
        try:
            widths = config.channel_widths()
        except ConfigError as e:
            return ValidationResult(is_valid=False, error_message=str(e))
        if config.scales < 2:
            return ValidationResult(False, f"scales must be >= 2, got {config.scales}")
        if len(widths) != config.scales:
            return ValidationResult(False, f"channels lists {len(widths)} widths for {config.scales} scales")
        if any(b < a for a, b in zip(widths, widths[1:])):
            return ValidationResult(False, f"channels must be non-decreasing, got {config.channels}")
        if config.activation not in ACTIVATIONS:
            return ValidationResult(False, f"activation must be one of {sorted(ACTIVATIONS)}")
        if not 0 <= config.embed_scale < config.scales:
            return ValidationResult(False, f"embed_scale must lie in [0, {config.scales}), got {config.embed_scale}")
        if config.refine_channels < 1 or config.in_channels not in (1, 3):
            return ValidationResult(False, "refine_channels must be >= 1 and in_channels 1 or 3")
        return ValidationResult(is_valid=True)


class PathValidator(IConfigValidator):
    """Named path keys must be set and exist on disk."""

    def __init__(self, required: Sequence[str] = ()):
        self._required = tuple(required)

    def validate(self, config: RunConfig) -> ValidationResult:
        for key in self._required:
            value = getattr(config, key)
            if not value:
                return ValidationResult(False, f"{key} is required for this command")
            if not Path(value).exists():
                return ValidationResult(False, f"{key} path does not exist: {value}")
        return ValidationResult(is_valid=True)


class CompositeConfigValidator(IConfigValidator):
    """Composite validator that runs multiple validators."""

    def __init__(self, validators: List[IConfigValidator] = None):
        self._validators = validators or self._get_default_validators()

    def validate(self, config: RunConfig) -> ValidationResult:
        """Run all validators in sequence."""
        for validator in self._validators:
            result = validator.validate(config)
            if not result.is_valid:
                return result
        return ValidationResult(is_valid=True)

    def add_validator(self, validator: IConfigValidator) -> None:
        self._validators.append(validator)

    @staticmethod
    def _get_default_validators() -> List[IConfigValidator]:
        return [RangeValidator(), ArchitectureValidator()]


class ConfigValidatorService:
    """Main config validation service."""

    def __init__(self, validator: IConfigValidator = None):
        self._validator = validator or CompositeConfigValidator()

    def validate_config(self, config: RunConfig) -> Tuple[bool, str]:
        result = self._validator.validate(config)
        return result.is_valid, result.error_message

    def validate_or_raise(self, config: RunConfig) -> None:
        """Validate config and raise ConfigError if invalid."""
        is_valid, error_message = self.validate_config(config)
        if not is_valid:
            raise ConfigError(f"Config validation failed: {error_message}")

    @classmethod
    def for_paths(cls, *required: str) -> "ConfigValidatorService":
        validators = CompositeConfigValidator._get_default_validators() + [PathValidator(required)]
        return cls(CompositeConfigValidator(validators))
