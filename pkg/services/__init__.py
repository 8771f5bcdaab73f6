"""Service layer for the hyperseg command-line driver."""

from .configuration import ConfigurationService, RunConfig
from .config_validator import ConfigValidatorService
from .run_directory import RunDirectoryService
from .ablation import PRESETS, AblationPreset

__all__ = [
    'ConfigurationService',
    'RunConfig',
    'ConfigValidatorService',
    'RunDirectoryService',
    'PRESETS',
    'AblationPreset'
]
