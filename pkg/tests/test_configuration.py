#!/usr/bin/env python3
"""Run configuration: defaults, text format, precedence, validation and ablation presets."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

import pytest

from services.ablation import PRESETS, get_preset, parse_selection
from services.config_validator import (ArchitectureValidator, CompositeConfigValidator, ConfigValidatorService,
                                       PathValidator, RangeValidator, ValidationResult)
from services.configuration import ConfigurationService, RunConfig, coerce_value, parse_config_text, to_text
from services.run_directory import METRIC_COLUMNS, RunDirectoryService
from hyperseg.errors import ConfigError


def test_defaults():
    config = RunConfig()
    assert config.temperature == 0.10
    assert (config.lambda_ic, config.lambda_aux) == (1.0, 0.1)
    assert (config.prototypes, config.beta, config.eps) == (8, 1.0, 1e-8)
    assert (config.scale_min, config.scale_max) == (0.3, 0.7)
    assert (config.batch_size, config.lr, config.epochs, config.seed) == (8, 1e-4, 30, 0)
    assert config.uoic and config.base_hr and config.unc_guidance and config.fgbg_groups


def test_text_round_trip():
    config = RunConfig(lr=3e-4, uoic=False, channels="8,8,16", run_dir="runs/x", temperature=0.07)
    assert RunConfig(**parse_config_text(to_text(config))) == config


def test_parse_comments_and_errors():
    values = parse_config_text("# header\n\nbeta = 2.0  # stronger\nflips = off\n")
    assert values == {"beta": 2.0, "flips": False}
    with pytest.raises(ConfigError, match="valid keys"):
        parse_config_text("gamma = 1\n")
    with pytest.raises(ConfigError, match=":1:"):
        parse_config_text("just words\n")


def test_hash_inside_value_is_kept():
    values = parse_config_text("run_dir = runs/exp#2  # second attempt\ndata_dir = 'data #shared'\n")
    assert values == {"run_dir": "runs/exp#2", "data_dir": "data #shared"}
    with pytest.raises(ConfigError, match=":2: unknown key"):
        parse_config_text("beta = 1.0\ngamma = 1\n")


def test_coerce_value():
    assert coerce_value("seed", " 12 ") == 12
    assert coerce_value("uoic", "Yes") is True
    with pytest.raises(ConfigError):
        coerce_value("lr", "fast")
    with pytest.raises(ConfigError):
        coerce_value("lr", "nan")
    with pytest.raises(ConfigError):
        coerce_value("flips", "maybe")


def test_unknown_override_lists_valid_keys():
    with pytest.raises(ConfigError, match="temperature"):
        RunConfig().with_overrides(temprature=0.2)


def test_precedence_env_file_flags(tmp_path):
    config_file = tmp_path / "run.txt"
    config_file.write_text("seed = 5\nbeta = 0.5\n")
    env = {"UHR_SEED": "3"}
    assert ConfigurationService(environ=env).get_run_config().seed == 3
    assert ConfigurationService(str(config_file), environ=env).get_run_config().seed == 5
    resolved = ConfigurationService(str(config_file), {"seed": 9}, environ=env).get_run_config()
    assert (resolved.seed, resolved.beta) == (9, 0.5)


def test_missing_config_file():
    with pytest.raises(ConfigError):
        ConfigurationService("/nonexistent/run.txt", environ={})


def test_derived_settings():
    config = RunConfig(channels="4, 4, 8", refine_channels=4, prototypes=2, fgbg_groups=False, scale_min=0.2)
    spec = config.network_spec()
    assert spec.channels == (4, 4, 8)
    assert spec.block.channels == 4 and spec.block.prototypes == 2 and not spec.block.fgbg_groups
    assert config.train_settings().scale_range == (0.2, 0.7)
    with pytest.raises(ConfigError):
        RunConfig(channels="4,x,8").channel_widths()


@pytest.mark.parametrize("overrides", [
    {"temperature": 0.0},
    {"lambda_ic": -1.0},
    {"scale_min": 0.8, "scale_max": 0.5},
    {"batch_size": 0},
    {"workers": 0},
    {"prototypes": 0},
])
def test_range_validator(overrides):
    result = RangeValidator().validate(RunConfig(**overrides))
    assert not result.is_valid and result.error_message


@pytest.mark.parametrize("overrides", [
    {"channels": "16,32"},
    {"channels": "32,16,64"},
    {"activation": "tanh"},
    {"embed_scale": 3},
    {"scales": 1, "channels": "16"},
])
def test_architecture_validator(overrides):
    assert not ArchitectureValidator().validate(RunConfig(**overrides)).is_valid


def test_path_validator(tmp_path):
    validator = PathValidator(("checkpoint",))
    assert not validator.validate(RunConfig()).is_valid
    assert not validator.validate(RunConfig(checkpoint=str(tmp_path / "gone"))).is_valid
    assert validator.validate(RunConfig(checkpoint=str(tmp_path))).is_valid


def test_validator_service():
    service = ConfigValidatorService()
    assert service.validate_config(RunConfig()) == (True, "")
    with pytest.raises(ConfigError, match="Config validation failed"):
        service.validate_or_raise(RunConfig(lr=0.0))
    with pytest.raises(ConfigError, match="checkpoint"):
        ConfigValidatorService.for_paths("checkpoint").validate_or_raise(RunConfig())


def test_composite_stops_at_first_failure():
    class Reject:
        def validate(self, config):
            return ValidationResult(False, "rejected")

    composite = CompositeConfigValidator([RangeValidator()])
    composite.add_validator(Reject())
    assert composite.validate(RunConfig()).error_message == "rejected"


def test_presets():
    assert [p.experiment for p in PRESETS] == list(range(1, 8))
    full = get_preset(7)
    assert full.flags() == {"uoic": True, "base_hr": True, "unc_guidance": True, "fgbg_groups": True}
    baseline = get_preset(1).apply(RunConfig())
    assert not (baseline.uoic or baseline.base_hr or baseline.unc_guidance or baseline.fgbg_groups)
    assert [p.experiment for p in parse_selection("1, 3,7")] == [1, 3, 7]
    assert len(parse_selection("all")) == 7
    with pytest.raises(ConfigError):
        parse_selection("8")
    with pytest.raises(ConfigError):
        parse_selection("one")


def test_run_directory_lifecycle(tmp_path):
    run_dir = RunDirectoryService(RunConfig(), str(tmp_path / "run"))
    with pytest.raises(RuntimeError):
        run_dir.get_path()
    run_dir.initialize()
    root = run_dir.get_path()
    assert (root / "checkpoints").is_dir() and (root / "dumps").is_dir()
    assert (root / "config.txt").read_text() == to_text(RunConfig())
    path = run_dir.write_metrics([{"phase": "train", "epoch": 1, "loss": 0.25}])
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS)
    assert lines[1].startswith("train,1,,")
    assert run_dir.checkpoint_dir(epoch=3).name == "epoch_003"
    run_dir.close()
    with pytest.raises(RuntimeError):
        run_dir.get_path()
