"""Component ablation presets."""

from dataclasses import dataclass
from typing import Dict, List

from hyperseg.errors import ConfigError

from .configuration import RunConfig


@dataclass(frozen=True)
class AblationPreset:
    """One experiment row: which components are enabled."""
    experiment: int
    uoic: bool
    base_hr: bool
    unc_guidance: bool
    fgbg_groups: bool

    def apply(self, config: RunConfig) -> RunConfig:
        return config.with_overrides(uoic=self.uoic, base_hr=self.base_hr,
                                     unc_guidance=self.unc_guidance, fgbg_groups=self.fgbg_groups)

    def flags(self) -> Dict[str, bool]:
        return {"uoic": self.uoic, "base_hr": self.base_hr,
                "unc_guidance": self.unc_guidance, "fgbg_groups": self.fgbg_groups}


PRESETS: List[AblationPreset] = [
    AblationPreset(1, uoic=False, base_hr=False, unc_guidance=False, fgbg_groups=False),
    AblationPreset(2, uoic=True, base_hr=False, unc_guidance=False, fgbg_groups=False),
    AblationPreset(3, uoic=False, base_hr=True, unc_guidance=False, fgbg_groups=False),
    AblationPreset(4, uoic=False, base_hr=True, unc_guidance=False, fgbg_groups=True),
    AblationPreset(5, uoic=False, base_hr=True, unc_guidance=True, fgbg_groups=False),
    AblationPreset(6, uoic=False, base_hr=True, unc_guidance=True, fgbg_groups=True),
    AblationPreset(7, uoic=True, base_hr=True, unc_guidance=True, fgbg_groups=True),
]


def get_preset(experiment: int) -> AblationPreset:
    for preset in PRESETS:
        if preset.experiment == experiment:
            return preset
    raise ConfigError(f"unknown ablation experiment {experiment}; valid ids: 1-{len(PRESETS)}")


def parse_selection(text: str) -> List[AblationPreset]:
    """'all' or a comma-separated list of experiment ids."""
    if text.strip().lower() == "all":
        return list(PRESETS)
    try:
        ids = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"ablation selection must be 'all' or ids like 1,3,7, got {text!r}")
    return [get_preset(i) for i in ids]
