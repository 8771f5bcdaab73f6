"""Run directory lifecycle management service."""

import csv
import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

from .configuration import RunConfig, to_text

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.txt"
METRICS_FILE = "metrics.csv"
METRIC_COLUMNS = ["phase", "epoch", "split", "mIoU", "mDSC", "recall", "precision",
                  "loss", "val_loss", "nce", "fallbacks", "skipped", "dropped_negatives"]


def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Dict]) -> None:
    """Write rows with a fixed column order; floats use their shortest exact repr."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_cell(row.get(column)) for column in columns])


class IRunDirectory(ABC):
    """Interface for run directories."""

    @abstractmethod
    def get_path(self) -> Path:
        """Get the run directory root."""
        pass

    @abstractmethod
    def close(self) -> None:
        """Release the directory handle."""
        pass


class RunDirectoryService(IRunDirectory):
    """Owns config.txt, metrics.csv, checkpoints/ and dumps/ of one run."""

    def __init__(self, config: RunConfig, root: Optional[str] = None):
        self._config = config
        self._root = Path(root or config.run_dir)
        self._path: Optional[Path] = None

    def initialize(self, layout: bool = True) -> None:
        """Create the directory (with checkpoints/ and dumps/ when ``layout``) and echo the config."""
        if self._path is not None:
            return
        self._root.mkdir(parents=True, exist_ok=True)
        for sub in ("checkpoints", "dumps") if layout else ():
            (self._root / sub).mkdir(exist_ok=True)
        (self._root / CONFIG_FILE).write_text(to_text(self._config))
        self._path = self._root
        logger.debug("run directory ready at %s", self._root)

    def get_path(self) -> Path:
        if self._path is None:
            raise RuntimeError("Run directory not initialized. Call initialize() first.")
        return self._path

    @property
    def config(self) -> RunConfig:
        return self._config

    @property
    def config_text(self) -> str:
        return to_text(self._config)

    def checkpoint_dir(self, epoch: Optional[int] = None, name: Optional[str] = None) -> Path:
        leaf = name if name is not None else f"epoch_{epoch:03d}"
        return self.get_path() / "checkpoints" / leaf

    def dumps_dir(self, *parts: str) -> Path:
        path = self.get_path().joinpath("dumps", *parts)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def write_metrics(self, history: List[Dict]) -> Path:
        """Rewrite metrics.csv from the full history so a resumed run yields the same file."""
        path = self.get_path() / METRICS_FILE
        write_csv(path, METRIC_COLUMNS, history)
        return path

    def write_table(self, name: str, columns: Sequence[str], rows: Iterable[Dict]) -> Path:
        path = self.get_path() / name
        write_csv(path, columns, rows)
        return path

    def close(self) -> None:
        self._path = None
