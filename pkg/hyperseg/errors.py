"""Exception hierarchy for the hyperseg library."""

from typing import Optional


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value or network setting is invalid."""


class NonFiniteError(ValueError):
    """An operation or evaluated function produced NaN or Inf."""


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


class DatasetError(ValueError):
    """A dataset directory or manifest is incomplete."""


class ParseError(ValueError):
    """A binary or text file could not be decoded."""

    def __init__(self, message: str, path: Optional[str] = None, offset: Optional[int] = None):
        self.path = path
        self.offset = offset
        location = ""
        if path is not None:
            location += f"{path}: "
        if offset is not None:
            location += f"byte {offset}: "
        super().__init__(f"{location}{message}")
