"""Exception hierarchy shared by every lfyolo module."""


class LFYoloError(Exception):
    """Base class for all library errors."""


class ShapeError(LFYoloError, ValueError):
    """Tensor dimensions do not fit an operator or layer."""


class ConfigError(LFYoloError, ValueError):
    """Invalid block, model, or operator configuration."""


class ContractError(LFYoloError, RuntimeError):
    """A caller broke an operator contract (non-scalar loss, non-deterministic fn, ...)."""


class ParseError(LFYoloError, ValueError):
    """Malformed text input. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, path=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line
        self.path = path


class ValidationError(LFYoloError, ValueError):
    """Parsed values violate a data invariant."""


class FormatError(LFYoloError, ValueError):
    """A file exists but its encoding is unsupported."""


class WeightsError(LFYoloError, ValueError):
    """A weights file is corrupt or does not match the model it is loaded into."""
