"""Exception types shared across the package."""


class MSPNError(Exception):
    """Base class for all package errors."""


class ContractError(MSPNError):
    """An operation was called with arguments that break its contract."""


class ConfigError(MSPNError):
    """Invalid configuration or unusable dataset."""


class MinWidthError(ConfigError):
    """Input is too narrow for the convolution chain."""

    def __init__(self, width, min_width, where="input"):
        self.width = width
        self.min_width = min_width
        super().__init__(
            f"{where} width {width} is below the minimum acceptable width {min_width}"
        )


class CheckpointError(MSPNError):
    """A checkpoint file is malformed or inconsistent."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
