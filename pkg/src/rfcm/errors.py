"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


class DatasetFormatError(ValueError):
    """A dataset file does not conform to the JSONL schema."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or incompatible."""


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
