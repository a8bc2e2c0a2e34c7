class SkelconError(Exception):
    """Base class for package errors."""


class ConfigError(SkelconError, ValueError):
    """A parameter or configuration value violates its contract."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class InvalidGraphError(SkelconError, ValueError):
    pass


class FormatError(SkelconError, ValueError):
    """A sample, manifest, or checkpoint file is malformed."""


class CheckpointError(FormatError):
    pass


class TrainingDivergence(SkelconError, RuntimeError):
    def __init__(self, message: str, batch_ids=()):
        super().__init__(f"{message} (batch sample ids: {list(batch_ids)})")
        self.batch_ids = list(batch_ids)
