"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid shapes, presets or hyperparameters."""


class UsageError(ValueError):
    """An operation was called outside its contract."""


class FormatError(ValueError):
    """A file could not be decoded."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDiverged(RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
