"""Exception hierarchy shared by all modules."""


class VertikitError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(VertikitError, ValueError):
    pass


class ShapeError(VertikitError, ValueError):
    pass


class SizeError(VertikitError, ValueError):
    pass


class OutOfBoundsError(VertikitError):
    pass


class DatasetError(VertikitError):
    """I/O or format problem with a dataset directory; carries the path."""

    def __init__(self, message, path=None):
        super().__init__(f"{message}: {path}" if path is not None else message)
        self.path = path


class DataError(VertikitError):
    pass


class TrainingError(VertikitError):
    """Training diverged; ``step`` names the offending optimizer step."""

    def __init__(self, message, step=None):
        super().__init__(f"{message} (step {step})" if step is not None else message)
        self.step = step


class IntegrityError(VertikitError):
    """Checkpoint missing, corrupted, or bound to a different upstream checksum."""
