import typing as tp


class CosmoError(Exception):
    pass


class ValidationError(CosmoError):
    pass


class ConfigError(ValidationError):
    pass


class LabelSpaceError(ValidationError):
    pass


class SplitError(ValidationError):
    pass


class DatasetError(CosmoError):
    pass


class ShapeMismatchError(CosmoError):
    pass


class SequenceOverflowError(CosmoError):
    pass


class NotNormalizedError(CosmoError):
    pass


class CheckpointError(CosmoError):
    pass


class NonFiniteLossError(CosmoError):
    """Raised when a training loss is NaN or infinite.

    The `snapshot` keeps what is needed to reproduce the failing step:
    iteration, sub-step, loss values and parameter norms.
    """

    def __init__(self, message: str, snapshot: dict[str, tp.Any]) -> None:
        super().__init__(message)
        self.snapshot = snapshot
