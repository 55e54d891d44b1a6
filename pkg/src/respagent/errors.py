"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """An argument violates a documented precondition."""


class NumericInputError(ValueError):
    """Inputs contain NaN (or otherwise unusable floating point values)."""


class TrainingFailure(RuntimeError):
    """Training diverged; ``epoch`` records where."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class ConfigError(ValueError):
    """An experiment config failed validation; ``path`` locates the field."""

    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path


class ExecutorFailure(RuntimeError):
    """A closed-loop executor failed during ``round_index``."""

    def __init__(self, message: str, round_index: int):
        super().__init__(f"round {round_index}: {message}")
        self.round_index = round_index
