"""Exception hierarchy shared by the library and the CLI."""


class NnrkError(Exception):
    """Base class for all library errors."""


class ConfigError(NnrkError, ValueError):
    """Invalid configuration or inconsistent inputs (CLI exit code 2)."""


class IntegrationError(NnrkError, ArithmeticError):
    """A step produced a non-finite value (CLI exit code 3).

    Attributes:
        step: index of the failing step, or None for a single step call.
        stage: index of the failing stage, if the failure happened inside a
            Runge-Kutta stage.
    """

    def __init__(self, message: str, step: int | None = None, stage: int | None = None):
        super().__init__(message)
        self.step = step
        self.stage = stage

    def at_step(self, step: int) -> "IntegrationError":
        """Return a copy of this error tagged with the trajectory step index."""
        err = type(self)(f"step {step}: {self}", step=step, stage=self.stage)
        return err


class DivergenceError(IntegrationError):
    """A state component exceeded the divergence guard."""


class CorrectionError(IntegrationError):
    """The network correction (not the vector field) was non-finite."""


class ModelFormatError(NnrkError, ValueError):
    """A model file failed version or schema validation on load."""


class TrainingError(NnrkError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int, batch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
