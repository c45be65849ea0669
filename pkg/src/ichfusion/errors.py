"""Exception types shared across the pipeline."""


class ShapeError(ValueError):
    """Array shapes are incompatible with an operation."""


class ConfigError(ValueError):
    """A configuration value is invalid."""


class ValidationError(ValueError):
    """Input data (files, labels, predictions) failed validation."""


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step, lr, grad_norm, loss=float("nan")):
        self.step = step
        self.lr = lr
        self.grad_norm = grad_norm
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss!r} at step {step} (lr={lr:.3e}, grad_norm={grad_norm:.3e})"
        )
