"""Exception types shared across the package."""


class ProcPlanError(Exception):
    pass


class ValidationError(ProcPlanError, ValueError):
    """Invalid argument or configuration value."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ShapeError(ValidationError):
    pass


class NumericError(ProcPlanError, FloatingPointError):
    pass


class ParseError(ProcPlanError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class IntegrityError(ProcPlanError, ValueError):
    pass


class TransportError(ProcPlanError, OSError):
    pass


class TrainingError(ProcPlanError, RuntimeError):
    def __init__(self, message, batch_id=None, loss_curve=None):
        super().__init__(message)
        self.batch_id = batch_id
        self.loss_curve = list(loss_curve or [])


class FreezeViolation(TrainingError):
    pass
