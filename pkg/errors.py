"""
QKCV Forecasting Lab - Error Types
Every error derives from the builtin type callers already catch (ValueError, RuntimeError).
"""


class QKCVError(Exception):
    """Base mixin for all library errors"""


class DimensionError(QKCVError, ValueError):
    """Tensor shapes do not agree"""


class ContractError(QKCVError, ValueError):
    """A documented precondition was violated"""


class ConfigurationError(QKCVError, ValueError):
    """Invalid configuration value or combination"""


class DataError(QKCVError, ValueError):
    """Input data is malformed or out of range"""


class SchemaError(DataError):
    """Dataset columns do not match the declared schema"""


class NumericalError(QKCVError, ArithmeticError):
    """An op produced NaN or Inf"""


class TrainingDivergedError(NumericalError):
    """Loss became non-finite during training"""

    def __init__(self, step: int, last_finite_loss: float, cause: str = ""):
        self.step = step
        self.last_finite_loss = last_finite_loss
        message = f"training diverged at step {step} (last finite loss {last_finite_loss:.6g})"
        if cause:
            message += f": {cause}"
        super().__init__(message)


class InternalError(QKCVError, RuntimeError):
    """A library invariant was broken"""
