"""Exception and warning types raised by seqctl."""


class ConfigError(ValueError):
    """Invalid model, loss or run configuration."""


class AbsoluteContinuityError(ValueError):
    """An observation has zero density under the first hypothesis."""


class ConsistencyError(RuntimeError):
    """Value iteration produced a non-monotone iterate."""


class BudgetError(RuntimeError):
    """Exact enumeration would exceed its state or path budget."""


class FingerprintError(ValueError):
    """A persisted table or policy was built for a different model or loss."""


class CalibrationError(RuntimeError):
    """Multipliers cannot be calibrated for this model."""


class ConvergenceWarning(UserWarning):
    pass


class CalibrationWarning(UserWarning):
    pass
