"""Exception types shared across the package.

The CLI maps these onto exit codes: precondition-type errors exit with 2,
numeric failures exit with 3.
"""


class PreconditionError(ValueError):
    """An operation was called with inputs that violate its contract."""


class DimensionError(PreconditionError):
    """Array shapes do not line up."""


class ConfigurationError(PreconditionError):
    """A config document or data source is unusable."""


class LabelAccessError(PermissionError):
    """Raised when code asks for labels of an unlabeled (target) domain."""


class NumericError(FloatingPointError):
    """A loss or statistic became NaN/Inf during optimization."""

    def __init__(self, component, value=None):
        self.component = component
        self.value = value
        super().__init__(f"non-finite value in {component!r}: {value}")


class UndefinedCorrelationError(PreconditionError):
    """Correlation requested for a sample with zero variance."""
