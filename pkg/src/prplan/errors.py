"""Exception hierarchy.

The CLI maps :class:`ConfigurationError` to exit code 2 and :class:`DataError`
to exit code 3; everything else exits with 1.
"""


class PrplanError(Exception):
    pass


class ContractViolation(PrplanError, ValueError):
    """A caller broke a documented precondition (shapes, stale caches, ...)."""


class ConfigurationError(PrplanError, ValueError):
    pass


class DataError(PrplanError, ValueError):
    pass


class NumericalGuardError(PrplanError, ArithmeticError):
    pass


class TrainingError(PrplanError, RuntimeError):
    pass


class SamplingError(PrplanError, RuntimeError):
    pass


class PlanningError(PrplanError, RuntimeError):
    pass


class VersioningError(PrplanError, ValueError):
    pass


class UnsupportedVisualizationError(PrplanError, ValueError):
    pass
