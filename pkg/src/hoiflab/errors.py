"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value violates a precondition; message names the key."""


class DomainError(ValueError):
    """An input point lies outside the unit cube."""


class InsufficientDataError(ValueError):
    """Too few observations for the requested statistic."""


class NumericalError(RuntimeError):
    """A numerical routine failed to reach its stated tolerance."""


class SingularGramError(NumericalError):
    """Gram operator is numerically singular.

    Carries ``lambda_min``, the smallest eigenvalue estimate at the point of
    failure.
    """

    def __init__(self, message: str, lambda_min: float | None = None):
        super().__init__(message)
        self.lambda_min = lambda_min


class DegenerateAggregateError(ValueError):
    """The fitted aggregation directions are degenerate (e.g. identically zero).

    Distinct from :class:`NumericalError`: the inputs, not the arithmetic,
    are at fault.
    """


class DegenerateTestError(ValueError):
    """A test statistic is undefined (e.g. zero first-order standard error)."""


class OracleUnavailableError(RuntimeError):
    """An operation that needs the simulation truth was called without it."""


class EmptyDesignError(ValueError):
    """No sub-cube contains two or more observations."""


class BudgetError(RuntimeError):
    """A naive reference path was asked to exceed its documented size limit."""
