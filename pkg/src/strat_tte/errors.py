"""Exception types raised across the package."""


class SchemaError(Exception):
    """Input file or config does not match the declared schema."""


class DataValidationError(Exception):
    """A parsed value violates a dataset invariant."""


class PositivityError(DataValidationError):
    """A stratum is missing subjects in one treatment arm."""


class FitError(Exception):
    """A nuisance model failed to fit."""


class SeparationError(FitError):
    """Logistic likelihood is unbounded (perfect separation or degenerate response)."""


class EstimationError(Exception):
    """Targeting or estimand computation failed."""


class UndefinedEstimandError(EstimationError):
    """The requested functional is undefined at the fitted curves."""
