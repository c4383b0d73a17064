"""Exception taxonomy shared across the package.

The CLI maps these onto stable exit codes, so solver code should raise the
most specific class that applies rather than bare ValueError.
"""


class TilqError(Exception):
    """Base class for all package errors."""


class ConfigError(TilqError):
    """Malformed or unsupported run configuration."""


class AssumptionError(TilqError):
    """Standing model assumptions violated; solving would be meaningless."""


class NumericalError(TilqError):
    """Numerical failure: blow-up, persistent truncation, singular system."""


class RegressionError(NumericalError):
    """Regression-specific failure (ill-conditioned basis, positivity audit)."""
