"""Matched-cohort analysis of adolescent football and later-life outcomes.

Eligibility and availability strata, optimal full matching with a rank
Mahalanobis distance and soft propensity caliper, balance diagnostics,
matched regression with ordered multiple testing, and sensitivity to
hidden bias.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, DataError, InfeasibleFlowError, InfeasibleMatchError,
                     MatchStudyError, NumericalError)

__all__ = ["__version__", "MatchStudyError", "ConfigError", "DataError", "NumericalError",
           "InfeasibleFlowError", "InfeasibleMatchError", "fixture_config_path",
           "fixture_paths"]


def fixture_paths():
    """Paths of the bundled shape fixture cohort and its schema."""
    from importlib.resources import files
    base = files(__name__) / "data"
    return str(base / "wls_shape.csv"), str(base / "wls_shape.schema.json")


def fixture_config_path():
    from importlib.resources import files
    return str(files(__name__) / "data" / "fixture.config.json")
