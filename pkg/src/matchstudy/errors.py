"""Exception hierarchy.

The three top-level classes map onto the CLI exit codes: configuration
problems (2), data problems (3) and numerical failures (4).
"""


class MatchStudyError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(MatchStudyError):
    pass


class DataError(MatchStudyError):
    pass


class NumericalError(MatchStudyError):
    pass


class SeparationError(NumericalError):
    """Maximum-likelihood estimate does not exist (perfect separation)."""


class RankDeficiencyError(NumericalError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = list(columns)


class DegenerateResponseError(NumericalError):
    pass


class InfeasibleFlowError(NumericalError):
    def __init__(self, message, deficit_nodes=()):
        super().__init__(message)
        self.deficit_nodes = list(deficit_nodes)


class InfeasibleMatchError(NumericalError):
    pass


class MonotonicityError(NumericalError):
    pass
