"""Exception hierarchy.

The CLI maps each family onto an exit code: ``ParameterError`` -> 1,
``DataError`` -> 2, ``EstimationError`` -> 3.
"""


class MatchCohortError(Exception):
    """Base class for all package errors."""


class ParameterError(MatchCohortError, ValueError):
    """An argument lies outside its admissible domain."""


class DataError(MatchCohortError, ValueError):
    """Input data are malformed or violate a precondition."""


class PairingError(DataError):
    """A pair is incomplete, duplicated or otherwise structurally invalid."""

    def __init__(self, message, pair_ids=()):
        super().__init__(message)
        self.pair_ids = tuple(pair_ids)


class ConcordantPairError(PairingError):
    """An exposure-concordant pair was passed where only discordant pairs are allowed."""


class EstimationError(MatchCohortError, ArithmeticError):
    """An estimator could not produce a finite estimate."""


class DegenerateTableError(EstimationError):
    """A zero cell makes a log odds ratio infinite or undefined."""


class NonConvergenceError(EstimationError):
    """An iterative fit stopped without meeting its convergence criterion.

    ``best`` holds the best parameter vector reached, ``trace`` optional
    diagnostics (e.g. the gradient norm per iteration).
    """

    def __init__(self, message, best=None, trace=None):
        super().__init__(message)
        self.best = best
        self.trace = trace


class SeparationError(NonConvergenceError):
    """Logistic coefficients diverge because the outcome is (quasi-)separated."""


class RankDeficiencyError(EstimationError):
    """The design matrix is not of full column rank."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class IdentifiabilityError(EstimationError):
    """The requested parameter is not identified by the supplied data."""
