"""Analysis of 1:1 matched cohort and twin studies with binary exposure and outcome."""

from . import data, estimators, numerics, simulation
from .data import (
    AllPairSummary,
    DiscordantTable,
    PairedCohort,
    Schema,
    SubjectRecord,
    filter_discordant,
    ingest_pairs,
    parse_counts,
    tabulate_all,
    tabulate_discordant,
    write_cohort,
)
from .errors import (
    ConcordantPairError,
    DataError,
    DegenerateTableError,
    EstimationError,
    IdentifiabilityError,
    MatchCohortError,
    NonConvergenceError,
    PairingError,
    ParameterError,
    RankDeficiencyError,
    SeparationError,
)
from .estimators import (
    EstimateReport,
    Estimand,
    Method,
    StandardizedRisks,
    fit_clr,
    fit_crude_all,
    fit_crude_discordant,
    fit_explicit,
    fit_mixed_all,
    fit_mixed_discordant,
    fit_within_between,
    lrt_discordant,
    standardized_risks,
    wald_test,
)
from .numerics import DesignSpec

__version__ = "0.1.0"
