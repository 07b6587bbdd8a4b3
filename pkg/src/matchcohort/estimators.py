"""Estimators of exposure effects from 1:1 matched pairs.

Each estimator returns an :class:`EstimateReport` tagged with the odds ratio
it targets:

``psi_c``
    the conditional log odds ratio given the matching factors;
``psi_s``
    the log odds ratio standardized to the confounder distribution of the
    matched (exposure-discordant) pairs;
``psi_m``
    the marginal (crude population) log odds ratio;
``beta_w``
    the within-pair effect of the within-between decomposition.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import AllPairSummary, DiscordantTable, PairedCohort, tabulate_all, tabulate_discordant
from .errors import (
    DataError,
    DegenerateTableError,
    EstimationError,
    IdentifiabilityError,
    ParameterError,
)
from ._glmm import PatternGlmm, fit_pattern_glmm
from .numerics import DEFAULT_TOL, DesignSpec, fit_logistic, hermite_rule

__all__ = [
    "Method",
    "Estimand",
    "EstimateReport",
    "StandardizedRisks",
    "WaldTest",
    "fit_explicit",
    "fit_clr",
    "fit_mixed_discordant",
    "fit_crude_discordant",
    "standardized_risks",
    "fit_crude_all",
    "crude_all_variance",
    "fit_within_between",
    "fit_mixed_all",
    "wald_test",
    "lrt_discordant",
    "DEFAULT_QUAD_ORDER",
]

DEFAULT_QUAD_ORDER = 21
Z975 = float(stats.norm.ppf(0.975))


class Method(str, enum.Enum):
    EXPLICIT = "explicit"
    CLR = "clr"
    MIXED_DISCORDANT = "mixed_discordant"
    CRUDE_DISCORDANT = "crude_discordant"
    CRUDE_ALL = "crude_all"
    MIXED_ALL_WB = "mixed_all_wb"
    MIXED_ALL_NAIVE = "mixed_all_naive"
    WITHIN_BETWEEN_LINEAR = "within_between_linear"
    WITHIN_BETWEEN_SATURATED = "within_between_saturated"


class Estimand(str, enum.Enum):
    PSI_C = "psi_c"
    PSI_S = "psi_s"
    PSI_M = "psi_m"
    BETA_W = "beta_w"


@dataclass(frozen=True)
class WaldTest:
    z: float
    p: float


@dataclass(frozen=True)
class EstimateReport:
    """Log odds ratio estimate with its standard error.

    ``nuisance`` holds the other fitted parameters, ``diagnostics`` fit
    information such as iteration counts or boundary flags.
    """

    method: Method
    estimand: Estimand
    estimate: float
    se: float
    n_pairs: int = 0
    nuisance: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def ci95(self) -> tuple:
        return (self.estimate - Z975 * self.se, self.estimate + Z975 * self.se)

    @property
    def wald_z(self) -> float:
        return self.estimate / self.se if self.se > 0 else math.nan

    @property
    def p_value(self) -> float:
        z = self.wald_z
        return float(2 * stats.norm.sf(abs(z))) if math.isfinite(z) else math.nan

    @property
    def odds_ratio(self) -> float:
        return math.exp(self.estimate)

    def to_record(self) -> dict:
        """Flat key-value record; nuisance parameters are prefixed ``nuisance.``."""
        lo, hi = self.ci95
        rec = {
            "method": self.method.value,
            "estimand": self.estimand.value,
            "estimate": self.estimate,
            "se": self.se,
            "ci_low": lo,
            "ci_high": hi,
            "z": self.wald_z,
            "p": self.p_value,
            "n_pairs": self.n_pairs,
        }
        rec.update({f"nuisance.{k}": v for k, v in self.nuisance.items()})
        return rec


@dataclass(frozen=True)
class StandardizedRisks:
    """Outcome risks under exposure and non-exposure in the matched population."""

    p1_star: float
    p0_star: float

    @property
    def risk_difference(self) -> float:
        return self.p1_star - self.p0_star

    @property
    def risk_ratio(self) -> float:
        return self.p1_star / self.p0_star if self.p0_star > 0 else math.inf

    @property
    def log_or(self) -> float:
        p1, p0 = self.p1_star, self.p0_star
        if p1 in (0.0, 1.0) or p0 in (0.0, 1.0):
            raise DegenerateTableError("log odds ratio undefined for a risk of 0 or 1")
        return math.log(p1 / (1 - p1)) - math.log(p0 / (1 - p0))


# --------------------------------------------------------------------------
# helpers


def _cells(table: DiscordantTable, continuity: bool):
    add = 0.5 if continuity else 0.0
    return table.t + add, table.u + add, table.v + add, table.w + add


def _as_discordant_table(data) -> DiscordantTable:
    if isinstance(data, DiscordantTable):
        return data
    if isinstance(data, AllPairSummary):
        if data.qd_hat < 1:
            raise DataError("summary contains exposure-concordant pairs; use its .discordant table")
        return data.discordant
    if isinstance(data, PairedCohort):
        return tabulate_discordant(data)
    raise ParameterError(f"expected a PairedCohort or DiscordantTable, got {type(data).__name__}")


def _as_summary(data) -> AllPairSummary:
    if isinstance(data, AllPairSummary):
        return data
    if isinstance(data, DiscordantTable):
        return AllPairSummary(discordant=data)
    if isinstance(data, PairedCohort):
        return tabulate_all(data)
    raise ParameterError(f"expected a PairedCohort or AllPairSummary, got {type(data).__name__}")


def _check_quad(order):
    if int(order) != order or order < 5:
        raise ParameterError(f"quadrature order must be an integer >= 5, got {order!r}")
    return hermite_rule(int(order))


# --------------------------------------------------------------------------
# discordant-pair methods


def fit_clr(table, continuity: bool = False) -> EstimateReport:
    """Conditional logistic regression for 1:1 pairs: ``log(u / v)``.

    Parameters
    ----------
    table : DiscordantTable or PairedCohort
    continuity : bool
        Add 0.5 to every cell before estimating.

    Raises
    ------
    IdentifiabilityError
        If ``u = v = 0`` (no outcome-discordant pairs).
    DegenerateTableError
        If exactly one of ``u``, ``v`` is zero; the estimate is infinite.
    """
    table = _as_discordant_table(table)
    t, u, v, w = _cells(table, continuity)
    if u == 0 and v == 0:
        raise IdentifiabilityError("no outcome-discordant pairs (u = v = 0); the conditional odds ratio is not identified")
    if u == 0 or v == 0:
        raise DegenerateTableError(
            f"u={table.u}, v={table.v}: the conditional estimate is infinite; "
            "report an exact confidence interval or use the continuity correction"
        )
    return EstimateReport(
        Method.CLR,
        Estimand.PSI_C,
        math.log(u / v),
        math.sqrt(1 / u + 1 / v),
        n_pairs=table.n,
        diagnostics={"continuity": continuity},
    )


def fit_crude_discordant(table, continuity: bool = False) -> EstimateReport:
    """Crude individual-level log odds ratio in exposure-discordant pairs.

    The standard error accounts for the within-pair correlation of outcomes
    through the term in ``n T - n11 n10``.
    """
    table = _as_discordant_table(table)
    t, u, v, w = _cells(table, continuity)
    n = t + u + v + w
    n11, n10, n01, n00 = u + t, v + t, v + w, u + w
    if min(n11, n10, n01, n00) == 0:
        raise DegenerateTableError(
            f"zero individual margin (n11={n11:g}, n10={n10:g}, n01={n01:g}, n00={n00:g}); crude log odds ratio undefined"
        )
    est = math.log(n11 * n00 / (n01 * n10))
    var = 1 / n11 + 1 / n01 + 1 / n10 + 1 / n00 - 2 * n * (n * t - n11 * n10) / (n11 * n00 * n01 * n10)
    if not var > 0:
        raise DegenerateTableError(f"non-positive variance estimate {var:g}")
    return EstimateReport(
        Method.CRUDE_DISCORDANT,
        Estimand.PSI_S,
        est,
        math.sqrt(var),
        n_pairs=table.n,
        nuisance={"p1_star": n11 / n, "p0_star": n10 / n},
        diagnostics={"continuity": continuity},
    )


def standardized_risks(table) -> StandardizedRisks:
    """Risks with and without exposure, standardized to the matched pairs."""
    table = _as_discordant_table(table)
    if table.n == 0:
        raise IdentifiabilityError("empty table")
    return StandardizedRisks(table.n11 / table.n, table.n10 / table.n)


def fit_mixed_discordant(data, quad_order: int = DEFAULT_QUAD_ORDER, tol: float = DEFAULT_TOL) -> EstimateReport:
    """Random-intercept logistic model fitted to exposure-discordant pairs.

    The pair intercept is ``b ~ N(theta, sigma^2)``; the marginal likelihood
    is integrated by adaptive Gauss-Hermite quadrature.  When ``sigma``
    collapses to zero the fit is reported at the boundary (diagnostic
    ``boundary``).  The standard error comes from the observed information.
    """
    table = _as_discordant_table(data)
    rule = _check_quad(quad_order)
    if table.u + table.v == 0:
        raise IdentifiabilityError("no outcome-discordant pairs (u = v = 0)")
    x = np.tile([1, 0], (4, 1))
    y = np.array([[1, 1], [1, 0], [0, 1], [0, 0]])
    counts = [table.t, table.u, table.v, table.w]
    model = PatternGlmm(x, y, counts, np.zeros(4, dtype=int), 1, rule)
    psi0 = math.log(table.u / table.v) if table.u > 0 and table.v > 0 else 0.0
    fit = fit_pattern_glmm(model, psi0=psi0, tol=tol)
    return _glmm_report(Method.MIXED_DISCORDANT, fit, table.n, ["theta"])


def _glmm_report(method, fit, n_pairs, level_names):
    var = float(fit.covariance[0, 0])
    if not math.isfinite(var) or var <= 0:
        raise EstimationError("observed information is not positive definite at the optimum")
    se = math.sqrt(var)
    nuisance = {name: float(v) for name, v in zip(level_names, fit.params[1:-1])}
    nuisance["sigma"] = fit.sigma
    return EstimateReport(
        method,
        Estimand.PSI_C,
        fit.psi,
        se,
        n_pairs=n_pairs,
        nuisance=nuisance,
        diagnostics={
            "converged": True,
            "iterations": fit.iterations,
            "max_grad": fit.max_grad,
            "boundary": fit.boundary,
            "loglik": fit.loglik,
        },
    )


def fit_explicit(cohort: PairedCohort, design: DesignSpec, tol: float = DEFAULT_TOL) -> EstimateReport:
    """Individual-level logistic model in explicit confounders plus exposure.

    Both members of every pair enter the likelihood.  Exposure is appended as
    the last regressor; its coefficient estimates ``psi_c``.  The headline
    standard error is the pair-clustered sandwich; the model-based one is in
    ``diagnostics['se_model']``.
    """
    if cohort.n_pairs == 0:
        raise DataError("empty cohort")
    feats = np.asarray(design.build(cohort), dtype=float)
    k = feats.shape[-1]
    if feats.shape[:2] != (cohort.n_pairs, 2):
        raise DataError("design must produce one feature vector per subject")
    X = np.concatenate([feats.reshape(-1, k), cohort.exposure.reshape(-1, 1).astype(float)], axis=1)
    y = cohort.outcome.reshape(-1)
    clusters = np.repeat(np.arange(cohort.n_pairs), 2)
    names = tuple(design.names) + ("exposure",)
    fit = fit_logistic(X, y, cluster_ids=clusters, names=names, tol=tol)
    return EstimateReport(
        Method.EXPLICIT,
        Estimand.PSI_C,
        float(fit.coefficients[-1]),
        float(fit.se_robust[-1]),
        n_pairs=cohort.n_pairs,
        nuisance={name: float(c) for name, c in zip(design.names, fit.coefficients[:-1])},
        diagnostics={
            "converged": fit.converged,
            "iterations": fit.iterations,
            "se_model": float(fit.se_model[-1]),
            "loglik": fit.loglik,
        },
    )


# --------------------------------------------------------------------------
# all-pair methods


def crude_all_variance(summary: AllPairSummary) -> float:
    """Pair-robust variance of the crude log odds ratio over all pairs.

    Per-pair estimating functions for the two outcome prevalences give the
    sandwich

    ``n var = 1/(2(1-q) a0) + 1/(2 q a1) + q00 k00 / (2 (1-q)^2 a0^2)
    + q11 k11 / (2 q^2 a1^2) - qd kd / (2 q (1-q) a0 a1)``

    with ``a_x = p_x (1 - p_x)`` and ``k`` the within-pair outcome
    cross-moments of each pair type, centred at the prevalence ``p_x`` of the
    members' exposure group.  When ``p_x`` equals the stratum mean (as for a
    purely discordant cohort) ``k`` is the within-pair covariance.
    """
    s = summary
    n = s.n_pairs
    q, q00, q11, qd = s.q_hat, s.q00_hat, s.q11_hat, s.qd_hat
    p0, p1 = s.p0_hat, s.p1_hat
    a0, a1 = p0 * (1 - p0), p1 * (1 - p1)
    k00 = s.c00_hat + (s.mean00 - p0) ** 2
    k11 = s.c11_hat + (s.mean11 - p1) ** 2
    m1, m0 = s.mean_d
    kd = s.cd_hat + (m1 - p1) * (m0 - p0)
    nvar = 1 / (2 * (1 - q) * a0) + 1 / (2 * q * a1)
    if q00 > 0:
        nvar += q00 * k00 / (2 * (1 - q) ** 2 * a0**2)
    if q11 > 0:
        nvar += q11 * k11 / (2 * q**2 * a1**2)
    if qd > 0:
        nvar -= qd * kd / (2 * q * (1 - q) * a0 * a1)
    return nvar / n


def fit_crude_all(summary) -> EstimateReport:
    """Crude log odds ratio over all individuals, ignoring the pairing.

    Consistent for the marginal log odds ratio ``psi_m``; the standard error
    is robust to outcome correlation within pairs.
    """
    s = _as_summary(summary)
    if s.n_pairs == 0:
        raise DataError("empty summary")
    r = s.r
    if (r == 0).any():
        raise DegenerateTableError(f"zero individual count in r = {r.tolist()}; crude log odds ratio undefined")
    for name, m in (("both-unexposed", s.q00_hat), ("both-exposed", s.q11_hat), ("exposure-discordant", s.qd_hat)):
        if m == 0:
            warnings.warn(f"no {name} pairs; their covariance term contributes 0", stacklevel=2)
    est = math.log(r[1, 1] * r[0, 0] / (r[0, 1] * r[1, 0]))
    var = crude_all_variance(s)
    if not var > 0:
        raise DegenerateTableError(f"non-positive variance estimate {var:g}")
    return EstimateReport(
        Method.CRUDE_ALL,
        Estimand.PSI_M,
        est,
        math.sqrt(var),
        n_pairs=s.n_pairs,
        nuisance={"p0": float(s.p0_hat), "p1": float(s.p1_hat), "q": float(s.q_hat)},
    )


_LEVEL_NAMES = {0: "m0", 1: "m0.5", 2: "m1"}


def fit_within_between(cohort: PairedCohort, form: str = "saturated", tol: float = DEFAULT_TOL) -> EstimateReport:
    """Logistic regression of each member's outcome on own and pair-mean exposure.

    ``form='linear'``: ``b0 + beta_W X_j + beta_B' xbar``.
    ``form='saturated'``: ``beta_W X_j + m(xbar)`` with a free intercept per
    observed level of ``xbar``.  The standard error is the pair-clustered
    sandwich.

    In the saturated form a level of ``xbar`` whose outcomes are all 0 or all
    1 only fixes its own intercept at infinity; such levels are dropped (they
    carry no information on ``beta_W``) and listed in the diagnostics.
    """
    if form not in ("linear", "saturated"):
        raise ParameterError(f"form must be 'linear' or 'saturated', got {form!r}")
    if cohort.n_pairs == 0:
        raise DataError("empty cohort")
    if not cohort.discordant.any():
        raise IdentifiabilityError("no exposure-discordant pairs; the within-pair effect is not identified")
    level = cohort.exposure.sum(axis=1)
    keep = np.ones(cohort.n_pairs, dtype=bool)
    dropped = []
    if form == "saturated":
        for lv in (0, 2):
            m = level == lv
            if m.any():
                ys = cohort.outcome[m]
                if ys.min() == ys.max():
                    keep &= ~m
                    dropped.append(_LEVEL_NAMES[lv])
    x = cohort.exposure[keep].astype(float)
    y = cohort.outcome[keep].reshape(-1)
    lv = np.repeat(level[keep], 2)
    present = sorted(set(level[keep].tolist()))
    xj = x.reshape(-1)
    if form == "linear":
        cols, names = [np.ones_like(xj), xj], ["beta0", "beta_W"]
        if len(present) > 1:
            cols.append(lv / 2.0)
            names.append("beta_B")
    else:
        cols, names = [xj], ["beta_W"]
        for l in present:
            cols.append((lv == l).astype(float))
            names.append(_LEVEL_NAMES[l])
    X = np.column_stack(cols)
    clusters = np.repeat(np.flatnonzero(keep), 2)
    fit = fit_logistic(X, y, cluster_ids=clusters, names=names, tol=tol)
    iw = names.index("beta_W")
    method = Method.WITHIN_BETWEEN_LINEAR if form == "linear" else Method.WITHIN_BETWEEN_SATURATED
    return EstimateReport(
        method,
        Estimand.BETA_W,
        float(fit.coefficients[iw]),
        float(fit.se_robust[iw]),
        n_pairs=cohort.n_pairs,
        nuisance={nm: float(c) for nm, c in zip(names, fit.coefficients) if nm != "beta_W"},
        diagnostics={
            "converged": fit.converged,
            "iterations": fit.iterations,
            "se_model": float(fit.se_model[iw]),
            "dropped_levels": dropped,
        },
    )


def _all_pair_patterns(s: AllPairSummary):
    d = s.discordant
    x = [[1, 0]] * 4 + [[0, 0]] * 3 + [[1, 1]] * 3
    y = [[1, 1], [1, 0], [0, 1], [0, 0]] + [[0, 0], [1, 0], [1, 1]] * 2
    counts = [d.t, d.u, d.v, d.w, *s.unexposed, *s.exposed]
    level = [1] * 4 + [0] * 3 + [2] * 3
    return np.array(x), np.array(y), np.array(counts), np.array(level)


def fit_mixed_all(data, variant: str = "within_between", quad_order: int = DEFAULT_QUAD_ORDER,
                  tol: float = DEFAULT_TOL, allow_naive: bool = False) -> EstimateReport:
    """Random-intercept logistic model fitted to all pairs.

    ``variant='within_between'`` models the pair intercept as
    ``m(xbar) + d`` with a free mean per level of the pair-mean exposure and
    ``d ~ N(0, sigma^2)``; this keeps ``psi_c`` consistent when the intercept
    depends on the exposure pattern.

    ``variant='naive'`` assumes the intercept ``b ~ N(theta, sigma^2)`` is
    independent of the exposures.  It is biased whenever that fails and is
    provided only to demonstrate that bias; it must be requested with
    ``allow_naive=True``.
    """
    if variant not in ("within_between", "naive"):
        raise ParameterError(f"variant must be 'within_between' or 'naive', got {variant!r}")
    if variant == "naive" and not allow_naive:
        raise ParameterError("the naive variant is a bias demonstration; pass allow_naive=True to use it")
    s = _as_summary(data)
    rule = _check_quad(quad_order)
    x, y, counts, level = _all_pair_patterns(s)
    if s.discordant.n == 0:
        raise IdentifiabilityError("no exposure-discordant pairs; m(xbar) and psi_c are not separately identified")
    if variant == "within_between":
        present = sorted(set(level[counts > 0].tolist()))
        remap = {l: i for i, l in enumerate(present)}
        lv = np.array([remap.get(l, 0) for l in level])
        names = [_LEVEL_NAMES[l] for l in present]
        method = Method.MIXED_ALL_WB
    else:
        lv = np.zeros_like(level)
        names = ["theta"]
        method = Method.MIXED_ALL_NAIVE
    model = PatternGlmm(x, y, counts, lv, len(names), rule)
    d = s.discordant
    psi0 = math.log(d.u / d.v) if d.u > 0 and d.v > 0 else 0.0
    fit = fit_pattern_glmm(model, psi0=psi0, tol=tol)
    return _glmm_report(method, fit, s.n_pairs, names)


# --------------------------------------------------------------------------
# tests


def wald_test(report: EstimateReport) -> WaldTest:
    """Two-sided Wald test of a zero log odds ratio."""
    if not report.se > 0:
        raise EstimationError("standard error must be positive for a Wald test")
    z = report.estimate / report.se
    return WaldTest(z, float(2 * stats.norm.sf(abs(z))))


def _xlogy_sum(counts, probs):
    out = 0.0
    for c, p in zip(counts, probs):
        if c > 0:
            out += c * math.log(p)
    return out


def lrt_discordant(table, hypothesis: str = "Hc_dagger") -> float:
    """Likelihood ratio statistic for no exposure effect in discordant pairs.

    The multinomial model for the four outcome patterns is restricted by

    ``Hc_dagger``: the two outcome-discordant patterns are equally likely;
    ``Hs_dagger``: the outcome prevalence is the same under exposure and
    non-exposure.

    Zero cells follow the ``0 log 0 = 0`` convention.
    """
    table = _as_discordant_table(table)
    n = table.n
    if n == 0:
        raise IdentifiabilityError("empty table")
    cells = (table.t, table.u, table.v, table.w)
    full = _xlogy_sum(cells, [c / n for c in cells])
    if hypothesis == "Hc_dagger":
        pooled = (table.u + table.v) / (2 * n)
        probs = (table.t / n, pooled, pooled, table.w / n)
    elif hypothesis == "Hs_dagger":
        # common prevalence pi and joint event probability p11
        p11 = table.t / n
        pi = p11 + (table.u + table.v) / (2 * n)
        probs = (p11, pi - p11, pi - p11, 1 - 2 * pi + p11)
    else:
        raise ParameterError(f"hypothesis must be 'Hc_dagger' or 'Hs_dagger', got {hypothesis!r}")
    return max(0.0, 2 * (full - _xlogy_sum(cells, probs)))
