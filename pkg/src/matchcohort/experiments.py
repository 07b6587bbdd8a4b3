"""Monte Carlo harness: repeated simulation and estimation with aggregation.

Replicate ``r`` of block ``k`` always draws from
``derive_seed_stream(seed, r, k)``, and results are reduced in replicate
order, so output does not depend on the number of worker processes.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import tabulate_all
from .errors import EstimationError, MatchCohortError, ParameterError
from .estimators import (
    DEFAULT_QUAD_ORDER,
    fit_clr,
    fit_crude_all,
    fit_crude_discordant,
    fit_explicit,
    fit_mixed_all,
    fit_mixed_discordant,
)
from .numerics import DesignSpec
from .simulation import (
    CovariateSimConfig,
    TwinSimConfig,
    clr_limit,
    derive_seed_stream,
    generate_covariate_sample,
    generate_discordant_outcome_sample,
    generate_twin_sample,
    marginal_psi_m,
    standardized_psi,
    true_psi,
)

logger = logging.getLogger(__name__)

__all__ = [
    "McSummary",
    "PowerCurve",
    "ReplicateSet",
    "ExperimentReport",
    "simulate_methods",
    "summarize",
    "run_table2",
    "run_power_curve",
    "run_sensitivity_suite",
    "run_wald_agreement",
    "TABLE2_METHODS",
    "POWER_METHODS",
    "TABLE2_REFERENCE",
    "MAX_FAILURE_RATE",
    "summaries_to_tsv",
    "to_json_text",
]

MAX_FAILURE_RATE = 0.01
BAND_K = 3.0

# method keys -> estimand
ESTIMANDS = {
    "explicit": "psi_c",
    "explicit_vw": "psi_c",
    "explicit_vw_interaction": "psi_c",
    "clr": "psi_c",
    "mixed_discordant": "psi_c",
    "crude_discordant": "psi_s",
    "crude_all": "psi_m",
    "mixed_all_wb": "psi_c",
    "mixed_all_naive": "psi_c",
}

TABLE2_METHODS = ("explicit", "clr", "mixed_discordant", "crude_discordant", "crude_all", "mixed_all_wb")
POWER_METHODS = ("explicit", "clr", "mixed_discordant", "crude_discordant", "mixed_all_wb")

# published reference values at phi = 4, psi_c = 0: (mean, empirical se)
TABLE2_REFERENCE = {
    "explicit": (0.0, 0.13),
    "clr": (0.0, 0.13),
    "mixed_discordant": (0.0, 0.13),
    "crude_discordant": (0.0, 0.11),
    "crude_all": (1.28, 0.08),
    "mixed_all_wb": (0.0, 0.12),
}

# published sensitivity means and acceptance half-widths: (mean, band)
SENSITIVITY_REFERENCE = {
    "naive_mixed_all": {"mixed_all_naive": (1.32, 0.05)},
    "outcome_dependence": {"clr": (1.35, 0.04), "mixed_discordant": (1.26, 0.05), "crude_discordant": (0.97, 0.04)},
    "covariate_explicit": {"explicit_vw": (0.69, 0.05), "explicit_vw_interaction": (1.3, 0.05)},
    "covariate_mixed": {"mixed_discordant": (1.30, 0.05)},
}

_DESIGNS = {
    "explicit": DesignSpec.from_covariates(["b"]),
    "explicit_vw": DesignSpec.from_covariates(["V", "W"]),
    "explicit_vw_interaction": DesignSpec.from_covariates(["V", "W"], interactions=[("V", "W")]),
}


# --------------------------------------------------------------------------
# replicate engine


def _generate(model, params, rng):
    if model == "twin":
        return generate_twin_sample(TwinSimConfig(**params), rng, keep_latent=True)
    if model == "discordant_outcome":
        return generate_discordant_outcome_sample(params["p"], params["q"], params["c"], params["n_pairs"], rng)
    if model == "covariate":
        return generate_covariate_sample(CovariateSimConfig(**params), rng)
    raise ParameterError(f"unknown simulation model {model!r}")


def _estimate(method, cohort, summary, quad_order):
    table = summary.discordant
    if method == "explicit":
        # discordant pairs only, regressing on the latent intercept
        return fit_explicit(cohort.subset(cohort.discordant), _DESIGNS[method])
    if method in ("explicit_vw", "explicit_vw_interaction"):
        return fit_explicit(cohort, _DESIGNS[method])
    if method == "clr":
        return fit_clr(table)
    if method == "mixed_discordant":
        return fit_mixed_discordant(table, quad_order=quad_order)
    if method == "crude_discordant":
        return fit_crude_discordant(table)
    if method == "crude_all":
        return fit_crude_all(summary)
    if method == "mixed_all_wb":
        return fit_mixed_all(summary, quad_order=quad_order)
    if method == "mixed_all_naive":
        return fit_mixed_all(summary, "naive", quad_order=quad_order, allow_naive=True)
    raise ParameterError(f"unknown method {method!r}")


def _replicate(job):
    model, params, methods, seed, block, index, quad_order = job
    cohort = _generate(model, params, derive_seed_stream(seed, index, block))
    summary = tabulate_all(cohort)
    est = np.full(len(methods), np.nan)
    se = np.full(len(methods), np.nan)
    errors = [""] * len(methods)
    for k, m in enumerate(methods):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                rep = _estimate(m, cohort, summary, quad_order)
            est[k], se[k] = rep.estimate, rep.se
        except MatchCohortError as exc:
            errors[k] = type(exc).__name__
    return est, se, errors


@dataclass
class ReplicateSet:
    """Per-replicate estimates and standard errors (NaN where a fit failed)."""

    methods: tuple
    estimates: np.ndarray
    ses: np.ndarray
    errors: list

    @property
    def replicates(self) -> int:
        return self.estimates.shape[0]

    def column(self, method):
        k = self.methods.index(method)
        return self.estimates[:, k], self.ses[:, k]

    def failures(self, method) -> int:
        k = self.methods.index(method)
        return int(np.count_nonzero(np.isnan(self.estimates[:, k])))

    def check_failures(self, max_rate: float = MAX_FAILURE_RATE):
        for m in self.methods:
            f = self.failures(m)
            if f:
                kinds = sorted({e[self.methods.index(m)] for e in self.errors if e[self.methods.index(m)]})
                logger.warning("%s: %d of %d replicates failed (%s)", m, f, self.replicates, ", ".join(kinds))
            if f and f / self.replicates >= max_rate:
                raise EstimationError(
                    f"{m}: {f} of {self.replicates} replicates failed ({f / self.replicates:.1%} >= {max_rate:.0%}); aborting"
                )


def simulate_methods(model: str, params: dict, methods, replicates: int, seed: int = 0, block: int = 0,
                     workers: int = 1, quad_order: int = DEFAULT_QUAD_ORDER) -> ReplicateSet:
    """Simulate ``replicates`` datasets and apply each method to every one.

    Parameters
    ----------
    model : {'twin', 'discordant_outcome', 'covariate'}
    params : dict
        Keyword arguments of the model's configuration (``n_pairs`` included).
    methods : sequence of str
        Keys of :data:`ESTIMANDS`.
    workers : int
        Number of worker processes; results are identical for any value.
    """
    methods = tuple(methods)
    unknown = [m for m in methods if m not in ESTIMANDS]
    if unknown:
        raise ParameterError(f"unknown method(s): {', '.join(unknown)}")
    if replicates < 1:
        raise ParameterError("replicates must be at least 1")
    jobs = [(model, dict(params), methods, int(seed), int(block), r, quad_order) for r in range(replicates)]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_replicate, jobs, chunksize=max(1, replicates // (4 * workers))))
    else:
        out = [_replicate(j) for j in jobs]
    est = np.array([o[0] for o in out]).reshape(replicates, len(methods))
    se = np.array([o[1] for o in out]).reshape(replicates, len(methods))
    return ReplicateSet(methods, est, se, [o[2] for o in out])


# --------------------------------------------------------------------------
# summaries


@dataclass
class McSummary:
    """Monte Carlo summary of one method.

    ``target`` is the published reference mean, ``oracle`` the analytic
    limit when available, ``reference_se`` the published empirical standard
    error (NaN if none).  The mean passes when it lies within ``band`` of the
    target, or within 3 MC standard errors when ``band`` is NaN.
    """

    method: str
    estimand: str
    target: float
    mean_estimate: float
    empirical_se: float
    mean_theoretical_se: float
    rejection_rate: float
    replicates: int
    failures: int = 0
    oracle: float = math.nan
    reference_se: float = math.nan
    band: float = math.nan

    @property
    def mc_se_of_mean(self) -> float:
        return self.empirical_se / math.sqrt(self.replicates) if self.replicates > 1 else math.nan

    @property
    def degenerate(self) -> bool:
        return not math.isfinite(self.empirical_se)

    def mean_ok(self, k: float = BAND_K) -> bool:
        width = self.band if math.isfinite(self.band) else k * self.mc_se_of_mean
        return abs(self.mean_estimate - self.target) <= width

    def empirical_se_ok(self, rel: float = 0.15) -> bool:
        return abs(self.empirical_se - self.reference_se) <= rel * self.reference_se

    def theoretical_se_ok(self, rel: float = 0.10) -> bool:
        return abs(self.mean_theoretical_se - self.empirical_se) <= rel * self.empirical_se

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["mc_se_of_mean"] = self.mc_se_of_mean
        bad = self.degenerate
        rec["pass_mean"] = None if bad and not math.isfinite(self.band) else self.mean_ok()
        rec["pass_theoretical_se"] = None if bad else self.theoretical_se_ok()
        if math.isfinite(self.reference_se):
            rec["pass_empirical_se"] = None if bad else self.empirical_se_ok()
        return rec


def summarize(reps: ReplicateSet, method: str, target: float, oracle: float = math.nan,
              reference_se: float = math.nan, band: float = math.nan) -> McSummary:
    est, se = reps.column(method)
    ok = ~np.isnan(est)
    m = int(ok.sum())
    z = est[ok] / se[ok]
    return McSummary(
        method=method,
        estimand=ESTIMANDS[method],
        target=float(target),
        mean_estimate=float(est[ok].mean()) if m else math.nan,
        empirical_se=float(est[ok].std(ddof=1)) if m > 1 else math.nan,
        mean_theoretical_se=float(se[ok].mean()) if m else math.nan,
        rejection_rate=float(np.mean(np.abs(z) > 1.959963984540054)) if m else math.nan,
        replicates=m,
        failures=reps.replicates - m,
        oracle=float(oracle),
        reference_se=float(reference_se),
        band=float(band),
    )


@dataclass
class ExperimentReport:
    """Named collection of summaries plus scalar extras and the configuration."""

    name: str
    summaries: list
    config: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def summary(self, method) -> McSummary:
        for s in self.summaries:
            if s.method == method:
                return s
        raise KeyError(method)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "config": self.config,
            "extras": self.extras,
            "summaries": [s.to_record() for s in self.summaries],
        }


def _check_replicates(replicates):
    if replicates < 1:
        raise ParameterError("replicates must be at least 1")
    if replicates < 100:
        warnings.warn(f"only {replicates} replicate(s); Monte Carlo bands are unreliable", stacklevel=3)
    if replicates < 2:
        warnings.warn("fewer than 2 replicates: empirical standard errors are undefined", stacklevel=3)


def _run(model, params, methods, replicates, seed, block, workers, quad_order):
    reps = simulate_methods(model, params, methods, replicates, seed, block, workers, quad_order)
    reps.check_failures()
    return reps


# --------------------------------------------------------------------------
# experiments


def run_table2(replicates: int = 500, n_pairs: int = 2000, seed: int = 0, workers: int = 1,
               quad_order: int = DEFAULT_QUAD_ORDER, phi: float = 4.0) -> ExperimentReport:
    """All six methods on twin data with ``psi_c = 0`` and exposure odds ratio ``phi``.

    The explicit model is fitted to the discordant pairs with the latent pair
    intercept as its only confounder.  ``extras['mean_abs_tc_ts']`` is the
    mean absolute difference between the CLR and crude-discordant Wald
    statistics.
    """
    _check_replicates(replicates)
    cfg = TwinSimConfig(phi=phi, psi_c=0.0, n_pairs=n_pairs)
    params = {"phi": phi, "psi_c": 0.0, "n_pairs": n_pairs}
    reps = _run("twin", params, TABLE2_METHODS, replicates, seed, 0, workers, quad_order)
    oracles = {"crude_all": marginal_psi_m(cfg), "crude_discordant": standardized_psi(cfg)}
    summaries = []
    for m in TABLE2_METHODS:
        target, ref_se = TABLE2_REFERENCE[m] if phi == 4.0 else (oracles.get(m, 0.0), math.nan)
        summaries.append(summarize(reps, m, target, oracles.get(m, 0.0), ref_se))
    tc = reps.column("clr")
    ts = reps.column("crude_discordant")
    diff = np.abs(tc[0] / tc[1] - ts[0] / ts[1])
    extras = {"mean_abs_tc_ts": float(np.nanmean(diff)) if np.isfinite(diff).any() else math.nan}
    config = {"replicates": replicates, "n_pairs": n_pairs, "seed": seed, "phi": phi, "psi_c": 0.0,
              "theta": cfg.theta_value, "quad_order": quad_order}
    return ExperimentReport("table2", summaries, config, extras)


@dataclass
class PowerCurve:
    """Wald rejection rates over a grid; ``rates[i, k]`` is grid point ``i``, method ``k``."""

    variable: str
    grid: np.ndarray
    methods: tuple
    rates: np.ndarray
    replicates: np.ndarray
    config: dict = field(default_factory=dict)

    def mc_se(self) -> np.ndarray:
        """Binomial Monte Carlo standard error of each rate."""
        p = self.rates
        return np.sqrt(p * (1 - p) / self.replicates)

    def pooled_mc_se(self) -> np.ndarray:
        """Binomial MC standard error at each grid point using the across-method mean rate."""
        p = self.rates.mean(axis=1)
        return np.sqrt(p * (1 - p) / self.replicates.min(axis=1))

    def max_pairwise_difference(self) -> np.ndarray:
        return self.rates.max(axis=1) - self.rates.min(axis=1)

    def exchangeable(self, k: float = 2.0) -> np.ndarray:
        return self.max_pairwise_difference() <= k * self.pooled_mc_se()

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.variable, "method", "rejection_rate", "mc_se", "replicates"])
        se = self.mc_se()
        for i, g in enumerate(self.grid):
            for k, m in enumerate(self.methods):
                w.writerow([_fmt(g), m, _fmt(self.rates[i, k]), _fmt(se[i, k]), int(self.replicates[i, k])])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "variable": self.variable,
            "grid": [float(g) for g in self.grid],
            "methods": list(self.methods),
            "rates": self.rates.tolist(),
            "mc_se": self.mc_se().tolist(),
            "replicates": self.replicates.tolist(),
            "max_pairwise_difference": self.max_pairwise_difference().tolist(),
            "exchangeable": self.exchangeable().tolist(),
            "config": self.config,
        }


def run_power_curve(sweep: str, grid, replicates: int = 500, n_pairs: int = 2000, seed: int = 0,
                    psi_c_fixed: float = 0.4, phi_fixed: float = 4.0, methods=POWER_METHODS,
                    workers: int = 1, quad_order: int = DEFAULT_QUAD_ORDER) -> PowerCurve:
    """Rejection rate of the two-sided 5% Wald test across a parameter grid.

    ``sweep='psi_c_grid'`` varies ``psi_c`` at ``phi = phi_fixed``;
    ``sweep='phi_grid'`` varies ``phi`` at ``psi_c = psi_c_fixed``.  Grid
    point ``i`` uses seed block ``i + 1``.
    """
    if sweep not in ("psi_c_grid", "phi_grid"):
        raise ParameterError(f"sweep must be 'psi_c_grid' or 'phi_grid', got {sweep!r}")
    grid = np.asarray(grid, dtype=float).reshape(-1)
    if grid.size == 0:
        raise ParameterError("grid must be nonempty")
    _check_replicates(replicates)
    methods = tuple(methods)
    rates = np.empty((grid.size, len(methods)))
    counts = np.empty((grid.size, len(methods)), dtype=int)
    for i, g in enumerate(grid):
        if sweep == "psi_c_grid":
            params = {"phi": phi_fixed, "psi_c": float(g), "n_pairs": n_pairs}
        else:
            params = {"phi": float(g), "psi_c": psi_c_fixed, "n_pairs": n_pairs}
        TwinSimConfig(**params)
        reps = _run("twin", params, methods, replicates, seed, i + 1, workers, quad_order)
        for k, m in enumerate(methods):
            s = summarize(reps, m, 0.0)
            rates[i, k] = s.rejection_rate
            counts[i, k] = s.replicates
    variable = "psi_c" if sweep == "psi_c_grid" else "phi"
    config = {"sweep": sweep, "replicates": replicates, "n_pairs": n_pairs, "seed": seed,
              "quad_order": quad_order}
    config.update({"phi": phi_fixed} if sweep == "psi_c_grid" else {"psi_c": psi_c_fixed})
    return PowerCurve(variable, grid, methods, rates, counts, config)


def run_sensitivity_suite(replicates: int = 500, n_pairs: int = 2000, seed: int = 0, workers: int = 1,
                          quad_order: int = DEFAULT_QUAD_ORDER, p: float = 0.3, q: float = 0.1,
                          c: float = 4.0) -> dict:
    """Four experiments where a method's assumptions are violated.

    ``naive_mixed_all``
        all-pair mixed model whose intercept ignores the exposure pattern,
        on twin data with ``phi = 4``, ``psi_c = 0``;
    ``outcome_dependence``
        discordant pairs with outcome cross-ratio ``c`` given the risks
        ``p`` (exposed) and ``q`` (unexposed);
    ``covariate_explicit``
        explicit model omitting (and including) the ``V*W`` interaction of
        the observed-confounder model;
    ``covariate_mixed``
        discordant-pair mixed model on the same data, whose true intercept is
        not normal.
    """
    _check_replicates(replicates)
    out = {}

    target, band = SENSITIVITY_REFERENCE["naive_mixed_all"]["mixed_all_naive"]
    reps = _run("twin", {"phi": 4.0, "psi_c": 0.0, "n_pairs": n_pairs}, ("mixed_all_naive",),
                replicates, seed, 101, workers, quad_order)
    out["naive_mixed_all"] = ExperimentReport(
        "naive_mixed_all",
        [summarize(reps, "mixed_all_naive", target, 0.0, band=band)],
        {"model": "twin", "phi": 4.0, "psi_c": 0.0},
    )

    methods = ("clr", "mixed_discordant", "crude_discordant")
    reps = _run("discordant_outcome", {"p": p, "q": q, "c": c, "n_pairs": n_pairs}, methods,
                replicates, seed, 102, workers, quad_order)
    lim, truth = clr_limit(p, q), true_psi(p, q, c)
    ref = SENSITIVITY_REFERENCE["outcome_dependence"] if (p, q, c) == (0.3, 0.1, 4.0) else {}
    oracles = {"clr": lim, "mixed_discordant": lim, "crude_discordant": truth}
    rows = []
    for m in methods:
        target, band = ref.get(m, (oracles[m], math.nan))
        rows.append(summarize(reps, m, target, oracles[m], band=band))
    out["outcome_dependence"] = ExperimentReport(
        "outcome_dependence",
        rows,
        {"model": "discordant_outcome", "p": p, "q": q, "c": c},
        {"clr_limit": lim, "true_psi": truth},
    )

    cov_methods = ("explicit_vw", "explicit_vw_interaction", "mixed_discordant")
    reps = _run("covariate", {"n_pairs": n_pairs}, cov_methods, replicates, seed, 103, workers, quad_order)
    cfg = CovariateSimConfig()
    ref = SENSITIVITY_REFERENCE["covariate_explicit"]
    out["covariate_explicit"] = ExperimentReport(
        "covariate_explicit",
        [summarize(reps, m, ref[m][0], cfg.psi_c, band=ref[m][1]) for m in ("explicit_vw", "explicit_vw_interaction")],
        {"model": "covariate", "alpha": list(cfg.alpha), "gamma": list(cfg.gamma), "psi_c": cfg.psi_c},
    )
    target, band = SENSITIVITY_REFERENCE["covariate_mixed"]["mixed_discordant"]
    out["covariate_mixed"] = ExperimentReport(
        "covariate_mixed",
        [summarize(reps, "mixed_discordant", target, cfg.psi_c, band=band)],
        {"model": "covariate", "alpha": list(cfg.alpha), "gamma": list(cfg.gamma), "psi_c": cfg.psi_c},
    )
    for r in out.values():
        r.config.update({"replicates": replicates, "n_pairs": n_pairs, "seed": seed})
    return out


def run_wald_agreement(replicates: int = 2000, n_pairs: int = 2000, seed: int = 0, workers: int = 1,
                       phi: float = 4.0, p: float = 0.2, q: float = 0.2, c: float = 4.0) -> dict:
    """Null behaviour of the CLR and crude-discordant Wald statistics.

    On twin data with ``psi_c = 0`` reports the mean absolute difference of
    the two statistics; on discordant pairs with equal risks ``p = q`` but
    dependent outcomes (cross-ratio ``c``) reports the CLR mean estimate.
    """
    _check_replicates(replicates)
    reps = _run("twin", {"phi": phi, "psi_c": 0.0, "n_pairs": n_pairs}, ("clr", "crude_discordant"),
                replicates, seed, 201, workers, DEFAULT_QUAD_ORDER)
    tc = reps.column("clr")
    ts = reps.column("crude_discordant")
    diff = np.abs(tc[0] / tc[1] - ts[0] / ts[1])
    dep = _run("discordant_outcome", {"p": p, "q": q, "c": c, "n_pairs": n_pairs}, ("clr",),
               replicates, seed, 202, workers, DEFAULT_QUAD_ORDER)
    clr = summarize(dep, "clr", clr_limit(p, q), clr_limit(p, q))
    return {
        "mean_abs_tc_ts": float(np.nanmean(diff)),
        "max_abs_tc_ts": float(np.nanmax(diff)),
        "null_dependent_clr": clr,
        "config": {"replicates": replicates, "n_pairs": n_pairs, "seed": seed, "phi": phi, "p": p, "q": q, "c": c},
    }


# --------------------------------------------------------------------------
# output


def _fmt(v):
    if v is None:
        return "na"
    if isinstance(v, (bool, np.bool_)):
        return "pass" if v else "FAIL"
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else f"{float(v):.6g}"
    return str(v)


def summaries_to_tsv(summaries) -> str:
    """One row per method, with MC-band pass marks."""
    rows = [s.to_record() for s in summaries]
    cols = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    lines = ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join(_fmt(r[k]) if k in r else "" for k in cols))
    return "\n".join(lines) + "\n"


def _clean(o):
    # NaN and infinities are not valid JSON
    if isinstance(o, float) and not math.isfinite(o):
        return None
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    return o


def to_json_text(obj) -> str:
    """JSON text with NaN written as null."""

    def default(o):
        if isinstance(o, McSummary):
            return o.to_record()
        if isinstance(o, (ExperimentReport, PowerCurve)):
            return o.to_json()
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer, np.bool_)):
            return o.item()
        raise TypeError(f"not serializable: {type(o).__name__}")

    plain = json.loads(json.dumps(obj, default=default))
    return json.dumps(_clean(plain), indent=2, sort_keys=True, allow_nan=False) + "\n"
