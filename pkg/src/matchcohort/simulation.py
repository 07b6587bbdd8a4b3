"""Generative models for twin and matched-pair data, plus analytic targets.

Three families are provided:

* twin pairs whose exposure pattern has odds ratio ``phi`` and whose shared
  random intercept is ``b ~ N(theta * xbar, sigma^2)``;
* exposure-discordant pairs whose outcome pair is parameterized by the
  conditional risks ``p``, ``q`` and the outcome cross-ratio ``c``;
* twin pairs with an observed confounder ``Z = (V, W)`` acting on both
  exposure and outcome through logistic models with a ``V*W`` interaction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from .data import PairedCohort
from .errors import ParameterError
from .numerics import hermite_rule

__all__ = [
    "ExposureJoint",
    "TwinSimConfig",
    "OutcomeJoint",
    "CovariateSimConfig",
    "solve_exposure_joint",
    "theta_independence",
    "generate_twin_sample",
    "marginal_psi_m",
    "standardized_psi",
    "solve_outcome_joint",
    "clr_limit",
    "true_psi",
    "clr_weighted_limit",
    "generate_discordant_outcome_sample",
    "generate_covariate_sample",
    "derive_seed_stream",
]


# --------------------------------------------------------------------------
# exposure pattern


@dataclass(frozen=True)
class ExposureJoint:
    """Probabilities of the exposure patterns ``(X1, X2)``."""

    p00: float
    p01: float
    p10: float
    p11: float

    @property
    def probabilities(self) -> np.ndarray:
        """In the order 00, 01, 10, 11."""
        return np.array([self.p00, self.p01, self.p10, self.p11])

    @property
    def discordance(self) -> float:
        return self.p01 + self.p10

    @property
    def odds_ratio(self) -> float:
        return self.p11 * self.p00 / (self.p01 * self.p10)

    @property
    def exposure_prevalence(self) -> float:
        return self.p11 + self.p10


def solve_exposure_joint(rho: float, phi: float) -> ExposureJoint:
    """Exposure-pattern distribution with discordance odds ``rho`` and odds ratio ``phi``.

    ``rho = p10 / p00 = p01 / p00`` and ``phi = p11 p00 / (p10 p01)`` give
    ``p00 = 1 / (1 + 2 rho + phi rho^2)``.
    """
    if not (rho > 0 and phi > 0 and math.isfinite(rho) and math.isfinite(phi)):
        raise ParameterError(f"rho and phi must be positive and finite, got rho={rho!r}, phi={phi!r}")
    p00 = 1.0 / (1.0 + 2.0 * rho + phi * rho * rho)
    p10 = rho * p00
    return ExposureJoint(p00=p00, p01=p10, p10=p10, p11=phi * rho * rho * p00)


def theta_independence(phi: float) -> float:
    """Random-effect slope making ``X1`` and ``X2`` independent given ``b``.

    With ``b | X1, X2 ~ N(theta * xbar, 1)`` the conditional cross-ratio of
    the exposures is ``phi * exp(-theta^2 / 4)``; it equals one at
    ``theta = 2 sqrt(log phi)``.
    """
    if not phi >= 1:
        raise ParameterError(f"phi must be >= 1 for a real solution, got {phi!r}")
    return 2.0 * math.sqrt(math.log(phi))


# --------------------------------------------------------------------------
# twin model


@dataclass(frozen=True)
class TwinSimConfig:
    """Twin generative model.

    ``theta=None`` selects ``theta_independence(phi)``.  ``sigma`` is the
    standard deviation of the random intercept given the exposure pattern.
    """

    phi: float = 4.0
    psi_c: float = 0.0
    n_pairs: int = 2000
    rho: float = 0.5
    theta: float | None = None
    sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ParameterError("n_pairs must be at least 1")
        if not self.sigma >= 0:
            raise ParameterError("sigma must be nonnegative")
        solve_exposure_joint(self.rho, self.phi)
        if self.theta is None:
            theta_independence(self.phi)

    @property
    def theta_value(self) -> float:
        return theta_independence(self.phi) if self.theta is None else float(self.theta)

    @property
    def exposure_joint(self) -> ExposureJoint:
        return solve_exposure_joint(self.rho, self.phi)


_PATTERNS = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.int8)


def _pair_ids(n):
    return tuple(str(i) for i in range(1, n + 1))


def generate_twin_sample(config: TwinSimConfig, rng=None, keep_latent: bool = False) -> PairedCohort:
    """Draw ``config.n_pairs`` twin pairs.

    Per pair: the exposure pattern from :func:`solve_exposure_joint`, then
    ``b ~ N(theta * xbar, sigma^2)``, then independent outcomes with
    ``logit P(Y_j = 1) = b + psi_c * X_j``.  With ``keep_latent`` the
    intercept is returned as covariate ``"b"``.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    n = config.n_pairs
    k = rng.choice(4, size=n, p=config.exposure_joint.probabilities)
    x = _PATTERNS[k]
    b = config.theta_value * x.mean(axis=1) + config.sigma * rng.standard_normal(n)
    eta = b[:, None] + config.psi_c * x
    y = (rng.random((n, 2)) < expit(eta)).astype(np.int8)
    cov = {"b": np.repeat(b[:, None], 2, axis=1)} if keep_latent else {}
    return PairedCohort(_pair_ids(n), x, y, cov, source="twin simulation")


def _mean_expit(mean, sd, order=80):
    return hermite_rule(order).expect_normal(expit, mean, sd)


def marginal_psi_m(config: TwinSimConfig, order: int = 80) -> float:
    """Population log odds ratio of an individual's outcome on own exposure.

    ``P(Y=1 | X=x)`` mixes ``E expit(b + psi_c x)`` over the exposure
    pattern of the pair given the individual's own exposure.
    """
    ej = config.exposure_joint
    th, s, psi = config.theta_value, config.sigma, config.psi_c
    disc = _mean_expit(0.5 * th, s, order)
    disc1 = _mean_expit(0.5 * th + psi, s, order)
    p1 = (ej.p11 * _mean_expit(th + psi, s, order) + ej.p10 * disc1) / (ej.p11 + ej.p10)
    p0 = (ej.p00 * _mean_expit(0.0, s, order) + ej.p01 * disc) / (ej.p00 + ej.p01)
    return float(logit(p1) - logit(p0))


def standardized_psi(config: TwinSimConfig, order: int = 80) -> float:
    """Log odds ratio standardized to the exposure-discordant pairs."""
    th, s = config.theta_value, config.sigma
    p1 = _mean_expit(0.5 * th + config.psi_c, s, order)
    p0 = _mean_expit(0.5 * th, s, order)
    return float(logit(p1) - logit(p0))


# --------------------------------------------------------------------------
# outcome dependence model for discordant pairs


@dataclass(frozen=True)
class OutcomeJoint:
    """Distribution of ``(Y_exposed, Y_unexposed)`` in discordant pairs.

    ``pi10`` is the probability that only the exposed member has the event.
    """

    pi00: float
    pi01: float
    pi10: float
    pi11: float
    p: float
    q: float
    c: float

    @property
    def probabilities(self) -> np.ndarray:
        """In the order (t, u, v, w): 11, 10, 01, 00."""
        return np.array([self.pi11, self.pi10, self.pi01, self.pi00])


def _check_unit(**kw):
    for k, v in kw.items():
        if not 0 < v < 1:
            raise ParameterError(f"{k} must lie strictly between 0 and 1, got {v!r}")


def solve_outcome_joint(p: float, q: float, c: float) -> OutcomeJoint:
    """Joint outcome law with ``P(Y_e=1 | Y_u=0) = p``, ``P(Y_u=1 | Y_e=0) = q``
    and cross-ratio ``pi11 pi00 / (pi10 pi01) = c``."""
    _check_unit(p=p, q=q)
    if not (c > 0 and math.isfinite(c)):
        raise ParameterError(f"c must be positive and finite, got {c!r}")
    odds_p, odds_q = p / (1 - p), q / (1 - q)
    raw = np.array([1.0, odds_q, odds_p, c * odds_p * odds_q])
    pi = raw / raw.sum()
    return OutcomeJoint(pi00=pi[0], pi01=pi[1], pi10=pi[2], pi11=pi[3], p=p, q=q, c=c)


def clr_limit(p: float, q: float) -> float:
    """Probability limit of the conditional logistic estimate, ``log{p(1-q)/(q(1-p))}``."""
    _check_unit(p=p, q=q)
    return math.log(p * (1 - q) / (q * (1 - p)))


def true_psi(p: float, q: float, c: float) -> float:
    """Marginal (= standardized = conditional) log odds ratio of the outcome model."""
    _check_unit(p=p, q=q)
    if not c > 0:
        raise ParameterError(f"c must be positive, got {c!r}")
    return clr_limit(p, q) + math.log((1 - q + q * c) / (1 - p + p * c))


def clr_weighted_limit(risk_exposed, risk_unexposed, weights=None) -> float:
    """Limit of the conditional logistic estimate under heterogeneous odds ratios.

    For confounder levels with risks ``P(Y=1 | X=1, Z)`` and
    ``P(Y=1 | X=0, Z)`` and matched-sample weights ``P*(Z)``, returns
    ``log E*[W(Z) OR_c(Z)]``, where ``W`` is proportional to
    ``P(Y=1 | X=0, Z) P(Y=0 | X=1, Z)``.  Verifiable by simulation only: the
    risks are not estimable from paired data without ``Z``.
    """
    r1 = np.asarray(risk_exposed, dtype=float)
    r0 = np.asarray(risk_unexposed, dtype=float)
    w = np.ones_like(r1) / r1.size if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    return float(math.log(np.sum(w * r1 * (1 - r0)) / np.sum(w * r0 * (1 - r1))))


def generate_discordant_outcome_sample(p: float, q: float, c: float, n_pairs: int, rng=None) -> PairedCohort:
    """Exposure-discordant pairs with outcomes drawn from :func:`solve_outcome_joint`.

    Member 1 is the exposed twin.
    """
    if n_pairs < 1:
        raise ParameterError("n_pairs must be at least 1")
    rng = np.random.default_rng() if rng is None else rng
    oj = solve_outcome_joint(p, q, c)
    k = rng.choice(4, size=n_pairs, p=oj.probabilities)
    # t, u, v, w -> (Y_exposed, Y_unexposed)
    y = np.array([[1, 1], [1, 0], [0, 1], [0, 0]], dtype=np.int8)[k]
    x = np.tile(np.array([1, 0], dtype=np.int8), (n_pairs, 1))
    return PairedCohort(_pair_ids(n_pairs), x, y, source="discordant outcome simulation")


# --------------------------------------------------------------------------
# observed-confounder model


@dataclass(frozen=True)
class CovariateSimConfig:
    """Logistic exposure and outcome models in ``(1, V, W, V*W)``."""

    alpha: tuple = (2.0, 1.0, 1.0, -1.5)
    gamma: tuple = (-2.0, -1.0, -1.0, 1.5)
    psi_c: float = 1.3
    n_pairs: int = 2000
    seed: int = 0

    def __post_init__(self):
        if len(self.alpha) != 4 or len(self.gamma) != 4:
            raise ParameterError("alpha and gamma must have four components")
        if not all(math.isfinite(v) for v in (*self.alpha, *self.gamma, self.psi_c)):
            raise ParameterError("parameters must be finite")
        if self.n_pairs < 1:
            raise ParameterError("n_pairs must be at least 1")


def generate_covariate_sample(config: CovariateSimConfig, rng=None, keep_latent: bool = False) -> PairedCohort:
    """Twin pairs sharing ``V ~ N(0,1)`` and ``W ~ Bernoulli(0.5)``.

    Exposures are independent given ``(V, W)``; outcomes are independent
    given exposure and ``(V, W)``.  ``V`` and ``W`` are returned as observed
    covariates (and the intercept as ``"b"`` with ``keep_latent``).
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    n = config.n_pairs
    v = rng.standard_normal(n)
    w = (rng.random(n) < 0.5).astype(float)
    design = np.column_stack([np.ones(n), v, w, v * w])
    lin_x = design @ np.asarray(config.alpha, dtype=float)
    x = (rng.random((n, 2)) < expit(lin_x)[:, None]).astype(np.int8)
    b = design @ np.asarray(config.gamma, dtype=float)
    y = (rng.random((n, 2)) < expit(b[:, None] + config.psi_c * x)).astype(np.int8)
    cov = {"V": np.repeat(v[:, None], 2, axis=1), "W": np.repeat(w[:, None], 2, axis=1)}
    if keep_latent:
        cov["b"] = np.repeat(b[:, None], 2, axis=1)
    return PairedCohort(_pair_ids(n), x, y, cov, source="covariate simulation")


# --------------------------------------------------------------------------
# reproducible streams


def derive_seed_stream(master_seed: int, replicate_index: int, block: int = 0) -> np.random.Generator:
    """Independent generator for one replicate.

    The stream depends only on ``(master_seed, block, replicate_index)``, so a
    replicate draws the same sample whether run serially or in parallel.
    ``block`` separates experiments (or grid points) sharing a master seed.
    """
    if replicate_index < 0 or block < 0:
        raise ParameterError("replicate_index and block must be nonnegative")
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(block), int(replicate_index)))
    return np.random.Generator(np.random.PCG64(ss))
