"""Shared numerical machinery: logistic IRLS, quasi-Newton ascent,
Gauss-Hermite rules and cluster sandwich covariances."""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import expit

from .errors import (
    DataError,
    EstimationError,
    NonConvergenceError,
    ParameterError,
    RankDeficiencyError,
    SeparationError,
)

__all__ = [
    "DesignSpec",
    "FitResult",
    "MaxResult",
    "QuadratureRule",
    "fit_logistic",
    "maximize",
    "hermite_rule",
    "sandwich_cov",
    "numerical_jacobian",
    "DEFAULT_TOL",
    "DEFAULT_MAX_ITER",
    "SEPARATION_BOUND",
]

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 200
# |logit| beyond this is numerically saturated
SEPARATION_BOUND = 30.0


@dataclass(frozen=True)
class DesignSpec:
    """Regressors of an individual-level logistic model.

    ``build(cohort)`` returns an ``(n_pairs, 2, k)`` array, one feature vector
    per member; ``names`` labels the ``k`` columns.
    """

    names: tuple
    build: Callable

    @classmethod
    def from_covariates(cls, covariates: Sequence[str] = (), intercept: bool = True,
                        interactions: Sequence[tuple] = ()) -> DesignSpec:
        """Intercept, named covariates and pairwise products of covariates."""
        covariates = tuple(covariates)
        interactions = tuple(tuple(p) for p in interactions)
        names = (("intercept",) if intercept else ()) + covariates + tuple(":".join(p) for p in interactions)

        def build(cohort):
            missing = [c for c in covariates + sum(interactions, ()) if c not in cohort.covariates]
            if missing:
                raise DataError(f"covariate(s) not observed: {', '.join(sorted(set(missing)))}")
            cols = []
            if intercept:
                cols.append(np.ones(cohort.exposure.shape))
            cols += [cohort.covariates[c] for c in covariates]
            cols += [cohort.covariates[a] * cohort.covariates[b] for a, b in interactions]
            if not cols:
                return np.zeros(cohort.exposure.shape + (0,))
            return np.stack(cols, axis=-1)

        return cls(names, build)


@dataclass
class FitResult:
    coefficients: np.ndarray
    covariance_model: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    covariance_robust: np.ndarray | None = None
    gradient: np.ndarray | None = None
    names: tuple = ()

    @property
    def se_model(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance_model))

    @property
    def se_robust(self) -> np.ndarray | None:
        if self.covariance_robust is None:
            return None
        return np.sqrt(np.diag(self.covariance_robust))


def _check_rank(X, names):
    if X.shape[0] < X.shape[1]:
        raise RankDeficiencyError("fewer observations than regressors", names)
    _, r, piv = linalg.qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    tol = d[0] * max(X.shape) * np.finfo(float).eps if d.size else 0.0
    rank = int(np.count_nonzero(d > tol))
    if rank < X.shape[1]:
        bad = [names[i] if i < len(names) else f"x{i}" for i in piv[rank:]]
        raise RankDeficiencyError(f"design is rank deficient; collinear column(s): {', '.join(bad)}", bad)


def _loglik(eta, y):
    # sum of y*eta - log(1 + e^eta), stable for large |eta|
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def fit_logistic(X, y, cluster_ids=None, names: Sequence[str] = (), tol: float = DEFAULT_TOL,
                 max_iter: int = DEFAULT_MAX_ITER) -> FitResult:
    """Maximum likelihood logistic regression by iteratively reweighted least squares.

    Parameters
    ----------
    X : array of shape (n, k)
    y : array of shape (n,) with values in {0, 1}
    cluster_ids : array of shape (n,), optional
        When given, the cluster sandwich covariance is also returned.

    Raises
    ------
    RankDeficiencyError
        If ``X`` does not have full column rank.
    SeparationError
        If a coefficient exceeds 30 in absolute value (data separated).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    names = tuple(names) or tuple(f"x{i}" for i in range(X.shape[1]))
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise DataError("X must be 2-d with one row per element of y")
    if not np.isin(y, (0.0, 1.0)).all():
        raise DataError("y must be binary")
    if y.min() == y.max():
        raise SeparationError("outcome has no variation; logistic fit undefined")
    _check_rank(X, names)

    beta = np.zeros(X.shape[1])
    grad = X.T @ (y - 0.5)
    converged = False
    for it in range(1, max_iter + 1):
        eta = X @ beta
        p = expit(eta)
        wt = p * (1.0 - p)
        grad = X.T @ (y - p)
        if np.max(np.abs(grad)) < tol:
            converged = True
            break
        info = (X * wt[:, None]).T @ X
        try:
            step = linalg.solve(info, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            raise SeparationError("information matrix became singular (separation?)", best=beta) from None
        # step halving keeps the ascent monotone
        ll = _loglik(eta, y)
        t = 1.0
        while t > 1e-10:
            cand = beta + t * step
            if _loglik(X @ cand, y) >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        beta = cand
        if np.max(np.abs(beta)) > SEPARATION_BOUND:
            worst = names[int(np.argmax(np.abs(beta)))]
            raise SeparationError(
                f"coefficient {worst!r} diverged beyond |{SEPARATION_BOUND:g}|; outcome separated", best=beta
            )
    if not converged:
        raise NonConvergenceError(
            f"IRLS did not converge in {max_iter} iterations (max|grad|={np.max(np.abs(grad)):.3g})", best=beta
        )
    eta = X @ beta
    p = expit(eta)
    info = (X * (p * (1 - p))[:, None]).T @ X
    cov = linalg.inv(info)
    cov = 0.5 * (cov + cov.T)
    robust = None
    if cluster_ids is not None:
        scores = X * (y - p)[:, None]
        robust = sandwich_cov(_sum_by_cluster(scores, cluster_ids), info)
    return FitResult(
        coefficients=beta,
        covariance_model=cov,
        covariance_robust=robust,
        loglik=_loglik(eta, y),
        converged=True,
        iterations=it - 1,
        gradient=grad,
        names=names,
    )


def _sum_by_cluster(scores, cluster_ids):
    _, inv = np.unique(np.asarray(cluster_ids), return_inverse=True)
    out = np.zeros((inv.max() + 1, scores.shape[1]))
    np.add.at(out, inv, scores)
    return out


def sandwich_cov(score_by_cluster, bread) -> np.ndarray:
    """``bread^-1 @ (sum of cluster score outer products) @ bread^-T``.

    ``score_by_cluster`` has one row per cluster (the summed score of its
    members).  The sign of ``bread`` is immaterial.
    """
    s = np.asarray(score_by_cluster, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    bread = np.atleast_2d(np.asarray(bread, dtype=float))
    if s.shape[1] != bread.shape[0]:
        raise ParameterError("score columns must match the bread dimension")
    meat = s.T @ s
    try:
        inv = linalg.inv(bread)
    except linalg.LinAlgError:
        raise EstimationError("bread matrix is singular") from None
    if not np.all(np.isfinite(inv)) or np.linalg.cond(bread) > 1e14:
        raise EstimationError("bread matrix is singular")
    cov = inv @ meat @ inv.T
    return 0.5 * (cov + cov.T)


# --------------------------------------------------------------------------
# smooth maximization


@dataclass
class MaxResult:
    x: np.ndarray
    value: float
    gradient: np.ndarray
    information: np.ndarray
    iterations: int
    trace: list = field(default_factory=list)

    @property
    def covariance(self) -> np.ndarray:
        return linalg.inv(self.information)


def numerical_jacobian(fun: Callable, x, step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of a vector function (rows: outputs)."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        h = step * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2 * h))
    return np.column_stack(cols)


def maximize(objective: Callable, gradient: Callable, init, tol: float = DEFAULT_TOL,
             max_iter: int = DEFAULT_MAX_ITER, hessian: Callable | None = None) -> MaxResult:
    """BFGS ascent with backtracking (Armijo) line search.

    Stops when ``max|gradient| < tol``.  The observed information is the
    negated Hessian at the optimum, analytic when ``hessian`` is given and
    otherwise from central differences of ``gradient``.

    Raises
    ------
    NonConvergenceError
        Iteration cap reached or no ascent direction found; carries the best point.
    EstimationError
        Objective not finite at ``init``.
    """
    x = np.array(init, dtype=float)
    f = objective(x)
    if not np.isfinite(f):
        raise EstimationError("objective is not finite at the starting point")
    g = np.asarray(gradient(x), dtype=float)
    k = x.size
    H = np.eye(k)  # inverse-Hessian approximation of -objective
    trace = []
    it = 0

    def information(at):
        if hessian is not None:
            h = -np.asarray(hessian(at), dtype=float)
        else:
            h = -numerical_jacobian(gradient, at)
        return 0.5 * (h + h.T)

    while True:
        gmax = float(np.max(np.abs(g))) if k else 0.0
        trace.append(gmax)
        if gmax < tol:
            break
        if it >= max_iter:
            raise NonConvergenceError(
                f"maximization did not converge in {max_iter} iterations (max|grad|={gmax:.3g})",
                best=x, trace=trace,
            )
        it += 1
        d = H @ g
        slope = float(g @ d)
        if slope <= 0:
            H = np.eye(k)
            d, slope = g.copy(), float(g @ g)
        t = 1.0
        accepted = False
        noise = 16 * np.finfo(float).eps * max(1.0, abs(f))
        for _ in range(60):
            xn = x + t * d
            fn = objective(xn)
            if np.isfinite(fn) and abs(fn - f) <= noise:
                break
            if np.isfinite(fn) and fn >= f + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # Objective flat at working precision: take a Newton step and
            # accept it when it shrinks the gradient.
            info = information(x)
            try:
                xn = x + linalg.solve(info, g, assume_a="sym")
            except (linalg.LinAlgError, ValueError):
                raise NonConvergenceError(
                    f"line search failed (max|grad|={gmax:.3g})", best=x, trace=trace
                ) from None
            gn = np.asarray(gradient(xn), dtype=float)
            if not np.all(np.isfinite(gn)) or np.max(np.abs(gn)) >= gmax:
                raise NonConvergenceError(
                    f"line search failed (max|grad|={gmax:.3g})", best=x, trace=trace
                )
            x, f, g = xn, objective(xn), gn
            try:
                H = linalg.inv(info)
            except linalg.LinAlgError:
                H = np.eye(k)
            continue
        gn = np.asarray(gradient(xn), dtype=float)
        if not np.all(np.isfinite(gn)):
            raise EstimationError("gradient is not finite")
        s = xn - x
        yv = g - gn  # gradient change of -objective
        sy = float(s @ yv)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(yv)):
            if it == 1:
                H = np.eye(k) * (sy / float(yv @ yv))
            rho = 1.0 / sy
            I = np.eye(k)
            H = (I - rho * np.outer(s, yv)) @ H @ (I - rho * np.outer(yv, s)) + rho * np.outer(s, s)
        x, f, g = xn, fn, gn
    info = information(x)
    return MaxResult(x=x, value=float(f), gradient=g, information=info, iterations=it, trace=trace)


# --------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Hermite rule for the weight ``exp(-x**2)``."""

    nodes: np.ndarray
    weights: np.ndarray
    order: int

    def integrate(self, f: Callable) -> float:
        """Approximate ``integral f(x) exp(-x^2) dx``."""
        return float(np.sum(self.weights * f(self.nodes)))

    def expect_normal(self, f: Callable, mean=0.0, sd=1.0):
        """Approximate ``E f(B)`` for ``B ~ N(mean, sd^2)``; broadcasts over ``mean``."""
        b = np.asarray(mean)[..., None] + np.sqrt(2.0) * np.asarray(sd)[..., None] * self.nodes
        return np.sum(self.weights * f(b), axis=-1) / np.sqrt(np.pi)


_RULES: dict = {}


def hermite_rule(order: int) -> QuadratureRule:
    """Gauss-Hermite nodes and weights of the given order (2..100)."""
    if int(order) != order or not 2 <= order <= 100:
        raise ParameterError(f"quadrature order must be an integer in [2, 100], got {order!r}")
    order = int(order)
    rule = _RULES.get(order)
    if rule is None:
        x, w = np.polynomial.hermite.hermgauss(order)
        x.setflags(write=False)
        w.setflags(write=False)
        rule = _RULES[order] = QuadratureRule(nodes=x, weights=w, order=order)
    return rule
