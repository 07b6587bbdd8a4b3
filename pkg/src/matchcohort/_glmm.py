"""Random-intercept logistic model for pairs, evaluated on pair patterns.

Pairs with identical (x1, x2, y1, y2) and identical mean-level contribute
identical likelihood factors, so the marginal likelihood is a weighted sum over
at most a handful of distinct patterns.  The random intercept of a pattern at
level ``l`` is ``mu[l] + sigma * z`` with ``z ~ N(0, 1)``; the integral over
``z`` uses Gauss-Hermite quadrature recentred and rescaled at each pattern's
posterior mode.

Parameter vector: ``(psi, mu[0], ..., mu[L-1], log sigma)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import EstimationError, NonConvergenceError
from .numerics import DEFAULT_TOL, maximize

_LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)
# sigma below this is treated as the boundary sigma = 0
SIGMA_BOUNDARY = 1e-3


def _logp(y, eta):
    return y * eta - np.logaddexp(0.0, eta)


@dataclass
class GlmmFit:
    params: np.ndarray
    covariance: np.ndarray
    loglik: float
    iterations: int
    boundary: bool
    max_grad: float

    @property
    def psi(self):
        return float(self.params[0])

    @property
    def sigma(self):
        return 0.0 if self.boundary else float(np.exp(self.params[-1]))


class PatternGlmm:
    """Marginal log-likelihood of the random-intercept model over pair patterns.

    Parameters
    ----------
    x, y : int arrays of shape (K, 2)
    counts : array of shape (K,)
    level : int array of shape (K,), values in ``range(n_levels)``
    rule : QuadratureRule
    """

    def __init__(self, x, y, counts, level, n_levels, rule):
        keep = np.asarray(counts) > 0
        self.x = np.asarray(x, dtype=float)[keep]
        self.y = np.asarray(y, dtype=float)[keep]
        self.counts = np.asarray(counts, dtype=float)[keep]
        self.level = np.asarray(level, dtype=int)[keep]
        self.n_levels = int(n_levels)
        self.onehot = np.eye(self.n_levels)[self.level]  # (K, L)
        self.rule = rule
        self._log_w = np.log(rule.weights) + rule.nodes**2
        self._cache_key = None

    @property
    def n_params(self):
        return self.n_levels + 2

    def _offsets(self, params):
        psi = params[0]
        mu = params[1 : 1 + self.n_levels]
        return mu[self.level][:, None] + psi * self.x  # (K, 2)

    def _mode(self, a, sigma):
        z = np.zeros(a.shape[0])
        s2 = sigma * sigma
        for _ in range(50):
            p = expit(a + sigma * z[:, None])
            g1 = sigma * np.sum(self.y - p, axis=1) - z
            g2 = -s2 * np.sum(p * (1 - p), axis=1) - 1.0
            dz = -g1 / g2
            z = z + dz
            if np.max(np.abs(dz)) < 1e-12:
                break
        p = expit(a + sigma * z[:, None])
        tau = 1.0 / np.sqrt(s2 * np.sum(p * (1 - p), axis=1) + 1.0)
        return z, tau, p

    def _evaluate(self, params):
        key = params.tobytes()
        if key == self._cache_key:
            return self._cache
        a = self._offsets(params)
        sigma = np.exp(params[-1])
        zhat, tau, phat = self._mode(a, sigma)
        z = zhat[:, None] + np.sqrt(2.0) * tau[:, None] * self.rule.nodes  # (K, Q)
        eta = a[:, None, :] + sigma * z[..., None]  # (K, Q, 2)
        h = np.sum(_logp(self.y[:, None, :], eta), axis=2) - 0.5 * z * z - _LOG_SQRT_2PI
        terms = self._log_w + h
        top = terms.max(axis=1, keepdims=True)
        e = np.exp(terms - top)
        total = e.sum(axis=1)
        log_int = np.log(total) + top[:, 0] + np.log(np.sqrt(2.0) * tau)
        omega = e / total[:, None]  # (K, Q)
        resid = self.y[:, None, :] - expit(eta)  # (K, Q, 2)
        d_psi = np.sum(omega * np.sum(resid * self.x[:, None, :], axis=2), axis=1)
        d_mu = np.sum(omega * np.sum(resid, axis=2), axis=1)
        d_ls = np.sum(omega * np.sum(resid, axis=2) * sigma * z, axis=1)
        partial = np.column_stack([d_psi, d_mu[:, None] * self.onehot, d_ls])
        # the nodes move with the mode and scale; add that dependence so the
        # gradient is exact for the quadrature approximation
        hprime = sigma * resid.sum(axis=2) - z  # (K, Q)
        A = np.sum(omega * hprime, axis=1)
        B = np.sum(omega * hprime * np.sqrt(2.0) * self.rule.nodes, axis=1) + 1.0 / tau
        dz, dtau = self._node_derivatives(zhat, tau, phat, sigma)
        c = self.counts
        grad = c @ (partial + dz * A[:, None] + dtau * B[:, None])
        self._cache_key = key
        self._cache = (float(c @ log_int), grad)
        return self._cache

    def _node_derivatives(self, zhat, tau, p, sigma):
        """Derivatives of the mode and scale with respect to the parameters, (K, P) each."""
        K, P = zhat.size, self.n_params
        da = np.zeros((K, 2, P))
        da[:, :, 0] = self.x
        da[:, :, 1 : 1 + self.n_levels] = self.onehot[:, None, :]
        w = p * (1 - p)
        S = w.sum(axis=1)
        # implicit differentiation of sigma * sum(y - p) - z = 0
        dg = -sigma * np.einsum("kj,kjp->kp", w, da)
        dg[:, -1] = sigma * (np.sum(self.y - p, axis=1) - sigma * S * zhat)
        dz = tau[:, None] ** 2 * dg
        deta = da + sigma * dz[:, None, :]
        deta[:, :, -1] += sigma * zhat[:, None]
        dS = np.einsum("kj,kjp->kp", w * (1 - 2 * p), deta)
        dvar = sigma**2 * dS
        dvar[:, -1] += 2 * sigma**2 * S
        dtau = -0.5 * tau[:, None] ** 3 * dvar
        return dz, dtau

    def loglik(self, params):
        return self._evaluate(np.asarray(params, dtype=float))[0]

    def gradient(self, params):
        return self._evaluate(np.asarray(params, dtype=float))[1]

    # sigma = 0: ordinary logistic likelihood in (psi, mu)

    def loglik0(self, params):
        a = self._offsets(np.asarray(params, dtype=float))
        return float(self.counts @ np.sum(_logp(self.y, a), axis=1))

    def gradient0(self, params):
        a = self._offsets(np.asarray(params, dtype=float))
        resid = self.y - expit(a)
        c = self.counts
        return np.concatenate([[c @ np.sum(resid * self.x, axis=1)], (c * resid.sum(axis=1)) @ self.onehot])

    def start(self, psi0=0.0, log_sigma0=0.0):
        mu = np.zeros(self.n_levels)
        for l in range(self.n_levels):
            m = self.level == l
            w = self.counts[m]
            ybar = float(np.sum(w * self.y[m].mean(axis=1)) / max(w.sum(), 1.0))
            ybar = min(max(ybar, 0.02), 0.98)
            mu[l] = np.log(ybar / (1 - ybar)) - psi0 * float(np.sum(w * self.x[m].mean(axis=1)) / max(w.sum(), 1.0))
        return np.concatenate([[psi0], mu, [log_sigma0]])


def _invert(information):
    try:
        cov = np.linalg.inv(information)
    except np.linalg.LinAlgError:
        raise EstimationError("observed information is singular at the optimum") from None
    return 0.5 * (cov + cov.T)


def fit_pattern_glmm(model: PatternGlmm, psi0=0.0, tol=DEFAULT_TOL, max_iter=200) -> GlmmFit:
    """Maximize the marginal likelihood, falling back to sigma = 0 at the boundary."""
    init = model.start(psi0)
    interior = None
    try:
        res = maximize(model.loglik, model.gradient, init, tol=tol, max_iter=max_iter)
        if np.exp(res.x[-1]) > SIGMA_BOUNDARY:
            interior = res
    except NonConvergenceError as exc:
        if exc.best is None or np.exp(exc.best[-1]) > SIGMA_BOUNDARY:
            raise
    if interior is not None:
        return GlmmFit(interior.x, _invert(interior.information), interior.value, interior.iterations,
                       False, float(np.max(np.abs(interior.gradient))))
    res = maximize(model.loglik0, model.gradient0, init[:-1], tol=tol, max_iter=max_iter)
    k = res.x.size
    cov = np.full((k + 1, k + 1), np.nan)
    cov[:k, :k] = _invert(res.information)
    params = np.concatenate([res.x, [-np.inf]])
    return GlmmFit(params, cov, res.value, res.iterations, True, float(np.max(np.abs(res.gradient))))
