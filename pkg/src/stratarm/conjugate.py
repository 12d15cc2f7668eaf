"""Multivariate-normal and categorical conjugate machinery for the mixture sampler.

Everything here is deterministic given a ``numpy.random.Generator``; covariance
handling is Cholesky-based throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln, multigammaln

LOG_2PI = math.log(2.0 * math.pi)


class CovarianceError(np.linalg.LinAlgError):
    """A covariance matrix failed its Cholesky factorization."""


def _cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise CovarianceError(str(exc)) from None


def mvn_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray | float:
    """Log density of N(mean, cov) at ``x`` (a vector, or a matrix of rows)."""
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    chol = _cholesky(np.asarray(cov, dtype=float))
    return mvn_logpdf_chol(x, mean, chol)


def mvn_logpdf_chol(x: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray | float:
    """As :func:`mvn_logpdf` with a precomputed lower Cholesky factor."""
    d = mean.shape[0]
    dev = np.atleast_2d(x) - mean
    z = solve_triangular(chol, dev.T, lower=True, check_finite=False)
    quad = np.einsum("ij,ij->j", z, z)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    out = -0.5 * (d * LOG_2PI + logdet + quad)
    return float(out[0]) if np.asarray(x).ndim == 1 else out


@dataclass(frozen=True)
class NIWParams:
    """Normal-inverse-Wishart hyperparameters (mean, kappa, dof, scale matrix)."""

    mean: np.ndarray
    kappa: float
    dof: float
    scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=float))
        d = self.mean.shape[0]
        if self.scale.shape != (d, d):
            raise ValueError("scale matrix shape does not match mean dimension")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.dof <= d - 1:
            raise ValueError(f"dof must exceed dim - 1 = {d - 1}")
        if not np.allclose(self.scale, self.scale.T):
            raise ValueError("scale matrix must be symmetric")
        _cholesky(self.scale)
        self.mean.setflags(write=False)
        self.scale.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def niw_posterior(prior: NIWParams, x: np.ndarray) -> NIWParams:
    """Standard conjugate NIW update for observations ``x`` (rows).

    Empty data returns the prior unchanged.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.size == 0:
        return prior
    n = x.shape[0]
    xbar = x.mean(axis=0)
    dev = x - xbar
    scatter = dev.T @ dev
    kappa_n = prior.kappa + n
    dm = xbar - prior.mean
    scale_n = prior.scale + scatter + (prior.kappa * n / kappa_n) * np.outer(dm, dm)
    mean_n = (prior.kappa * prior.mean + n * xbar) / kappa_n
    return NIWParams(mean=mean_n, kappa=kappa_n, dof=prior.dof + n, scale=scale_n)


def sample_inv_wishart(rng: np.random.Generator, scale: np.ndarray, dof: float) -> np.ndarray:
    """Draw from the inverse-Wishart via the Bartlett decomposition."""
    scale = np.asarray(scale, dtype=float)
    d = scale.shape[0]
    # W ~ Wishart(dof, scale^-1)  =>  W^-1 ~ IW(scale, dof)
    chol_inv = np.linalg.cholesky(np.linalg.inv(scale))
    a = np.zeros((d, d))
    for i in range(d):
        a[i, i] = math.sqrt(rng.chisquare(dof - i))
    if d > 1:
        idx = np.tril_indices(d, k=-1)
        a[idx] = rng.standard_normal(len(idx[0]))
    factor = chol_inv @ a
    w = factor @ factor.T
    sigma = np.linalg.inv(w)
    return 0.5 * (sigma + sigma.T)


def niw_sample(rng: np.random.Generator, params: NIWParams) -> tuple[np.ndarray, np.ndarray]:
    """Joint draw (mean, covariance) from a normal-inverse-Wishart."""
    sigma = sample_inv_wishart(rng, params.scale, params.dof)
    chol = _cholesky(sigma)
    mu = params.mean + (chol @ rng.standard_normal(params.dim)) / math.sqrt(params.kappa)
    return mu, sigma


def _slogdet(mat: np.ndarray) -> float:
    sign, logdet = np.linalg.slogdet(mat)
    if sign <= 0:
        raise CovarianceError("matrix is not positive definite")
    return logdet


def niw_log_marginal(prior: NIWParams, x: np.ndarray) -> float:
    """Log marginal likelihood of ``x`` under the NIW-MVN conjugate pair."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    post = niw_posterior(prior, x)
    out = -0.5 * n * d * math.log(math.pi)
    out += multigammaln(post.dof / 2.0, d) - multigammaln(prior.dof / 2.0, d)
    out += 0.5 * prior.dof * _slogdet(prior.scale) - 0.5 * post.dof * _slogdet(post.scale)
    out += 0.5 * d * (math.log(prior.kappa) - math.log(post.kappa))
    return out


def dirichlet_posterior(conc: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Conjugate Dirichlet update: concentration plus category counts."""
    conc = np.asarray(conc, dtype=float)
    counts = np.asarray(counts)
    if conc.shape != counts.shape:
        raise ValueError("concentration and counts must have matching shape")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    return conc + counts


def dirichlet_log_marginal(conc: np.ndarray, counts: np.ndarray) -> float:
    """Log marginal likelihood of category counts under a Dirichlet prior."""
    conc = np.asarray(conc, dtype=float)
    counts = np.asarray(counts, dtype=float)
    return float(
        gammaln(conc.sum())
        - gammaln(conc.sum() + counts.sum())
        + np.sum(gammaln(conc + counts) - gammaln(conc))
    )
