"""Outcome-guided Dirichlet-process mixture over covariate and outcome profiles.

Subjects are allocated by the joint density of their covariate vector and
their imputed multi-arm outcome vector: an infinite mixture with stick-breaking
weights, handled exactly by slice sampling with dynamic truncation. Continuous
blocks carry conjugate normal-inverse-Wishart priors, discrete covariates
conjugate Dirichlet priors, and the concentration parameter a Gamma prior
updated by adaptive random-walk Metropolis on the log scale. Per-covariate
binary switches (with a sparsity prior on their inclusion probabilities) let a
covariate's cluster profile collapse onto the data-wide reference, which is
how unimportant covariates are screened out.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betaln

from .bart import PotentialOutcomeMatrix
from .conjugate import (
    CovarianceError,
    NIWParams,
    mvn_logpdf,
    mvn_logpdf_chol,
    niw_posterior,
    niw_sample,
    sample_inv_wishart,
)
from .data import Dataset, EmpiricalReference, summarize_columns

logger = logging.getLogger(__name__)

_MAX_COMPONENTS = 10_000
_V_EPS = 1e-12


# --------------------------------------------------------------------------
# priors and state containers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PriorSpec:
    """Hyperparameters for every block of the mixture model."""

    out_niw: NIWParams
    cov_niw: NIWParams | None
    disc_conc: tuple[np.ndarray, ...]
    alpha_shape: float = 2.0
    alpha_rate: float = 1.0
    variable_selection: bool = False
    vs_atom_weight: float = 0.5
    vs_beta_a: float = 0.5
    vs_beta_b: float = 0.5

    def __post_init__(self):
        if self.alpha_shape <= 0 or self.alpha_rate <= 0:
            raise ValueError("the concentration prior needs positive shape and rate")
        if not 0.0 <= self.vs_atom_weight < 1.0:
            raise ValueError("vs_atom_weight must lie in [0, 1)")
        for a in self.disc_conc:
            if np.any(np.asarray(a) <= 0):
                raise ValueError("Dirichlet concentrations must be positive")

    @property
    def p_continuous(self) -> int:
        return 0 if self.cov_niw is None else self.cov_niw.dim

    @property
    def p_discrete(self) -> int:
        return len(self.disc_conc)

    @property
    def n_arms(self) -> int:
        return self.out_niw.dim

    @classmethod
    def default(cls, ds: Dataset, ystar, variable_selection: bool = False,
                kappa: float = 0.01, covariance_strength: float = 10.0) -> "PriorSpec":
        """Data-scaled defaults.

        Means anchor at the empirical means and kappa is small. The
        inverse-Wishart blocks center on the diagonal of the empirical
        covariance with ``covariance_strength`` pseudo-observations of weight
        beyond the minimal dim + 2 degrees of freedom; the extra weight keeps
        small splinter clusters from locking onto their own scatter while
        leaving well-populated clusters data-dominated. Strength 0 recovers
        the minimal-weight prior.
        """
        y = _as_matrix(ystar)
        if covariance_strength < 0:
            raise ValueError("covariance_strength must be >= 0")

        def _block(mat):
            d = mat.shape[1]
            var = mat.var(axis=0, ddof=1) if mat.shape[0] > 1 else np.ones(d)
            dof = d + 2 + covariance_strength
            scale = np.diag(np.maximum(var, 1e-8)) * (dof - d - 1)
            return NIWParams(mean=mat.mean(axis=0), kappa=kappa, dof=dof, scale=scale)

        cov_niw = _block(ds.x_cont) if ds.schema.p_continuous else None
        conc = tuple(np.ones(spec.categories) for spec in ds.schema.discrete)
        return cls(out_niw=_block(y), cov_niw=cov_niw, disc_conc=conc,
                   variable_selection=variable_selection)


@dataclass
class StickState:
    """Stick variables, derived weights, and the concentration parameter."""

    v: np.ndarray
    weights: np.ndarray
    alpha: float

    @property
    def n_components(self) -> int:
        return self.v.shape[0]


@dataclass
class ClusterParams:
    """Per-component parameters, stacked along the leading axis."""

    mu_y: np.ndarray                      # (C, K)
    sigma_y: np.ndarray                   # (C, K, K)
    mu_x: np.ndarray                      # (C, p1)
    sigma_x: np.ndarray                   # (C, p1, p1)
    psi: list[np.ndarray]                 # per discrete covariate: (C, K_j)


@dataclass
class VariableSelectionState:
    """Per-cluster covariate switches, their inclusion probabilities, the reference."""

    gamma: np.ndarray                     # (C, p1 + p2) in {0, 1}
    rho: np.ndarray                       # (p1 + p2,) in [0, 1]
    reference: EmpiricalReference


@dataclass
class ChainState:
    """Complete sampler state; one :func:`gibbs_sweep` maps it to its successor."""

    alloc: np.ndarray
    sticks: StickState
    params: ClusterParams
    vs: VariableSelectionState
    rng: np.random.Generator
    iteration: int = 0
    alpha_log_step: float = 0.0

    @property
    def n_components(self) -> int:
        return self.sticks.n_components


# --------------------------------------------------------------------------
# elementary model functions
# --------------------------------------------------------------------------


def stick_weights(v: np.ndarray) -> np.ndarray:
    """Weights from stick fractions: w_1 = v_1, w_c = v_c * prod_{r<c}(1 - v_r)."""
    v = np.asarray(v, dtype=float)
    if v.size and (v.min() <= 0.0 or v.max() > 1.0):
        raise ValueError("stick fractions must lie in (0, 1]")
    out = np.empty_like(v)
    rem = 1.0
    for c, vc in enumerate(v):
        out[c] = vc * rem
        rem *= 1.0 - vc
    return out


def effective_mean(gamma: int, mu: float, xbar: float) -> float:
    """Cluster mean when the covariate switch is on, the data-wide mean when off."""
    if gamma not in (0, 1):
        raise ValueError("gamma must be 0 or 1")
    return mu if gamma else xbar


def log_density_cont(x, mean, cov):
    """Log multivariate-normal density of the continuous covariate block."""
    return mvn_logpdf(x, np.asarray(mean, dtype=float), cov)


def log_density_outcome(ystar, mean, cov):
    """Log multivariate-normal density of the imputed-outcome vector."""
    return mvn_logpdf(ystar, np.asarray(mean, dtype=float), cov)


def log_mass_disc(x, psi_c, vs: VariableSelectionState, c: int) -> float:
    """Log mass of a discrete covariate vector under cluster ``c``'s switches.

    Each covariate contributes the cluster's own category probability when
    selected and the observed data-wide proportion when deselected. A zero
    probability for an observed category yields -inf.
    """
    x = np.asarray(x, dtype=np.int64)
    p1 = vs.gamma.shape[1] - len(psi_c)
    total = 0.0
    with np.errstate(divide="ignore"):
        for j, xj in enumerate(x):
            if vs.gamma[c, p1 + j]:
                total += float(np.log(psi_c[j][xj - 1]))
            else:
                total += float(np.log(vs.reference.disc_props[j][xj - 1]))
    return total


def _as_matrix(ystar) -> np.ndarray:
    if isinstance(ystar, PotentialOutcomeMatrix):
        return ystar.values
    return np.asarray(ystar, dtype=float)


# --------------------------------------------------------------------------
# data view and initialization
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class _ModelData:
    x_cont: np.ndarray        # (n, p1)
    x_disc0: np.ndarray       # (n, p2) zero-based codes
    ystar: np.ndarray         # (n, K)
    reference: EmpiricalReference

    @property
    def n(self) -> int:
        return self.ystar.shape[0]

    @classmethod
    def build(cls, ds: Dataset, ystar) -> "_ModelData":
        y = _as_matrix(ystar)
        if y.shape[0] != ds.n:
            raise ValueError("imputed-outcome matrix and dataset disagree in length")
        return cls(x_cont=ds.x_cont, x_disc0=ds.x_disc - 1, ystar=y,
                   reference=summarize_columns(ds))


def _prior_draw_component(rng, prior: PriorSpec):
    mu_y, sigma_y = niw_sample(rng, prior.out_niw)
    if prior.cov_niw is not None:
        mu_x, sigma_x = niw_sample(rng, prior.cov_niw)
    else:
        mu_x = np.empty(0)
        sigma_x = np.empty((0, 0))
    psi = [rng.dirichlet(a) for a in prior.disc_conc]
    return mu_y, sigma_y, mu_x, sigma_x, psi


def _append_component(params: ClusterParams, vs: VariableSelectionState,
                      rng, prior: PriorSpec) -> None:
    mu_y, sigma_y, mu_x, sigma_x, psi = _prior_draw_component(rng, prior)
    params.mu_y = np.concatenate([params.mu_y, mu_y[None]])
    params.sigma_y = np.concatenate([params.sigma_y, sigma_y[None]])
    params.mu_x = np.concatenate([params.mu_x, mu_x[None]])
    params.sigma_x = np.concatenate([params.sigma_x, sigma_x[None]])
    for j, p in enumerate(psi):
        params.psi[j] = np.concatenate([params.psi[j], p[None]])
    if prior.variable_selection:
        new_gamma = (rng.random(vs.rho.shape[0]) < vs.rho).astype(np.int8)
    else:
        new_gamma = np.ones(vs.rho.shape[0], dtype=np.int8)
    vs.gamma = np.concatenate([vs.gamma, new_gamma[None]])


def _truncate(state: ChainState, c_new: int) -> None:
    state.sticks.v = state.sticks.v[:c_new]
    state.sticks.weights = state.sticks.weights[:c_new]
    p = state.params
    p.mu_y, p.sigma_y = p.mu_y[:c_new], p.sigma_y[:c_new]
    p.mu_x, p.sigma_x = p.mu_x[:c_new], p.sigma_x[:c_new]
    p.psi = [arr[:c_new] for arr in p.psi]
    state.vs.gamma = state.vs.gamma[:c_new]


def initial_state(ds: Dataset, ystar, prior: PriorSpec, seed: int,
                  init_components: int = 50) -> ChainState:
    """Random allocation into ``init_components`` clusters, prior-drawn parameters."""
    data = _ModelData.build(ds, ystar)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    c0 = max(1, min(init_components, data.n))
    alloc = rng.integers(c0, size=data.n)
    alpha = prior.alpha_shape / prior.alpha_rate
    v = np.clip(rng.beta(1.0, alpha, size=c0), _V_EPS, 1.0 - _V_EPS)
    p = prior.p_continuous + prior.p_discrete
    params = ClusterParams(
        mu_y=np.empty((0, prior.n_arms)),
        sigma_y=np.empty((0, prior.n_arms, prior.n_arms)),
        mu_x=np.empty((0, prior.p_continuous)),
        sigma_x=np.empty((0, prior.p_continuous, prior.p_continuous)),
        psi=[np.empty((0, a.shape[0])) for a in prior.disc_conc],
    )
    vs = VariableSelectionState(
        gamma=np.empty((0, p), dtype=np.int8),
        rho=np.full(p, 0.5) if prior.variable_selection else np.ones(p),
        reference=data.reference,
    )
    state = ChainState(alloc=alloc, sticks=StickState(v=v, weights=stick_weights(v), alpha=alpha),
                       params=params, vs=vs, rng=rng, alpha_log_step=math.log(0.5))
    for _ in range(c0):
        _append_component(params, vs, rng, prior)
    return state


# --------------------------------------------------------------------------
# sweep internals
# --------------------------------------------------------------------------


def _safe_chol(cov: np.ndarray) -> np.ndarray:
    """Cholesky with one jittered retry before giving up."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        d = cov.shape[0]
        jitter = 1e-8 * np.trace(cov) / d
        return np.linalg.cholesky(cov + jitter * np.eye(d))


def _update_sticks(state: ChainState, counts: np.ndarray) -> None:
    c = state.n_components
    tail = counts[::-1].cumsum()[::-1] - counts
    a = 1.0 + counts
    b = state.sticks.alpha + tail
    state.sticks.v = np.clip(state.rng.beta(a, b), _V_EPS, 1.0 - _V_EPS)
    state.sticks.weights = stick_weights(state.sticks.v)
    assert state.sticks.v.shape[0] == c


def _extend_components(state: ChainState, prior: PriorSpec, u_min: float) -> None:
    rem = float(np.exp(np.log1p(-state.sticks.v).sum()))
    while rem > u_min:
        if state.n_components >= _MAX_COMPONENTS:
            raise RuntimeError("slice truncation level exploded; check the data scaling")
        v_new = float(np.clip(state.rng.beta(1.0, state.sticks.alpha), _V_EPS, 1.0 - _V_EPS))
        state.sticks.v = np.append(state.sticks.v, v_new)
        _append_component(state.params, state.vs, state.rng, prior)
        rem *= 1.0 - v_new
    state.sticks.weights = stick_weights(state.sticks.v)


def _effective_mu(state: ChainState, c: int, p1: int) -> np.ndarray:
    gam = state.vs.gamma[c, :p1].astype(float)
    return gam * state.params.mu_x[c] + (1.0 - gam) * state.vs.reference.cont_means


def _update_params_outcome(state: ChainState, data: _ModelData, prior: PriorSpec,
                           members: list[np.ndarray]) -> None:
    for c, rows in enumerate(members):
        post = niw_posterior(prior.out_niw, data.ystar[rows]) if rows.size else prior.out_niw
        try:
            mu, sigma = niw_sample(state.rng, post)
        except CovarianceError:
            logger.warning("outcome covariance draw failed in cluster %d; retaining", c)
            continue
        state.params.mu_y[c] = mu
        state.params.sigma_y[c] = sigma


def _update_params_cont(state: ChainState, data: _ModelData, prior: PriorSpec,
                        members: list[np.ndarray]) -> None:
    if prior.cov_niw is None:
        return
    p1 = prior.p_continuous
    pr = prior.cov_niw
    for c, rows in enumerate(members):
        try:
            if rows.size == 0:
                mu, sigma = niw_sample(state.rng, pr)
            elif not prior.variable_selection:
                mu, sigma = niw_sample(state.rng, niw_posterior(pr, data.x_cont[rows]))
            else:
                mu, sigma = _vs_cont_draw(state, data, pr, c, rows, p1)
        except CovarianceError:
            logger.warning("covariate covariance draw failed in cluster %d; retaining", c)
            continue
        state.params.mu_x[c] = mu
        state.params.sigma_x[c] = sigma


def _vs_cont_draw(state: ChainState, data: _ModelData, pr: NIWParams, c: int,
                  rows: np.ndarray, p1: int):
    """Two-block draw of (covariance | mean) then (mean | covariance).

    With some switches off, observations inform only the selected coordinates,
    so the joint conjugate update does not apply; conditioning on the mean
    restores an inverse-Wishart, and conditioning on the covariance restores a
    Gaussian with a switch-masked precision contribution.
    """
    x = data.x_cont[rows]
    n_c = rows.size
    gam = state.vs.gamma[c, :p1].astype(float)
    xbar_ref = state.vs.reference.cont_means
    mu_cur = state.params.mu_x[c]

    resid = x - (gam * mu_cur + (1.0 - gam) * xbar_ref)
    dmu = mu_cur - pr.mean
    scale = pr.scale + pr.kappa * np.outer(dmu, dmu) + resid.T @ resid
    sigma = sample_inv_wishart(state.rng, 0.5 * (scale + scale.T), pr.dof + 1 + n_c)

    prec = np.linalg.inv(sigma)
    d_mat = np.diag(gam)
    post_prec = pr.kappa * prec + n_c * d_mat @ prec @ d_mat
    shifted = (x - (1.0 - gam) * xbar_ref).sum(axis=0)
    lin = pr.kappa * prec @ pr.mean + d_mat @ prec @ shifted
    cov_post = np.linalg.inv(post_prec)
    cov_post = 0.5 * (cov_post + cov_post.T)
    mu = cov_post @ lin + _safe_chol(cov_post) @ state.rng.standard_normal(p1)
    return mu, sigma


def _update_params_disc(state: ChainState, data: _ModelData, prior: PriorSpec,
                        members: list[np.ndarray]) -> None:
    p1 = prior.p_continuous
    for j, conc in enumerate(prior.disc_conc):
        kj = conc.shape[0]
        col = data.x_disc0[:, j] if data.n else None
        for c, rows in enumerate(members):
            if rows.size and state.vs.gamma[c, p1 + j]:
                post = conc + np.bincount(col[rows], minlength=kj)
            else:
                post = conc
            state.params.psi[j][c] = state.rng.dirichlet(post)


def _update_switches(state: ChainState, data: _ModelData, prior: PriorSpec,
                     members: list[np.ndarray]) -> None:
    """Gibbs update of the per-cluster covariate switches, then their probabilities.

    Empty components' switches are conditionally independent Bernoulli(rho)
    draws, so they are marginalized out of the rho update and re-instantiated
    afterwards from the fresh probabilities.
    """
    p1, p2 = prior.p_continuous, prior.p_discrete
    rng = state.rng
    ref = state.vs.reference
    occupied = []
    for c, rows in enumerate(members):
        if rows.size == 0:
            continue
        occupied.append(c)
        if p1:
            x = data.x_cont[rows]
            chol = _safe_chol(state.params.sigma_x[c])
            for j in range(p1):
                rho_j = state.vs.rho[j]
                if rho_j <= 0.0:
                    state.vs.gamma[c, j] = 0
                    continue
                if rho_j >= 1.0:
                    state.vs.gamma[c, j] = 1
                    continue
                gam = state.vs.gamma[c, :p1].astype(float)
                gam[j] = 1.0
                m1 = gam * state.params.mu_x[c] + (1.0 - gam) * ref.cont_means
                gam[j] = 0.0
                m0 = gam * state.params.mu_x[c] + (1.0 - gam) * ref.cont_means
                l1 = float(np.sum(mvn_logpdf_chol(x, m1, chol)))
                l0 = float(np.sum(mvn_logpdf_chol(x, m0, chol)))
                a = math.log(rho_j) + l1
                b = math.log1p(-rho_j) + l0
                p_on = math.exp(a - np.logaddexp(a, b))
                state.vs.gamma[c, j] = int(rng.random() < p_on)
        for j in range(p2):
            rho_j = state.vs.rho[p1 + j]
            if rho_j <= 0.0:
                state.vs.gamma[c, p1 + j] = 0
                continue
            if rho_j >= 1.0:
                state.vs.gamma[c, p1 + j] = 1
                continue
            codes = data.x_disc0[rows, j]
            with np.errstate(divide="ignore"):
                l1 = float(np.log(state.params.psi[j][c][codes]).sum())
                l0 = float(np.log(ref.disc_props[j][codes]).sum())
            a = math.log(rho_j) + l1
            b = math.log1p(-rho_j) + l0
            p_on = math.exp(a - np.logaddexp(a, b))
            state.vs.gamma[c, p1 + j] = int(rng.random() < p_on)

    # sparsity prior on rho: an atom at zero mixed with a beta slab, counting
    # only occupied components' switches
    c_occ = len(occupied)
    s = state.vs.gamma[occupied].sum(axis=0) if c_occ else np.zeros(p1 + p2)
    a0, b0 = prior.vs_beta_a, prior.vs_beta_b
    w = prior.vs_atom_weight
    for j in range(p1 + p2):
        if s[j] > 0:
            state.vs.rho[j] = rng.beta(a0 + s[j], b0 + c_occ - s[j])
        else:
            log_slab = betaln(a0, b0 + c_occ) - betaln(a0, b0)
            p_atom = w / (w + (1.0 - w) * math.exp(log_slab))
            if rng.random() < p_atom:
                state.vs.rho[j] = 0.0
            else:
                state.vs.rho[j] = rng.beta(a0, b0 + c_occ)

    for c, rows in enumerate(members):
        if rows.size == 0:
            state.vs.gamma[c] = (rng.random(p1 + p2) < state.vs.rho).astype(np.int8)


def component_log_likelihood(state: ChainState, data: _ModelData,
                             prior: PriorSpec) -> np.ndarray:
    """Per-component log density of every subject's (outcome, covariates) pair."""
    c_count = state.n_components
    n = data.n
    p1 = prior.p_continuous
    ll = np.zeros((c_count, n))
    for c in range(c_count):
        chol_y = _safe_chol(state.params.sigma_y[c])
        ll[c] = mvn_logpdf_chol(data.ystar, state.params.mu_y[c], chol_y)
        if p1:
            chol_x = _safe_chol(state.params.sigma_x[c])
            ll[c] += mvn_logpdf_chol(data.x_cont, _effective_mu(state, c, p1), chol_x)
    with np.errstate(divide="ignore"):
        for j in range(prior.p_discrete):
            codes = data.x_disc0[:, j]
            log_psi = np.log(state.params.psi[j])          # (C, K_j)
            log_ref = np.log(state.vs.reference.disc_props[j])
            on = state.vs.gamma[:, p1 + j].astype(bool)
            contrib = np.where(on[:, None], log_psi[:, codes], log_ref[None, codes])
            ll += contrib
    return ll


def _update_alpha(state: ChainState, prior: PriorSpec) -> None:
    """Adaptive random-walk Metropolis on the log concentration."""
    rng = state.rng
    v = state.sticks.v
    c = v.shape[0]
    s = float(np.log1p(-v).sum())

    def log_target(alpha: float) -> float:
        return ((prior.alpha_shape - 1.0) * math.log(alpha) - prior.alpha_rate * alpha
                + c * math.log(alpha) + (alpha - 1.0) * s)

    cur = state.sticks.alpha
    step = math.exp(state.alpha_log_step)
    proposal = cur * math.exp(step * rng.standard_normal())
    log_ratio = (log_target(proposal) + math.log(proposal)
                 - log_target(cur) - math.log(cur))
    accepted = math.log(rng.random()) < log_ratio
    if accepted:
        state.sticks.alpha = proposal
    gain = min(0.05, 1.0 / math.sqrt(state.iteration + 1.0))
    state.alpha_log_step += gain * ((1.0 if accepted else 0.0) - 0.44)
    state.alpha_log_step = float(np.clip(state.alpha_log_step, -8.0, 4.0))


def _swap_components(state: ChainState, c: int, swap_sticks: bool) -> None:
    p = state.params
    pair = [c, c + 1]
    rev = [c + 1, c]
    p.mu_y[pair] = p.mu_y[rev]
    p.sigma_y[pair] = p.sigma_y[rev]
    p.mu_x[pair] = p.mu_x[rev]
    p.sigma_x[pair] = p.sigma_x[rev]
    for j in range(len(p.psi)):
        p.psi[j][pair] = p.psi[j][rev]
    state.vs.gamma[pair] = state.vs.gamma[rev]
    in_c = state.alloc == c
    in_next = state.alloc == c + 1
    state.alloc[in_c] = c + 1
    state.alloc[in_next] = c
    if swap_sticks:
        state.sticks.v[pair] = state.sticks.v[rev]
        state.sticks.weights = stick_weights(state.sticks.v)


def _label_moves(state: ChainState) -> None:
    """Two label-switching moves between adjacent components.

    The first exchanges parameters and allocations while keeping the sticks;
    the second also exchanges the stick fractions. Both leave the posterior
    invariant through their Metropolis ratios.
    """
    rng = state.rng
    c_count = state.n_components
    if c_count < 2:
        return
    counts = np.bincount(state.alloc, minlength=c_count) if state.alloc.size else np.zeros(
        c_count, dtype=np.int64)

    c = int(rng.integers(c_count - 1))
    w = state.sticks.weights
    log_ratio = (counts[c + 1] - counts[c]) * (math.log(w[c]) - math.log(w[c + 1]))
    if math.log(rng.random()) < log_ratio:
        _swap_components(state, c, swap_sticks=False)
        counts = counts.copy()
        counts[[c, c + 1]] = counts[[c + 1, c]]

    c = int(rng.integers(c_count - 1))
    v = state.sticks.v
    log_ratio = (counts[c] * math.log1p(-v[c + 1]) - counts[c + 1] * math.log1p(-v[c]))
    if math.log(rng.random()) < log_ratio:
        _swap_components(state, c, swap_sticks=True)


def _gibbs_sweep_data(state: ChainState, data: _ModelData, prior: PriorSpec) -> ChainState:
    state = copy.deepcopy(state)
    rng = state.rng
    n = data.n

    counts = (np.bincount(state.alloc, minlength=state.n_components)
              if n else np.zeros(state.n_components, dtype=np.int64))
    _update_sticks(state, counts)

    if n:
        u = rng.random(n) * state.sticks.weights[state.alloc]
        _extend_components(state, prior, float(u.min()))

    c_count = state.n_components
    members = [np.flatnonzero(state.alloc == c) if n else np.empty(0, dtype=np.int64)
               for c in range(c_count)]
    _update_params_outcome(state, data, prior, members)
    _update_params_cont(state, data, prior, members)
    _update_params_disc(state, data, prior, members)
    if prior.variable_selection:
        _update_switches(state, data, prior, members)

    if n:
        ll = component_log_likelihood(state, data, prior)
        feasible = state.sticks.weights[:, None] > u[None, :]
        ll = np.where(feasible, ll, -np.inf)
        gumbel = rng.gumbel(size=ll.shape)
        state.alloc = np.argmax(ll + gumbel, axis=0)

    _update_alpha(state, prior)
    _label_moves(state)

    if n:
        counts = np.bincount(state.alloc, minlength=state.n_components)
        last_occupied = int(np.flatnonzero(counts > 0)[-1])
        if last_occupied + 1 < state.n_components:
            _truncate(state, last_occupied + 1)

    state.sticks.weights = stick_weights(state.sticks.v)
    state.iteration += 1
    return state


def gibbs_sweep(state: ChainState, ds: Dataset, ystar, prior: PriorSpec) -> ChainState:
    """One full sweep over sticks, parameters, switches, allocations, and alpha.

    The input state is not modified; with equal inputs the successor state is
    bit-identical.
    """
    return _gibbs_sweep_data(state, _ModelData.build(ds, ystar), prior)


# --------------------------------------------------------------------------
# chain driver and trace
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TraceRecord:
    """Compacted per-iteration snapshot: allocations plus occupied-cluster parameters."""

    iteration: int
    alpha: float
    n_clusters: int
    alloc: np.ndarray                # (n,) labels 1..n_clusters
    sizes: np.ndarray                # (n_clusters,)
    mu_x: np.ndarray                 # (n_clusters, p1)
    psi: tuple[np.ndarray, ...]      # per discrete covariate: (n_clusters, K_j)
    mu_y: np.ndarray                 # (n_clusters, K)

    def parameter_matrix(self) -> np.ndarray:
        return np.hstack([self.mu_x, *self.psi, self.mu_y])


@dataclass
class ChainTrace:
    """Retained-iteration records plus the running co-clustering sum."""

    parameter_names: tuple[str, ...]
    records: list[TraceRecord] = field(default_factory=list)
    similarity_sum: np.ndarray | None = None
    n_retained: int = 0

    def add(self, record: TraceRecord) -> None:
        self.records.append(record)
        eq = (record.alloc[:, None] == record.alloc[None, :]).astype(np.float64)
        if self.similarity_sum is None:
            self.similarity_sum = eq
        else:
            self.similarity_sum += eq
        self.n_retained += 1

    def similarity(self):
        from .postprocess import similarity_from_sum

        return similarity_from_sum(self.similarity_sum, self.n_retained)


def parameter_names(ds: Dataset, arms: tuple[int, ...] | None = None) -> tuple[str, ...]:
    """Profile parameter labels: continuous means, category probabilities, arm means."""
    names = [spec.name for spec in ds.schema.continuous]
    for j, spec in enumerate(ds.schema.discrete):
        labels = ds.encodings.get(spec.name)
        for k in range(1, spec.categories + 1):
            raw = labels[k - 1] if labels and k <= len(labels) else str(k)
            names.append(f"{spec.name}[{raw}]")
    arms = arms or tuple(range(1, ds.n_arms + 1))
    names.extend(f"ystar_arm_{a}" for a in arms)
    return tuple(names)


def _record_state(state: ChainState, prior: PriorSpec) -> TraceRecord:
    counts = np.bincount(state.alloc, minlength=state.n_components)
    occupied = np.flatnonzero(counts > 0)
    labels = (np.searchsorted(occupied, state.alloc) + 1).astype(np.int16)
    return TraceRecord(
        iteration=state.iteration,
        alpha=state.sticks.alpha,
        n_clusters=occupied.size,
        alloc=labels,
        sizes=counts[occupied].copy(),
        mu_x=state.params.mu_x[occupied].copy(),
        psi=tuple(state.params.psi[j][occupied].copy() for j in range(prior.p_discrete)),
        mu_y=state.params.mu_y[occupied].copy(),
    )


def _check_invariants(state: ChainState, record: TraceRecord) -> None:
    drift = np.abs(state.sticks.weights - stick_weights(state.sticks.v)).max()
    if drift > 1e-12:
        raise RuntimeError(f"stick identity violated: drift {drift:.3e}")
    if record.alloc.min() < 1 or record.alloc.max() > record.n_clusters:
        raise RuntimeError("trace labels are not contiguous")


def run_chain(ds: Dataset, ystar, prior: PriorSpec, iterations: int, burn_in: int,
              seed: int, init_components: int = 50) -> ChainTrace:
    """Run the sampler and retain every post-burn-in iteration.

    The trace carries, per retained iteration, the compacted allocation vector
    and the occupied clusters' mean-type parameters, plus the running
    co-clustering sum from which the similarity matrix is assembled.
    """
    if not iterations > burn_in >= 0:
        raise ValueError("need iterations > burn_in >= 0")
    data = _ModelData.build(ds, ystar)
    state = initial_state(ds, ystar, prior, seed, init_components)
    trace = ChainTrace(parameter_names=parameter_names(ds))
    for _ in range(iterations):
        state = _gibbs_sweep_data(state, data, prior)
        if state.iteration > burn_in:
            record = _record_state(state, prior)
            _check_invariants(state, record)
            trace.add(record)
    return trace


def mean_selection_probabilities(trace_rho: np.ndarray) -> np.ndarray:
    """Posterior mean of the per-covariate selection probabilities."""
    return np.asarray(trace_rho, dtype=float).mean(axis=0)


def run_chain_with_rho(ds: Dataset, ystar, prior: PriorSpec, iterations: int,
                       burn_in: int, seed: int,
                       init_components: int = 50) -> tuple[ChainTrace, np.ndarray]:
    """As :func:`run_chain`, also collecting the selection-probability trace."""
    if not iterations > burn_in >= 0:
        raise ValueError("need iterations > burn_in >= 0")
    data = _ModelData.build(ds, ystar)
    state = initial_state(ds, ystar, prior, seed, init_components)
    trace = ChainTrace(parameter_names=parameter_names(ds))
    rho_rows = []
    for _ in range(iterations):
        state = _gibbs_sweep_data(state, data, prior)
        if state.iteration > burn_in:
            record = _record_state(state, prior)
            _check_invariants(state, record)
            trace.add(record)
            rho_rows.append(state.vs.rho.copy())
    return trace, np.asarray(rho_rows)


def prior_reproduction_chain(sweeps: int, seed: int, n_components: int = 5,
                             alpha_shape: float = 2.0, alpha_rate: float = 1.0,
                             burn_in: int = 1000) -> dict[str, np.ndarray]:
    """No-data successive-conditional run over (alpha, sticks).

    With no subjects the sweep resamples each stick fraction from its prior
    given alpha and alpha from its Metropolis step given the sticks, so the
    chain's stationary law is exactly the joint prior. Returns the retained
    alpha and first-stick traces for comparison against direct prior draws.
    """
    out_niw = NIWParams(mean=np.zeros(1), kappa=1.0, dof=3.0, scale=np.eye(1))
    prior = PriorSpec(out_niw=out_niw, cov_niw=None, disc_conc=(),
                      alpha_shape=alpha_shape, alpha_rate=alpha_rate)
    data = _ModelData(x_cont=np.empty((0, 0)), x_disc0=np.empty((0, 0), dtype=np.int64),
                      ystar=np.empty((0, 1)),
                      reference=EmpiricalReference(cont_means=np.empty(0), disc_props=()))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    alpha = alpha_shape / alpha_rate
    v = np.clip(rng.beta(1.0, alpha, size=n_components), _V_EPS, 1.0 - _V_EPS)
    params = ClusterParams(
        mu_y=np.empty((0, 1)), sigma_y=np.empty((0, 1, 1)),
        mu_x=np.empty((0, 0)), sigma_x=np.empty((0, 0, 0)), psi=[],
    )
    vs = VariableSelectionState(gamma=np.empty((0, 0), dtype=np.int8), rho=np.empty(0),
                                reference=data.reference)
    state = ChainState(alloc=np.empty(0, dtype=np.int64),
                       sticks=StickState(v=v, weights=stick_weights(v), alpha=alpha),
                       params=params, vs=vs, rng=rng, alpha_log_step=math.log(0.5))
    for _ in range(n_components):
        _append_component(params, vs, rng, prior)
    alphas = np.empty(sweeps)
    v1 = np.empty(sweeps)
    for it in range(burn_in + sweeps):
        state = _gibbs_sweep_data(state, data, prior)
        if it >= burn_in:
            alphas[it - burn_in] = state.sticks.alpha
            v1[it - burn_in] = state.sticks.v[0]
    return {"alpha": alphas, "v1": v1}
