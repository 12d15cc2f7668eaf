"""Mixture-sampler mechanics: exact densities, conjugacy wiring, mixing contracts."""

import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stratarm.conjugate import NIWParams
from stratarm.data import CONTINUOUS, CovariateSpec, Dataset, EmpiricalReference, Schema
from stratarm.profile_regression import (
    PriorSpec,
    VariableSelectionState,
    _gibbs_sweep_data,
    _ModelData,
    component_log_likelihood,
    effective_mean,
    gibbs_sweep,
    initial_state,
    log_density_cont,
    log_density_outcome,
    log_mass_disc,
    parameter_names,
    prior_reproduction_chain,
    run_chain,
    stick_weights,
)


def cont_dataset(x, ystar_shape_arms=2, seed=0):
    rng = np.random.default_rng(seed)
    n, p = x.shape
    schema = Schema(
        covariates=tuple(CovariateSpec(f"x{j + 1}", CONTINUOUS) for j in range(p)),
        treatment="arm", outcome="y", n_arms=ystar_shape_arms,
    )
    return Dataset(
        schema=schema,
        treatment=rng.integers(1, ystar_shape_arms + 1, size=n),
        outcome=rng.normal(size=n),
        x_cont=x,
        x_disc=np.empty((n, 0), dtype=np.int64),
        encodings={},
    )


# --- elementary functions ---------------------------------------------------


def test_stick_weights_whole_stick():
    np.testing.assert_allclose(stick_weights(np.array([1.0])), [1.0])


def test_stick_weights_geometric_halving():
    np.testing.assert_allclose(stick_weights(np.array([0.5, 0.5, 0.5])),
                               [0.5, 0.25, 0.125])


@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=12))
@settings(max_examples=60, deadline=None)
def test_stick_weights_telescoping_identity(vs):
    v = np.array(vs)
    w = stick_weights(v)
    assert w.sum() == pytest.approx(1.0 - np.prod(1.0 - v), abs=1e-12)
    assert np.all(w > 0)


def test_effective_mean_switch():
    assert effective_mean(1, 3.2, 0.0) == 3.2
    assert effective_mean(0, 3.2, 1.7) == 1.7
    assert effective_mean(0, 2.5, 2.5) == effective_mean(1, 2.5, 2.5)
    with pytest.raises(ValueError):
        effective_mean(2, 1.0, 1.0)


def test_log_density_cont_values():
    assert log_density_cont(np.zeros(1), np.zeros(1), np.eye(1)) == pytest.approx(
        -0.918939, abs=1e-6)
    assert log_density_cont(np.ones(2), np.ones(2), np.eye(2)) == pytest.approx(
        -1.837877, abs=1e-6)
    assert log_density_cont(np.ones(2), np.ones(2), np.diag([2.0, 2.0])) == pytest.approx(
        -2.531024, abs=1e-6)


def test_log_density_outcome_values():
    assert log_density_outcome(np.zeros(3), np.zeros(3), np.eye(3)) == pytest.approx(
        -2.756816, abs=1e-6)
    # dimension collapse to the univariate normal
    x, mu, s2 = 0.7, 0.2, 1.7
    expected = -0.5 * (math.log(2 * math.pi * s2) + (x - mu) ** 2 / s2)
    assert log_density_outcome(np.array([x]), np.array([mu]),
                               np.array([[s2]])) == pytest.approx(expected, abs=1e-12)


def test_log_density_outcome_dense_solve_oracle():
    rng = np.random.default_rng(1)
    for _ in range(5):
        k = int(rng.integers(2, 5))
        a = rng.normal(size=(k, k))
        cov = a @ a.T + k * np.eye(k)
        y = rng.normal(size=k)
        mu = rng.normal(size=k)
        dev = y - mu
        oracle = -0.5 * (k * math.log(2 * math.pi) + np.linalg.slogdet(cov)[1]
                         + dev @ np.linalg.solve(cov, dev))
        assert log_density_outcome(y, mu, cov) == pytest.approx(oracle, abs=1e-10)


def _vs_state(gamma_rows, props):
    ref = EmpiricalReference(cont_means=np.empty(0),
                             disc_props=tuple(np.asarray(p) for p in props))
    return VariableSelectionState(gamma=np.asarray(gamma_rows, dtype=np.int8),
                                  rho=np.ones(len(props)), reference=ref)


def test_log_mass_disc_product_of_halves():
    vs = _vs_state([[1, 1]], [np.array([0.5, 0.5]), np.array([0.5, 0.5])])
    psi_c = [np.array([0.5, 0.5]), np.array([0.5, 0.5])]
    assert log_mass_disc(np.array([1, 2]), psi_c, vs, 0) == pytest.approx(math.log(0.25))


def test_log_mass_disc_degenerate_mass():
    vs = _vs_state([[1]], [np.array([1.0, 0.0])])
    assert log_mass_disc(np.array([1]), [np.array([1.0, 0.0])], vs, 0) == 0.0


def test_log_mass_disc_switched_off_ignores_cluster():
    props = [np.array([0.3, 0.7])]
    vs = _vs_state([[0], [0]], props)
    a = log_mass_disc(np.array([2]), [np.array([0.9, 0.1])], vs, 0)
    b = log_mass_disc(np.array([2]), [np.array([0.1, 0.9])], vs, 1)
    assert a == b == pytest.approx(math.log(0.7))


def test_log_mass_disc_zero_probability_is_minus_inf():
    vs = _vs_state([[1]], [np.array([1.0, 0.0])])
    assert log_mass_disc(np.array([2]), [np.array([1.0, 0.0])], vs, 0) == -np.inf


# --- sweep-level contracts ----------------------------------------------------


def small_problem(seed=0, n=40):
    rng = np.random.default_rng(seed)
    half = n // 2
    x = np.vstack([rng.normal(0.0, 0.3, size=(half, 2)),
                   rng.normal(3.0, 0.3, size=(n - half, 2))])
    ystar = np.column_stack([
        np.concatenate([rng.normal(0.0, 0.2, half), rng.normal(2.0, 0.2, n - half)]),
        np.concatenate([rng.normal(1.0, 0.2, half), rng.normal(-1.0, 0.2, n - half)]),
    ])
    ds = cont_dataset(x, ystar_shape_arms=2, seed=seed)
    return ds, ystar


def test_gibbs_sweep_deterministic_successor():
    ds, ystar = small_problem()
    prior = PriorSpec.default(ds, ystar)
    state = initial_state(ds, ystar, prior, seed=3, init_components=8)
    s1 = gibbs_sweep(state, ds, ystar, prior)
    s2 = gibbs_sweep(state, ds, ystar, prior)
    np.testing.assert_array_equal(s1.alloc, s2.alloc)
    np.testing.assert_array_equal(s1.sticks.v, s2.sticks.v)
    assert s1.sticks.alpha == s2.sticks.alpha
    np.testing.assert_array_equal(s1.params.mu_y, s2.params.mu_y)
    np.testing.assert_array_equal(s1.params.mu_x, s2.params.mu_x)
    # and the input state was not mutated
    np.testing.assert_array_equal(state.alloc,
                                  initial_state(ds, ystar, prior, seed=3,
                                                init_components=8).alloc)


def test_stick_identity_after_every_sweep():
    ds, ystar = small_problem(seed=5)
    prior = PriorSpec.default(ds, ystar)
    state = initial_state(ds, ystar, prior, seed=1, init_components=8)
    data = _ModelData.build(ds, ystar)
    for _ in range(30):
        state = _gibbs_sweep_data(state, data, prior)
        np.testing.assert_allclose(state.sticks.weights, stick_weights(state.sticks.v),
                                   atol=1e-12)


def test_identical_rows_co_allocate():
    n = 24
    x = np.tile([1.5, -0.5], (n, 1))
    ystar = np.tile([2.0, 0.5], (n, 1))
    ds = cont_dataset(x, ystar_shape_arms=2, seed=2)
    tight = PriorSpec(
        out_niw=NIWParams(mean=np.array([2.0, 0.5]), kappa=1.0, dof=14.0,
                          scale=0.05 * np.eye(2) * 11),
        cov_niw=NIWParams(mean=np.array([1.5, -0.5]), kappa=1.0, dof=14.0,
                          scale=0.05 * np.eye(2) * 11),
        disc_conc=(),
    )
    state = initial_state(ds, ystar, tight, seed=7, init_components=6)
    data = _ModelData.build(ds, ystar)
    together = 0
    sweeps = 500
    for _ in range(sweeps):
        state = _gibbs_sweep_data(state, data, tight)
        together += int(np.unique(state.alloc).size == 1)
    assert together / sweeps >= 0.9


def test_switched_off_covariates_leave_allocation_to_outcome():
    ds, ystar = small_problem(seed=9)
    prior = PriorSpec.default(ds, ystar, variable_selection=True)
    state = initial_state(ds, ystar, prior, seed=4, init_components=5)
    state.vs.gamma[:] = 0
    shared_cov = np.diag([0.7, 1.3])
    state.params.sigma_x[:] = shared_cov
    data = _ModelData.build(ds, ystar)
    ll = component_log_likelihood(state, data, prior)
    from stratarm.conjugate import mvn_logpdf

    outcome_only = np.stack([
        mvn_logpdf(ystar, state.params.mu_y[c], state.params.sigma_y[c])
        for c in range(state.n_components)
    ])
    x_part = ll - outcome_only
    # every cluster contributes the identical covariate term per subject
    assert np.abs(x_part - x_part[0]).max() < 1e-10


def test_component_likelihood_permutes_with_relabeling():
    ds, ystar = small_problem(seed=11)
    prior = PriorSpec.default(ds, ystar)
    state = initial_state(ds, ystar, prior, seed=5, init_components=6)
    data = _ModelData.build(ds, ystar)
    ll = component_log_likelihood(state, data, prior)

    perm = np.array([2, 0, 1, 5, 3, 4])
    permuted = copy.deepcopy(state)
    permuted.params.mu_y = state.params.mu_y[perm]
    permuted.params.sigma_y = state.params.sigma_y[perm]
    permuted.params.mu_x = state.params.mu_x[perm]
    permuted.params.sigma_x = state.params.sigma_x[perm]
    permuted.vs.gamma = state.vs.gamma[perm]
    ll_perm = component_log_likelihood(permuted, data, prior)
    np.testing.assert_allclose(ll_perm, ll[perm], atol=1e-12)


def test_label_permuted_states_share_the_coclustering_law():
    # pointwise equality is impossible (stick weights are position-dependent),
    # so relabeled starting states must agree in the label-free similarity
    ds, ystar = small_problem(seed=13, n=30)
    prior = PriorSpec.default(ds, ystar)
    data = _ModelData.build(ds, ystar)

    def mean_similarity(swap_first_two: bool, seed: int):
        state = initial_state(ds, ystar, prior, seed=6, init_components=4)
        if swap_first_two:
            from stratarm.profile_regression import _swap_components

            _swap_components(state, 0, swap_sticks=True)
        state.rng = np.random.Generator(np.random.PCG64(seed))
        total = np.zeros((ds.n, ds.n))
        for it in range(300):
            state = _gibbs_sweep_data(state, data, prior)
            if it >= 100:
                total += state.alloc[:, None] == state.alloc[None, :]
        return total / 200

    s_a = mean_similarity(False, seed=21)
    s_b = mean_similarity(True, seed=22)
    assert np.abs(s_a - s_b).max() < 0.25
    # strong pairs agree on both runs
    assert np.array_equal(s_a > 0.9, s_b > 0.9)


def test_run_chain_record_count_and_structure():
    ds, ystar = small_problem(seed=15)
    prior = PriorSpec.default(ds, ystar)
    trace = run_chain(ds, ystar, prior, iterations=60, burn_in=30, seed=8,
                      init_components=6)
    assert len(trace.records) == 30
    sim = trace.similarity()
    assert np.all(np.diag(sim.values) == 1.0)
    np.testing.assert_array_equal(sim.values, sim.values.T)
    for rec in trace.records:
        assert rec.alloc.min() >= 1
        assert rec.alloc.max() <= rec.n_clusters
        score = (rec.alloc[:, None] == rec.alloc[None, :]).astype(float)
        assert set(np.unique(score)) <= {0.0, 1.0}
        assert np.all(np.diag(score) == 1.0)
        assert rec.sizes.sum() == ds.n


def test_identical_pair_coclusters_more_than_extreme_pair():
    rng = np.random.default_rng(17)
    n = 30
    x = rng.normal(size=(n, 2))
    x[1] = x[0]                      # identical pair
    x[2] = x[0] + 8.0                # far-away subject
    ystar = np.column_stack([x[:, 0] * 0.5, -x[:, 1] * 0.5])
    ds = cont_dataset(x, ystar_shape_arms=2, seed=3)
    prior = PriorSpec.default(ds, ystar)
    trace = run_chain(ds, ystar, prior, iterations=400, burn_in=200, seed=9,
                      init_components=6)
    sim = trace.similarity().values
    assert sim[0, 1] >= sim[0, 2]
    assert sim[0, 1] >= 0.5


def test_prior_reproduction_matches_direct_draws():
    out = prior_reproduction_chain(sweeps=3000, seed=123, burn_in=500)
    rng = np.random.default_rng(321)
    alpha_direct = rng.gamma(2.0, 1.0, size=200_000)
    v_direct = rng.beta(1.0, rng.gamma(2.0, 1.0, size=200_000))

    def batch_se(x, batches=40):
        means = x[: x.size - x.size % batches].reshape(batches, -1).mean(axis=1)
        return means.std(ddof=1) / math.sqrt(batches)

    for name, chain, direct in [("alpha", out["alpha"], alpha_direct),
                                ("v1", out["v1"], v_direct)]:
        se = math.hypot(batch_se(chain), direct.std() / math.sqrt(direct.size))
        assert abs(chain.mean() - direct.mean()) <= 4 * se, name


def test_prior_spec_validation(small_dataset):
    ystar = np.random.default_rng(0).normal(size=(small_dataset.n, 3))
    prior = PriorSpec.default(small_dataset, ystar)
    assert prior.n_arms == 3
    assert prior.p_continuous == 2
    assert prior.p_discrete == 1
    assert prior.out_niw.dof > prior.n_arms - 1
    with pytest.raises(ValueError, match="shape and rate"):
        PriorSpec(out_niw=prior.out_niw, cov_niw=None, disc_conc=(), alpha_shape=0.0)


def test_parameter_names_cover_all_blocks(small_dataset):
    names = parameter_names(small_dataset)
    assert names == ("age", "score", "group[a]", "group[b]", "group[c]",
                     "ystar_arm_1", "ystar_arm_2", "ystar_arm_3")
