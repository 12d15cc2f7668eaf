"""Consensus machinery: similarity accumulation, PAM vs exhaustive search, profiles."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stratarm.postprocess import (
    RepresentativeClustering,
    SimilarityMatrix,
    accumulate_similarity,
    average_silhouette,
    pam_cost,
    pam_partition,
    score_matrix,
    select_representative,
    similarity_from_sum,
    summarize_profiles,
)
from stratarm.profile_regression import ChainTrace, TraceRecord


def block_similarity(sizes, within=1.0, between=0.0) -> SimilarityMatrix:
    n = sum(sizes)
    labels = np.repeat(np.arange(len(sizes)), sizes)
    s = np.where(labels[:, None] == labels[None, :], within, between)
    np.fill_diagonal(s, 1.0)
    return SimilarityMatrix(values=s, n_iterations=1)


def exhaustive_kmedoids(d, k):
    best = None
    for medoids in itertools.combinations(range(d.shape[0]), k):
        cost = pam_cost(d, medoids)
        if best is None or cost < best:
            best = cost
    return best


def random_dissimilarity(rng, n):
    x = rng.normal(size=(n, 2))
    d = np.linalg.norm(x[:, None] - x[None, :], axis=2)
    return d


def test_accumulate_two_iterations_example():
    s1 = score_matrix(np.array([1, 1, 2]))       # {1,2}{3}
    s2 = score_matrix(np.array([1, 2, 2]))       # {1}{2,3}
    sim = accumulate_similarity([s1, s2])
    assert sim.values[0, 1] == pytest.approx(0.5)
    assert sim.values[1, 2] == pytest.approx(0.5)
    assert sim.values[0, 2] == pytest.approx(0.0)
    assert sim.n_iterations == 2


def test_single_iteration_similarity_is_binary():
    sim = accumulate_similarity([score_matrix(np.array([1, 2, 1, 3]))])
    assert set(np.unique(sim.values)) <= {0.0, 1.0}


def test_similarity_structure_enforced():
    vals = np.array([[1.0, 0.5], [0.4, 1.0]])
    with pytest.raises(ValueError, match="symmetric"):
        SimilarityMatrix(values=vals, n_iterations=1)
    with pytest.raises(ValueError, match="diagonal"):
        SimilarityMatrix(values=np.array([[0.9, 0.2], [0.2, 1.0]]), n_iterations=1)


def test_accumulate_order_invariant():
    rng = np.random.default_rng(0)
    mats = [score_matrix(rng.integers(0, 3, size=8)) for _ in range(5)]
    a = accumulate_similarity(mats)
    b = accumulate_similarity(mats[::-1])
    np.testing.assert_array_equal(a.values, b.values)


def test_pam_k_equals_n_zero_cost():
    d = random_dissimilarity(np.random.default_rng(1), 6)
    labels, medoids = pam_partition(d, 6)
    assert pam_cost(d, medoids) == pytest.approx(0.0)
    assert sorted(medoids) == list(range(6))


def test_pam_k_one_returns_most_central_point():
    d = random_dissimilarity(np.random.default_rng(2), 9)
    labels, medoids = pam_partition(d, 1)
    assert medoids[0] == int(np.argmin(d.sum(axis=0)))
    assert np.all(labels == 1)


def test_pam_matches_exhaustive_optimum_on_small_instances():
    rng = np.random.default_rng(3)
    for trial in range(20):
        n = int(rng.integers(4, 9))
        k = int(rng.integers(2, 4))
        d = random_dissimilarity(rng, n)
        _, medoids = pam_partition(d, k)
        assert pam_cost(d, medoids) == pytest.approx(exhaustive_kmedoids(d, k), abs=1e-12)


def test_pam_deterministic_and_permutation_equivariant():
    rng = np.random.default_rng(4)
    d = random_dissimilarity(rng, 12)
    labels1, _ = pam_partition(d, 3)
    labels2, _ = pam_partition(d, 3)
    np.testing.assert_array_equal(labels1, labels2)
    perm = rng.permutation(12)
    labels_p, _ = pam_partition(d[np.ix_(perm, perm)], 3)
    # partitions must agree up to relabeling
    from stratarm.metrics import adjusted_rand_index

    assert adjusted_rand_index(labels1[perm], labels_p) == pytest.approx(1.0)


def test_silhouette_two_far_blocks():
    sim = block_similarity([5, 5], within=0.95, between=0.05)
    d = sim.dissimilarity()
    labels = np.repeat([1, 2], 5)
    assert average_silhouette(d, labels) >= 0.9


def test_silhouette_uniform_dissimilarity_is_zero():
    n = 6
    d = np.ones((n, n)) - np.eye(n)
    labels = np.array([1, 1, 1, 2, 2, 2])
    assert average_silhouette(d, labels) == pytest.approx(0.0)


def test_silhouette_singleton_contributes_zero():
    d = np.array([
        [0.0, 0.1, 0.9],
        [0.1, 0.0, 0.9],
        [0.9, 0.9, 0.0],
    ])
    labels = np.array([1, 1, 2])
    pair = average_silhouette(d, labels)
    # singleton's s is 0; the pair contributes (0.9 - 0.1)/0.9 each
    assert pair == pytest.approx((2 * (0.8 / 0.9) + 0.0) / 3)


def test_silhouette_rejects_single_cluster():
    d = np.zeros((3, 3))
    with pytest.raises(ValueError, match="2 clusters"):
        average_silhouette(d, np.ones(3, dtype=int))


def test_select_representative_two_perfect_blocks():
    sim = block_similarity([6, 4])
    rep = select_representative(sim, k_max=5)
    assert rep.k == 2
    np.testing.assert_array_equal(rep.labels, np.repeat([1, 2], [6, 4]))
    assert rep.silhouette == pytest.approx(1.0)


@pytest.mark.parametrize("g", [2, 3, 4])
def test_select_representative_recovers_block_count(g):
    sim = block_similarity([7] * g, within=0.9, between=0.1)
    rep = select_representative(sim, k_max=8)
    assert rep.k == g


def test_select_representative_tie_prefers_smaller_k():
    # with perfectly duplicated rows the k=3 scan reproduces the k=2 partition
    # (identical silhouette), so the smaller k must win
    sim = block_similarity([3, 3])
    rep = select_representative(sim, k_max=3)
    assert rep.k == 2


def test_select_representative_respects_k_max():
    sim = block_similarity([4, 4, 4, 4], within=0.9, between=0.1)
    rep = select_representative(sim, k_max=3)
    assert rep.k <= 3


def test_select_representative_weak_structure_warns():
    rng = np.random.default_rng(9)
    base = rng.uniform(0.4, 0.6, size=(20, 20))
    s = (base + base.T) / 2
    np.fill_diagonal(s, 1.0)
    sim = SimilarityMatrix(values=s, n_iterations=10)
    with pytest.warns(UserWarning, match="weak clustering structure"):
        select_representative(sim, k_max=4)


@given(st.integers(0, 2 ** 31 - 1), st.integers(8, 20), st.integers(2, 4))
@settings(max_examples=25, deadline=None)
def test_silhouette_always_in_unit_interval(seed, n, k):
    rng = np.random.default_rng(seed)
    d = random_dissimilarity(rng, n)
    labels = rng.integers(1, k + 1, size=n)
    if np.unique(labels).size < 2:
        labels[0] = 1
        labels[1] = 2
    asw = average_silhouette(d, labels)
    assert -1.0 - 1e-12 <= asw <= 1.0 + 1e-12


def _toy_trace(param_rows):
    """Trace over 2 subjects with given per-iteration 1-parameter cluster values."""
    trace = ChainTrace(parameter_names=("x1",))
    for it, values in enumerate(param_rows):
        alloc = np.array([1, 2], dtype=np.int16)
        trace.add(TraceRecord(
            iteration=it + 1, alpha=1.0, n_clusters=2, alloc=alloc,
            sizes=np.array([1, 1]), mu_x=np.array(values, dtype=float)[:, None],
            psi=(), mu_y=np.empty((2, 0)),
        ))
    return trace


def _rep_two():
    return RepresentativeClustering(labels=np.array([1, 2]), k=2, silhouette=1.0,
                                    medoids=np.array([0, 1]))


def test_summarize_profiles_single_iteration_degenerate_quantiles():
    trace = _toy_trace([[3.0, 7.0]])
    summary = summarize_profiles(trace, _rep_two())
    assert np.all(summary.values[:, 0, 0] == 3.0)
    assert np.all(summary.values[:, 1, 0] == 7.0)


def test_summarize_profiles_constant_trace_zero_width():
    trace = _toy_trace([[2.0, 4.0]] * 5)
    summary = summarize_profiles(trace, _rep_two())
    width = summary.values[-1] - summary.values[0]
    np.testing.assert_allclose(width, 0.0)


def test_summarize_profiles_flags_follow_interval_rule():
    trace = _toy_trace([[2.0 + 0.01 * i, 4.0 - 0.01 * i] for i in range(9)])
    summary = summarize_profiles(trace, _rep_two())
    # cross-cluster average is ~3; cluster 1 sits below, cluster 2 above
    assert summary.flags[0, 0] == "below"
    assert summary.flags[1, 0] == "above"


def test_summarize_profiles_member_weighted_mapping():
    # 3 subjects, representative clustering {1,2},{3}; iteration allocates
    # subjects 1,2 to different chain clusters, so the representative value is
    # the member-weighted mean of those clusters' parameters
    trace = ChainTrace(parameter_names=("x1",))
    trace.add(TraceRecord(
        iteration=1, alpha=1.0, n_clusters=3,
        alloc=np.array([1, 2, 3], dtype=np.int16), sizes=np.array([1, 1, 1]),
        mu_x=np.array([[1.0], [5.0], [9.0]]), psi=(), mu_y=np.empty((3, 0)),
    ))
    rep = RepresentativeClustering(labels=np.array([1, 1, 2]), k=2, silhouette=1.0,
                                   medoids=np.array([0, 2]))
    summary = summarize_profiles(trace, rep)
    assert summary.means[0, 0] == pytest.approx(3.0)
    assert summary.means[1, 0] == pytest.approx(9.0)


def test_similarity_from_sum_matches_accumulate():
    rng = np.random.default_rng(12)
    mats = [score_matrix(rng.integers(0, 3, size=10)) for _ in range(7)]
    direct = accumulate_similarity(mats)
    summed = similarity_from_sum(np.sum(mats, axis=0), 7)
    np.testing.assert_allclose(direct.values, summed.values)
