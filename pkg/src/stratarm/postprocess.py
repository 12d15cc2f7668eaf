"""Consensus post-processing: similarity matrix -> PAM -> silhouette -> profiles.

The chain's per-iteration co-clustering indicators average into a posterior
similarity matrix S; partitioning around medoids on the dissimilarity 1 - S,
scored by average silhouette width over a range of cluster counts, yields a
single representative partition. Cluster profiles are then model-averaged
across iterations through the members' allocations.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

SUMMARY_QUANTILES = (0.025, 0.05, 0.25, 0.5, 0.75, 0.95, 0.975)
#: ASW below this triggers a weak-structure warning from select_representative.
WEAK_STRUCTURE_ASW = 0.2


@dataclass(frozen=True)
class SimilarityMatrix:
    """Posterior co-clustering probabilities averaged over retained iterations."""

    values: np.ndarray
    n_iterations: int

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("similarity matrix must be square")
        if not np.allclose(v, v.T):
            raise ValueError("similarity matrix must be symmetric")
        if not np.allclose(np.diag(v), 1.0):
            raise ValueError("similarity diagonal must be 1")
        if v.min() < -1e-12 or v.max() > 1 + 1e-12:
            raise ValueError("similarity entries must lie in [0, 1]")
        v.setflags(write=False)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def dissimilarity(self) -> np.ndarray:
        d = 1.0 - self.values
        np.fill_diagonal(d, 0.0)
        return np.clip(d, 0.0, 1.0)


def score_matrix(labels: np.ndarray) -> np.ndarray:
    """Binary co-clustering indicator matrix of one iteration's allocations."""
    labels = np.asarray(labels)
    return (labels[:, None] == labels[None, :]).astype(np.float64)


def accumulate_similarity(score_matrices: Iterable[np.ndarray]) -> SimilarityMatrix:
    """Entrywise mean of binary score matrices."""
    total = None
    count = 0
    for s in score_matrices:
        s = np.asarray(s, dtype=np.float64)
        if total is None:
            total = s.copy()
        else:
            if s.shape != total.shape:
                raise ValueError(f"score matrix shape {s.shape} != {total.shape}")
            total += s
        count += 1
    if total is None:
        raise ValueError("at least one score matrix is required")
    return SimilarityMatrix(values=total / count, n_iterations=count)


def similarity_from_sum(running_sum: np.ndarray, n_iterations: int) -> SimilarityMatrix:
    """Build the similarity matrix from a pre-accumulated sum of score matrices."""
    if n_iterations < 1:
        raise ValueError("at least one iteration is required")
    return SimilarityMatrix(values=np.asarray(running_sum, dtype=float) / n_iterations,
                            n_iterations=n_iterations)


def _check_dissimilarity(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError("dissimilarity matrix must be square")
    if not np.allclose(d, d.T):
        raise ValueError("dissimilarity matrix must be symmetric")
    if not np.allclose(np.diag(d), 0.0):
        raise ValueError("dissimilarity diagonal must be 0")
    return d


#: enumerate all medoid sets exactly when there are at most this many
_EXACT_ENUMERATION_LIMIT = 6000


def _exact_medoids(d: np.ndarray, k: int) -> np.ndarray:
    from itertools import combinations

    n = d.shape[0]
    best_cost = np.inf
    best = None
    for medoids in combinations(range(n), k):
        cost = d[list(medoids)].min(axis=0).sum()
        if cost < best_cost - 1e-15:
            best_cost = cost
            best = medoids
    return np.array(best)


def pam_partition(d: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Partitioning around medoids, deterministic tie-breaking.

    Returns 1-based labels and the medoid indices (ascending). Small instances
    are solved exactly by enumerating medoid sets (single-swap descent can
    stall one swap short of the optimum); larger ones run BUILD plus steepest
    single-swap descent until no exchange lowers the total within-cluster
    dissimilarity to medoids. Ties resolve to the lowest index.
    """
    d = _check_dissimilarity(d)
    n = d.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"cluster count {k} outside 1..{n}")

    if math.comb(n, k) <= _EXACT_ENUMERATION_LIMIT:
        medoid_arr = _exact_medoids(d, k)
        labels = np.argmin(d[medoid_arr], axis=0) + 1
        return labels.astype(np.int64), medoid_arr

    # BUILD: start from the most central point, then greedily add the medoid
    # with the largest cost reduction.
    medoids = [int(np.argmin(d.sum(axis=0)))]
    nearest = d[medoids[0]].copy()
    while len(medoids) < k:
        gain = np.maximum(nearest[None, :] - d, 0.0).sum(axis=1)
        gain[medoids] = -np.inf
        best = int(np.argmax(gain))
        medoids.append(best)
        nearest = np.minimum(nearest, d[best])

    medoid_arr = np.array(sorted(medoids))
    while True:
        dm = d[medoid_arr]                       # (k, n)
        order = np.argsort(dm, axis=0, kind="stable")
        nearest_pos = order[0]
        d1 = dm[nearest_pos, np.arange(n)]
        d2 = dm[order[1], np.arange(n)] if k > 1 else np.full(n, np.inf)

        best_delta = -1e-12
        best_swap = None
        for mi in range(k):
            # removal cost baseline: points whose nearest medoid is mi fall back to d2
            fallback = np.where(nearest_pos == mi, d2, d1)
            delta = np.minimum(d, fallback[None, :]).sum(axis=1) - d1.sum()
            delta[medoid_arr] = np.inf
            h = int(np.argmin(delta))
            if delta[h] < best_delta:
                best_delta = float(delta[h])
                best_swap = (mi, h)
        if best_swap is None:
            break
        medoid_arr[best_swap[0]] = best_swap[1]
        medoid_arr = np.sort(medoid_arr)

    labels = np.argmin(d[medoid_arr], axis=0) + 1
    return labels.astype(np.int64), medoid_arr


def pam_cost(d: np.ndarray, medoids: Sequence[int]) -> float:
    """Total dissimilarity from each point to its nearest medoid."""
    d = np.asarray(d, dtype=float)
    return float(d[list(medoids)].min(axis=0).sum())


def average_silhouette(d: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette width (b - a)/max(a, b); singletons contribute 0."""
    d = _check_dissimilarity(d)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    n = d.shape[0]
    masks = [labels == c for c in uniq]
    sizes = np.array([m.sum() for m in masks])
    # mean dissimilarity from every point to every cluster
    mean_to = np.stack([d[:, m].sum(axis=1) for m in masks], axis=1) / sizes[None, :]
    s = np.zeros(n)
    for ci, m in enumerate(masks):
        if sizes[ci] == 1:
            continue
        a = mean_to[m, ci] * sizes[ci] / (sizes[ci] - 1)  # exclude self
        others = np.delete(mean_to[m], ci, axis=1)
        b = others.min(axis=1)
        denom = np.maximum(a, b)
        s[np.flatnonzero(m)] = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


@dataclass(frozen=True)
class RepresentativeClustering:
    """Final consensus partition: labels 1..k, its silhouette, and the medoids."""

    labels: np.ndarray
    k: int
    silhouette: float
    medoids: np.ndarray

    def __post_init__(self):
        uniq = np.unique(self.labels)
        if uniq.size != self.k or uniq.min() != 1 or uniq.max() != self.k:
            raise ValueError("labels must be contiguous 1..k with no empty cluster")
        self.labels.setflags(write=False)
        self.medoids.setflags(write=False)


def default_k_max(n: int) -> int:
    return max(2, min(10, n // 10))


def select_representative(similarity: SimilarityMatrix, k_max: int | None = None) -> RepresentativeClustering:
    """PAM over k = 2..k_max on 1 - S, keeping the partition with maximal ASW.

    Ties break toward smaller k. Emits a warning when the winning silhouette
    indicates weak structure.
    """
    if k_max is None:
        k_max = default_k_max(similarity.n)
    if k_max < 2:
        raise ValueError("k_max must be >= 2")
    k_max = min(k_max, similarity.n)
    d = similarity.dissimilarity()
    best = None
    for k in range(2, k_max + 1):
        labels, medoids = pam_partition(d, k)
        uniq, inverse = np.unique(labels, return_inverse=True)
        if uniq.size < 2:
            continue
        # duplicate rows can starve a medoid; compact away any empty cluster
        labels = (inverse + 1).astype(np.int64)
        asw = average_silhouette(d, labels)
        if best is None or asw > best.silhouette + 1e-12:
            best = RepresentativeClustering(
                labels=labels, k=int(uniq.size), silhouette=asw, medoids=medoids[uniq - 1]
            )
    if best is None:
        # fully degenerate similarity: every pair always co-clusters
        warnings.warn("similarity matrix is degenerate; returning a single cluster",
                      stacklevel=2)
        return RepresentativeClustering(
            labels=np.ones(similarity.n, dtype=np.int64), k=1,
            silhouette=float("nan"), medoids=np.array([0]),
        )
    if best.silhouette < WEAK_STRUCTURE_ASW:
        warnings.warn(
            f"weak clustering structure: best average silhouette width {best.silhouette:.3f}",
            stacklevel=2,
        )
    return best


@dataclass(frozen=True)
class ClusterProfileSummary:
    """Posterior quantiles of cluster-level parameters plus interval flags.

    ``values`` has shape (n_quantiles, k, n_parameters); ``means`` is the
    posterior mean per (cluster, parameter). ``flags`` marks each pair as
    'above', 'below', or 'overlapping' according to whether the 90% credible
    interval clears the unweighted cross-cluster average of posterior means.
    """

    parameters: tuple[str, ...]
    quantiles: tuple[float, ...]
    values: np.ndarray
    means: np.ndarray
    flags: np.ndarray

    def rows(self):
        """Long-format iteration: (cluster, parameter, quantile-label, value, flag)."""
        for g in range(self.means.shape[0]):
            for pi, name in enumerate(self.parameters):
                flag = self.flags[g, pi]
                for qi, q in enumerate(self.quantiles):
                    yield g + 1, name, f"q{100 * q:g}", self.values[qi, g, pi], flag
                yield g + 1, name, "mean", self.means[g, pi], flag


def summarize_profiles(trace, rep: RepresentativeClustering) -> ClusterProfileSummary:
    """Model-averaged profiles of the representative clusters.

    For each retained iteration, a representative cluster's parameter value is
    the member-weighted average of the parameters of the iteration clusters its
    members occupy; quantiles are then taken across iterations.
    """
    records = trace.records
    if not records:
        raise ValueError("trace is empty")
    k = rep.k
    names = tuple(trace.parameter_names)
    n = rep.labels.shape[0]
    member_of = [np.flatnonzero(rep.labels == g + 1) for g in range(k)]
    per_iter = np.empty((len(records), k, len(names)))
    for t, rec in enumerate(records):
        alloc = rec.alloc
        if alloc.shape[0] != n:
            raise ValueError("trace allocations and representative labels disagree in length")
        params = rec.parameter_matrix()          # (n_clusters, n_parameters)
        c_count = params.shape[0]
        for g in range(k):
            counts = np.bincount(alloc[member_of[g]] - 1, minlength=c_count).astype(float)
            per_iter[t, g] = (counts / counts.sum()) @ params
    values = np.quantile(per_iter, SUMMARY_QUANTILES, axis=0)
    means = per_iter.mean(axis=0)
    lo = np.quantile(per_iter, 0.05, axis=0)
    hi = np.quantile(per_iter, 0.95, axis=0)
    reference = means.mean(axis=0)               # unweighted cross-cluster average
    flags = np.where(lo > reference, "above", np.where(hi < reference, "below", "overlapping"))
    return ClusterProfileSummary(
        parameters=names,
        quantiles=SUMMARY_QUANTILES,
        values=values,
        means=means,
        flags=flags,
    )
