"""External clustering-validation metrics: adjusted Rand index, homogeneity, completeness.

All three are invariant to relabeling of either partition. Entropies use the
natural log (the base cancels in every ratio). Degenerate conventions: a score
of 1 when the conditioning entropy is zero, and ARI of 1 when both partitions
are simultaneously trivial (the pair-counting denominator vanishes only when
the partitions coincide).
"""

from __future__ import annotations

import numpy as np


def _check_pair(truth, pred) -> tuple[np.ndarray, np.ndarray]:
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.ndim != 1 or pred.ndim != 1:
        raise ValueError("partitions must be 1-d label arrays")
    if truth.shape != pred.shape:
        raise ValueError(f"partition lengths differ: {truth.shape[0]} vs {pred.shape[0]}")
    return truth, pred


def contingency_table(truth, pred) -> np.ndarray:
    """Joint label-count matrix with one row per true class, one column per cluster."""
    truth, pred = _check_pair(truth, pred)
    _, ti = np.unique(truth, return_inverse=True)
    _, pi = np.unique(pred, return_inverse=True)
    r, c = ti.max() + 1, pi.max() + 1
    table = np.zeros((r, c), dtype=np.int64)
    np.add.at(table, (ti, pi), 1)
    return table


def _comb2(x: np.ndarray) -> np.ndarray:
    return x * (x - 1) / 2.0


def adjusted_rand_index(truth, pred) -> float:
    """Chance-corrected pair-counting agreement between two partitions."""
    truth, pred = _check_pair(truth, pred)
    if truth.shape[0] < 2:
        raise ValueError("adjusted Rand index needs at least 2 subjects")
    table = contingency_table(truth, pred)
    n = truth.shape[0]
    sum_cells = _comb2(table.astype(float)).sum()
    sum_rows = _comb2(table.sum(axis=1).astype(float)).sum()
    sum_cols = _comb2(table.sum(axis=0).astype(float)).sum()
    total = _comb2(float(n))
    expected = sum_rows * sum_cols / total
    maximum = 0.5 * (sum_rows + sum_cols)
    if maximum == expected:
        # both partitions trivial in the same way => identical
        return 1.0
    return float((sum_cells - expected) / (maximum - expected))


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def _conditional_entropy(table: np.ndarray) -> float:
    """H(rows | columns) from a joint count table."""
    n = table.sum()
    col_tot = table.sum(axis=0)
    h = 0.0
    for j in range(table.shape[1]):
        col = table[:, j]
        nz = col[col > 0]
        h -= float((nz / n * (np.log(nz) - np.log(col_tot[j]))).sum())
    return h


def homogeneity(truth, pred) -> float:
    """1 - H(classes | clusters)/H(classes); 1 when each cluster is single-class."""
    table = contingency_table(truth, pred)
    h_classes = _entropy(table.sum(axis=1).astype(float))
    if h_classes == 0.0:
        return 1.0
    return 1.0 - _conditional_entropy(table) / h_classes


def completeness(truth, pred) -> float:
    """1 - H(clusters | classes)/H(clusters); 1 when each class stays together."""
    table = contingency_table(truth, pred)
    h_clusters = _entropy(table.sum(axis=0).astype(float))
    if h_clusters == 0.0:
        return 1.0
    return 1.0 - _conditional_entropy(table.T) / h_clusters


def metrics_report(truth, pred) -> dict:
    """All three metrics plus cluster counts, in the JSON report layout."""
    truth, pred = _check_pair(truth, pred)
    return {
        "ari": adjusted_rand_index(truth, pred),
        "homogeneity": homogeneity(truth, pred),
        "completeness": completeness(truth, pred),
        "n_clusters_pred": int(np.unique(pred).size),
        "n_clusters_true": int(np.unique(truth).size),
    }
