"""Readers and writers for every on-disk artifact the pipeline produces.

Float cells use ``repr`` (shortest round-trip form) so identical computations
always serialize byte-identically. The similarity matrix travels as a dense
binary file: an 8-byte little-endian unsigned count of subjects, then row-major
float64 entries.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .bart import PotentialOutcomeMatrix
from .postprocess import ClusterProfileSummary, RepresentativeClustering, SimilarityMatrix
from .profile_regression import ChainTrace, TraceRecord


def _fmt(x: float) -> str:
    return repr(float(x))


# --- potential outcomes -----------------------------------------------------


def write_potential_outcomes(matrix: PotentialOutcomeMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id"] + [f"yhat_arm_{a}" for a in matrix.arms])
        for i in range(matrix.n):
            writer.writerow([i + 1] + [_fmt(v) for v in matrix.values[i]])


def read_potential_outcomes(path) -> PotentialOutcomeMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        arms = tuple(int(name.removeprefix("yhat_arm_")) for name in header[1:])
        values = np.array([[float(v) for v in row[1:]] for row in reader])
    return PotentialOutcomeMatrix(values=values, arms=arms)


# --- chain trace ------------------------------------------------------------


def write_trace(trace: ChainTrace, trace_path, params_path) -> None:
    """Trace rows (iteration, alpha, cluster count, allocations) plus a long
    companion table of per-(iteration, cluster) parameters."""
    if not trace.records:
        raise ValueError("trace is empty")
    n = trace.records[0].alloc.shape[0]
    with open(trace_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "alpha", "n_clusters"]
                        + [f"z_{i + 1}" for i in range(n)])
        for rec in trace.records:
            writer.writerow([rec.iteration, _fmt(rec.alpha), rec.n_clusters]
                            + rec.alloc.tolist())
    with open(params_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "cluster", "size", "parameter", "value"])
        for rec in trace.records:
            matrix = rec.parameter_matrix()
            for c in range(rec.n_clusters):
                for name, value in zip(trace.parameter_names, matrix[c]):
                    writer.writerow([rec.iteration, c + 1, int(rec.sizes[c]),
                                     name, _fmt(value)])


def read_trace(trace_path, params_path) -> ChainTrace:
    with open(trace_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = [(int(r[0]), float(r[1]), int(r[2]),
                 np.array([int(v) for v in r[3:]], dtype=np.int16)) for r in reader]
    by_iter: dict[int, dict[int, dict[str, float]]] = {}
    sizes: dict[int, dict[int, int]] = {}
    names: list[str] = []
    with open(params_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for it_s, c_s, size_s, name, val_s in reader:
            it, c = int(it_s), int(c_s)
            by_iter.setdefault(it, {}).setdefault(c, {})[name] = float(val_s)
            sizes.setdefault(it, {})[c] = int(size_s)
            if name not in names:
                names.append(name)
    trace = ChainTrace(parameter_names=tuple(names))
    for it, alpha, n_clusters, alloc in rows:
        matrix = np.array([[by_iter[it][c + 1][name] for name in names]
                           for c in range(n_clusters)])
        size_arr = np.array([sizes[it][c + 1] for c in range(n_clusters)])
        # parameter blocks are split on re-read only for pass-through use
        trace.add(TraceRecord(
            iteration=it, alpha=alpha, n_clusters=n_clusters, alloc=alloc,
            sizes=size_arr, mu_x=matrix, psi=(), mu_y=np.empty((n_clusters, 0)),
        ))
    return trace


# --- similarity matrix ------------------------------------------------------


def write_similarity(similarity: SimilarityMatrix, path) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", similarity.n))
        fh.write(np.ascontiguousarray(similarity.values, dtype="<f8").tobytes())


def read_similarity(path, n_iterations: int = 1) -> SimilarityMatrix:
    raw = Path(path).read_bytes()
    (n,) = struct.unpack_from("<Q", raw, 0)
    values = np.frombuffer(raw, dtype="<f8", offset=8).reshape(n, n).copy()
    return SimilarityMatrix(values=values, n_iterations=n_iterations)


def write_similarity_csv(similarity: SimilarityMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in similarity.values:
            writer.writerow([_fmt(v) for v in row])


# --- representative clustering and profiles ---------------------------------


def write_representative(rep: RepresentativeClustering, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "cluster"])
        for i, label in enumerate(rep.labels, start=1):
            writer.writerow([i, int(label)])


def read_labels(path) -> np.ndarray:
    """Cluster labels from a two-column (subject_id, cluster) CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        return np.array([int(r[1]) for r in reader], dtype=np.int64)


def write_profiles(summary: ClusterProfileSummary, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cluster", "parameter", "quantile", "value", "flag"])
        for cluster, parameter, quantile, value, flag in summary.rows():
            writer.writerow([cluster, parameter, quantile, _fmt(value), flag])


# --- small JSON payloads ----------------------------------------------------


def write_json(payload: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
