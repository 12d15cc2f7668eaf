"""End-to-end orchestration: imputation, clustering, consensus, reporting.

Every run derives its stage seeds from one user seed through a fixed spawn
tree (stage 1 gets child 0, stage 2 child 1), writes a manifest capturing the
config, and can be re-run byte-identically from that manifest.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import artifacts, metrics
from .bart import PotentialOutcomeMatrix, TreeEnsembleConfig, fit_sum_of_trees, impute_potential_outcomes
from .data import DataError, Dataset, load_config, load_dataset, standardize_continuous
from .postprocess import (
    ClusterProfileSummary,
    RepresentativeClustering,
    select_representative,
    summarize_profiles,
)
from .profile_regression import ChainTrace, PriorSpec, run_chain

ARTIFACT_NAMES = {
    "potential_outcomes": "potential_outcomes.csv",
    "trace": "trace.csv",
    "trace_params": "cluster_params.csv",
    "similarity": "similarity.bin",
    "representative": "representative.csv",
    "profiles": "profiles.csv",
    "manifest": "manifest.json",
}


@dataclass(frozen=True)
class PipelineSettings:
    """Stage-level knobs for one full run."""

    trees: int = 200
    stage1_iterations: int = 6000
    stage1_burn_in: int = 1000
    stage2_iterations: int = 2000
    stage2_burn_in: int = 1000
    k_max: int | None = None
    variable_selection: bool = False
    standardize: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineSettings":
        return cls(**d)


PRESETS = {
    # simulation-study scale
    "sim": PipelineSettings(),
    # application scale: longer clustering stage
    "application": PipelineSettings(stage2_iterations=40000, stage2_burn_in=10000),
    # quick desk scale for acceptance checks and smoke runs
    "desk": PipelineSettings(trees=100, stage1_iterations=900, stage1_burn_in=300,
                             stage2_iterations=800, stage2_burn_in=400),
}


def stage_seeds(seed: int) -> tuple[int, int]:
    """Deterministic (stage-1, stage-2) seeds derived from the run seed."""
    state = np.random.SeedSequence(seed).generate_state(2, dtype=np.uint64)
    return int(state[0]), int(state[1])


@dataclass
class PipelineResult:
    potential_outcomes: PotentialOutcomeMatrix
    trace: ChainTrace
    representative: RepresentativeClustering
    profiles: ClusterProfileSummary

    @property
    def labels(self) -> np.ndarray:
        return self.representative.labels


def run_pipeline(ds: Dataset, settings: PipelineSettings, seed: int) -> PipelineResult:
    """Impute potential outcomes, cluster, and condense to a representative partition."""
    if settings.standardize:
        ds = standardize_continuous(ds)
    s1_seed, s2_seed = stage_seeds(seed)
    cfg = TreeEnsembleConfig(
        n_trees=settings.trees,
        iterations=settings.stage1_iterations,
        burn_in=settings.stage1_burn_in,
        seed=s1_seed,
    )
    draws = fit_sum_of_trees(ds, cfg)
    ystar = impute_potential_outcomes(draws, ds)
    prior = PriorSpec.default(ds, ystar, variable_selection=settings.variable_selection)
    trace = run_chain(ds, ystar, prior,
                      iterations=settings.stage2_iterations,
                      burn_in=settings.stage2_burn_in,
                      seed=s2_seed)
    rep = select_representative(trace.similarity(), k_max=settings.k_max)
    profiles = summarize_profiles(trace, rep)
    return PipelineResult(potential_outcomes=ystar, trace=trace,
                          representative=rep, profiles=profiles)


def write_run(result: PipelineResult, out_dir, manifest: dict,
              similarity_csv: bool = False) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {key: out / name for key, name in ARTIFACT_NAMES.items()}
    artifacts.write_potential_outcomes(result.potential_outcomes, paths["potential_outcomes"])
    artifacts.write_trace(result.trace, paths["trace"], paths["trace_params"])
    artifacts.write_similarity(result.trace.similarity(), paths["similarity"])
    artifacts.write_representative(result.representative, paths["representative"])
    artifacts.write_profiles(result.profiles, paths["profiles"])
    artifacts.write_json(manifest, paths["manifest"])
    if similarity_csv:
        artifacts.write_similarity_csv(result.trace.similarity(), out / "similarity.csv")
    return paths


def build_manifest(data_path, schema_path, settings: PipelineSettings, seed: int) -> dict:
    import scipy

    from . import __version__

    return {
        "data": str(data_path),
        "schema": str(schema_path),
        "settings": settings.to_dict(),
        "seed": seed,
        "versions": {
            "stratarm": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }


def run_from_paths(data_path, schema_path, settings: PipelineSettings, seed: int,
                   out_dir, similarity_csv: bool = False) -> dict[str, Path]:
    """Load, run, and persist one full pipeline; returns the artifact paths."""
    schema, _ = load_config(schema_path)
    ds = load_dataset(data_path, schema)
    result = run_pipeline(ds, settings, seed)
    manifest = build_manifest(data_path, schema_path, settings, seed)
    return write_run(result, out_dir, manifest, similarity_csv=similarity_csv)


def run_from_manifest(manifest_path, out_dir) -> dict[str, Path]:
    """Reproduce a previous run exactly from its manifest."""
    manifest = artifacts.read_json(manifest_path)
    settings = PipelineSettings.from_dict(manifest["settings"])
    return run_from_paths(manifest["data"], manifest["schema"], settings,
                          int(manifest["seed"]), out_dir)


def evaluate_labels(pred_path, truth_path) -> dict:
    """Metrics JSON for a predicted-vs-true label file pair."""
    pred = artifacts.read_labels(pred_path)
    truth = artifacts.read_labels(truth_path)
    if pred.shape != truth.shape:
        raise DataError(
            f"label files disagree in length: {pred.shape[0]} vs {truth.shape[0]}"
        )
    return metrics.metrics_report(truth, pred)
