"""Synthetic multi-arm trial generators and the replicated experiment runner.

Scenario 1: three equal clusters, three continuous covariates, three arms,
with a tunable within-cluster correlation between the first two covariates.
Scenario 2: four unequal clusters (n/9, 2n/9, 2n/9, 4n/9), two binary plus one
three-level covariate plus one continuous covariate, four arms; optionally
extended with cluster-independent noise covariates for variable-selection
studies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import CONTINUOUS, DISCRETE, CovariateSpec, Dataset, Schema
from . import metrics as _metrics

SCENARIO1_X_MEANS = np.array([
    [2.0, 4.0, 5.0],
    [4.0, 6.0, 1.0],
    [6.0, 1.0, 3.0],
])
SCENARIO1_Y_MEANS = np.array([
    [4.0, 4.0, 4.0],
    [4.0, 7.0, 9.0],
    [4.0, 6.0, 5.0],
])

SCENARIO2_P_X1 = np.array([0.2, 0.4, 0.6, 0.8])
SCENARIO2_P_X2 = np.array([0.4, 0.4, 0.6, 0.6])
SCENARIO2_P_X3 = np.array([
    [0.10, 0.15, 0.75],
    [0.20, 0.30, 0.50],
    [0.30, 0.15, 0.55],
    [0.40, 0.30, 0.30],
])
SCENARIO2_E_X4 = np.array([2.0, 4.0, 8.0, 6.0])
SCENARIO2_Y_MEANS = np.array([
    [2.0, 2.0, 2.0, 2.0],
    [2.0, 5.0, 4.0, 3.0],
    [2.0, 4.0, 5.0, 6.0],
    [3.0, 6.0, 8.0, 8.0],
])
SCENARIO2_SIZE_NINTHS = np.array([1, 2, 2, 4])

#: categories for appended uniform-categorical noise covariates
_NOISE_CATEGORIES = 3


@dataclass(frozen=True)
class ScenarioConfig:
    """Settings for one simulated scenario family."""

    scenario: int
    n: int = 450
    sigma_y: float = 0.5
    sigma_x: float = 0.5
    rho_x: float = 0.0
    n_noise_covariates: int = 0
    replicates: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in (1, 2):
            raise ValueError("scenario must be 1 or 2")
        if self.sigma_y <= 0 or self.sigma_x <= 0:
            raise ValueError("noise levels must be positive")
        if not 0.0 <= self.rho_x < 1.0:
            raise ValueError("rho_x must lie in [0, 1)")
        if self.scenario == 1 and self.n % 3 != 0:
            raise ValueError("scenario 1 needs n divisible by 3")
        if self.scenario == 2 and self.n % 9 != 0:
            raise ValueError("scenario 2 needs n divisible by 9")
        if self.n_noise_covariates and self.scenario != 2:
            raise ValueError("noise covariates are a scenario-2 extension")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")


@dataclass(frozen=True)
class LabeledDataset:
    """A dataset plus its generating class labels and true mean potential outcomes."""

    dataset: Dataset
    labels: np.ndarray
    true_outcome_means: np.ndarray

    def __post_init__(self):
        if self.labels.shape[0] != self.dataset.n:
            raise ValueError("label length does not match dataset")
        if self.true_outcome_means.shape != (self.dataset.n, self.dataset.n_arms):
            raise ValueError("true outcome means must be n x n_arms")
        self.labels.setflags(write=False)
        self.true_outcome_means.setflags(write=False)


def replicate_rng(cfg: ScenarioConfig, replicate: int) -> np.random.Generator:
    """Independent, individually re-runnable stream for one replicate."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(replicate,)))
    )


def scenario1_schema() -> Schema:
    covs = tuple(CovariateSpec(f"x{j}", CONTINUOUS) for j in (1, 2, 3))
    return Schema(covariates=covs, treatment="arm", outcome="y", n_arms=3)


def gen_scenario1(cfg: ScenarioConfig, replicate: int = 0) -> LabeledDataset:
    """Three equal clusters; covariates MVN around the cluster profile."""
    if cfg.scenario != 1:
        raise ValueError("config is not for scenario 1")
    rng = replicate_rng(cfg, replicate)
    n = cfg.n
    labels = np.repeat(np.arange(1, 4), n // 3)
    cov = cfg.sigma_x ** 2 * np.array([
        [1.0, cfg.rho_x, 0.0],
        [cfg.rho_x, 1.0, 0.0],
        [0.0, 0.0, 1.0],
    ])
    chol = np.linalg.cholesky(cov)
    x = SCENARIO1_X_MEANS[labels - 1] + rng.standard_normal((n, 3)) @ chol.T
    arm = rng.integers(1, 4, size=n)
    ey = SCENARIO1_Y_MEANS[labels - 1]
    y = ey[np.arange(n), arm - 1] + cfg.sigma_y * rng.standard_normal(n)
    ds = Dataset(
        schema=scenario1_schema(),
        treatment=arm,
        outcome=y,
        x_cont=x,
        x_disc=np.empty((n, 0), dtype=np.int64),
        encodings={},
    )
    return LabeledDataset(dataset=ds, labels=labels, true_outcome_means=ey.copy())


def scenario2_schema(n_noise_covariates: int = 0) -> Schema:
    covs = [
        CovariateSpec("x1", DISCRETE, 2),
        CovariateSpec("x2", DISCRETE, 2),
        CovariateSpec("x3", DISCRETE, 3),
        CovariateSpec("x4", CONTINUOUS),
    ]
    for q in range(1, n_noise_covariates + 1):
        if q % 2 == 1:
            covs.append(CovariateSpec(f"noise{q}", CONTINUOUS))
        else:
            covs.append(CovariateSpec(f"noise{q}", DISCRETE, _NOISE_CATEGORIES))
    return Schema(covariates=tuple(covs), treatment="arm", outcome="y", n_arms=4)


def gen_scenario2(cfg: ScenarioConfig, replicate: int = 0) -> LabeledDataset:
    """Four unequal clusters with mixed covariates; optional noise extension."""
    if cfg.scenario != 2:
        raise ValueError("config is not for scenario 2")
    rng = replicate_rng(cfg, replicate)
    n = cfg.n
    sizes = SCENARIO2_SIZE_NINTHS * (n // 9)
    labels = np.repeat(np.arange(1, 5), sizes)
    g = labels - 1

    x1 = (rng.random(n) < SCENARIO2_P_X1[g]).astype(np.int64)
    x2 = (rng.random(n) < SCENARIO2_P_X2[g]).astype(np.int64)
    cum3 = SCENARIO2_P_X3.cumsum(axis=1)
    u3 = rng.random(n)
    x3 = (u3[:, None] > cum3[g]).sum(axis=1)
    x4 = SCENARIO2_E_X4[g] + cfg.sigma_x * rng.standard_normal(n)

    schema = scenario2_schema(cfg.n_noise_covariates)
    cont_cols = [x4]
    disc_cols = [x1 + 1, x2 + 1, x3 + 1]
    encodings = {"x1": ("0", "1"), "x2": ("0", "1"), "x3": ("0", "1", "2")}
    for q in range(1, cfg.n_noise_covariates + 1):
        if q % 2 == 1:
            cont_cols.append(rng.standard_normal(n))
        else:
            disc_cols.append(rng.integers(1, _NOISE_CATEGORIES + 1, size=n))
            encodings[f"noise{q}"] = tuple(str(v) for v in range(_NOISE_CATEGORIES))

    arm = rng.integers(1, 5, size=n)
    ey = SCENARIO2_Y_MEANS[g]
    y = ey[np.arange(n), arm - 1] + cfg.sigma_y * rng.standard_normal(n)
    ds = Dataset(
        schema=schema,
        treatment=arm,
        outcome=y,
        x_cont=np.column_stack(cont_cols),
        x_disc=np.column_stack(disc_cols),
        encodings=encodings,
    )
    return LabeledDataset(dataset=ds, labels=labels, true_outcome_means=ey.copy())


def generate(cfg: ScenarioConfig, replicate: int = 0) -> LabeledDataset:
    return gen_scenario1(cfg, replicate) if cfg.scenario == 1 else gen_scenario2(cfg, replicate)


REPLICATE_COLUMNS = ("ari", "completeness", "homogeneity", "n_cluster")


@dataclass
class ExperimentResult:
    """Per-replicate metric rows plus mean/SD aggregates."""

    config: ScenarioConfig
    rows: list[dict]
    errors: list[dict] = field(default_factory=list)

    def aggregate(self) -> dict:
        out = {}
        for col in REPLICATE_COLUMNS:
            vals = np.array([r[col] for r in self.rows], dtype=float)
            out[col] = {
                "mean": float(vals.mean()) if vals.size else float("nan"),
                "sd": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
            }
        out["n_replicates"] = len(self.rows)
        out["n_failed"] = len(self.errors)
        return out


def run_experiment(cfg: ScenarioConfig,
                   pipeline: Callable[[LabeledDataset, int], np.ndarray]) -> ExperimentResult:
    """Run ``pipeline`` on every replicate and score it against the ground truth.

    ``pipeline(labeled, replicate)`` must return predicted cluster labels.
    Replicate failures are recorded and skipped rather than aborting the batch.
    """
    result = ExperimentResult(config=cfg, rows=[], errors=[])
    for rep in range(cfg.replicates):
        labeled = generate(cfg, rep)
        try:
            pred = pipeline(labeled, rep)
        except Exception as exc:  # noqa: BLE001 - recorded, not fatal to the batch
            result.errors.append({"replicate": rep, "error": f"{type(exc).__name__}: {exc}"})
            continue
        row = {
            "replicate": rep,
            "ari": _metrics.adjusted_rand_index(labeled.labels, pred),
            "completeness": _metrics.completeness(labeled.labels, pred),
            "homogeneity": _metrics.homogeneity(labeled.labels, pred),
            "n_cluster": int(np.unique(pred).size),
        }
        result.rows.append(row)
    return result
