import numpy as np
import pytest

from stratarm.data import CONTINUOUS, DISCRETE, CovariateSpec, Dataset, Schema


@pytest.fixture
def mixed_schema() -> Schema:
    return Schema(
        covariates=(
            CovariateSpec("age", CONTINUOUS),
            CovariateSpec("score", CONTINUOUS),
            CovariateSpec("group", DISCRETE, 3),
        ),
        treatment="arm",
        outcome="y",
        n_arms=3,
    )


@pytest.fixture
def small_dataset(mixed_schema) -> Dataset:
    rng = np.random.default_rng(7)
    n = 30
    return Dataset(
        schema=mixed_schema,
        treatment=rng.integers(1, 4, size=n),
        outcome=rng.normal(size=n),
        x_cont=rng.normal(size=(n, 2)),
        x_disc=rng.integers(1, 4, size=(n, 1)),
        encodings={"group": ("a", "b", "c")},
    )
