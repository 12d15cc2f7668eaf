"""Two-stage patient stratification for multi-arm trials.

Stage 1 imputes each subject's potential outcome under every arm with a
Bayesian sum-of-trees regression; stage 2 clusters subjects by jointly
modeling covariates and the imputed outcome vector with a Dirichlet-process
mixture, followed by consensus post-processing into a single representative
partition with model-averaged cluster profiles.
"""

__version__ = "0.1.0"

from .bart import (
    PotentialOutcomeMatrix,
    TreeEnsembleConfig,
    fit_sum_of_trees,
    impute_potential_outcomes,
)
from .data import (
    CovariateSpec,
    DataError,
    Dataset,
    EmpiricalReference,
    Schema,
    SchemaError,
    UtilityConfig,
    compute_utility,
    load_config,
    load_dataset,
    standardize_continuous,
    summarize_columns,
    with_utility_outcome,
    write_dataset,
)
from .metrics import adjusted_rand_index, completeness, homogeneity, metrics_report
from .pipeline import PRESETS, PipelineSettings, run_pipeline
from .postprocess import (
    RepresentativeClustering,
    SimilarityMatrix,
    accumulate_similarity,
    average_silhouette,
    pam_partition,
    select_representative,
    summarize_profiles,
)
from .profile_regression import (
    ChainState,
    ChainTrace,
    PriorSpec,
    gibbs_sweep,
    initial_state,
    run_chain,
    stick_weights,
)
from .simulate import LabeledDataset, ScenarioConfig, gen_scenario1, gen_scenario2, run_experiment
