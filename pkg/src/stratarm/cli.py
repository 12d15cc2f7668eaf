"""Command-line surface: simulate, fit-stage1, cluster, postprocess, evaluate, pipeline, report.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
failure (with a diagnostics file when an output directory is available).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import artifacts, simulate
from .bart import TreeEnsembleConfig, fit_sum_of_trees, impute_potential_outcomes
from .conjugate import CovarianceError
from .data import (
    DataError,
    SchemaError,
    load_config,
    load_dataset,
    standardize_continuous,
    write_config,
    write_dataset,
    write_encoding_tables,
)
from .pipeline import (
    PRESETS,
    PipelineSettings,
    build_manifest,
    evaluate_labels,
    run_from_manifest,
    run_pipeline,
    write_run,
)
from .postprocess import select_representative, summarize_profiles
from .profile_regression import PriorSpec, run_chain

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


def _add_scenario_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", type=int, choices=(1, 2), required=True)
    p.add_argument("--n", type=int, default=450)
    p.add_argument("--sigma-y", type=float, default=0.5)
    p.add_argument("--sigma-x", type=float, default=0.5)
    p.add_argument("--rho-x", type=float, default=0.0)
    p.add_argument("--noise-covariates", type=int, default=0,
                   help="appended cluster-independent covariates (scenario 2 only)")
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)


def _add_settings_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), default="sim",
                   help="iteration presets: sim (stage 1 6000/1000, stage 2 2000/1000), "
                        "application (stage 2 40000/10000), desk (quick runs)")
    p.add_argument("--trees", type=int, default=None)
    p.add_argument("--stage1-iterations", type=int, default=None)
    p.add_argument("--stage1-burnin", type=int, default=None)
    p.add_argument("--stage2-iterations", type=int, default=None)
    p.add_argument("--stage2-burnin", type=int, default=None)
    p.add_argument("--k-max", type=int, default=None,
                   help="largest cluster count scanned (default min(10, n/10))")
    p.add_argument("--variable-selection", action="store_true",
                   help="enable per-covariate selection switches (off by default, "
                        "matching the reference defaults)")
    p.add_argument("--standardize", action="store_true",
                   help="center/scale continuous covariates before clustering")


def _settings_from_args(args) -> PipelineSettings:
    base = PRESETS[args.preset]
    overrides = {}
    for attr, arg in [("trees", "trees"),
                      ("stage1_iterations", "stage1_iterations"),
                      ("stage1_burn_in", "stage1_burnin"),
                      ("stage2_iterations", "stage2_iterations"),
                      ("stage2_burn_in", "stage2_burnin"),
                      ("k_max", "k_max")]:
        value = getattr(args, arg)
        if value is not None:
            overrides[attr] = value
    if args.variable_selection:
        overrides["variable_selection"] = True
    if args.standardize:
        overrides["standardize"] = True
    d = base.to_dict()
    d.update(overrides)
    return PipelineSettings.from_dict(d)


def _scenario_config(args) -> simulate.ScenarioConfig:
    return simulate.ScenarioConfig(
        scenario=args.scenario,
        n=args.n,
        sigma_y=args.sigma_y,
        sigma_x=args.sigma_x,
        rho_x=args.rho_x,
        n_noise_covariates=args.noise_covariates,
        replicates=args.replicates,
        seed=args.seed,
    )


def _write_truth(labeled: simulate.LabeledDataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        k = labeled.dataset.n_arms
        writer.writerow(["subject_id", "cluster"] + [f"ey_arm_{a}" for a in range(1, k + 1)])
        for i in range(labeled.dataset.n):
            writer.writerow([i + 1, int(labeled.labels[i])]
                            + [repr(float(v)) for v in labeled.true_outcome_means[i]])


def cmd_simulate(args) -> int:
    cfg = _scenario_config(args)
    out = Path(args.out_dir)

    def emit(rep: int, target: Path) -> None:
        labeled = simulate.generate(cfg, rep)
        target.mkdir(parents=True, exist_ok=True)
        write_dataset(labeled.dataset, target / "data.csv")
        write_config(labeled.dataset.schema, target / "schema.json")
        write_encoding_tables(labeled.dataset, target / "encodings.csv")
        _write_truth(labeled, target / "truth.csv")

    if cfg.replicates == 1:
        emit(0, out)
    else:
        for rep in range(cfg.replicates):
            emit(rep, out / f"replicate_{rep:03d}")
    return 0


def _load(args):
    schema, _ = load_config(args.schema)
    ds = load_dataset(args.data, schema)
    if getattr(args, "standardize", False):
        ds = standardize_continuous(ds)
    return ds


def cmd_fit_stage1(args) -> int:
    ds = _load(args)
    cfg = TreeEnsembleConfig(n_trees=args.trees, iterations=args.iterations,
                             burn_in=args.burnin, seed=args.seed)
    draws = fit_sum_of_trees(ds, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts.write_potential_outcomes(impute_potential_outcomes(draws, ds),
                                       out / "potential_outcomes.csv")
    if args.trace:
        with open(out / "stage1_trace.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["draw", "sigma2"])
            for i, s2 in enumerate(draws.sigma2):
                writer.writerow([i, repr(float(s2))])
    return 0


def cmd_cluster(args) -> int:
    ds = _load(args)
    ystar = artifacts.read_potential_outcomes(args.potential_outcomes)
    prior = PriorSpec.default(ds, ystar, variable_selection=args.variable_selection)
    trace = run_chain(ds, ystar, prior, iterations=args.iterations,
                      burn_in=args.burnin, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts.write_trace(trace, out / "trace.csv", out / "cluster_params.csv")
    artifacts.write_similarity(trace.similarity(), out / "similarity.bin")
    if args.similarity_csv:
        artifacts.write_similarity_csv(trace.similarity(), out / "similarity.csv")
    return 0


def cmd_postprocess(args) -> int:
    similarity = artifacts.read_similarity(args.similarity)
    trace = artifacts.read_trace(args.trace, args.trace_params)
    rep = select_representative(similarity, k_max=args.k_max)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts.write_representative(rep, out / "representative.csv")
    artifacts.write_profiles(summarize_profiles(trace, rep), out / "profiles.csv")
    return 0


def cmd_evaluate(args) -> int:
    report = evaluate_labels(args.pred, args.truth)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_pipeline(args) -> int:
    if args.from_manifest:
        run_from_manifest(args.from_manifest, args.out_dir)
        return 0
    settings = _settings_from_args(args)
    ds = _load(args)
    result = run_pipeline(ds, settings, args.seed)
    manifest = build_manifest(args.data, args.schema, settings, args.seed)
    write_run(result, args.out_dir, manifest, similarity_csv=args.similarity_csv)
    return 0


def cmd_report(args) -> int:
    cfg = _scenario_config(args)
    settings = _settings_from_args(args)

    def one(labeled, rep):
        return run_pipeline(labeled.dataset, settings, seed=rep).labels

    result = simulate.run_experiment(cfg, one)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "replicates.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["replicate", *simulate.REPLICATE_COLUMNS])
        for row in result.rows:
            writer.writerow([row["replicate"]]
                            + [repr(float(row[c])) if c != "n_cluster" else row[c]
                               for c in simulate.REPLICATE_COLUMNS])
    artifacts.write_json(result.aggregate(), out / "aggregate.json")
    if result.errors:
        artifacts.write_json({"errors": result.errors}, out / "errors.json")
    return 0


DEFAULTS_EPILOG = """\
model defaults (fixed unless noted):
  stage 1 (sum of trees): 200 trees; depth prior base 0.95, power 2; leaf
    shrinkage k=2; error-variance prior dof 3 at the 0.90 quantile of the
    sample variance; grow/prune/change proposals 0.5/0.25/0.25; 100 cutpoints.
  stage 2 (mixture): normal-inverse-Wishart blocks with mean = empirical mean,
    kappa = 0.01, dof = dim + 12, scale = empirical covariance diagonal scaled
    to keep the prior covariance mean at the empirical diagonal; Dirichlet
    concentration 1 for every discrete category; concentration parameter
    alpha ~ Gamma(2, 1) updated by adaptive random-walk Metropolis on log
    alpha; chains start from 50 random clusters.
  variable selection (opt-in): per-cluster Bernoulli(rho_j) switches; rho_j
    prior 0.5*delta_0 + 0.5*Beta(0.5, 0.5), updated by marginalization.
  consensus: medoid partitions scanned for k = 2..min(10, n/10), scored by
    average silhouette width, ties to the smaller k.
"""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stratarm",
        description="Two-stage patient stratification for multi-arm trials",
        epilog=DEFAULTS_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic scenario dataset")
    _add_scenario_args(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit-stage1", help="fit the sum-of-trees model and impute potential outcomes")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--trees", type=int, default=200)
    p.add_argument("--iterations", type=int, default=6000)
    p.add_argument("--burnin", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--trace", action="store_true", help="also write the error-variance trace")
    p.set_defaults(func=cmd_fit_stage1)

    p = sub.add_parser("cluster", help="run the mixture sampler on covariates plus imputed outcomes")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--potential-outcomes", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--burnin", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variable-selection", action="store_true")
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--similarity-csv", action="store_true")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("postprocess", help="representative clustering and profile summaries")
    p.add_argument("--similarity", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--trace-params", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--k-max", type=int, default=None)
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("evaluate", help="score predicted labels against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="run every stage end to end and write all artifacts")
    p.add_argument("--data")
    p.add_argument("--schema")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--similarity-csv", action="store_true")
    p.add_argument("--from-manifest", default=None,
                   help="reproduce a previous run from its manifest file")
    _add_settings_args(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("report", help="replicated scenario experiment with aggregate metrics")
    _add_scenario_args(p)
    _add_settings_args(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "pipeline" and not args.from_manifest:
        if not args.data or not args.schema:
            parser.error("pipeline needs --data and --schema (or --from-manifest)")
    try:
        return args.func(args)
    except (SchemaError, ValueError) as exc:
        if isinstance(exc, DataError):
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"data error: missing file {exc.filename}", file=sys.stderr)
        return EXIT_DATA
    except (CovarianceError, np.linalg.LinAlgError, FloatingPointError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        out_dir = getattr(args, "out_dir", None)
        if out_dir:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / "diagnostics.txt").write_text(
                traceback.format_exc(), encoding="utf-8"
            )
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
