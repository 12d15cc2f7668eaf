"""Dataset ingestion, schema validation, outcome transforms, and column summaries.

The canonical exchange format is a UTF-8 CSV with a header row and one subject
per row. Column roles (treatment, outcome, covariate kinds, arm count, the
utility trade-off) live in a separate JSON config so the same data file can
serve several analyses. Missing values are a hard error at ingestion.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace

import numpy as np

CONTINUOUS = "continuous"
DISCRETE = "discrete"


class SchemaError(ValueError):
    """Raised when a schema/config declaration is internally inconsistent."""


class DataError(ValueError):
    """Raised when a data file does not conform to its schema.

    Messages name the offending row (1-based, excluding the header) and
    column whenever the failure is cell-addressable.
    """


@dataclass(frozen=True)
class CovariateSpec:
    """Declaration of a single covariate column."""

    name: str
    kind: str
    categories: int | None = None

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, DISCRETE):
            raise SchemaError(f"covariate {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == DISCRETE:
            if self.categories is None or self.categories < 2:
                raise SchemaError(
                    f"covariate {self.name!r}: discrete covariates need >= 2 categories"
                )
        elif self.categories is not None:
            raise SchemaError(f"covariate {self.name!r}: categories only apply to discrete kind")


@dataclass(frozen=True)
class Schema:
    """Column roles for a trial dataset: covariates, treatment, outcome, arms.

    Optional benefit/risk columns support the utility outcome U = G - b*R.
    """

    covariates: tuple[CovariateSpec, ...]
    treatment: str
    outcome: str
    n_arms: int
    benefit: str | None = None
    risk: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if not self.covariates:
            raise SchemaError("at least one covariate is required")
        if self.n_arms < 2:
            raise SchemaError("n_arms must be >= 2")
        names = [c.name for c in self.covariates] + [self.treatment, self.outcome]
        names += [c for c in (self.benefit, self.risk) if c is not None]
        if len(set(names)) != len(names):
            raise SchemaError("column names must be unique")

    @property
    def continuous(self) -> tuple[CovariateSpec, ...]:
        return tuple(c for c in self.covariates if c.kind == CONTINUOUS)

    @property
    def discrete(self) -> tuple[CovariateSpec, ...]:
        return tuple(c for c in self.covariates if c.kind == DISCRETE)

    @property
    def p_continuous(self) -> int:
        return len(self.continuous)

    @property
    def p_discrete(self) -> int:
        return len(self.discrete)

    def to_dict(self) -> dict:
        cov = []
        for c in self.covariates:
            entry = {"name": c.name, "kind": c.kind}
            if c.categories is not None:
                entry["categories"] = c.categories
            cov.append(entry)
        out = {
            "covariates": cov,
            "treatment": self.treatment,
            "outcome": self.outcome,
            "n_arms": self.n_arms,
        }
        if self.benefit is not None:
            out["benefit"] = self.benefit
        if self.risk is not None:
            out["risk"] = self.risk
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        try:
            covs = tuple(
                CovariateSpec(c["name"], c["kind"], c.get("categories"))
                for c in d["covariates"]
            )
            return cls(
                covariates=covs,
                treatment=d["treatment"],
                outcome=d["outcome"],
                n_arms=int(d["n_arms"]),
                benefit=d.get("benefit"),
                risk=d.get("risk"),
            )
        except KeyError as exc:
            raise SchemaError(f"config is missing required key {exc.args[0]!r}") from exc


@dataclass(frozen=True)
class UtilityConfig:
    """Trade-off parameter b in the utility outcome U = G - b*R."""

    b: float

    def __post_init__(self):
        if not math.isfinite(self.b) or self.b < 0:
            raise SchemaError(f"utility trade-off b must be finite and >= 0, got {self.b}")


def load_config(path) -> tuple[Schema, UtilityConfig | None]:
    """Read a JSON config file; returns the schema plus optional utility settings."""
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    schema = Schema.from_dict(d)
    util = UtilityConfig(float(d["utility_b"])) if "utility_b" in d else None
    return schema, util


def write_config(schema: Schema, path, utility: UtilityConfig | None = None) -> None:
    d = schema.to_dict()
    if utility is not None:
        d["utility_b"] = utility.b
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(d, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass(frozen=True)
class Dataset:
    """Validated subject records: treatment in 1..K, outcome, typed covariates.

    Continuous covariates sit in ``x_cont`` (n x p1, schema order); discrete
    covariates in ``x_disc`` (n x p2) as integer codes 1..K_j with the raw
    label for code k stored at ``encodings[name][k-1]``.
    """

    schema: Schema
    treatment: np.ndarray
    outcome: np.ndarray
    x_cont: np.ndarray
    x_disc: np.ndarray
    encodings: dict[str, tuple[str, ...]]
    benefit: np.ndarray | None = None
    risk: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.treatment)
        if n < 1:
            raise DataError("dataset is empty")
        if self.outcome.shape != (n,):
            raise DataError("outcome length does not match treatment length")
        if self.x_cont.shape != (n, self.schema.p_continuous):
            raise DataError("continuous covariate block has wrong shape")
        if self.x_disc.shape != (n, self.schema.p_discrete):
            raise DataError("discrete covariate block has wrong shape")
        if self.treatment.min() < 1 or self.treatment.max() > self.schema.n_arms:
            raise DataError("treatment values must lie in 1..n_arms")
        if not np.all(np.isfinite(self.outcome)) or not np.all(np.isfinite(self.x_cont)):
            raise DataError("non-finite value in outcome or continuous covariates")
        for j, spec in enumerate(self.schema.discrete):
            col = self.x_disc[:, j]
            if col.min() < 1 or col.max() > spec.categories:
                raise DataError(f"column {spec.name!r}: codes must lie in 1..{spec.categories}")
        for arr in (self.treatment, self.outcome, self.x_cont, self.x_disc,
                    self.benefit, self.risk):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.treatment)

    @property
    def n_arms(self) -> int:
        return self.schema.n_arms


def _encode_labels(labels: list[str]) -> list[str]:
    """Stable category ordering: numeric sort when every label parses, else lexicographic."""
    uniq = sorted(set(labels))
    try:
        return sorted(uniq, key=float)
    except ValueError:
        return uniq


def _parse_float(raw: str, row: int, col: str) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: cannot parse {raw!r} as a number") from None
    if not math.isfinite(value):
        raise DataError(f"row {row}, column {col!r}: non-finite value {raw!r}")
    return value


def load_dataset(path, schema: Schema) -> Dataset:
    """Parse and validate a CSV file against ``schema``.

    Discrete categories are mapped onto 1..K_j with a recorded, order-stable
    encoding table. Any missing or malformed cell raises :class:`DataError`
    naming the row and column.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        rows = [r for r in reader if r]

    col_index: dict[str, int] = {}
    for name in [c.name for c in schema.covariates] + [schema.treatment, schema.outcome] + [
        c for c in (schema.benefit, schema.risk) if c is not None
    ]:
        if name not in header:
            raise DataError(f"missing column {name!r} (header: {header})")
        col_index[name] = header.index(name)

    def cell(row_vals, row_num, name):
        idx = col_index[name]
        if idx >= len(row_vals) or row_vals[idx].strip() == "":
            raise DataError(f"row {row_num}, column {name!r}: missing value")
        return row_vals[idx].strip()

    n = len(rows)
    if n == 0:
        raise DataError(f"{path}: no data rows")

    treatment = np.empty(n, dtype=np.int64)
    outcome = np.empty(n, dtype=np.float64)
    x_cont = np.empty((n, schema.p_continuous), dtype=np.float64)
    benefit = np.empty(n, dtype=np.float64) if schema.benefit else None
    risk = np.empty(n, dtype=np.float64) if schema.risk else None
    raw_disc: list[list[str]] = [[] for _ in schema.discrete]

    for i, row_vals in enumerate(rows):
        rnum = i + 1
        raw_a = cell(row_vals, rnum, schema.treatment)
        try:
            a = int(raw_a)
        except ValueError:
            raise DataError(
                f"row {rnum}, column {schema.treatment!r}: cannot parse {raw_a!r} as an arm"
            ) from None
        if not 1 <= a <= schema.n_arms:
            raise DataError(
                f"row {rnum}, column {schema.treatment!r}: treatment {a} outside 1..{schema.n_arms}"
            )
        treatment[i] = a
        outcome[i] = _parse_float(cell(row_vals, rnum, schema.outcome), rnum, schema.outcome)
        for j, spec in enumerate(schema.continuous):
            x_cont[i, j] = _parse_float(cell(row_vals, rnum, spec.name), rnum, spec.name)
        for j, spec in enumerate(schema.discrete):
            raw_disc[j].append(cell(row_vals, rnum, spec.name))
        if benefit is not None:
            benefit[i] = _parse_float(cell(row_vals, rnum, schema.benefit), rnum, schema.benefit)
        if risk is not None:
            risk[i] = _parse_float(cell(row_vals, rnum, schema.risk), rnum, schema.risk)

    encodings: dict[str, tuple[str, ...]] = {}
    x_disc = np.empty((n, schema.p_discrete), dtype=np.int64)
    for j, spec in enumerate(schema.discrete):
        labels = _encode_labels(raw_disc[j])
        if len(labels) > spec.categories:
            raise DataError(
                f"column {spec.name!r}: {len(labels)} distinct labels exceed the "
                f"declared {spec.categories} categories"
            )
        code = {lab: k + 1 for k, lab in enumerate(labels)}
        x_disc[:, j] = [code[v] for v in raw_disc[j]]
        encodings[spec.name] = tuple(labels)

    return Dataset(
        schema=schema,
        treatment=treatment,
        outcome=outcome,
        x_cont=x_cont,
        x_disc=x_disc,
        encodings=encodings,
        benefit=benefit,
        risk=risk,
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(ds: Dataset, path) -> None:
    """Write a dataset back to CSV; re-loading yields an identical dataset."""
    schema = ds.schema
    header = [c.name for c in schema.covariates] + [schema.treatment, schema.outcome]
    if schema.benefit:
        header.append(schema.benefit)
    if schema.risk:
        header.append(schema.risk)
    cont_pos = {c.name: j for j, c in enumerate(schema.continuous)}
    disc_pos = {c.name: j for j, c in enumerate(schema.discrete)}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(ds.n):
            row = []
            for c in schema.covariates:
                if c.kind == CONTINUOUS:
                    row.append(_fmt(ds.x_cont[i, cont_pos[c.name]]))
                else:
                    code = ds.x_disc[i, disc_pos[c.name]]
                    row.append(ds.encodings[c.name][code - 1])
            row.append(str(int(ds.treatment[i])))
            row.append(_fmt(ds.outcome[i]))
            if ds.benefit is not None:
                row.append(_fmt(ds.benefit[i]))
            if ds.risk is not None:
                row.append(_fmt(ds.risk[i]))
            writer.writerow(row)


def write_encoding_tables(ds: Dataset, path) -> None:
    """Dump the discrete-category encoding tables as CSV (covariate, raw label, code)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["covariate", "label", "code"])
        for name, labels in ds.encodings.items():
            for k, lab in enumerate(labels, start=1):
                writer.writerow([name, lab, k])


def compute_utility(g: float, r: float, cfg: UtilityConfig) -> float:
    """Utility outcome U = G - b*R for benefit g and risk r."""
    if not (math.isfinite(g) and math.isfinite(r)):
        raise ValueError("benefit and risk must be finite")
    return g - cfg.b * r


def with_utility_outcome(ds: Dataset, cfg: UtilityConfig) -> Dataset:
    """Replace the outcome column with the utility G - b*R derived per subject."""
    if ds.benefit is None or ds.risk is None:
        raise DataError("utility outcome requires benefit and risk columns in the schema")
    u = ds.benefit - cfg.b * ds.risk
    return replace(ds, outcome=u)


def standardize_continuous(ds: Dataset) -> Dataset:
    """Center and scale each continuous covariate to unit sample variance.

    Off by default throughout the pipeline; opt in via the CLI flag.
    """
    if ds.schema.p_continuous == 0:
        return ds
    mu = ds.x_cont.mean(axis=0)
    sd = ds.x_cont.std(axis=0, ddof=1) if ds.n > 1 else np.ones(ds.schema.p_continuous)
    sd = np.where(sd > 0, sd, 1.0)
    return replace(ds, x_cont=(ds.x_cont - mu) / sd)


@dataclass(frozen=True)
class EmpiricalReference:
    """Data-wide covariate reference: column means and observed category proportions.

    The means anchor deselected continuous covariates; the proportions are the
    fallback category distribution for deselected discrete covariates.
    """

    cont_means: np.ndarray
    disc_props: tuple[np.ndarray, ...]

    def __post_init__(self):
        self.cont_means.setflags(write=False)
        for p in self.disc_props:
            p.setflags(write=False)


def summarize_columns(ds: Dataset) -> EmpiricalReference:
    """Column means for continuous covariates, observed proportions for discrete ones."""
    cont_means = ds.x_cont.mean(axis=0) if ds.schema.p_continuous else np.empty(0)
    props = []
    for j, spec in enumerate(ds.schema.discrete):
        counts = np.bincount(ds.x_disc[:, j], minlength=spec.categories + 1)[1:]
        props.append(counts / ds.n)
    return EmpiricalReference(cont_means=cont_means, disc_props=tuple(props))
