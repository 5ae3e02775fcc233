"""Tabular dataset handling: CSV ingestion, splits, scaling, synthetic data.

A :class:`Dataset` couples a numeric feature matrix with binary labels and
per-row demographic attribute tuples. Attributes stay categorical here; group
semantics (conjunctions, regrouping, filtering) live in :mod:`crossfair.groups`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "CsvSchema",
    "Dataset",
    "SchemaError",
    "SplitSpec",
    "SyntheticSpec",
    "ValidationError",
    "concat_datasets",
    "encode_attributes",
    "generate_synthetic",
    "load_csv",
    "split",
    "standardize",
    "write_csv",
]


class SchemaError(ValueError):
    """A column-role map does not match the file it describes."""


class ValidationError(ValueError):
    """Input data violates a declared precondition."""


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class Dataset:
    """Feature matrix, binary labels, and categorical attribute tuples.

    ``features`` is (n, d) float64, ``labels`` is (n,) with values in {0, 1},
    ``attributes`` is (n, len(axis_names)) of strings. Arrays are marked
    read-only after construction; derive new datasets instead of mutating.
    """

    features: np.ndarray
    labels: np.ndarray
    attributes: np.ndarray
    axis_names: tuple[str, ...]

    def __post_init__(self):
        features = np.ascontiguousarray(np.asarray(self.features, dtype=float))
        labels = np.asarray(self.labels, dtype=np.int64)
        attributes = np.asarray(self.attributes, dtype=object)
        if features.ndim != 2:
            raise ValidationError("features must be a 2-D matrix")
        if attributes.ndim != 2:
            raise ValidationError("attributes must be a 2-D array of categorical values")
        n = features.shape[0]
        if labels.shape != (n,) or attributes.shape[0] != n:
            raise ValidationError(
                f"row counts disagree: features {n}, labels {labels.shape[0]}, "
                f"attributes {attributes.shape[0]}"
            )
        if attributes.shape[1] != len(self.axis_names):
            raise ValidationError("attributes width must match axis_names")
        if labels.size and not np.isin(labels, (0, 1)).all():
            raise ValidationError("labels must be exactly 0 or 1")
        for arr, name in ((features, "features"), (labels, "labels"), (attributes, "attributes")):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "axis_names", tuple(self.axis_names))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def attribute_tuples(self) -> list[tuple[str, ...]]:
        return [tuple(row) for row in self.attributes]

    def axis_index(self, axis: str) -> int:
        try:
            return self.axis_names.index(axis)
        except ValueError:
            raise KeyError(f"unknown axis {axis!r}; have {list(self.axis_names)}") from None

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(
            features=self.features[idx],
            labels=self.labels[idx],
            attributes=self.attributes[idx],
            axis_names=self.axis_names,
        )

    def with_features(self, features: np.ndarray) -> "Dataset":
        return Dataset(features, self.labels, self.attributes, self.axis_names)


def concat_datasets(parts: Sequence[Dataset]) -> Dataset:
    if not parts:
        raise ValueError("nothing to concatenate")
    axes = parts[0].axis_names
    if any(p.axis_names != axes for p in parts):
        raise ValidationError("datasets have different axis names")
    return Dataset(
        features=np.concatenate([p.features for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        attributes=np.concatenate([p.attributes for p in parts]),
        axis_names=axes,
    )


@dataclass(frozen=True)
class SplitSpec:
    """Seeded 70/30-then-70/30 partition: test first, then train/val."""

    seed: int
    test_fraction: float = 0.30
    val_fraction_of_remainder: float = 0.30

    def __post_init__(self):
        for name in ("test_fraction", "val_fraction_of_remainder"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValidationError(f"{name} must be strictly between 0 and 1")


@dataclass(frozen=True)
class CsvSchema:
    """Column roles for :func:`load_csv`.

    ``positive_label`` names the raw label value mapped to 1; the single other
    observed value maps to 0. When omitted, the label column must already
    contain only "0" and "1".
    """

    label: str
    features: tuple[str, ...]
    attributes: tuple[str, ...]
    positive_label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(self, "attributes", tuple(self.attributes))
        if not self.features:
            raise SchemaError("schema needs at least one feature column")
        if not self.attributes:
            raise SchemaError("schema needs at least one attribute column")


def load_csv(path, schema: CsvSchema) -> Dataset:
    """Read a UTF-8, comma-delimited, headered CSV into a Dataset.

    Feature columns must be uniformly numeric (passed through) or uniformly
    non-numeric (one-hot encoded over the sorted observed categories, one 0/1
    column per category). A column mixing the two raises with the offending
    row index. Attribute columns are kept as raw strings.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        rows = [row for row in reader if row]

    col_index = {name: i for i, name in enumerate(header)}
    for name in (schema.label, *schema.features, *schema.attributes):
        if name not in col_index:
            raise SchemaError(f"{path}: column {name!r} not found in header {header}")
    if not rows:
        raise ValidationError(f"{path}: no data rows")

    label_raw = [row[col_index[schema.label]] for row in rows]
    distinct = sorted(set(label_raw))
    if schema.positive_label is not None:
        if len(distinct) > 2:
            raise ValidationError(
                f"{path}: label column {schema.label!r} has {len(distinct)} distinct values; "
                f"expected at most two: {distinct[:5]}"
            )
        if schema.positive_label not in distinct and len(distinct) == 2:
            raise ValidationError(
                f"{path}: positive label {schema.positive_label!r} not present in {distinct}"
            )
        labels = np.array([1 if v == schema.positive_label else 0 for v in label_raw])
    else:
        if not set(distinct) <= {"0", "1"}:
            raise ValidationError(
                f"{path}: label column {schema.label!r} must contain only 0/1 "
                f"(or set positive_label); found {distinct[:5]}"
            )
        labels = np.array([int(v) for v in label_raw])

    blocks: list[np.ndarray] = []
    for name in schema.features:
        raw = [row[col_index[name]] for row in rows]
        parsed: list[float | None] = []
        for v in raw:
            try:
                parsed.append(float(v))
            except ValueError:
                parsed.append(None)
        n_numeric = sum(1 for v in parsed if v is not None)
        if n_numeric == len(raw):
            blocks.append(np.array(parsed, dtype=float)[:, None])
        elif n_numeric == 0:
            categories = sorted(set(raw))
            onehot = np.zeros((len(raw), len(categories)))
            pos = {c: j for j, c in enumerate(categories)}
            for i, v in enumerate(raw):
                onehot[i, pos[v]] = 1.0
            blocks.append(onehot)
        else:
            bad = next(i for i, v in enumerate(parsed) if v is None)
            raise ValidationError(
                f"{path}: row {bad} column {name!r}: cell {raw[bad]!r} is not numeric "
                "but the column contains numeric cells"
            )

    attributes = np.array(
        [[row[col_index[name]] for name in schema.attributes] for row in rows], dtype=object
    )
    return Dataset(
        features=np.hstack(blocks),
        labels=labels,
        attributes=attributes,
        axis_names=schema.attributes,
    )


def write_csv(ds: Dataset, path) -> CsvSchema:
    """Write a Dataset to CSV and return the schema that reloads it exactly.

    Feature values are written with ``repr`` so numeric round-trips are
    bit-exact.
    """
    path = Path(path)
    feature_names = [f"x{i}" for i in range(ds.feature_dim)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([*feature_names, "label", *ds.axis_names])
        for i in range(ds.n):
            writer.writerow(
                [repr(float(v)) for v in ds.features[i]]
                + [str(int(ds.labels[i]))]
                + [str(v) for v in ds.attributes[i]]
            )
    return CsvSchema(label="label", features=tuple(feature_names), attributes=ds.axis_names)


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Partition rows into (train, val, test) determined solely by the seed.

    The test block is drawn first (round-half-up of ``test_fraction``), then
    the remainder is split again by ``val_fraction_of_remainder``.
    """
    n = ds.n
    if n < 10:
        raise ValidationError(f"need at least 10 rows to split; have {n}")
    n_test = _round_half_up(n * spec.test_fraction)
    remainder = n - n_test
    n_val = _round_half_up(remainder * spec.val_fraction_of_remainder)
    n_train = remainder - n_val
    if min(n_test, n_val, n_train) < 1:
        raise ValidationError(
            f"split of {n} rows leaves an empty partition (train {n_train}, val {n_val}, test {n_test})"
        )
    perm = np.random.default_rng(spec.seed).permutation(n)
    test_idx = np.sort(perm[:n_test])
    val_idx = np.sort(perm[n_test : n_test + n_val])
    train_idx = np.sort(perm[n_test + n_val :])
    return ds.subset(train_idx), ds.subset(val_idx), ds.subset(test_idx)


def standardize(
    train: Dataset, others: Sequence[Dataset] = ()
) -> tuple[list[Dataset], np.ndarray, np.ndarray]:
    """Z-score all feature columns by the train split's statistics.

    Uses the population (divide by n) standard deviation. Constant columns are
    centered only, with a recorded std of 0. The same train-derived statistics
    are applied to every dataset in ``others``.
    """
    if train.n < 2:
        raise ValidationError("standardize needs at least two training rows")
    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)  # population convention
    scale = np.where(std == 0.0, 1.0, std)
    out = [ds.with_features((ds.features - mean) / scale) for ds in (train, *others)]
    return out, mean, std


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator spec with plantable per-group predictive structure.

    Every coefficient vector has length ``feature_dim + 1``; the trailing
    entry is an intercept contribution, which is how per-group base-rate
    disparities are planted. A group's logit weights are the sum of
    ``base_weights`` over its axis categories (additive model), plus its
    ``interaction_terms`` entry when present (structure unique to that cell).
    """

    axes: tuple[tuple[str, tuple[str, ...]], ...]
    per_group_count: Mapping[tuple[str, ...], int]
    base_weights: Mapping[tuple[str, str], Sequence[float]]
    feature_dim: int
    seed: int
    noise_scale: float = 0.0
    interaction_terms: Mapping[tuple[str, ...], Sequence[float]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(
            self, "axes", tuple((name, tuple(cats)) for name, cats in self.axes)
        )
        if self.feature_dim < 1:
            raise ValidationError("feature_dim must be >= 1")
        if self.noise_scale < 0:
            raise ValidationError("noise_scale must be >= 0")
        if not self.per_group_count:
            raise ValidationError("per_group_count must name at least one group")
        axis_cats = {name: set(cats) for name, cats in self.axes}
        for group in self.per_group_count:
            if len(group) != len(self.axes):
                raise ValidationError(f"group {group} does not match the declared axes")
            for (axis, cats), value in zip(self.axes, group):
                if value not in axis_cats[axis]:
                    raise ValidationError(f"group {group}: {value!r} not a category of axis {axis!r}")
        for key, vec in {**dict(self.base_weights), **dict(self.interaction_terms)}.items():
            if len(np.asarray(vec, dtype=float)) != self.feature_dim + 1:
                raise ValidationError(
                    f"coefficient vector for {key} must have length feature_dim + 1 "
                    f"= {self.feature_dim + 1}"
                )

    def group_coefficients(self, group: tuple[str, ...]) -> np.ndarray:
        """Weights-plus-intercept vector for one group."""
        coef = np.zeros(self.feature_dim + 1)
        for (axis, _), value in zip(self.axes, group):
            vec = self.base_weights.get((axis, value))
            if vec is not None:
                coef += np.asarray(vec, dtype=float)
        extra = self.interaction_terms.get(tuple(group))
        if extra is not None:
            coef += np.asarray(extra, dtype=float)
        return coef


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Draw features from a standard normal and labels from a per-group logit.

    For each group g, ``per_group_count[g]`` rows are drawn with
    label ~ Bernoulli(sigmoid(w_g . x + b_g + eps)), eps ~ Normal(0,
    noise_scale). Groups are generated in sorted order; the whole dataset is a
    pure function of the spec.
    """
    rng = np.random.default_rng(spec.seed)
    feat_parts, label_parts, attr_parts = [], [], []
    for group in sorted(spec.per_group_count):
        count = int(spec.per_group_count[group])
        if count == 0:
            continue
        coef = spec.group_coefficients(group)
        x = rng.standard_normal((count, spec.feature_dim))
        eps = rng.standard_normal(count) * spec.noise_scale
        z = x @ coef[:-1] + coef[-1] + eps
        y = (rng.random(count) < _sigmoid(z)).astype(np.int64)
        feat_parts.append(x)
        label_parts.append(y)
        attr_parts.append(np.array([list(group)] * count, dtype=object))
    return Dataset(
        features=np.concatenate(feat_parts),
        labels=np.concatenate(label_parts),
        attributes=np.concatenate(attr_parts),
        axis_names=tuple(name for name, _ in spec.axes),
    )


def attribute_categories(ds: Dataset) -> dict[str, list[str]]:
    """Observed categories per axis, sorted."""
    return {
        axis: sorted({str(v) for v in ds.attributes[:, k]})
        for k, axis in enumerate(ds.axis_names)
    }


def encode_attributes(ds: Dataset, categories: Mapping[str, Sequence[str]] | None = None) -> Dataset:
    """Append one-hot demographic attribute columns to the feature matrix.

    Apply this before splitting (or pass explicit ``categories``) so every
    partition shares one encoding. Models that should be attribute-blind
    simply skip this step.
    """
    cats = {k: list(v) for k, v in (categories or attribute_categories(ds)).items()}
    blocks = [ds.features]
    for k, axis in enumerate(ds.axis_names):
        axis_cats = cats[axis]
        pos = {c: j for j, c in enumerate(axis_cats)}
        onehot = np.zeros((ds.n, len(axis_cats)))
        for i, v in enumerate(ds.attributes[:, k]):
            j = pos.get(str(v))
            if j is None:
                raise ValidationError(f"attribute value {v!r} not in categories for axis {axis!r}")
            onehot[i, j] = 1.0
        blocks.append(onehot)
    return ds.with_features(np.hstack(blocks))
