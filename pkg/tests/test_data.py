import numpy as np
import pytest

from crossfair.data import (
    CsvSchema,
    Dataset,
    SchemaError,
    SplitSpec,
    SyntheticSpec,
    ValidationError,
    concat_datasets,
    encode_attributes,
    generate_synthetic,
    load_csv,
    split,
    standardize,
    write_csv,
)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


BASIC_CSV = [
    "age,race,sex,income_gt50k",
    "34,Black,Female,yes",
    "51,White,Male,no",
    "29,Black,Male,no",
    "46,White,Female,yes",
]


def basic_schema():
    return CsvSchema(
        label="income_gt50k",
        features=("age",),
        attributes=("race", "sex"),
        positive_label="yes",
    )


# ---------------------------------------------------------------- CSV loading


def test_load_csv_basic(tmp_path):
    path = tmp_path / "d.csv"
    write_lines(path, BASIC_CSV)
    ds = load_csv(path, basic_schema())
    assert ds.n == 4
    assert ds.feature_dim == 1
    assert ds.axis_names == ("race", "sex")
    assert ds.labels.tolist() == [1, 0, 0, 1]
    assert ds.attribute_tuples()[0] == ("Black", "Female")


def test_load_csv_non_binary_label(tmp_path):
    path = tmp_path / "d.csv"
    write_lines(path, BASIC_CSV + ["40,White,Male,maybe"])
    with pytest.raises(ValidationError, match="distinct"):
        load_csv(path, basic_schema())


def test_load_csv_missing_column(tmp_path):
    path = tmp_path / "d.csv"
    write_lines(path, BASIC_CSV)
    schema = CsvSchema(label="nope", features=("age",), attributes=("race",))
    with pytest.raises(SchemaError, match="nope"):
        load_csv(path, schema)


def test_load_csv_one_hot_categorical_feature(tmp_path):
    path = tmp_path / "d.csv"
    write_lines(
        path,
        [
            "age,city,race,y",
            "30,north,A,1",
            "40,south,A,0",
            "50,east,B,1",
            "60,north,B,0",
        ],
    )
    schema = CsvSchema(label="y", features=("age", "city"), attributes=("race",))
    ds = load_csv(path, schema)
    assert ds.feature_dim == 1 + 3  # age + one-hot over {east, north, south}
    # sorted categories: east, north, south
    assert ds.features[0][1:].tolist() == [0.0, 1.0, 0.0]
    assert ds.features[2][1:].tolist() == [1.0, 0.0, 0.0]


def test_load_csv_mixed_column_reports_row(tmp_path):
    path = tmp_path / "d.csv"
    write_lines(path, ["a,race,y", "1,A,1", "2,A,0", "oops,B,1"])
    schema = CsvSchema(label="y", features=("a",), attributes=("race",))
    with pytest.raises(ValidationError, match="row 2"):
        load_csv(path, schema)


def test_dataset_invariants():
    with pytest.raises(ValidationError):
        Dataset(
            features=np.zeros((3, 2)),
            labels=np.array([0, 1, 2]),
            attributes=np.array([["a"], ["a"], ["b"]], dtype=object),
            axis_names=("g",),
        )
    with pytest.raises(ValidationError):
        Dataset(
            features=np.zeros((3, 2)),
            labels=np.array([0, 1]),
            attributes=np.array([["a"], ["a"], ["b"]], dtype=object),
            axis_names=("g",),
        )


# ---------------------------------------------------------------- splitting


def make_dataset(n, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(
        features=rng.standard_normal((n, 3)),
        labels=rng.integers(0, 2, n),
        attributes=np.array([["a" if i % 2 else "b"] for i in range(n)], dtype=object),
        axis_names=("g",),
    )


def test_split_sizes_70_30_then_70_30():
    train, val, test = split(make_dataset(1000), SplitSpec(seed=0))
    assert (train.n, val.n, test.n) == (490, 210, 300)


def test_split_deterministic_and_partition():
    ds = make_dataset(137)
    a = split(ds, SplitSpec(seed=42))
    b = split(ds, SplitSpec(seed=42))
    for x, y in zip(a, b):
        assert np.array_equal(x.features, y.features)
        assert np.array_equal(x.labels, y.labels)
    # partition: reassemble all rows exactly once
    seen = np.concatenate([part.features[:, 0] for part in a])
    assert sorted(seen.tolist()) == sorted(ds.features[:, 0].tolist())
    c = split(ds, SplitSpec(seed=43))
    assert not np.array_equal(a[2].features, c[2].features)


def test_split_too_small():
    with pytest.raises(ValidationError):
        split(make_dataset(5), SplitSpec(seed=0))


def test_split_fraction_bounds():
    with pytest.raises(ValidationError):
        SplitSpec(seed=0, test_fraction=0.0)
    with pytest.raises(ValidationError):
        SplitSpec(seed=0, val_fraction_of_remainder=1.0)


# ---------------------------------------------------------------- standardization


def two_col_dataset(cols):
    arr = np.array(cols, dtype=float).T
    n = arr.shape[0]
    return Dataset(
        features=arr,
        labels=np.zeros(n, dtype=int) + np.arange(n) % 2,
        attributes=np.array([["a"]] * n, dtype=object),
        axis_names=("g",),
    )


def test_standardize_two_point_column():
    ds = two_col_dataset([[1.0, 3.0]])
    (out,), mean, std = standardize(ds)
    assert out.features[:, 0].tolist() == [-1.0, 1.0]
    assert mean[0] == 2.0 and std[0] == 1.0  # population convention


def test_standardize_constant_column_centered_only():
    ds = two_col_dataset([[5.0, 5.0, 5.0]])
    (out,), mean, std = standardize(ds)
    assert out.features[:, 0].tolist() == [0.0, 0.0, 0.0]
    assert std[0] == 0.0


def test_standardize_applies_train_stats_to_others():
    train = two_col_dataset([[0.0, 2.0]])
    val = two_col_dataset([[10.0, 10.0]])
    (tr, va), mean, std = standardize(train, [val])
    assert va.features[:, 0].tolist() == [9.0, 9.0]  # (10-1)/1, train stats


def test_standardize_normalizes_train_columns():
    rng = np.random.default_rng(1)
    ds = make_dataset(200)
    (out,), _, _ = standardize(ds)
    assert np.all(np.abs(out.features.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(out.features.std(axis=0) - 1.0) < 1e-9)


# ---------------------------------------------------------------- synthetic generation


def simple_spec(**overrides):
    kwargs = dict(
        axes=(("race", ("A", "B")), ("sex", ("F", "M"))),
        per_group_count={
            ("A", "F"): 500,
            ("A", "M"): 500,
            ("B", "F"): 500,
            ("B", "M"): 500,
        },
        base_weights={},
        feature_dim=3,
        seed=11,
    )
    kwargs.update(overrides)
    return SyntheticSpec(**kwargs)


def test_generate_synthetic_zero_weights_balanced():
    counts = {g: 10_000 for g in simple_spec().per_group_count}
    ds = generate_synthetic(simple_spec(per_group_count=counts))
    for group in counts:
        mask = np.all(ds.attributes == np.array(group, dtype=object), axis=1)
        rate = ds.labels[mask].mean()
        assert abs(rate - 0.5) < 0.02


def test_generate_synthetic_bit_identical():
    a = generate_synthetic(simple_spec())
    b = generate_synthetic(simple_spec())
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.attributes, b.attributes)


def test_generate_synthetic_counts_and_axes():
    ds = generate_synthetic(simple_spec())
    assert ds.n == 2000
    assert ds.axis_names == ("race", "sex")
    mask = np.all(ds.attributes == np.array(("A", "F"), dtype=object), axis=1)
    assert mask.sum() == 500


def test_generate_synthetic_intercept_shifts_base_rate():
    spec = simple_spec(
        base_weights={("race", "A"): [0.0, 0.0, 0.0, 2.0]},
        per_group_count={g: 4000 for g in simple_spec().per_group_count},
    )
    ds = generate_synthetic(spec)
    a_mask = ds.attributes[:, 0] == "A"
    assert ds.labels[a_mask].mean() > 0.8
    assert abs(ds.labels[~a_mask].mean() - 0.5) < 0.03


def test_synthetic_spec_validation():
    with pytest.raises(ValidationError):
        simple_spec(per_group_count={("A",): 10})
    with pytest.raises(ValidationError):
        simple_spec(per_group_count={("A", "X"): 10})
    with pytest.raises(ValidationError):
        simple_spec(base_weights={("race", "A"): [1.0]})
    with pytest.raises(ValidationError):
        simple_spec(feature_dim=0)


# ---------------------------------------------------------------- round trips


def test_csv_round_trip_exact(tmp_path):
    ds = generate_synthetic(simple_spec())
    path = tmp_path / "round.csv"
    schema = write_csv(ds, path)
    back = load_csv(path, schema)
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.attributes, ds.attributes)
    assert np.array_equal(back.features, ds.features)  # repr round-trips floats


def test_encode_attributes_appends_one_hots():
    ds = generate_synthetic(simple_spec())
    wide = encode_attributes(ds)
    assert wide.feature_dim == ds.feature_dim + 4  # 2 race + 2 sex categories
    row = wide.features[0]
    assert set(row[ds.feature_dim :].tolist()) <= {0.0, 1.0}
    # each axis block sums to one
    assert row[ds.feature_dim : ds.feature_dim + 2].sum() == 1.0
    assert row[ds.feature_dim + 2 :].sum() == 1.0


def test_concat_datasets():
    ds = generate_synthetic(simple_spec())
    both = concat_datasets([ds.subset(range(10)), ds.subset(range(10, 30))])
    assert both.n == 30
    assert np.array_equal(both.features, ds.features[:30])
