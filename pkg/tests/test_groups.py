import numpy as np
import pytest

from crossfair.data import Dataset, SyntheticSpec, ValidationError, generate_synthetic, standardize
from crossfair.groups import (
    GroupFilter,
    GroupingScheme,
    apply_other_strategy,
    conjunction_encode,
    filter_groups,
    nearest_neighbor_reassign,
    regroup,
)


def grid_dataset():
    """All four race x sex cells observed, three rows each."""
    rows = []
    for race in ("Black", "White"):
        for sex in ("Female", "Male"):
            rows.extend([[race, sex]] * 3)
    n = len(rows)
    rng = np.random.default_rng(0)
    return Dataset(
        features=rng.standard_normal((n, 2)),
        labels=np.tile([1, 0, 1], n // 3),
        attributes=np.array(rows, dtype=object),
        axis_names=("race", "sex"),
    )


# ---------------------------------------------------------------- conjunctions


def test_conjunction_two_binary_axes_gives_four_groups():
    scheme = conjunction_encode(grid_dataset(), ("race", "sex"))
    assert set(scheme.group_ids) == {
        "Black-Female",
        "Black-Male",
        "White-Female",
        "White-Male",
    }


def test_conjunction_single_axis_degenerate():
    scheme = conjunction_encode(grid_dataset(), ("sex",))
    assert set(scheme.group_ids) == {"Female", "Male"}


def test_conjunction_three_binary_axes_product():
    rows = []
    for a in "xy":
        for b in "uv":
            for c in "pq":
                rows.append([a, b, c])
    ds = Dataset(
        features=np.zeros((8, 1)),
        labels=np.tile([0, 1], 4),
        attributes=np.array(rows, dtype=object),
        axis_names=("a", "b", "c"),
    )
    scheme = conjunction_encode(ds, ("a", "b", "c"))
    assert len(scheme.group_ids) == 8


def test_conjunction_unknown_axis():
    with pytest.raises(KeyError):
        conjunction_encode(grid_dataset(), ("race", "nope"))


# ---------------------------------------------------------------- regrouping


def test_regroup_identity():
    scheme = conjunction_encode(grid_dataset(), ("race", "sex"))
    same = regroup(scheme, {g: g for g in scheme.group_ids})
    assert same.group_ids == scheme.group_ids
    ds = grid_dataset()
    assert np.array_equal(same.assign(ds), scheme.assign(ds))


def test_regroup_to_one_aggregate_group():
    scheme = conjunction_encode(grid_dataset(), ("race", "sex"))
    coarse = regroup(scheme, {g: "everyone" for g in scheme.group_ids})
    assert coarse.group_ids == ("everyone",)


def test_regroup_to_two_groups():
    scheme = conjunction_encode(grid_dataset(), ("race", "sex"))
    merge = {g: g.split("-")[0] for g in scheme.group_ids}
    two = regroup(scheme, merge)
    assert set(two.group_ids) == {"Black", "White"}


def test_regroup_uncovered_id_errors():
    scheme = conjunction_encode(grid_dataset(), ("race", "sex"))
    with pytest.raises(ValidationError, match="cover"):
        regroup(scheme, {"Black-Female": "x"})


# ---------------------------------------------------------------- filtering


def counts_dataset(group_specs):
    """group_specs: list of (group tuple, positives, negatives)."""
    rows, labels = [], []
    for group, pos, neg in group_specs:
        rows.extend([list(group)] * (pos + neg))
        labels.extend([1] * pos + [0] * neg)
    return Dataset(
        features=np.zeros((len(rows), 1)),
        labels=np.array(labels),
        attributes=np.array(rows, dtype=object),
        axis_names=("g",),
    )


def test_filter_drops_small_group():
    ds = counts_dataset([(("a",), 150, 149), (("b",), 200, 200)])
    scheme = conjunction_encode(ds, ("g",))
    kept, dropped = filter_groups(ds, scheme, GroupFilter())
    assert dropped == ["a"]  # 299 rows < 300
    assert kept.n == 400


def test_filter_drops_group_with_too_few_positives():
    ds = counts_dataset([(("a",), 29, 471), (("b",), 200, 200)])
    scheme = conjunction_encode(ds, ("g",))
    kept, dropped = filter_groups(ds, scheme, GroupFilter())
    assert dropped == ["a"]


def test_filter_zero_thresholds_is_identity():
    ds = counts_dataset([(("a",), 1, 2), (("b",), 3, 4)])
    scheme = conjunction_encode(ds, ("g",))
    kept, dropped = filter_groups(ds, scheme, GroupFilter(0, 0, 0))
    assert dropped == [] and kept.n == ds.n


def test_filter_idempotent():
    ds = counts_dataset([(("a",), 40, 40), (("b",), 10, 10), (("c",), 35, 50)])
    scheme = conjunction_encode(ds, ("g",))
    f = GroupFilter(min_count=50, min_pos=20, min_neg=20)
    once, dropped_once = filter_groups(ds, scheme, f)
    twice, dropped_twice = filter_groups(once, scheme, f)
    assert dropped_twice == []
    assert np.array_equal(once.labels, twice.labels)


def test_filter_all_removed_errors():
    ds = counts_dataset([(("a",), 2, 2)])
    scheme = conjunction_encode(ds, ("g",))
    with pytest.raises(ValidationError, match="every row"):
        filter_groups(ds, scheme, GroupFilter())


# ---------------------------------------------------------------- nearest neighbor


def simple_candidates(points, groups):
    return Dataset(
        features=np.asarray(points, dtype=float),
        labels=np.zeros(len(points), dtype=int),
        attributes=np.array([[g] for g in groups], dtype=object),
        axis_names=("g",),
    ), conjunction_encode(
        Dataset(
            features=np.asarray(points, dtype=float),
            labels=np.zeros(len(points), dtype=int),
            attributes=np.array([[g] for g in groups], dtype=object),
            axis_names=("g",),
        ),
        ("g",),
    )


def test_nearest_neighbor_obvious():
    cands, scheme = simple_candidates([[0.0, 0.1], [5.0, 5.0]], ["A", "B"])
    assert nearest_neighbor_reassign([0.0, 0.0], cands, scheme) == "A"


def test_nearest_neighbor_tie_breaks_by_lowest_index():
    points = [[9, 9], [8, 8], [7, 7], [0, 1], [6, 6], [5, 5], [4, 4], [0, -1]]
    groups = ["C", "C", "C", "B", "C", "C", "C", "A"]
    cands, scheme = simple_candidates(points, groups)
    # indices 3 (B) and 7 (A) are equidistant from the origin; 3 wins
    assert nearest_neighbor_reassign([0.0, 0.0], cands, scheme) == "B"


def test_nearest_neighbor_matches_exhaustive_scan():
    rng = np.random.default_rng(4)
    points = rng.standard_normal((60, 3))
    groups = [f"g{int(i)}" for i in rng.integers(0, 5, 60)]
    cands, scheme = simple_candidates(points.tolist(), groups)
    for _ in range(100):
        row = rng.standard_normal(3)
        d2 = ((points - row) ** 2).sum(axis=1)
        expected = groups[int(np.argmin(d2))]
        assert nearest_neighbor_reassign(row, cands, scheme) == expected


def test_nearest_neighbor_empty_candidates():
    cands, scheme = simple_candidates([[0.0]], ["A"])
    with pytest.raises(ValidationError):
        nearest_neighbor_reassign([0.0], cands.subset([]), scheme)


# ---------------------------------------------------------------- Other strategies


def other_dataset(n_per=200, seed=0):
    """Groups A and B widely separated; Other drawn from A's distribution."""
    rng = np.random.default_rng(seed)
    feats = np.concatenate(
        [
            rng.normal(0.0, 1.0, (n_per, 2)),
            rng.normal(8.0, 1.0, (n_per, 2)),  # >= 3 std away from A
            rng.normal(0.0, 1.0, (n_per // 2, 2)),
        ]
    )
    attrs = np.array(
        [["A"]] * n_per + [["B"]] * n_per + [["Other"]] * (n_per // 2), dtype=object
    )
    labels = np.tile([0, 1], feats.shape[0] // 2)
    return Dataset(features=feats, labels=labels, attributes=attrs, axis_names=("race",))


def test_separate_keeps_everything():
    ds = other_dataset()
    scheme = conjunction_encode(ds, ("race",))
    result = apply_other_strategy(ds, scheme, "Other", "separate")
    assert result.train.n == ds.n
    assert "Other" in result.scheme.group_ids
    assert result.other_indices.size == 100


def test_ignore_excludes_other_from_training_only():
    ds = other_dataset()
    scheme = conjunction_encode(ds, ("race",))
    result = apply_other_strategy(ds, scheme, "Other", "ignore")
    assert result.train.n == ds.n - 100
    assert result.other_indices.size == 100
    assert "Other" not in result.scheme.group_ids
    # unmapped rows are flagged as None, not dropped
    assigned = result.scheme.assign(ds, strict=False)
    assert sum(g is None for g in assigned.tolist()) == 100


def test_redistribute_reassigns_planted_alias_to_a():
    ds = standardize(other_dataset())[0][0]
    scheme = conjunction_encode(ds, ("race",))
    result = apply_other_strategy(ds, scheme, "Other", "redistribute")
    assert result.train.n == ds.n
    new_groups = list(result.reassigned.values())
    assert len(new_groups) == 100
    assert "Other" not in new_groups  # never back to Other
    fraction_a = sum(g == "A" for g in new_groups) / len(new_groups)
    assert fraction_a >= 0.9
    # non-Other rows untouched
    untouched = np.setdiff1d(np.arange(ds.n), result.other_indices)
    assert np.array_equal(result.train.attributes[untouched], ds.attributes[untouched])


def test_redistribute_needs_candidates():
    ds = other_dataset().subset(range(400, 500))  # Other rows only
    scheme = GroupingScheme(
        name="r", axes=("race",), mapping={("Other",): "Other"}, group_ids=("Other",)
    )
    with pytest.raises(ValidationError, match="non-Other"):
        apply_other_strategy(ds, scheme, "Other", "redistribute")


def test_unknown_strategy_and_group():
    ds = other_dataset()
    scheme = conjunction_encode(ds, ("race",))
    with pytest.raises(ValidationError):
        apply_other_strategy(ds, scheme, "Other", "merge")
    with pytest.raises(ValidationError):
        apply_other_strategy(ds, scheme, "Missing", "separate")


def test_eval_membership_invariant_across_strategies():
    ds = standardize(other_dataset())[0][0]
    scheme = conjunction_encode(ds, ("race",))
    memberships = [
        apply_other_strategy(ds, scheme, "Other", s).other_indices.tolist()
        for s in ("separate", "redistribute", "ignore")
    ]
    assert memberships[0] == memberships[1] == memberships[2]
