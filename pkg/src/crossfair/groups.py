"""Multi-axis group identity handling.

Groups are conjunctions of attribute values across one or more axes (e.g.
race x sex). A :class:`GroupingScheme` fixes how raw attribute tuples map to
training-group identifiers; coarser schemes for training can coexist with a
finer scheme for evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import Dataset, ValidationError

__all__ = [
    "GROUP_SEPARATOR",
    "GroupFilter",
    "GroupingScheme",
    "OTHER_STRATEGIES",
    "OtherStrategyResult",
    "apply_other_strategy",
    "conjunction_encode",
    "filter_groups",
    "nearest_group_bulk",
    "nearest_neighbor_reassign",
    "regroup",
]

GROUP_SEPARATOR = "-"

OTHER_STRATEGIES = ("separate", "redistribute", "ignore")


@dataclass(frozen=True)
class GroupingScheme:
    """Mapping from attribute tuples (over ``axes``) to group identifiers."""

    name: str
    axes: tuple[str, ...]
    mapping: Mapping[tuple[str, ...], str]
    group_ids: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple(self.axes))
        object.__setattr__(self, "mapping", dict(self.mapping))
        object.__setattr__(self, "group_ids", tuple(self.group_ids))
        if len(set(self.group_ids)) != len(self.group_ids):
            raise ValidationError(f"duplicate group ids in scheme {self.name!r}")
        extra = set(self.mapping.values()) - set(self.group_ids)
        if extra:
            raise ValidationError(f"mapping produces ids missing from group_ids: {sorted(extra)}")

    def key_for(self, ds: Dataset, row: int) -> tuple[str, ...]:
        idx = [ds.axis_index(a) for a in self.axes]
        return tuple(str(ds.attributes[row, k]) for k in idx)

    def assign(self, ds: Dataset, strict: bool = True) -> np.ndarray:
        """Group id per row. Unmapped tuples raise, or become None if not strict."""
        idx = [ds.axis_index(a) for a in self.axes]
        out = np.empty(ds.n, dtype=object)
        for i in range(ds.n):
            key = tuple(str(ds.attributes[i, k]) for k in idx)
            gid = self.mapping.get(key)
            if gid is None and strict:
                raise ValidationError(
                    f"scheme {self.name!r} has no group for attribute tuple {key}"
                )
            out[i] = gid
        return out

    def present_groups(self, ds: Dataset) -> list[str]:
        assigned = self.assign(ds)
        present = {g for g in assigned.tolist() if g is not None}
        return [g for g in self.group_ids if g in present]


def conjunction_encode(ds: Dataset, axes: Sequence[str]) -> GroupingScheme:
    """One group per observed tuple of the selected axes.

    Group ids are the tuple values joined in axis order, e.g. "Black-Female"
    for axes (race, sex).
    """
    axes = tuple(axes)
    if not axes:
        raise ValidationError("conjunction needs at least one axis")
    idx = [ds.axis_index(a) for a in axes]  # raises on unknown axis
    mapping: dict[tuple[str, ...], str] = {}
    for i in range(ds.n):
        key = tuple(str(ds.attributes[i, k]) for k in idx)
        if key not in mapping:
            mapping[key] = GROUP_SEPARATOR.join(key)
    return GroupingScheme(
        name=GROUP_SEPARATOR.join(axes),
        axes=axes,
        mapping=mapping,
        group_ids=tuple(sorted(set(mapping.values()))),
    )


def regroup(scheme: GroupingScheme, merge_map: Mapping[str, str]) -> GroupingScheme:
    """Coarsen a scheme by composing its mapping with ``merge_map``.

    Every group id of the input scheme must be covered. Training may use the
    coarse scheme while evaluation keeps the fine one.
    """
    missing = [g for g in scheme.group_ids if g not in merge_map]
    if missing:
        raise ValidationError(f"merge_map does not cover group ids {missing}")
    mapping = {key: merge_map[gid] for key, gid in scheme.mapping.items()}
    return GroupingScheme(
        name=f"{scheme.name}/merged",
        axes=scheme.axes,
        mapping=mapping,
        group_ids=tuple(sorted(set(mapping.values()))),
    )


@dataclass(frozen=True)
class GroupFilter:
    """Minimum size thresholds a group must meet to stay in a dataset."""

    min_count: int = 300
    min_pos: int = 30
    min_neg: int = 30

    def __post_init__(self):
        if min(self.min_count, self.min_pos, self.min_neg) < 0:
            raise ValidationError("filter thresholds must be >= 0")


def filter_groups(
    ds: Dataset, scheme: GroupingScheme, f: GroupFilter
) -> tuple[Dataset, list[str]]:
    """Drop rows of groups failing any threshold; returns (kept, dropped ids)."""
    assigned = scheme.assign(ds)
    labels = ds.labels
    dropped: list[str] = []
    for gid in scheme.present_groups(ds):
        mask = assigned == gid
        count = int(mask.sum())
        pos = int(labels[mask].sum())
        if count < f.min_count or pos < f.min_pos or (count - pos) < f.min_neg:
            dropped.append(gid)
    keep = ~np.isin(assigned, dropped)
    if not keep.any():
        raise ValidationError("group filter removed every row")
    return ds.subset(np.nonzero(keep)[0]), dropped


def _nearest_indices(features: np.ndarray, cand_features: np.ndarray) -> np.ndarray:
    """Index of the closest candidate per row; ties resolve to the lowest index."""
    out = np.empty(features.shape[0], dtype=np.intp)
    for start in range(0, features.shape[0], 256):
        block = features[start : start + 256]
        d2 = ((block[:, None, :] - cand_features[None, :, :]) ** 2).sum(axis=2)
        out[start : start + block.shape[0]] = np.argmin(d2, axis=1)
    return out


def nearest_neighbor_reassign(row, candidates: Dataset, scheme: GroupingScheme) -> str:
    """Group of the candidate row nearest in L2 distance; ties pick the lowest index.

    Features are expected to be standardized already, otherwise large-range
    columns dominate the distance.
    """
    if candidates.n == 0:
        raise ValidationError("no candidate rows for nearest-neighbor reassignment")
    x = np.asarray(row, dtype=float).reshape(1, -1)
    best = int(_nearest_indices(x, candidates.features)[0])
    return scheme.assign(candidates.subset([best]))[0]


def nearest_group_bulk(
    features: np.ndarray, candidates: Dataset, scheme: GroupingScheme
) -> np.ndarray:
    """Nearest-neighbor group per feature row, against the candidate pool."""
    if candidates.n == 0:
        raise ValidationError("no candidate rows for nearest-neighbor reassignment")
    assigned = scheme.assign(candidates)
    nearest = _nearest_indices(np.asarray(features, dtype=float), candidates.features)
    return assigned[nearest]


@dataclass(frozen=True)
class OtherStrategyResult:
    """Training view produced by one Other-group strategy.

    ``other_indices`` always records the original membership of the Other
    group in the input dataset; evaluation must use that membership no matter
    how training rows were rearranged. ``reassigned`` maps original row index
    to the new group id under the redistribute strategy.
    """

    train: Dataset
    scheme: GroupingScheme
    other_indices: np.ndarray
    reassigned: dict[int, str] | None = None


def apply_other_strategy(
    ds: Dataset, scheme: GroupingScheme, other_id: str, strategy: str
) -> OtherStrategyResult:
    """Build the training view for one way of handling the Other group.

    separate     keep Other as its own training group (identity).
    redistribute rewrite each Other row's attributes to those of its nearest
                 non-Other neighbor in feature space, so it trains under that
                 neighbor's group.
    ignore       exclude Other rows from training; the returned scheme no
                 longer maps them, so downstream assignment flags rather than
                 drops them.
    """
    if other_id not in scheme.group_ids:
        raise ValidationError(f"{other_id!r} is not a group of scheme {scheme.name!r}")
    if strategy not in OTHER_STRATEGIES:
        raise ValidationError(f"unknown strategy {strategy!r}; expected one of {OTHER_STRATEGIES}")

    assigned = scheme.assign(ds)
    other_mask = assigned == other_id
    other_indices = np.nonzero(other_mask)[0]

    if strategy == "separate":
        return OtherStrategyResult(train=ds, scheme=scheme, other_indices=other_indices)

    if strategy == "ignore":
        mapping = {k: v for k, v in scheme.mapping.items() if v != other_id}
        reduced = GroupingScheme(
            name=f"{scheme.name}/ignore-{other_id}",
            axes=scheme.axes,
            mapping=mapping,
            group_ids=tuple(g for g in scheme.group_ids if g != other_id),
        )
        keep = np.nonzero(~other_mask)[0]
        return OtherStrategyResult(
            train=ds.subset(keep), scheme=reduced, other_indices=other_indices
        )

    # redistribute
    cand_indices = np.nonzero(~other_mask)[0]
    if cand_indices.size == 0:
        raise ValidationError("redistribute needs at least one non-Other row")
    attributes = np.array(ds.attributes, dtype=object)
    axis_cols = [ds.axis_index(a) for a in scheme.axes]  # only the scheme's axes move
    nearest = cand_indices[
        _nearest_indices(ds.features[other_indices], ds.features[cand_indices])
    ]
    reassigned: dict[int, str] = {}
    for row, donor in zip(other_indices, nearest):
        for k in axis_cols:
            attributes[row, k] = ds.attributes[donor, k]
        reassigned[int(row)] = str(assigned[donor])
    train = Dataset(ds.features, ds.labels, attributes, ds.axis_names)
    return OtherStrategyResult(
        train=train, scheme=scheme, other_indices=other_indices, reassigned=reassigned
    )
