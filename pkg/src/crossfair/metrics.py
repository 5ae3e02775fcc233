"""Evaluation metrics for probabilistic classifiers over demographic subgroups.

Accuracy and fairness are measured on soft (probabilistic) outputs throughout:
soft accuracy is the mean probability mass on the correct label, and the soft
TPR of a group is the mean predicted probability over its positively labeled
members. Hard-threshold rates are deliberately not computed here.
"""

from __future__ import annotations

import bisect
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ConfidenceInterval",
    "EvaluationReport",
    "GroupMetrics",
    "RankSummary",
    "base_rate_by_group",
    "confidence_interval",
    "evaluate_predictions",
    "fisher_combine",
    "group_rank_summary",
    "kendall_tau",
    "max_tpr_difference",
    "pairwise_tpr_matrix",
    "rank_descending",
    "roc_auc",
    "soft_accuracy",
    "soft_tpr_by_group",
]


def _as_prob_arrays(labels, probs) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(labels, dtype=float)
    p = np.asarray(probs, dtype=float)
    if y.shape != p.shape:
        raise ValueError(f"labels and probs have different lengths: {y.shape} vs {p.shape}")
    if y.size == 0:
        raise ValueError("empty input")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    return y, p


def soft_accuracy(labels, probs) -> float:
    """Mean probability assigned to the correct label: (1/n) sum y*p + (1-y)*(1-p)."""
    y, p = _as_prob_arrays(labels, probs)
    return float(np.mean(y * p + (1.0 - y) * (1.0 - p)))


def soft_tpr_by_group(labels, probs, groups) -> dict[str, float]:
    """Per-group mean predicted probability over positive examples.

    Groups with no positive examples are omitted from the result; callers that
    need to surface the omission (e.g. report builders) should compare the
    returned keys against the full group set.
    """
    y, p = _as_prob_arrays(labels, probs)
    g = np.asarray(groups, dtype=object)
    if g.shape[0] != y.shape[0]:
        raise ValueError("groups length does not match labels")
    out: dict[str, float] = {}
    for gid in sorted(set(g.tolist())):
        mask = (g == gid) & (y == 1)
        if mask.any():
            out[gid] = float(p[mask].mean())
    return out


def base_rate_by_group(labels, groups) -> dict[str, float]:
    """Fraction of positive labels within each group."""
    y = np.asarray(labels, dtype=float)
    g = np.asarray(groups, dtype=object)
    if g.shape[0] != y.shape[0]:
        raise ValueError("groups length does not match labels")
    return {gid: float(y[g == gid].mean()) for gid in sorted(set(g.tolist()))}


def pairwise_tpr_matrix(tprs: Mapping[str, float]) -> tuple[list[str], np.ndarray]:
    """Signed matrix M[i, j] = tpr_i - tpr_j over groups in sorted-id order.

    The signed form is kept because absolute differences obscure whether an
    algorithm has over- or under-corrected a group.
    """
    ids = sorted(tprs)
    v = np.array([tprs[i] for i in ids], dtype=float)
    return ids, v[:, None] - v[None, :]


def max_tpr_difference(tprs: Mapping[str, float]) -> float:
    """Largest pairwise soft-TPR gap: max over groups minus min over groups."""
    if len(tprs) < 2:
        raise ValueError("max TPR difference needs at least two groups")
    values = list(tprs.values())
    return max(values) - min(values)


def roc_auc(labels, probs) -> float | None:
    """Probability a random positive outranks a random negative, ties at 0.5.

    Computed with the rank-sum (Mann-Whitney) formulation using average ranks
    for tied scores. Returns None when the input is single-class, since the
    quantity is undefined there.
    """
    y, p = _as_prob_arrays(labels, probs)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(p, kind="mergesort")
    ranks = np.empty(len(p), dtype=float)
    sorted_p = p[order]
    i = 0
    while i < len(p):
        j = i
        while j + 1 < len(p) and sorted_p[j + 1] == sorted_p[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average of 1-based positions
        i = j + 1
    rank_sum_pos = float(ranks[y == 1].sum())
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def rank_descending(values: Mapping[str, float]) -> dict[str, float]:
    """Rank map values with 1 = highest; tied values share their average rank."""
    items = list(values.items())
    out = {}
    for key, v in items:
        greater = sum(1 for _, w in items if w > v)
        equal = sum(1 for _, w in items if w == v)
        out[key] = greater + (equal + 1) / 2.0
    return out


@dataclass(frozen=True)
class RankSummary:
    """TPR ranks per group plus the ranks of the base-rate extremes.

    ``lowest_base_rate_group`` / ``highest_base_rate_group`` identify the
    groups with the smallest and largest positive-label base rate; their TPR
    ranks summarize whether the model's ordering mirrors the data's ordering.
    """

    tpr_ranks: dict[str, float]
    lowest_base_rate_group: str
    lowest_base_rate_rank: float
    highest_base_rate_group: str
    highest_base_rate_rank: float

    def to_dict(self) -> dict:
        return {
            "tpr_ranks": dict(sorted(self.tpr_ranks.items())),
            "lowest_base_rate_group": self.lowest_base_rate_group,
            "lowest_base_rate_rank": self.lowest_base_rate_rank,
            "highest_base_rate_group": self.highest_base_rate_group,
            "highest_base_rate_rank": self.highest_base_rate_rank,
        }


def group_rank_summary(tprs: Mapping[str, float], base_rates: Mapping[str, float]) -> RankSummary:
    """Rank group TPRs (1 = highest) and locate the base-rate extreme groups."""
    if set(tprs) != set(base_rates):
        raise ValueError("tprs and base_rates must cover the same groups")
    if len(tprs) < 2:
        raise ValueError("rank summary needs at least two groups")
    ranks = rank_descending(tprs)
    ids = sorted(base_rates)
    low = min(ids, key=lambda g: (base_rates[g], ids.index(g)))
    high = max(ids, key=lambda g: (base_rates[g], -ids.index(g)))
    return RankSummary(
        tpr_ranks=ranks,
        lowest_base_rate_group=low,
        lowest_base_rate_rank=ranks[low],
        highest_base_rate_group=high,
        highest_base_rate_rank=ranks[high],
    )


# ---------------------------------------------------------------------------
# Kendall's tau-b with significance
# ---------------------------------------------------------------------------

# Exact permutation distributions of |tau| are cached by the tie shape of each
# input, since the null distribution depends only on which multiplicities
# occur, not on the values themselves.
_TAU_DIST_CACHE: dict[tuple, tuple[list[float], int]] = {}
_PERM_CACHE: dict[int, np.ndarray] = {}

EXACT_PERMUTATION_MAX_N = 8


def _pair_counts(a: Sequence[float], b: Sequence[float]) -> tuple[int, int]:
    """Concordant and discordant pair counts (ties in either excluded)."""
    c = d = 0
    n = len(a)
    for i in range(n - 1):
        ai, bi = a[i], b[i]
        for j in range(i + 1, n):
            s = (ai > a[j]) - (ai < a[j])
            t = (bi > b[j]) - (bi < b[j])
            st = s * t
            if st > 0:
                c += 1
            elif st < 0:
                d += 1
    return c, d


def _tie_multiplicities(values: Sequence[float]) -> list[int]:
    counts: dict[float, int] = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    return sorted(counts.values())


def _tau_b(a: Sequence[float], b: Sequence[float]) -> float:
    n = len(a)
    c, d = _pair_counts(a, b)
    n0 = n * (n - 1) // 2
    n1 = sum(t * (t - 1) // 2 for t in _tie_multiplicities(a))
    n2 = sum(t * (t - 1) // 2 for t in _tie_multiplicities(b))
    denom = math.sqrt((n0 - n1) * (n0 - n2))
    if denom == 0.0:
        return float("nan")
    return (c - d) / denom


def _shape_to_canonical(shape: Sequence[int]) -> list[int]:
    values = []
    for label, mult in enumerate(shape):
        values.extend([label] * mult)
    return values


def _exact_abs_tau_distribution(shape_a: tuple[int, ...], shape_b: tuple[int, ...]) -> tuple[list[float], int]:
    """Sorted |tau| over all permutations of one ranking against the other."""
    key = (shape_a, shape_b)
    cached = _TAU_DIST_CACHE.get(key)
    if cached is not None:
        return cached
    a = np.array(_shape_to_canonical(shape_a), dtype=float)
    b = np.array(_shape_to_canonical(shape_b), dtype=float)
    n = len(a)
    if n not in _PERM_CACHE:
        _PERM_CACHE[n] = np.array(list(itertools.permutations(range(n))), dtype=np.intp)
    perms = _PERM_CACHE[n]
    b_perm = b[perms]  # (n!, n)
    num = np.zeros(len(perms))
    for i in range(n - 1):
        for j in range(i + 1, n):
            sa = np.sign(a[i] - a[j])
            if sa != 0.0:
                num += sa * np.sign(b_perm[:, i] - b_perm[:, j])
    n0 = n * (n - 1) // 2
    n1 = sum(t * (t - 1) // 2 for t in shape_a)
    n2 = sum(t * (t - 1) // 2 for t in shape_b)
    denom = math.sqrt((n0 - n1) * (n0 - n2))
    dist = sorted(np.abs(num / denom).tolist())
    _TAU_DIST_CACHE[key] = (dist, len(perms))
    return dist, len(perms)


def _tau_normal_p(a: Sequence[float], b: Sequence[float], c: int, d: int) -> float:
    # Tie-corrected null variance of (C - D); see Kendall's rank correlation
    # variance formula for tau-b.
    n = len(a)
    ta = _tie_multiplicities(a)
    tb = _tie_multiplicities(b)
    v0 = n * (n - 1) * (2 * n + 5)
    vt = sum(t * (t - 1) * (2 * t + 5) for t in ta)
    vu = sum(u * (u - 1) * (2 * u + 5) for u in tb)
    v1 = (
        sum(t * (t - 1) for t in ta)
        * sum(u * (u - 1) for u in tb)
        / (2.0 * n * (n - 1))
    )
    v2 = (
        sum(t * (t - 1) * (t - 2) for t in ta)
        * sum(u * (u - 1) * (u - 2) for u in tb)
        / (9.0 * n * (n - 1) * (n - 2))
    )
    var = (v0 - vt - vu) / 18.0 + v1 + v2
    if var <= 0.0:
        return float("nan")
    z = (c - d) / math.sqrt(var)
    return math.erfc(abs(z) / math.sqrt(2.0))


def kendall_tau(ranking_a, ranking_b) -> tuple[float, float]:
    """Kendall's tau-b between two rankings with a two-sided p-value.

    Significance uses the exact permutation distribution for inputs of length
    at most ``EXACT_PERMUTATION_MAX_N`` (distributions are cached by tie
    shape, so repeated calls are cheap) and the tie-corrected normal
    approximation for longer inputs. When either input is entirely tied the
    statistic is undefined and (nan, nan) is returned.
    """
    a = [float(v) for v in ranking_a]
    b = [float(v) for v in ranking_b]
    if len(a) != len(b):
        raise ValueError(f"rankings have different lengths: {len(a)} vs {len(b)}")
    if len(a) < 2:
        raise ValueError("kendall_tau needs at least two items")
    tau = _tau_b(a, b)
    if math.isnan(tau):
        return tau, float("nan")
    n = len(a)
    if n <= EXACT_PERMUTATION_MAX_N:
        shape_a = tuple(_tie_multiplicities(a))
        shape_b = tuple(_tie_multiplicities(b))
        dist, total = _exact_abs_tau_distribution(shape_a, shape_b)
        # Tolerance guards against <=1 ulp drift between the observed tau and
        # the cached distribution values.
        idx = bisect.bisect_left(dist, abs(tau) - 1e-12)
        p = (total - idx) / total
    else:
        c, d = _pair_counts(a, b)
        p = _tau_normal_p(a, b, c, d)
    return tau, p


# ---------------------------------------------------------------------------
# Fisher's combined probability test
# ---------------------------------------------------------------------------


def _chi2_sf_even_df(x: float, half_df: int) -> float:
    """Survival function of chi-square with even df = 2 * half_df.

    For integer shape k the regularized upper incomplete gamma function
    Q(k, x/2) reduces to a Poisson tail sum; the sum is accumulated in log
    space so it stays accurate when exp(-x/2) underflows.
    """
    if x <= 0.0:
        return 1.0
    m = x / 2.0
    log_m = math.log(m)
    log_sum = -math.inf
    for i in range(half_df):
        log_term = -m + i * log_m - math.lgamma(i + 1)
        if log_sum == -math.inf:
            log_sum = log_term
        else:
            hi, lo = max(log_sum, log_term), min(log_sum, log_term)
            log_sum = hi + math.log1p(math.exp(lo - hi))
    return min(1.0, math.exp(log_sum))


def fisher_combine(p_values: Iterable[float]) -> tuple[float, float]:
    """Combine independent p-values: statistic -2*sum(ln p) vs chi-square(2k)."""
    ps = [float(p) for p in p_values]
    if not ps:
        raise ValueError("fisher_combine needs at least one p-value")
    for p in ps:
        if not (0.0 < p <= 1.0):
            raise ValueError(f"p-values must lie in (0, 1]; got {p}")
    statistic = -2.0 * sum(math.log(p) for p in ps)
    return statistic, _chi2_sf_even_df(statistic, len(ps))


# ---------------------------------------------------------------------------
# Confidence intervals and reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfidenceInterval:
    mean: float
    half_width: float
    n_trials: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "half_width": self.half_width, "n_trials": self.n_trials}

    def overlaps(self, other: "ConfidenceInterval") -> bool:
        return abs(self.mean - other.mean) <= self.half_width + other.half_width


def confidence_interval(values: Iterable[float]) -> ConfidenceInterval:
    """95% normal-approximation interval: mean +/- 1.96 * s / sqrt(n), s with ddof=1."""
    v = np.asarray(list(values), dtype=float)
    if v.size < 2:
        raise ValueError("confidence_interval needs at least two values")
    half = 1.96 * float(np.std(v, ddof=1)) / math.sqrt(v.size)
    return ConfidenceInterval(mean=float(np.mean(v)), half_width=half, n_trials=int(v.size))


@dataclass(frozen=True)
class GroupMetrics:
    group: str
    count: int
    positives: int
    base_rate: float
    soft_tpr: float | None
    auc: float | None

    def to_dict(self) -> dict:
        return {
            "group": self.group,
            "count": self.count,
            "positives": self.positives,
            "base_rate": self.base_rate,
            "soft_tpr": self.soft_tpr,
            "auc": self.auc,
        }


@dataclass(frozen=True)
class EvaluationReport:
    """Disaggregated evaluation of one predictor on one labeled partition."""

    groups: tuple[GroupMetrics, ...]
    soft_accuracy: float
    max_tpr_difference: float | None
    tpr_matrix_order: tuple[str, ...]
    tpr_matrix: tuple[tuple[float, ...], ...]
    rank_summary: RankSummary | None
    kendall_tau: float | None
    tau_p_value: float | None
    warnings: tuple[str, ...] = field(default=())

    def group_metrics(self, group: str) -> GroupMetrics:
        for gm in self.groups:
            if gm.group == group:
                return gm
        raise KeyError(group)

    def to_dict(self) -> dict:
        return {
            "soft_accuracy": self.soft_accuracy,
            "max_tpr_difference": self.max_tpr_difference,
            "groups": [gm.to_dict() for gm in self.groups],
            "tpr_matrix": {
                "order": list(self.tpr_matrix_order),
                "values": [list(row) for row in self.tpr_matrix],
            },
            "rank_summary": self.rank_summary.to_dict() if self.rank_summary else None,
            "kendall_tau": self.kendall_tau,
            "tau_p_value": self.tau_p_value,
            "warnings": list(self.warnings),
        }

    def to_csv_rows(self) -> list[dict]:
        """One flat row per group, for spreadsheet-style consumption."""
        rows = []
        for gm in self.groups:
            rows.append(
                {
                    "group": gm.group,
                    "count": gm.count,
                    "positives": gm.positives,
                    "base_rate": gm.base_rate,
                    "soft_tpr": "" if gm.soft_tpr is None else gm.soft_tpr,
                    "auc": "" if gm.auc is None else gm.auc,
                }
            )
        return rows


def evaluate_predictions(labels, probs, groups) -> EvaluationReport:
    """Build the full per-group report for one set of predictions.

    Groups without positives get no soft TPR (and are excluded from the TPR
    matrix, ranks, and the ranking correlation); single-class groups get no
    AUC. Both omissions are recorded in ``warnings`` rather than dropped
    silently.
    """
    y, p = _as_prob_arrays(labels, probs)
    g = np.asarray(groups, dtype=object)
    if g.shape[0] != y.shape[0]:
        raise ValueError("groups length does not match labels")

    warnings: list[str] = []
    tprs = soft_tpr_by_group(y, p, g)
    rates = base_rate_by_group(y, g)
    per_group: list[GroupMetrics] = []
    for gid in sorted(set(g.tolist())):
        mask = g == gid
        count = int(mask.sum())
        positives = int(y[mask].sum())
        auc = roc_auc(y[mask], p[mask]) if 0 < positives < count else None
        if positives == 0:
            warnings.append(f"group {gid!r} has no positive examples; soft TPR omitted")
        if auc is None:
            warnings.append(f"group {gid!r} is single-class; AUC omitted")
        per_group.append(
            GroupMetrics(
                group=gid,
                count=count,
                positives=positives,
                base_rate=rates[gid],
                soft_tpr=tprs.get(gid),
                auc=auc,
            )
        )

    if len(tprs) >= 2:
        order, matrix = pairwise_tpr_matrix(tprs)
        max_diff = max_tpr_difference(tprs)
        summary = group_rank_summary(tprs, {gid: rates[gid] for gid in tprs})
        ordered = sorted(tprs)
        tau, tau_p = kendall_tau([rates[gid] for gid in ordered], [tprs[gid] for gid in ordered])
        if math.isnan(tau):
            warnings.append("ranking correlation undefined: all base rates or TPRs tied")
            tau_out = tau_p_out = None
        else:
            tau_out, tau_p_out = tau, tau_p
    else:
        warnings.append("fewer than two groups with positives; TPR comparisons omitted")
        order, matrix = [], np.zeros((0, 0))
        max_diff = None
        summary = None
        tau_out = tau_p_out = None

    return EvaluationReport(
        groups=tuple(per_group),
        soft_accuracy=soft_accuracy(y, p),
        max_tpr_difference=max_diff,
        tpr_matrix_order=tuple(order),
        tpr_matrix=tuple(tuple(float(v) for v in row) for row in matrix),
        rank_summary=summary,
        kendall_tau=tau_out,
        tau_p_value=tau_p_out,
        warnings=tuple(warnings),
    )
