import itertools
import math

import numpy as np
import pytest
import scipy.stats

from crossfair.metrics import (
    confidence_interval,
    evaluate_predictions,
    fisher_combine,
    group_rank_summary,
    kendall_tau,
    max_tpr_difference,
    pairwise_tpr_matrix,
    rank_descending,
    roc_auc,
    soft_accuracy,
    soft_tpr_by_group,
)


# ---------------------------------------------------------------- soft accuracy


def test_soft_accuracy_perfect_predictor():
    assert soft_accuracy([1, 0], [1.0, 0.0]) == 1.0


def test_soft_accuracy_coin_flip_is_half():
    for labels in ([1, 1, 0], [0, 0, 0], [1, 0, 1, 0]):
        assert soft_accuracy(labels, [0.5] * len(labels)) == 0.5


def test_soft_accuracy_direct_formula():
    assert soft_accuracy([1, 0], [0.8, 0.3]) == 0.75


def test_soft_accuracy_complement_symmetry():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = rng.integers(1, 40)
        y = rng.integers(0, 2, n)
        p = rng.random(n)
        assert soft_accuracy(y, p) + soft_accuracy(y, 1 - p) == pytest.approx(1.0, abs=1e-12)


def test_soft_accuracy_rejects_empty_and_bad_probs():
    with pytest.raises(ValueError):
        soft_accuracy([], [])
    with pytest.raises(ValueError):
        soft_accuracy([1], [1.5])


# ---------------------------------------------------------------- soft TPR


def test_soft_tpr_single_group_mean():
    assert soft_tpr_by_group([1, 1], [0.6, 0.8], ["g", "g"]) == {"g": pytest.approx(0.7)}


def test_soft_tpr_group_without_positives_omitted():
    tprs = soft_tpr_by_group([1, 0, 0], [0.9, 0.2, 0.3], ["a", "b", "b"])
    assert set(tprs) == {"a"}


def test_soft_tpr_symmetric_groups_equal():
    y = [1, 1, 1, 1]
    p = [0.3, 0.9, 0.3, 0.9]
    tprs = soft_tpr_by_group(y, p, ["a", "a", "b", "b"])
    assert tprs["a"] == tprs["b"]


# ---------------------------------------------------------------- max TPR difference


def test_max_tpr_difference_obscures_distributions():
    # (.1,.2,.8) and (.1,.6,.8) report the same gap: 0.7
    first = max_tpr_difference({"a": 0.1, "b": 0.2, "c": 0.8})
    second = max_tpr_difference({"a": 0.1, "b": 0.6, "c": 0.8})
    assert first == second
    assert first == pytest.approx(0.7, abs=1e-15)


def test_max_tpr_difference_parity_is_zero():
    assert max_tpr_difference({"a": 0.4, "b": 0.4, "c": 0.4}) == 0.0


def test_max_tpr_difference_needs_two_groups():
    with pytest.raises(ValueError):
        max_tpr_difference({"only": 0.5})


def test_pairwise_matrix_consistent_with_max_difference():
    rng = np.random.default_rng(3)
    for _ in range(25):
        tprs = {f"g{i}": float(v) for i, v in enumerate(rng.random(rng.integers(2, 9)))}
        ids, matrix = pairwise_tpr_matrix(tprs)
        assert ids == sorted(tprs)
        assert np.abs(matrix).max() == pytest.approx(max_tpr_difference(tprs), abs=1e-15)
        assert np.allclose(matrix, -matrix.T)


# ---------------------------------------------------------------- ROC AUC


def brute_force_auc(labels, probs):
    pos = [p for y, p in zip(labels, probs) if y == 1]
    neg = [p for y, p in zip(labels, probs) if y == 0]
    if not pos or not neg:
        return None
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else (0.5 if a == b else 0.0)
    return total / (len(pos) * len(neg))


def test_roc_auc_perfect_and_reversed():
    assert roc_auc([1, 0], [0.9, 0.1]) == 1.0
    assert roc_auc([1, 0], [0.1, 0.9]) == 0.0


def test_roc_auc_with_ties():
    assert roc_auc([1, 0, 1, 0], [0.8, 0.8, 0.6, 0.4]) == pytest.approx(0.625)


def test_roc_auc_single_class_absent():
    assert roc_auc([1, 1], [0.2, 0.4]) is None


def test_roc_auc_matches_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(200):
        n = int(rng.integers(2, 40))
        y = rng.integers(0, 2, n)
        p = np.round(rng.random(n), 2)  # coarse grid forces ties
        expected = brute_force_auc(y.tolist(), p.tolist())
        got = roc_auc(y, p)
        if expected is None:
            assert got is None
        else:
            assert got == pytest.approx(expected, abs=1e-12)


def test_roc_auc_invariant_under_monotone_transform():
    rng = np.random.default_rng(11)
    y = rng.integers(0, 2, 30)
    y[0], y[1] = 0, 1
    p = rng.random(30)
    assert roc_auc(y, p) == pytest.approx(roc_auc(y, p**3), abs=1e-12)
    assert roc_auc(y, p) == pytest.approx(roc_auc(y, 0.1 + 0.8 * p), abs=1e-12)


def test_roc_auc_complement_symmetry_tie_free():
    rng = np.random.default_rng(13)
    y = rng.integers(0, 2, 25)
    y[0], y[1] = 0, 1
    p = rng.permutation(25) / 25.0  # distinct scores
    assert roc_auc(y, p) == pytest.approx(1.0 - roc_auc(y, 1 - p), abs=1e-12)


# ---------------------------------------------------------------- rank summaries


def test_rank_descending_with_ties():
    assert rank_descending({"a": 3.0, "b": 1.0, "c": 3.0}) == {"a": 1.5, "b": 3.0, "c": 1.5}


def test_group_rank_summary_direct():
    tprs = {"A": 0.2, "B": 0.9, "C": 0.5, "D": 0.6}
    rates = {"A": 0.1, "B": 0.8, "C": 0.4, "D": 0.5}
    summary = group_rank_summary(tprs, rates)
    assert summary.lowest_base_rate_group == "A"
    assert summary.lowest_base_rate_rank == 4.0
    assert summary.highest_base_rate_group == "B"
    assert summary.highest_base_rate_rank == 1.0


def test_group_rank_summary_all_tied():
    tprs = {g: 0.5 for g in "ABCD"}
    rates = {"A": 0.1, "B": 0.4, "C": 0.2, "D": 0.3}
    summary = group_rank_summary(tprs, rates)
    assert all(r == 2.5 for r in summary.tpr_ranks.values())


def test_group_rank_summary_requires_matching_groups():
    with pytest.raises(ValueError):
        group_rank_summary({"a": 0.1, "b": 0.2}, {"a": 0.1, "c": 0.2})


# ---------------------------------------------------------------- Kendall's tau


def brute_force_tau_b(a, b):
    n = len(a)
    c = d = 0
    for i, j in itertools.combinations(range(n), 2):
        s = (a[i] > a[j]) - (a[i] < a[j])
        t = (b[i] > b[j]) - (b[i] < b[j])
        if s * t > 0:
            c += 1
        elif s * t < 0:
            d += 1
    n0 = n * (n - 1) // 2
    n1 = sum(
        m * (m - 1) // 2 for m in (a.count(v) for v in set(a))
    )
    n2 = sum(
        m * (m - 1) // 2 for m in (b.count(v) for v in set(b))
    )
    denom = math.sqrt((n0 - n1) * (n0 - n2))
    return (c - d) / denom if denom else float("nan")


def brute_force_exact_p(a, b):
    tau_obs = abs(brute_force_tau_b(a, b))
    hits = total = 0
    for perm in itertools.permutations(b):
        total += 1
        if abs(brute_force_tau_b(a, list(perm))) >= tau_obs - 1e-12:
            hits += 1
    return hits / total


def test_kendall_tau_perfect_concordance_and_discordance():
    tau, _ = kendall_tau([1, 2, 3, 4, 5], [1, 2, 3, 4, 5])
    assert tau == 1.0
    tau, _ = kendall_tau([1, 2, 3, 4, 5], [5, 4, 3, 2, 1])
    assert tau == -1.0


def test_kendall_tau_single_swap():
    tau, _ = kendall_tau([1, 2, 3, 4], [1, 3, 2, 4])
    assert tau == pytest.approx(4 / 6)


def test_kendall_tau_matches_brute_force_all_pairs_small_k():
    for k in (3, 4):
        for a in itertools.permutations(range(k)):
            for b in itertools.permutations(range(k)):
                tau, _ = kendall_tau(a, b)
                assert tau == pytest.approx(brute_force_tau_b(list(a), list(b)), abs=1e-12)


def test_kendall_tau_with_ties_matches_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n = int(rng.integers(2, 9))
        a = rng.integers(0, 4, n).tolist()
        b = rng.integers(0, 4, n).tolist()
        tau, _ = kendall_tau(a, b)
        expected = brute_force_tau_b(a, b)
        if math.isnan(expected):
            assert math.isnan(tau)
        else:
            assert tau == pytest.approx(expected, abs=1e-12)


def test_kendall_tau_exact_p_matches_permutation_brute_force():
    cases = [
        ([1, 2, 3, 4], [1, 3, 2, 4]),
        ([1, 2, 3, 4, 5], [2, 1, 4, 3, 5]),
        ([1, 1, 2, 3], [3, 1, 2, 2]),  # ties on both sides
        ([1, 2, 3, 4, 5], [5, 4, 3, 2, 1]),
    ]
    for a, b in cases:
        _, p = kendall_tau(a, b)
        assert p == pytest.approx(brute_force_exact_p(a, b), abs=1e-12)


def test_kendall_tau_exact_p_matches_scipy_tie_free():
    rng = np.random.default_rng(9)
    for _ in range(20):
        k = int(rng.integers(3, 8))
        a = rng.permutation(k).tolist()
        b = rng.permutation(k).tolist()
        tau, p = kendall_tau(a, b)
        ref = scipy.stats.kendalltau(a, b, method="exact")
        assert tau == pytest.approx(ref.statistic, abs=1e-12)
        assert p == pytest.approx(ref.pvalue, abs=1e-9)


def test_kendall_tau_normal_approximation_large_k():
    rng = np.random.default_rng(21)
    for _ in range(10):
        k = 15
        a = rng.random(k).tolist()
        b = (np.asarray(a) + rng.normal(0, 0.5, k)).tolist()
        tau, p = kendall_tau(a, b)
        ref = scipy.stats.kendalltau(a, b, method="asymptotic")
        assert tau == pytest.approx(ref.statistic, abs=1e-12)
        assert p == pytest.approx(ref.pvalue, abs=1e-8)


def test_kendall_tau_degenerate_ties_is_nan():
    tau, p = kendall_tau([1, 1, 1], [1, 2, 3])
    assert math.isnan(tau) and math.isnan(p)


def test_kendall_tau_length_mismatch():
    with pytest.raises(ValueError):
        kendall_tau([1, 2], [1, 2, 3])


# ---------------------------------------------------------------- Fisher combination


def test_fisher_combine_all_ones():
    stat, p = fisher_combine([1.0, 1.0])
    assert stat == 0.0
    assert p == 1.0


def test_fisher_combine_two_halves():
    stat, p = fisher_combine([0.5, 0.5])
    assert stat == pytest.approx(2.7726, abs=1e-4)
    assert p == pytest.approx(0.5966, abs=1e-3)


def test_fisher_combine_single_p_is_identity():
    stat, p = fisher_combine([0.05])
    assert p == pytest.approx(0.05, abs=1e-6)
    assert p == pytest.approx(math.exp(-stat / 2.0), abs=1e-12)


def test_fisher_combine_matches_chi2_oracle():
    rng = np.random.default_rng(17)
    for _ in range(50):
        k = int(rng.integers(1, 12))
        ps = rng.uniform(1e-6, 1.0, k).tolist()
        stat, p = fisher_combine(ps)
        assert p == pytest.approx(scipy.stats.chi2.sf(stat, 2 * k), abs=1e-6)


def test_fisher_combine_statistic_additive():
    a = [0.2, 0.7]
    b = [0.05, 0.9, 0.4]
    assert fisher_combine(a + b)[0] == pytest.approx(
        fisher_combine(a)[0] + fisher_combine(b)[0], abs=1e-12
    )


def test_fisher_combine_rejects_bad_p():
    with pytest.raises(ValueError):
        fisher_combine([0.5, 0.0])
    with pytest.raises(ValueError):
        fisher_combine([1.2])
    with pytest.raises(ValueError):
        fisher_combine([])


# ---------------------------------------------------------------- confidence intervals


def test_confidence_interval_zero_variance():
    ci = confidence_interval([0.5, 0.5, 0.5])
    assert ci.mean == 0.5 and ci.half_width == 0.0 and ci.n_trials == 3


def test_confidence_interval_two_point():
    ci = confidence_interval([0.0, 1.0])
    assert ci.mean == 0.5
    assert ci.half_width == pytest.approx(0.98)


def test_confidence_interval_manual_se():
    values = [0.61, 0.57, 0.63, 0.59, 0.60]
    mean = sum(values) / 5
    se = math.sqrt(sum((v - mean) ** 2 for v in values) / 4) / math.sqrt(5)
    ci = confidence_interval(values)
    assert ci.mean == pytest.approx(mean, abs=1e-9)
    assert ci.half_width == pytest.approx(1.96 * se, abs=1e-9)


def test_confidence_interval_needs_two():
    with pytest.raises(ValueError):
        confidence_interval([0.4])


# ---------------------------------------------------------------- full report


def test_evaluate_predictions_report_shape():
    y = [1, 1, 1, 0, 0, 1, 1, 0]
    p = [0.9, 0.2, 0.7, 0.4, 0.1, 0.8, 0.6, 0.3]
    g = ["a", "a", "a", "a", "b", "b", "b", "b"]
    report = evaluate_predictions(y, p, g)
    assert {gm.group for gm in report.groups} == {"a", "b"}
    assert report.max_tpr_difference == pytest.approx(
        abs((0.9 + 0.2 + 0.7) / 3 - (0.8 + 0.6) / 2), abs=1e-12
    )
    assert report.kendall_tau is not None
    blob = report.to_dict()
    assert blob["tpr_matrix"]["order"] == ["a", "b"]
    assert len(blob["groups"]) == 2


def test_evaluate_predictions_flags_no_positive_group():
    y = [1, 0, 0, 0]
    p = [0.9, 0.1, 0.2, 0.3]
    g = ["a", "a", "b", "b"]
    report = evaluate_predictions(y, p, g)
    assert report.group_metrics("b").soft_tpr is None
    assert any("no positive" in w for w in report.warnings)
    assert report.max_tpr_difference is None  # only one group has a TPR
