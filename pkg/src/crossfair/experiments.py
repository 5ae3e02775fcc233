"""Study orchestration: repeated-trial protocols over scenarios and algorithms.

Five study kinds are supported:

granularity           train under coarse/medium/fine grouping scenarios,
                      always evaluating max TPR difference at the finest
                      grouping (optionally restricted to a subset of groups).
other_handling        compare the separate / redistribute / ignore treatments
                      of a residual group by that group's test AUC.
subgroup_predictivity train on a fixed-size sample of one donor group at a
                      time and measure AUC on a target group's test rows.
mixture_probe         find the donor mix that best predicts a target cell,
                      then sweep target-cell samples into the fixed budget.
ranking_reification   correlate group base-rate rankings with model TPR
                      rankings (Kendall's tau, Fisher-combined across trials).

Every study runs ``n_trials`` trials; trial t derives all of its randomness
from ``base_seed + t`` (split and model initialization alike), so a study is a
pure function of its spec. Evaluation partitions depend only on the trial
seed, never on the scenario: scenarios change training, not measurement.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (
    CsvSchema,
    Dataset,
    SplitSpec,
    SyntheticSpec,
    ValidationError,
    concat_datasets,
    generate_synthetic,
    load_csv,
    split,
    standardize,
)
from .fairness import AlgorithmSpec, grid_search, train_algorithm
from .groups import (
    GroupFilter,
    GroupingScheme,
    OTHER_STRATEGIES,
    apply_other_strategy,
    conjunction_encode,
    filter_groups,
    nearest_group_bulk,
    regroup,
)
from .metrics import (
    ConfidenceInterval,
    EvaluationReport,
    confidence_interval,
    evaluate_predictions,
    fisher_combine,
    roc_auc,
)

__all__ = [
    "ExperimentSpec",
    "GroupingScenario",
    "StudyResult",
    "TrialResult",
    "STUDY_KINDS",
    "granularity_study",
    "mixture_probe",
    "other_handling_study",
    "prepare_trial",
    "ranking_reification_study",
    "run_trials",
    "subgroup_predictivity_probe",
]

STUDY_KINDS = (
    "granularity",
    "other_handling",
    "subgroup_predictivity",
    "mixture_probe",
    "ranking_reification",
)

NOT_APPLICABLE_UNSEEN = "cannot infer on groups unseen at training time"


@dataclass(frozen=True)
class GroupingScenario:
    """A training-time grouping: either a coarsening of the finest scheme
    (``merge_map`` over its group ids) or a conjunction over a subset of the
    spec's axes. With neither, the scenario trains at the finest grouping."""

    name: str
    axes: tuple[str, ...] | None = None
    merge_map: dict[str, str] | None = None

    def __post_init__(self):
        if self.axes is not None:
            object.__setattr__(self, "axes", tuple(self.axes))
        if self.axes is not None and self.merge_map is not None:
            raise ValidationError(f"scenario {self.name!r}: give axes or merge_map, not both")


@dataclass(frozen=True)
class ExperimentSpec:
    """Declarative description of one study run."""

    study: str
    source: SyntheticSpec | Dataset | tuple
    axes: tuple[str, ...]
    algorithms: tuple[AlgorithmSpec, ...] = ()
    scenarios: tuple[GroupingScenario, ...] = (GroupingScenario(name="finest"),)
    n_trials: int = 5
    base_seed: int = 0
    include_attribute_features: bool = True
    group_filter: GroupFilter | None = None
    search_grids: bool = True
    # granularity
    eval_groups: tuple[str, ...] | None = None
    # other handling
    other_group: str | None = None
    strategies: tuple[str, ...] = OTHER_STRATEGIES
    # predictivity probes
    target_group: str | None = None
    donor_groups: tuple[str, ...] | None = None
    sample_size: int | None = None
    mixture_donors: tuple[str, str] | None = None
    ratio_grid: tuple[float, ...] = tuple(round(0.1 * i, 1) for i in range(11))
    target_counts: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.study not in STUDY_KINDS:
            raise ValidationError(f"unknown study {self.study!r}; expected one of {STUDY_KINDS}")
        if self.n_trials < 2:
            raise ValidationError("n_trials must be at least 2")
        if not self.scenarios:
            raise ValidationError("at least one grouping scenario is required")
        object.__setattr__(self, "axes", tuple(self.axes))
        object.__setattr__(self, "algorithms", tuple(self.algorithms))
        object.__setattr__(self, "scenarios", tuple(self.scenarios))
        object.__setattr__(self, "strategies", tuple(s.lower() for s in self.strategies))
        if self.study == "other_handling":
            if not self.other_group:
                raise ValidationError("other_handling study needs other_group")
            bad = set(self.strategies) - set(OTHER_STRATEGIES)
            if bad:
                raise ValidationError(f"unknown strategies {sorted(bad)}")
        if self.study == "subgroup_predictivity":
            if not (self.target_group and self.donor_groups and self.sample_size):
                raise ValidationError(
                    "subgroup_predictivity needs target_group, donor_groups, sample_size"
                )
        if self.study == "mixture_probe":
            if not (
                self.target_group
                and self.mixture_donors
                and self.sample_size
                and self.target_counts
            ):
                raise ValidationError(
                    "mixture_probe needs target_group, mixture_donors, sample_size, target_counts"
                )
            if any(not 0.0 <= r <= 1.0 for r in self.ratio_grid):
                raise ValidationError("ratio_grid values must lie in [0, 1]")
            if any(k > self.sample_size for k in self.target_counts):
                raise ValidationError("target_counts cannot exceed the training budget")


@dataclass
class TrialResult:
    trial: int
    seed: int
    scenario: str
    algorithm: str
    report: EvaluationReport | None = None
    not_applicable: str | None = None
    error: str | None = None
    extras: dict = field(default_factory=dict)
    duration: float = 0.0

    def to_dict(self) -> dict:
        # durations are runtime facts, not results; they belong in the manifest
        return {
            "trial": self.trial,
            "seed": self.seed,
            "scenario": self.scenario,
            "algorithm": self.algorithm,
            "not_applicable": self.not_applicable,
            "error": self.error,
            "extras": self.extras,
            "report": self.report.to_dict() if self.report else None,
        }


@dataclass
class StudyResult:
    study: str
    scenarios: list[str]
    algorithms: list[str]
    n_trials: int
    base_seed: int
    trials: list[TrialResult]
    aggregates: list[dict]
    tables: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "study": self.study,
            "scenarios": self.scenarios,
            "algorithms": self.algorithms,
            "n_trials": self.n_trials,
            "base_seed": self.base_seed,
            "trials": [t.to_dict() for t in self.trials],
            "aggregates": self.aggregates,
            "tables": self.tables,
        }

    def durations(self) -> list[dict]:
        return [
            {
                "trial": t.trial,
                "scenario": t.scenario,
                "algorithm": t.algorithm,
                "seconds": t.duration,
            }
            for t in self.trials
        ]

    def aggregate(self, scenario: str, algorithm: str, metric: str) -> dict:
        for row in self.aggregates:
            if (
                row["scenario"] == scenario
                and row["algorithm"] == algorithm
                and row["metric"] == metric
            ):
                return row
        raise KeyError((scenario, algorithm, metric))


# ---------------------------------------------------------------------------
# trial preparation
# ---------------------------------------------------------------------------


def load_source(spec: ExperimentSpec) -> Dataset:
    if isinstance(spec.source, Dataset):
        return spec.source
    if isinstance(spec.source, SyntheticSpec):
        return generate_synthetic(spec.source)
    path, schema = spec.source
    if not isinstance(schema, CsvSchema):
        raise ValidationError("CSV source must be a (path, CsvSchema) pair")
    return load_csv(Path(path), schema)


@dataclass
class TrialData:
    seed: int
    finest: GroupingScheme
    full: Dataset
    train: Dataset
    val: Dataset
    test: Dataset


def prepare_trial(spec: ExperimentSpec, trial: int) -> TrialData:
    """Deterministic per-trial pipeline: filter, split, standardize.

    Scenario choices play no part here, which is what keeps evaluation
    partitions identical across scenarios for a given trial seed. Demographic
    attribute features are appended later, per scenario, because training at a
    coarse grouping must also show the model only the coarse identity.
    """
    seed = spec.base_seed + trial
    ds = load_source(spec)
    finest = conjunction_encode(ds, spec.axes)
    if spec.group_filter is not None:
        ds, _ = filter_groups(ds, finest, spec.group_filter)
        finest = conjunction_encode(ds, spec.axes)
    train, val, test = split(ds, SplitSpec(seed=seed))
    (train, val, test), _, _ = standardize(train, [val, test])
    return TrialData(seed=seed, finest=finest, full=ds, train=train, val=val, test=test)


def _one_hot_groups(assigned: np.ndarray, scheme: GroupingScheme) -> np.ndarray:
    """0/1 column per scheme group; unmapped rows encode as all zeros."""
    cols = {g: j for j, g in enumerate(scheme.group_ids)}
    out = np.zeros((len(assigned), len(scheme.group_ids)))
    for i, g in enumerate(assigned.tolist()):
        if g is not None:
            out[i, cols[g]] = 1.0
    return out


def _with_group_features(
    spec: ExperimentSpec, part: Dataset, scheme: GroupingScheme, assigned: np.ndarray | None = None
) -> Dataset:
    """Append the scenario-granularity identity one-hot to the feature matrix."""
    if not spec.include_attribute_features:
        return part
    if assigned is None:
        assigned = scheme.assign(part, strict=False)
    return part.with_features(np.hstack([part.features, _one_hot_groups(assigned, scheme)]))


def scenario_scheme(spec: ExperimentSpec, data: TrialData, scenario: GroupingScenario) -> GroupingScheme:
    if scenario.merge_map is not None:
        return regroup(data.finest, scenario.merge_map)
    if scenario.axes is not None:
        if not set(scenario.axes) <= set(spec.axes):
            raise ValidationError(
                f"scenario {scenario.name!r} is not a coarsening: axes {scenario.axes} "
                f"are not a subset of {spec.axes}"
            )
        return conjunction_encode(data.full, scenario.axes)
    return data.finest


def _fit(spec: ExperimentSpec, algorithm: AlgorithmSpec, data: TrialData,
         scheme: GroupingScheme, val_group_ids=None):
    """Grid-search when requested (and a grid exists), else a single fit."""
    if spec.search_grids:
        result = grid_search(
            algorithm, data.train, data.val, scheme, seed=data.seed, val_group_ids=val_group_ids
        )
        return result.best, {"best_hyper": result.best_hyper, "grid_table": result.table}
    model = train_algorithm(algorithm, data.train, data.val, scheme, seed=data.seed)
    return model, {"best_hyper": model.hyper}


def _restricted_max_diff(report: EvaluationReport, eval_groups) -> float | None:
    tprs = {
        gm.group: gm.soft_tpr
        for gm in report.groups
        if gm.soft_tpr is not None and (eval_groups is None or gm.group in eval_groups)
    }
    if len(tprs) < 2:
        return None
    return max(tprs.values()) - min(tprs.values())


# ---------------------------------------------------------------------------
# the studies
# ---------------------------------------------------------------------------


def _scenario_view(spec: ExperimentSpec, data: TrialData, scheme: GroupingScheme) -> TrialData:
    """Per-scenario training view: identity features at the scenario's granularity."""
    return TrialData(
        seed=data.seed,
        finest=data.finest,
        full=data.full,
        train=_with_group_features(spec, data.train, scheme),
        val=_with_group_features(spec, data.val, scheme),
        test=_with_group_features(spec, data.test, scheme),
    )


def _granularity_trial(spec: ExperimentSpec, trial: int) -> list[TrialResult]:
    data = prepare_trial(spec, trial)
    finest_test_groups = data.finest.assign(data.test)
    results = []
    for scenario in spec.scenarios:
        scheme = scenario_scheme(spec, data, scenario)
        sdata = _scenario_view(spec, data, scheme)
        for algorithm in spec.algorithms:
            started = time.perf_counter()
            result = TrialResult(
                trial=trial, seed=data.seed, scenario=scenario.name, algorithm=algorithm.kind
            )
            try:
                model, extras = _fit(spec, algorithm, sdata, scheme)
                groups_arg = None
                if model.needs_groups:
                    # group-aware models consume their own (training) grouping
                    groups_arg = scheme.assign(data.test)
                probs = model.predict(sdata.test.features, groups=groups_arg)
                report = evaluate_predictions(data.test.labels, probs, finest_test_groups)
                result.report = report
                extras["max_tpr_difference"] = _restricted_max_diff(report, spec.eval_groups)
                result.extras = extras
            except Exception as exc:  # recorded per-trial, aggregation continues
                result.error = f"{type(exc).__name__}: {exc}"
            result.duration = time.perf_counter() - started
            results.append(result)
    return results


def _granularity_aggregates(spec: ExperimentSpec, trials: list[TrialResult]):
    aggregates = _aggregate_metric(
        spec, trials, "max_tpr_difference", lambda t: t.extras.get("max_tpr_difference")
    )
    return aggregates, {}


def _other_trial(spec: ExperimentSpec, trial: int) -> list[TrialResult]:
    data = prepare_trial(spec, trial)
    if spec.other_group not in data.finest.group_ids:
        raise ValidationError(f"other group {spec.other_group!r} absent from the data")
    test_assigned = data.finest.assign(data.test)
    other_test = test_assigned == spec.other_group
    results = []
    for strategy in spec.strategies:
        view = apply_other_strategy(data.train, data.finest, spec.other_group, strategy)
        reassigned_fractions: dict[str, float] = {}
        if view.reassigned:
            values = list(view.reassigned.values())
            reassigned_fractions = {
                g: values.count(g) / len(values) for g in sorted(set(values))
            }
        # model-input group ids for val/test under this strategy
        if strategy == "redistribute":
            candidates = data.train.subset(
                np.setdiff1d(np.arange(data.train.n), view.other_indices)
            )
            val_groups = _strategy_groups(data.val, data.finest, spec.other_group, candidates)
            test_groups = _strategy_groups(data.test, data.finest, spec.other_group, candidates)
        else:
            val_groups = view.scheme.assign(data.val, strict=False)
            test_groups = view.scheme.assign(data.test, strict=False)
        train_data = TrialData(
            seed=data.seed,
            finest=data.finest,
            full=data.full,
            train=_with_group_features(spec, view.train, view.scheme),
            val=_with_group_features(spec, data.val, view.scheme, assigned=val_groups),
            test=_with_group_features(spec, data.test, view.scheme, assigned=test_groups),
        )
        for algorithm in spec.algorithms:
            started = time.perf_counter()
            result = TrialResult(
                trial=trial, seed=data.seed, scenario=strategy, algorithm=algorithm.kind
            )
            if algorithm.kind in ("grp", "gry") and strategy == "ignore":
                result.not_applicable = NOT_APPLICABLE_UNSEEN
                results.append(result)
                continue
            try:
                model, extras = _fit(
                    spec, algorithm, train_data, view.scheme, val_group_ids=val_groups
                )
                probs = model.predict(
                    train_data.test.features,
                    groups=test_groups if model.needs_groups else None,
                )
                report = evaluate_predictions(data.test.labels, probs, test_assigned)
                auc = roc_auc(data.test.labels[other_test], probs[other_test])
                extras["other_auc"] = auc
                if reassigned_fractions:
                    extras["reassigned_fractions"] = reassigned_fractions
                result.report = report
                result.extras = extras
            except Exception as exc:
                result.error = f"{type(exc).__name__}: {exc}"
            result.duration = time.perf_counter() - started
            results.append(result)
    return results


def _strategy_groups(
    part: Dataset, finest: GroupingScheme, other_id: str, candidates: Dataset
) -> np.ndarray:
    """Redistribute a partition's Other rows onto their nearest training group."""
    assigned = finest.assign(part)
    mask = assigned == other_id
    if mask.any():
        assigned = assigned.copy()
        assigned[mask] = nearest_group_bulk(part.features[mask], candidates, finest)
    return assigned


def _other_aggregates(spec: ExperimentSpec, trials: list[TrialResult]):
    aggregates = _aggregate_metric(
        spec, trials, "other_auc", lambda t: t.extras.get("other_auc")
    )
    return aggregates, {}


def _probe_subsample(rng: np.random.Generator, indices: np.ndarray, count: int) -> np.ndarray:
    return rng.choice(indices, size=count, replace=False)


def _predictivity_trial(spec: ExperimentSpec, trial: int) -> list[TrialResult]:
    data = prepare_trial(spec, trial)
    sdata = _scenario_view(spec, data, data.finest)
    train_assigned = data.finest.assign(data.train)
    test_assigned = data.finest.assign(data.test)
    target_test = np.nonzero(test_assigned == spec.target_group)[0]
    if target_test.size == 0:
        raise ValidationError(f"target group {spec.target_group!r} has no test rows")
    algorithm = spec.algorithms[0] if spec.algorithms else AlgorithmSpec("baseline")
    results = []
    for donor_index, donor in enumerate(spec.donor_groups):
        started = time.perf_counter()
        result = TrialResult(trial=trial, seed=data.seed, scenario=donor, algorithm=algorithm.kind)
        try:
            donor_rows = np.nonzero(train_assigned == donor)[0]
            if donor_rows.size < spec.sample_size:
                raise ValidationError(
                    f"donor {donor!r} has only {donor_rows.size} training rows; "
                    f"need {spec.sample_size}"
                )
            rng = np.random.default_rng([data.seed, donor_index])
            subset = sdata.train.subset(np.sort(_probe_subsample(rng, donor_rows, spec.sample_size)))
            # controlled-sample protocol: fixed hyperparameters, no tuning
            model = train_algorithm(algorithm, subset, sdata.val, data.finest, seed=data.seed)
            probs = model.predict(sdata.test.features[target_test])
            auc = roc_auc(data.test.labels[target_test], probs)
            result.extras = {"target_auc": auc, "n_train": int(spec.sample_size)}
        except Exception as exc:
            result.error = f"{type(exc).__name__}: {exc}"
        result.duration = time.perf_counter() - started
        results.append(result)
    return results


def _predictivity_aggregates(spec: ExperimentSpec, trials: list[TrialResult]):
    aggregates = _aggregate_metric(
        spec, trials, "target_auc", lambda t: t.extras.get("target_auc")
    )
    return aggregates, {}


def _mixture_trial(spec: ExperimentSpec, trial: int) -> list[TrialResult]:
    data = prepare_trial(spec, trial)
    sdata = _scenario_view(spec, data, data.finest)
    train_assigned = data.finest.assign(data.train)
    val_assigned = data.finest.assign(data.val)
    test_assigned = data.finest.assign(data.test)
    donor_a, donor_b = spec.mixture_donors
    rows = {
        g: np.nonzero(train_assigned == g)[0]
        for g in (donor_a, donor_b, spec.target_group)
    }
    val_target = np.nonzero(val_assigned == spec.target_group)[0]
    test_target = np.nonzero(test_assigned == spec.target_group)[0]
    if val_target.size == 0 or test_target.size == 0:
        raise ValidationError(f"target group {spec.target_group!r} missing from val or test")
    algorithm = spec.algorithms[0] if spec.algorithms else AlgorithmSpec("baseline")
    budget = int(spec.sample_size)

    def build(count_a: int, count_b: int, count_target: int, tag: int) -> Dataset:
        need = {donor_a: count_a, donor_b: count_b, spec.target_group: count_target}
        parts = []
        for slot, (g, count) in enumerate(need.items()):
            if count == 0:
                continue
            if rows[g].size < count:
                raise ValidationError(
                    f"group {g!r} has only {rows[g].size} training rows; need {count} "
                    "(budget exceeds available rows)"
                )
            rng = np.random.default_rng([data.seed, tag, slot])
            parts.append(sdata.train.subset(np.sort(_probe_subsample(rng, rows[g], count))))
        return concat_datasets(parts)

    def auc_of(model, idx: np.ndarray, part: Dataset) -> float:
        probs = model.predict(part.features[idx])
        value = roc_auc(part.labels[idx], probs)
        if value is None:
            raise ValidationError("target slice is single-class; AUC undefined")
        return value

    started = time.perf_counter()
    result = TrialResult(
        trial=trial, seed=data.seed, scenario="mixture", algorithm=algorithm.kind
    )
    try:
        # curve 1: donors only; choose the mix by validation AUC on the target
        best = None
        ratio_val_aucs = []
        for ridx, ratio in enumerate(spec.ratio_grid):
            count_a = int(round(ratio * budget))
            mix = build(count_a, budget - count_a, 0, tag=ridx)
            model = train_algorithm(algorithm, mix, sdata.val, data.finest, seed=data.seed)
            val_auc = auc_of(model, val_target, sdata.val)
            ratio_val_aucs.append({"ratio": float(ratio), "val_auc": val_auc})
            if best is None or val_auc > best[1]:
                best = (ratio, val_auc, model)
        best_ratio, best_val_auc, best_model = best
        donors_test_auc = auc_of(best_model, test_target, sdata.test)

        # curve 2: replace part of the budget with target-cell rows at the
        # chosen donor ratio
        curve2 = []
        for k in spec.target_counts:
            remaining = budget - int(k)
            count_a = int(round(best_ratio * remaining))
            mix = build(count_a, remaining - count_a, int(k), tag=1000 + int(k))
            model = train_algorithm(algorithm, mix, sdata.val, data.finest, seed=data.seed)
            curve2.append({"target_count": int(k), "auc": auc_of(model, test_target, sdata.test)})

        result.extras = {
            "best_ratio": best_ratio,
            "best_val_auc": best_val_auc,
            "ratio_val_aucs": ratio_val_aucs,
            "donors_only_auc": donors_test_auc,
            "with_target_curve": curve2,
        }
    except Exception as exc:
        result.error = f"{type(exc).__name__}: {exc}"
    result.duration = time.perf_counter() - started
    return [result]


def _mixture_aggregates(spec: ExperimentSpec, trials: list[TrialResult]):
    ok = [t for t in trials if t.error is None]
    alg = trials[0].algorithm if trials else "baseline"
    incomplete = len(ok) < len(trials)
    if len(ok) < 2:
        row = {
            "scenario": "mixture",
            "algorithm": alg,
            "metric": "donors_only_auc",
            "mean": ok[0].extras["donors_only_auc"] if ok else None,
            "half_width": None,
            "n_trials": len(ok),
            "incomplete": True,
        }
        return [row], {"mixture_curves": []}
    aggregates = []
    curve_rows = []
    ci = confidence_interval([t.extras["donors_only_auc"] for t in ok])
    aggregates.append(_agg_row("mixture", alg, "donors_only_auc", ci, incomplete))
    for k in spec.target_counts:
        curve_rows.append(
            {
                "curve": "donors_only",
                "target_count": int(k),
                "mean": ci.mean,
                "half_width": ci.half_width,
            }
        )
    for j, k in enumerate(spec.target_counts):
        ci_k = confidence_interval([t.extras["with_target_curve"][j]["auc"] for t in ok])
        aggregates.append(
            _agg_row("mixture", alg, f"with_target_auc@{int(k)}", ci_k, incomplete)
        )
        curve_rows.append(
            {
                "curve": "with_target",
                "target_count": int(k),
                "mean": ci_k.mean,
                "half_width": ci_k.half_width,
            }
        )
    return aggregates, {"mixture_curves": curve_rows}


def _reification_trial(spec: ExperimentSpec, trial: int) -> list[TrialResult]:
    data = prepare_trial(spec, trial)
    results = []
    for scenario in spec.scenarios:
        scheme = scenario_scheme(spec, data, scenario)
        sdata = _scenario_view(spec, data, scheme)
        test_groups = scheme.assign(data.test)
        for algorithm in spec.algorithms:
            started = time.perf_counter()
            result = TrialResult(
                trial=trial, seed=data.seed, scenario=scenario.name, algorithm=algorithm.kind
            )
            try:
                model, extras = _fit(spec, algorithm, sdata, scheme)
                probs = model.predict(
                    sdata.test.features,
                    groups=test_groups if model.needs_groups else None,
                )
                report = evaluate_predictions(data.test.labels, probs, test_groups)
                result.report = report
                if report.kendall_tau is None:
                    extras["tau_degenerate"] = True
                result.extras = extras
            except Exception as exc:
                result.error = f"{type(exc).__name__}: {exc}"
            result.duration = time.perf_counter() - started
            results.append(result)
    return results


def _reification_aggregates(spec: ExperimentSpec, trials: list[TrialResult]):
    aggregates = _aggregate_metric(
        spec,
        trials,
        "max_tpr_difference",
        lambda t: t.report.max_tpr_difference if t.report else None,
    )
    rows = []
    for scenario in _scenario_names(spec, trials):
        for algorithm in _algorithm_names(spec, trials):
            cell = [
                t
                for t in trials
                if t.scenario == scenario and t.algorithm == algorithm and t.error is None
            ]
            taus = [t.report.kendall_tau for t in cell if t.report and t.report.kendall_tau is not None]
            ps = [t.report.tau_p_value for t in cell if t.report and t.report.tau_p_value is not None]
            row = {
                "scenario": scenario,
                "algorithm": algorithm,
                "tau_values": taus,
                "p_values": ps,
                "n_valid": len(taus),
            }
            if taus:
                row["tau_mean"] = float(np.mean(taus))
                stat, combined = fisher_combine([max(p, 1e-300) for p in ps])
                row["fisher_statistic"] = stat
                row["combined_p"] = combined
                row["significant"] = combined < 0.05
            else:
                row["tau_mean"] = None
                row["fisher_statistic"] = None
                row["combined_p"] = None
                row["significant"] = False
                row["degenerate"] = True
            low_ranks = [
                t.report.rank_summary.lowest_base_rate_rank
                for t in cell
                if t.report and t.report.rank_summary
            ]
            high_ranks = [
                t.report.rank_summary.highest_base_rate_rank
                for t in cell
                if t.report and t.report.rank_summary
            ]
            if low_ranks:
                row["mean_lowest_base_rate_group_rank"] = float(np.mean(low_ranks))
                row["mean_highest_base_rate_group_rank"] = float(np.mean(high_ranks))
            rows.append(row)
    return aggregates, {"reification": rows}


# ---------------------------------------------------------------------------
# shared aggregation and dispatch
# ---------------------------------------------------------------------------


def _scenario_names(spec: ExperimentSpec, trials: list[TrialResult]) -> list[str]:
    seen = []
    for t in trials:
        if t.scenario not in seen:
            seen.append(t.scenario)
    return seen


def _algorithm_names(spec: ExperimentSpec, trials: list[TrialResult]) -> list[str]:
    seen = []
    for t in trials:
        if t.algorithm not in seen:
            seen.append(t.algorithm)
    return seen


def _agg_row(scenario, algorithm, metric, ci: ConfidenceInterval, incomplete, **extra) -> dict:
    row = {
        "scenario": scenario,
        "algorithm": algorithm,
        "metric": metric,
        "mean": ci.mean,
        "half_width": ci.half_width,
        "n_trials": ci.n_trials,
        "incomplete": bool(incomplete),
    }
    row.update(extra)
    return row


def _aggregate_metric(spec, trials, metric_name, getter) -> list[dict]:
    rows = []
    for scenario in _scenario_names(spec, trials):
        for algorithm in _algorithm_names(spec, trials):
            cell = [t for t in trials if t.scenario == scenario and t.algorithm == algorithm]
            if not cell:
                continue
            if all(t.not_applicable for t in cell):
                rows.append(
                    {
                        "scenario": scenario,
                        "algorithm": algorithm,
                        "metric": metric_name,
                        "not_applicable": cell[0].not_applicable,
                    }
                )
                continue
            values = [
                getter(t)
                for t in cell
                if t.error is None and t.not_applicable is None and getter(t) is not None
            ]
            if len(values) >= 2:
                ci = confidence_interval(values)
                rows.append(
                    _agg_row(scenario, algorithm, metric_name, ci, incomplete=len(values) < len(cell))
                )
            else:
                rows.append(
                    {
                        "scenario": scenario,
                        "algorithm": algorithm,
                        "metric": metric_name,
                        "mean": values[0] if values else None,
                        "half_width": None,
                        "n_trials": len(values),
                        "incomplete": True,
                    }
                )
    return rows


_STUDY_TRIALS = {
    "granularity": _granularity_trial,
    "other_handling": _other_trial,
    "subgroup_predictivity": _predictivity_trial,
    "mixture_probe": _mixture_trial,
    "ranking_reification": _reification_trial,
}

_STUDY_AGGREGATES = {
    "granularity": _granularity_aggregates,
    "other_handling": _other_aggregates,
    "subgroup_predictivity": _predictivity_aggregates,
    "mixture_probe": _mixture_aggregates,
    "ranking_reification": _reification_aggregates,
}


def _run_one_trial(spec: ExperimentSpec, trial: int) -> list[TrialResult]:
    return _STUDY_TRIALS[spec.study](spec, trial)


def run_trials(spec: ExperimentSpec, jobs: int = 1) -> StudyResult:
    """Run every trial of a study and aggregate confidence intervals.

    Trials are independent; with ``jobs > 1`` they run in separate processes
    and are merged back in trial order, so the result is identical to a
    serial run.
    """
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_trial = list(pool.map(_run_one_trial, [spec] * spec.n_trials, range(spec.n_trials)))
    else:
        per_trial = [_run_one_trial(spec, t) for t in range(spec.n_trials)]
    trials = [result for batch in per_trial for result in batch]
    aggregates, tables = _STUDY_AGGREGATES[spec.study](spec, trials)
    return StudyResult(
        study=spec.study,
        scenarios=_scenario_names(spec, trials),
        algorithms=_algorithm_names(spec, trials),
        n_trials=spec.n_trials,
        base_seed=spec.base_seed,
        trials=trials,
        aggregates=aggregates,
        tables=tables,
    )


def granularity_study(spec: ExperimentSpec, jobs: int = 1) -> StudyResult:
    """Fig-1-shaped study: train per scenario, evaluate at the finest grouping."""
    return run_trials(_with_study(spec, "granularity"), jobs=jobs)


def other_handling_study(spec: ExperimentSpec, jobs: int = 1) -> StudyResult:
    """Fig-2-shaped study: per-strategy AUC on the residual group."""
    return run_trials(_with_study(spec, "other_handling"), jobs=jobs)


def subgroup_predictivity_probe(spec: ExperimentSpec, jobs: int = 1) -> StudyResult:
    """Table-1-shaped probe: one donor group at a time, fixed sample budget."""
    return run_trials(_with_study(spec, "subgroup_predictivity"), jobs=jobs)


def mixture_probe(spec: ExperimentSpec, jobs: int = 1) -> StudyResult:
    """Fig-3-shaped probe: donors-only ceiling vs target-sample replacement."""
    return run_trials(_with_study(spec, "mixture_probe"), jobs=jobs)


def ranking_reification_study(spec: ExperimentSpec, jobs: int = 1) -> StudyResult:
    """Fig-4/Table-2-shaped study: base-rate vs TPR rank correlation."""
    return run_trials(_with_study(spec, "ranking_reification"), jobs=jobs)


def _with_study(spec: ExperimentSpec, study: str) -> ExperimentSpec:
    return spec if spec.study == study else replace(spec, study=study)
