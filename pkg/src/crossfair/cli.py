"""Command-line entry point.

Subcommands:

validate-config  parse and validate a config file without running anything.
generate         write the configured synthetic dataset to a CSV.
train            fit one algorithm, write ``model.bin`` plus its test report.
evaluate         score a saved model on the configured data.
study            run a full experiment spec end to end.

All randomness flows from one base seed (config ``[run].seed``, overridable
with ``--seed``); rerunning a study with the same config and seed produces a
byte-identical ``report.json``. Wall-clock facts live in ``manifest.json``
only. Display formatting follows the reporting conventions: percent metrics
with one decimal ("13.9±2.9"), rank correlations with two, and a tau whose
Fisher-combined p is not below .05 renders as "n.s." while the machine files
always keep the raw values.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import __version__
from .data import (
    CsvSchema,
    SchemaError,
    SplitSpec,
    SyntheticSpec,
    ValidationError,
    generate_synthetic,
    load_csv,
    split,
    standardize,
    write_csv,
)
from .experiments import (
    ExperimentSpec,
    GroupingScenario,
    STUDY_KINDS,
    StudyResult,
    load_source,
    prepare_trial,
    run_trials,
    scenario_scheme,
    _scenario_view,
)
from .fairness import ALGORITHM_KINDS, AlgorithmSpec, grid_search, train_algorithm
from .groups import GroupFilter, OTHER_STRATEGIES
from .metrics import evaluate_predictions
from .models import FairPredictor, load_model, save_model

OUTPUT_DIR_ENV = "CROSSFAIR_OUT"

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class ConfigError(ValueError):
    """The config file cannot be turned into a runnable spec."""


@dataclass
class RunConfig:
    """Everything a subcommand needs, resolved from one TOML file."""

    source: SyntheticSpec | tuple[Path, CsvSchema]
    axes: tuple[str, ...]
    algorithms: tuple[AlgorithmSpec, ...]
    scenarios: tuple[GroupingScenario, ...]
    study_kind: str | None
    study_params: dict
    include_attribute_features: bool = True
    group_filter: GroupFilter | None = None
    search_grids: bool = True
    seed: int = 0
    trials: int = 5
    out_dir: Path = Path("out")
    train_algorithm: str | None = None
    config_bytes: bytes = b""

    def experiment_spec(self) -> ExperimentSpec:
        if self.study_kind is None:
            raise ConfigError("config has no [study] section")
        return ExperimentSpec(
            study=self.study_kind,
            source=self.source,
            axes=self.axes,
            algorithms=self.algorithms,
            scenarios=self.scenarios,
            n_trials=self.trials,
            base_seed=self.seed,
            include_attribute_features=self.include_attribute_features,
            group_filter=self.group_filter,
            search_grids=self.search_grids,
            **self.study_params,
        )


def _require(table: dict, key: str, context: str):
    if key not in table:
        raise ConfigError(f"{context}: missing required key {key!r}")
    return table[key]


def _parse_synthetic(table: dict) -> SyntheticSpec:
    axes = tuple(
        (str(name), tuple(str(c) for c in cats))
        for name, cats in _require(table, "axes", "[data.synthetic]")
    )
    weights = {}
    for entry in table.get("weights", []):
        key = (str(_require(entry, "axis", "weights entry")), str(_require(entry, "category", "weights entry")))
        weights[key] = [float(v) for v in _require(entry, "coef", "weights entry")]
    counts = {}
    interactions = {}
    for entry in table.get("groups", []):
        cells = tuple(str(c) for c in _require(entry, "cells", "groups entry"))
        counts[cells] = int(_require(entry, "count", "groups entry"))
        if "interaction" in entry:
            interactions[cells] = [float(v) for v in entry["interaction"]]
    return SyntheticSpec(
        axes=axes,
        per_group_count=counts,
        base_weights=weights,
        interaction_terms=interactions,
        feature_dim=int(_require(table, "feature_dim", "[data.synthetic]")),
        seed=int(table.get("seed", 0)),
        noise_scale=float(table.get("noise_scale", 0.0)),
    )


def _parse_csv_source(table: dict, config_dir: Path) -> tuple[Path, CsvSchema]:
    path = Path(_require(table, "path", "[data.csv]"))
    if not path.is_absolute():
        path = config_dir / path
    schema = CsvSchema(
        label=str(_require(table, "label", "[data.csv]")),
        features=tuple(str(c) for c in _require(table, "features", "[data.csv]")),
        attributes=tuple(str(c) for c in _require(table, "attributes", "[data.csv]")),
        positive_label=table.get("positive_label"),
    )
    return path, schema


def _parse_scenarios(entries: list) -> tuple[GroupingScenario, ...]:
    scenarios = []
    for entry in entries:
        scenarios.append(
            GroupingScenario(
                name=str(_require(entry, "name", "scenario entry")),
                axes=tuple(entry["axes"]) if "axes" in entry else None,
                merge_map={str(k): str(v) for k, v in entry["merge"].items()}
                if "merge" in entry
                else None,
            )
        )
    return tuple(scenarios)


_STUDY_PARAM_KEYS = (
    "eval_groups",
    "other_group",
    "strategies",
    "target_group",
    "donor_groups",
    "sample_size",
    "mixture_donors",
    "ratio_grid",
    "target_counts",
)


def parse_config(path) -> RunConfig:
    """Read and validate a TOML config file into a :class:`RunConfig`."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    raw_bytes = path.read_bytes()
    try:
        raw = tomllib.loads(raw_bytes.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc

    data = raw.get("data", {})
    has_synth = "synthetic" in data
    has_csv = "csv" in data
    if has_synth == has_csv:
        raise ConfigError("config must name exactly one data source: [data.synthetic] or [data.csv]")
    source: SyntheticSpec | tuple[Path, CsvSchema]
    if has_synth:
        source = _parse_synthetic(data["synthetic"])
    else:
        source = _parse_csv_source(data["csv"], path.parent)

    groups = raw.get("groups", {})
    axes = tuple(str(a) for a in _require(groups, "axes", "[groups]"))
    group_filter = None
    if "filter" in groups:
        f = groups["filter"]
        group_filter = GroupFilter(
            min_count=int(f.get("min_count", 300)),
            min_pos=int(f.get("min_pos", 30)),
            min_neg=int(f.get("min_neg", 30)),
        )
    scenarios = _parse_scenarios(groups.get("scenarios", []))
    if not scenarios:
        scenarios = (GroupingScenario(name="finest"),)

    algorithms = []
    for entry in raw.get("algorithms", []):
        kind = str(_require(entry, "kind", "algorithm entry"))
        if kind not in ALGORITHM_KINDS:
            raise ConfigError(f"unknown algorithm kind {kind!r}; expected one of {ALGORITHM_KINDS}")
        try:
            algorithms.append(
                AlgorithmSpec(
                    kind=kind,
                    hyper=dict(entry.get("hyper", {})),
                    grid={k: list(v) for k, v in entry.get("grid", {}).items()},
                )
            )
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc

    study = raw.get("study", {})
    study_kind = study.get("kind")
    study_params: dict = {}
    if study_kind is not None:
        if study_kind not in STUDY_KINDS:
            raise ConfigError(f"unknown study kind {study_kind!r}; expected one of {STUDY_KINDS}")
        for key in _STUDY_PARAM_KEYS:
            if key in study:
                value = study[key]
                if isinstance(value, list):
                    value = tuple(value)
                study_params[key] = value
        if "strategies" in study_params:
            bad = set(study_params["strategies"]) - set(OTHER_STRATEGIES)
            if bad:
                raise ConfigError(f"unknown strategies {sorted(bad)}")

    run = raw.get("run", {})
    out_dir = Path(run.get("out", os.environ.get(OUTPUT_DIR_ENV, "out")))

    cfg = RunConfig(
        source=source,
        axes=axes,
        algorithms=tuple(algorithms),
        scenarios=scenarios,
        study_kind=study_kind,
        study_params=study_params,
        include_attribute_features=bool(groups.get("include_attribute_features", True)),
        group_filter=group_filter,
        search_grids=bool(study.get("search_grids", True)),
        seed=int(run.get("seed", 0)),
        trials=int(run.get("trials", 5)),
        out_dir=out_dir,
        train_algorithm=raw.get("train", {}).get("algorithm"),
        config_bytes=raw_bytes,
    )
    if cfg.study_kind is not None:
        cfg.experiment_spec()  # surfaces study-parameter problems now
    return cfg


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------


def _fmt_percent(mean, half) -> str:
    if mean is None:
        return "-"
    if half is None:
        return f"{100 * mean:.1f}"
    return f"{100 * mean:.1f}±{100 * half:.1f}"


def _fmt_tau(row: dict) -> str:
    # display rule: only show tau when the combined p is below .05
    if row.get("tau_mean") is None:
        return "undefined"
    if row.get("combined_p") is None or row["combined_p"] >= 0.05:
        return "n.s."
    return f"{row['tau_mean']:.2f}"


_METRIC_LABELS = {
    "max_tpr_difference": "max TPR diff (%)",
    "other_auc": "Other AUC (%)",
    "target_auc": "target AUC (%)",
    "donors_only_auc": "donors-only AUC (%)",
}


def render_report(result: StudyResult) -> str:
    """Human-readable tables for one study; machine files stay lossless."""
    lines = [f"study: {result.study}", ""]
    header = f"{'scenario':<16} {'algorithm':<10} {'metric':<24} {'value':<16}"
    lines.append(header)
    lines.append("-" * len(header))
    for row in result.aggregates:
        label = _METRIC_LABELS.get(row["metric"], row["metric"])
        if "not_applicable" in row:
            value = f"n/a ({row['not_applicable']})"
        else:
            value = _fmt_percent(row.get("mean"), row.get("half_width"))
            if row.get("incomplete"):
                value += " [incomplete]"
        lines.append(f"{row['scenario']:<16} {row['algorithm']:<10} {label:<24} {value:<16}")
    if "reification" in result.tables:
        lines.append("")
        header = f"{'scenario':<16} {'algorithm':<10} {'tau':<10} {'combined p':<12}"
        lines.append(header)
        lines.append("-" * len(header))
        for row in result.tables["reification"]:
            p = row.get("combined_p")
            lines.append(
                f"{row['scenario']:<16} {row['algorithm']:<10} {_fmt_tau(row):<10} "
                f"{'-' if p is None else format(p, '.3g'):<12}"
            )
    if "mixture_curves" in result.tables:
        lines.append("")
        header = f"{'curve':<14} {'target rows':<12} {'AUC (%)':<16}"
        lines.append(header)
        lines.append("-" * len(header))
        for row in result.tables["mixture_curves"]:
            lines.append(
                f"{row['curve']:<14} {row['target_count']:<12} "
                f"{_fmt_percent(row['mean'], row['half_width']):<16}"
            )
    lines.append("")
    return "\n".join(lines)


def _aggregate_csv_rows(result: StudyResult) -> list[dict]:
    rows = []
    for row in result.aggregates:
        rows.append(
            {
                "scenario": row["scenario"],
                "algorithm": row["algorithm"],
                "metric": row["metric"],
                "mean": row.get("mean", ""),
                "half_width": row.get("half_width", ""),
                "n_trials": row.get("n_trials", ""),
                "incomplete": row.get("incomplete", ""),
                "not_applicable": row.get("not_applicable", ""),
            }
        )
    for row in result.tables.get("reification", []):
        for metric, value in (("kendall_tau", row.get("tau_mean")), ("combined_p", row.get("combined_p"))):
            rows.append(
                {
                    "scenario": row["scenario"],
                    "algorithm": row["algorithm"],
                    "metric": metric,
                    "mean": "" if value is None else value,
                    "half_width": "",
                    "n_trials": row.get("n_valid", ""),
                    "incomplete": "",
                    "not_applicable": "",
                }
            )
    return rows


def _write_study_outputs(result: StudyResult, cfg: RunConfig, out_dir: Path, started: float) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    report_json = json.dumps(result.to_dict(), sort_keys=True, indent=2)
    (out_dir / "report.json").write_text(report_json + "\n", encoding="utf-8")
    rows = _aggregate_csv_rows(result)
    with (out_dir / "report.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=[
                "scenario", "algorithm", "metric", "mean", "half_width",
                "n_trials", "incomplete", "not_applicable",
            ],
        )
        writer.writeheader()
        writer.writerows(rows)
    (out_dir / "table.txt").write_text(render_report(result), encoding="utf-8")
    manifest = {
        "version": __version__,
        "config_sha256": hashlib.sha256(cfg.config_bytes).hexdigest(),
        "study": result.study,
        "base_seed": result.base_seed,
        "n_trials": result.n_trials,
        "trial_seeds": [result.base_seed + t for t in range(result.n_trials)],
        "wall_seconds": time.time() - started,
        "durations": result.durations(),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_validate(cfg: RunConfig, args) -> int:
    print("config ok")
    return EXIT_OK


def _cmd_generate(cfg: RunConfig, args) -> int:
    if not isinstance(cfg.source, SyntheticSpec):
        raise ConfigError("generate needs a [data.synthetic] source")
    ds = generate_synthetic(cfg.source)
    out_dir = Path(args.out) if args.out else cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / "synthetic.csv"
    schema = write_csv(ds, target)
    if not args.quiet:
        print(f"wrote {ds.n} rows to {target}")
        print(
            "reload with [data.csv]: "
            f"label={schema.label!r} features={list(schema.features)} "
            f"attributes={list(schema.attributes)}"
        )
    return EXIT_OK


def _train_once(cfg: RunConfig) -> tuple[FairPredictor, dict, object]:
    spec_alg = None
    if cfg.train_algorithm is not None:
        for alg in cfg.algorithms:
            if alg.kind == cfg.train_algorithm:
                spec_alg = alg
                break
        if spec_alg is None:
            raise ConfigError(f"[train].algorithm {cfg.train_algorithm!r} not in [[algorithms]]")
    elif len(cfg.algorithms) == 1:
        spec_alg = cfg.algorithms[0]
    else:
        raise ConfigError("train needs [train].algorithm when several algorithms are configured")

    # single-model pipeline: trial 0 of an experiment over the first scenario
    exp = ExperimentSpec(
        study="granularity",
        source=cfg.source,
        axes=cfg.axes,
        algorithms=(spec_alg,),
        scenarios=cfg.scenarios[:1],
        n_trials=2,
        base_seed=cfg.seed,
        include_attribute_features=cfg.include_attribute_features,
        group_filter=cfg.group_filter,
        search_grids=cfg.search_grids,
    )
    data = prepare_trial(exp, 0)
    scheme = scenario_scheme(exp, data, exp.scenarios[0])
    sdata = _scenario_view(exp, data, scheme)
    if cfg.search_grids:
        search = grid_search(spec_alg, sdata.train, sdata.val, scheme, seed=cfg.seed)
        model, table = search.best, search.table
    else:
        model, table = train_algorithm(spec_alg, sdata.train, sdata.val, scheme, seed=cfg.seed), []
    test_groups = scheme.assign(data.test)
    probs = model.predict(sdata.test.features, groups=test_groups if model.needs_groups else None)
    report = evaluate_predictions(data.test.labels, probs, data.finest.assign(data.test))
    extras = {"grid_table": table, "best_hyper": model.hyper, "scenario": exp.scenarios[0].name}
    return model, extras, report


def _cmd_train(cfg: RunConfig, args) -> int:
    started = time.time()
    model, extras, report = _train_once(cfg)
    out_dir = Path(args.out) if args.out else cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    save_model(model, out_dir / "model.bin")
    payload = {"algorithm": model.algorithm, "hyper": model.hyper, "report": report.to_dict()}
    (out_dir / "report.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    manifest = {
        "version": __version__,
        "config_sha256": hashlib.sha256(cfg.config_bytes).hexdigest(),
        "seed": cfg.seed,
        "algorithm": model.algorithm,
        "best_hyper": extras["best_hyper"],
        "scenario": extras["scenario"],
        "wall_seconds": time.time() - started,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    if not args.quiet:
        print(f"trained {model.algorithm}; soft accuracy {report.soft_accuracy:.4f}")
        print(f"model and report written to {out_dir}")
    return EXIT_OK


def _cmd_evaluate(cfg: RunConfig, args) -> int:
    model = load_model(args.model)
    exp = ExperimentSpec(
        study="granularity",
        source=cfg.source,
        axes=cfg.axes,
        algorithms=(),
        scenarios=cfg.scenarios[:1],
        n_trials=2,
        base_seed=cfg.seed,
        include_attribute_features=cfg.include_attribute_features,
        group_filter=cfg.group_filter,
    )
    data = prepare_trial(exp, 0)
    scheme = scenario_scheme(exp, data, exp.scenarios[0])
    sdata = _scenario_view(exp, data, scheme)
    test_groups = scheme.assign(data.test)
    probs = model.predict(sdata.test.features, groups=test_groups if model.needs_groups else None)
    report = evaluate_predictions(data.test.labels, probs, data.finest.assign(data.test))
    out_dir = Path(args.out) if args.out else cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"algorithm": model.algorithm, "hyper": model.hyper, "report": report.to_dict()}
    (out_dir / "report.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    if not args.quiet:
        print(f"soft accuracy {report.soft_accuracy:.4f}")
        if report.max_tpr_difference is not None:
            print(f"max TPR difference {report.max_tpr_difference:.4f}")
    return EXIT_OK


def _cmd_study(cfg: RunConfig, args) -> int:
    started = time.time()
    spec = cfg.experiment_spec()
    result = run_trials(spec, jobs=args.jobs)
    out_dir = Path(args.out) if args.out else cfg.out_dir
    _write_study_outputs(result, cfg, out_dir, started)
    if not args.quiet:
        print(render_report(result))
        print(f"outputs written to {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossfair",
        description="Fairness algorithms and evaluation over intersectional subgroups.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("validate-config", "check a config file without running"),
        ("generate", "write the configured synthetic dataset to CSV"),
        ("train", "fit one algorithm and write model.bin plus a report"),
        ("evaluate", "score a saved model on the configured data"),
        ("study", "run the configured study end to end"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="path to the TOML config")
        p.add_argument("--out", default=None, help=f"output directory (default: config or ${OUTPUT_DIR_ENV})")
        p.add_argument("--seed", type=int, default=None, help="override the base seed")
        p.add_argument("--trials", type=int, default=None, help="override the trial count")
        p.add_argument("--jobs", type=int, default=1, help="parallel trial workers")
        p.add_argument("--quiet", action="store_true", help="suppress stdout chatter")
        if name == "evaluate":
            p.add_argument("--model", required=True, help="path to a saved model.bin")
    return parser


_COMMANDS = {
    "validate-config": _cmd_validate,
    "generate": _cmd_generate,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "study": _cmd_study,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; the contract wants 1
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.trials is not None:
            cfg.trials = args.trials
        return _COMMANDS[args.command](cfg, args)
    except (ConfigError, SchemaError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
