"""Fairness training algorithms and hyperparameter search.

Six training routes share one contract: consume a training split (and usually
a validation split plus a grouping scheme), return a :class:`FairPredictor`
whose outputs are probabilities. All of them target soft-TPR parity across the
scheme's groups:

baseline  plain network on uniform weights.
rwt       iterative reweighting: a group's positive-example weight is scaled
          by exp(-eta * (group TPR - overall TPR)) between continuations.
rdc       reduction to cost-sensitive classifications driven by
          exponentiated-gradient dual multipliers; predicts with the
          probability average of the ensemble.
los       single network whose batch loss adds lam * max log-ratio between
          group TPRs.
grp       plugin estimator: base logistic model plus bounded per-group
          additive logit corrections fit by projected gradient.
gry       learner/auditor game: the auditor raises a capped dual weight on the
          worst group, the learner best-responds with a cost-sensitive linear
          model; predicts with the average of the sequence's hard outputs.

Hyperparameter search maximizes sqrt(soft_accuracy * (1 - max TPR difference))
on the validation split over the declared grid.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, ValidationError
from .groups import GroupingScheme
from .metrics import max_tpr_difference, soft_accuracy, soft_tpr_by_group
from .models import (
    FairPredictor,
    LinearModel,
    MlpConfig,
    NetModel,
    UnseenGroupError,
    continue_training,
    fit_net_raw,
    register_model_type,
    sigmoid,
    train_linear_cost_sensitive,
    train_logistic,
    train_mlp,
)

__all__ = [
    "ALGORITHM_KINDS",
    "AlgorithmSpec",
    "GridSearchResult",
    "grid_search",
    "train_algorithm",
    "train_baseline",
    "train_gry",
    "train_grp",
    "train_los",
    "train_rdc",
    "train_rwt",
    "tuning_objective",
]

ALGORITHM_KINDS = ("baseline", "rwt", "rdc", "los", "grp", "gry")

# Fixed (non-searched) defaults per algorithm.
_DEFAULT_HYPER: dict[str, dict] = {
    "baseline": {"batch_size": 64},
    "rwt": {"batch_size": 64, "learning_rate": 1e-3, "outer_iterations": 10},
    "rdc": {"learning_rate": 1e-3, "eg_eta": 2.0, "dual_bound": 10.0},
    "los": {"batch_size": 1024, "learning_rate": 5e-3},
    "grp": {
        "correction_epochs": 10_000,
        "correction_lr": 1e-2,
        "bound": 50.0,
        "base_epochs": 1000,
        "base_lr": 1e-2,
    },
    "gry": {"dual_step": 0.1},
}

# Search grids; key order fixes the enumeration order of grid points.
_DEFAULT_GRID: dict[str, dict[str, list]] = {
    "baseline": {"epochs": [50, 100, 150], "learning_rate": [1e-3, 5e-3]},
    "rwt": {"epochs": [100, 150], "eta": [0.1, 0.2, 0.5, 1.0]},
    "rdc": {
        "batch_size": [256, 512, 1024, 2048],
        "epochs": [50, 100, 200],
        "iterations": [10, 20, 50],
    },
    "los": {"epochs": [200, 250, 300], "lam": [0.01, 0.5, 0.1]},
    "grp": {"nu": [0.001, 0.003, 0.01, 0.03, 0.1]},
    "gry": {"C": [5.0, 10.0, 20.0], "iterations": [50, 100, 200], "gamma": [1e-3, 5e-3, 1e-2]},
}

LOS_TPR_SMOOTHING = 1e-6


@dataclass(frozen=True)
class AlgorithmSpec:
    """One algorithm plus hyperparameter overrides and an optional search grid.

    ``hyper`` overrides the fixed defaults; ``grid`` overrides the default
    search grid (map each searched name to the list of values to try).
    """

    kind: str
    hyper: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ALGORITHM_KINDS:
            raise ValidationError(f"unknown algorithm kind {self.kind!r}; expected {ALGORITHM_KINDS}")
        allowed = set(_DEFAULT_HYPER[self.kind]) | set(_DEFAULT_GRID[self.kind]) | {"hidden_sizes"}
        for source_name, source in (("hyper", self.hyper), ("grid", self.grid)):
            bad = set(source) - allowed
            if bad:
                raise ValidationError(
                    f"{self.kind}: unknown {source_name} parameter(s) {sorted(bad)}; "
                    f"allowed: {sorted(allowed)}"
                )
        for name, values in self.grid.items():
            if not values:
                raise ValidationError(f"{self.kind}: grid for {name!r} is empty")

    def resolved_hyper(self) -> dict:
        """Complete configuration when trained without a search.

        Grid-searched parameters default to the first value of their grid.
        """
        out = dict(_DEFAULT_HYPER[self.kind])
        for name, values in _DEFAULT_GRID[self.kind].items():
            out[name] = values[0]
        for name, values in self.grid.items():
            out[name] = values[0]
        out.update(self.hyper)
        return out

    def grid_points(self) -> list[dict]:
        """Every searched configuration, in declared key order."""
        names = list(_DEFAULT_GRID[self.kind])
        values = [list(self.grid.get(name, _DEFAULT_GRID[self.kind][name])) for name in names]
        return [dict(zip(names, combo)) for combo in itertools.product(*values)]


def tuning_objective(soft_acc: float, max_diff: float) -> float:
    """Geometric mean of soft accuracy and (1 - max TPR difference)."""
    return math.sqrt(soft_acc * (1.0 - max_diff))


# ---------------------------------------------------------------------------
# shared group plumbing
# ---------------------------------------------------------------------------


def _group_codes(train: Dataset, scheme: GroupingScheme) -> tuple[list[str], np.ndarray]:
    assigned = scheme.assign(train)
    present = [g for g in scheme.group_ids if g in set(assigned.tolist())]
    index = {g: i for i, g in enumerate(present)}
    codes = np.array([index[g] for g in assigned.tolist()], dtype=np.intp)
    return present, codes


def _require_positives(train: Dataset, present: list[str], codes: np.ndarray) -> None:
    pos = train.labels == 1
    for i, gid in enumerate(present):
        if not np.any(pos & (codes == i)):
            raise ValidationError(f"group {gid!r} has no positive training examples")


# ---------------------------------------------------------------------------
# composite predictor models
# ---------------------------------------------------------------------------


class ProbabilityEnsemble:
    """Average of member probability outputs."""

    model_type = "prob_ensemble"
    needs_groups = False
    resumable = False

    def __init__(self, members: list[NetModel]):
        if not members:
            raise ValidationError("ensemble needs at least one member")
        self.members = members

    def predict(self, x, groups=None):
        return np.mean([m.predict(x) for m in self.members], axis=0)

    def to_dict(self):
        return {"type": self.model_type, "members": [m.to_dict() for m in self.members]}

    @classmethod
    def from_dict(cls, blob):
        return cls([NetModel.from_dict(m) for m in blob["members"]])


class HardVoteEnsemble:
    """Average of member hard 0/1 outputs; values lie on the lattice {0, 1/k, ..., 1}."""

    model_type = "hard_ensemble"
    needs_groups = False
    resumable = False

    def __init__(self, members: list[LinearModel], trained_groups: list[str]):
        if not members:
            raise ValidationError("ensemble needs at least one member")
        self.members = members
        self.trained_groups = list(trained_groups)

    def predict(self, x, groups=None):
        return np.mean([m.predict(x) for m in self.members], axis=0)

    def to_dict(self):
        return {
            "type": self.model_type,
            "members": [m.to_dict() for m in self.members],
            "trained_groups": self.trained_groups,
        }

    @classmethod
    def from_dict(cls, blob):
        return cls([LinearModel.from_dict(m) for m in blob["members"]], blob["trained_groups"])


class PluginCorrectedModel:
    """Base logistic model with a bounded additive logit correction per group."""

    model_type = "grp_plugin"
    needs_groups = True
    resumable = False

    def __init__(self, base: NetModel, corrections: dict[str, float]):
        self.base = base
        self.corrections = dict(corrections)

    def predict(self, x, groups=None):
        if groups is None:
            raise ValidationError("plugin model needs per-row group ids to predict")
        logits = self.base.net.logits(np.asarray(x, dtype=float))
        shift = np.empty(len(logits))
        for i, g in enumerate(np.asarray(groups, dtype=object)):
            if g not in self.corrections:
                raise UnseenGroupError(f"group {g!r} was not seen at training time")
            shift[i] = self.corrections[g]
        return sigmoid(logits + shift)

    def to_dict(self):
        return {
            "type": self.model_type,
            "base": self.base.to_dict(),
            "corrections": dict(sorted(self.corrections.items())),
        }

    @classmethod
    def from_dict(cls, blob):
        return cls(NetModel.from_dict(blob["base"]), blob["corrections"])


register_model_type(ProbabilityEnsemble)
register_model_type(HardVoteEnsemble)
register_model_type(PluginCorrectedModel)


# ---------------------------------------------------------------------------
# the six training routes
# ---------------------------------------------------------------------------


def _mlp_config(hyper: dict, seed: int) -> MlpConfig:
    return MlpConfig(
        hidden_sizes=tuple(hyper.get("hidden_sizes", (30, 30))),
        batch_size=int(hyper["batch_size"]),
        learning_rate=float(hyper["learning_rate"]),
        epochs=int(hyper["epochs"]),
        seed=seed,
    )


def train_baseline(
    train: Dataset, scheme: GroupingScheme, spec: AlgorithmSpec, seed: int = 0
) -> FairPredictor:
    """Plain network with uniform sample weights; the reference point."""
    if spec.kind != "baseline":
        raise ValidationError(f"expected a baseline spec, got {spec.kind!r}")
    hyper = spec.resolved_hyper()
    model = train_mlp(train, np.ones(train.n), _mlp_config(hyper, seed), algorithm="baseline")
    model.hyper.update(hyper)
    return model


def train_rwt(
    train: Dataset,
    val: Dataset,
    scheme: GroupingScheme,
    spec: AlgorithmSpec,
    seed: int = 0,
) -> FairPredictor:
    """Reweighting: shrink positive-example weight of groups with high TPR.

    Starting from an initially trained network, each outer iteration measures
    per-group soft TPR on the training split, multiplies each group's
    positive-example weight by exp(-eta * (TPR_g - TPR_overall)), and
    continues training in place rather than refitting from scratch.
    """
    hyper = spec.resolved_hyper()
    present, codes = _group_codes(train, scheme)
    _require_positives(train, present, codes)
    eta = float(hyper["eta"])
    outer = int(hyper["outer_iterations"])
    epochs = int(hyper["epochs"])
    continue_epochs = max(1, epochs // outer)

    weights = np.ones(train.n)
    factors = np.ones(len(present))
    model = train_mlp(train, weights, _mlp_config(hyper, seed), algorithm="rwt")
    pos = train.labels == 1
    for _ in range(outer):
        probs = model.predict(train.features)
        tpr_all = float(probs[pos].mean())
        for i in range(len(present)):
            gp = pos & (codes == i)
            tpr_g = float(probs[gp].mean())
            factors[i] *= math.exp(-eta * (tpr_g - tpr_all))
            weights[gp] = factors[i]
        model = continue_training(model, train, weights, continue_epochs)
    return FairPredictor(
        algorithm="rwt",
        hyper=hyper,
        seed=seed,
        model=model.model,
        metadata={
            "epochs_run": model.metadata["epochs_run"],
            "final_group_weights": {g: factors[i] for i, g in enumerate(present)},
        },
    )


def train_rdc(
    train: Dataset,
    val: Dataset,
    scheme: GroupingScheme,
    spec: AlgorithmSpec,
    seed: int = 0,
) -> FairPredictor:
    """Reduction to cost-sensitive classification with exponentiated duals.

    Each group carries a signed pair of TPR-parity constraints against the
    overall TPR. Dual multipliers start at zero and grow as
    min(cap, exp(accumulated violation * eg_eta) - 1); the per-example
    Lagrangian coefficients are rewritten as 0/1 targets with magnitudes as
    sample weights, an inner network is fit, and the final predictor averages
    the ensemble's probabilities.
    """
    hyper = spec.resolved_hyper()
    present, codes = _group_codes(train, scheme)
    _require_positives(train, present, codes)
    iterations = int(hyper["iterations"])
    eg_eta = float(hyper["eg_eta"])
    cap = float(hyper["dual_bound"])

    n = train.n
    y = train.labels.astype(float)
    pos = train.labels == 1
    n_pos = int(pos.sum())
    group_pos = [pos & (codes == i) for i in range(len(present))]
    n_group_pos = np.array([gp.sum() for gp in group_pos], dtype=float)

    theta = np.zeros((len(present), 2))  # columns: (+) TPR_g too high, (-) too low
    members: list[NetModel] = []
    for t in range(iterations):
        lam = np.minimum(cap, np.expm1(np.maximum(theta, 0.0)))
        lam_net = lam[:, 0] - lam[:, 1]
        coeff = np.full(n, 1.0 / n)  # negatives: push probability down
        shift_all = lam_net.sum() / n_pos
        for i, gp in enumerate(group_pos):
            coeff[gp] = -1.0 / n + lam_net[i] / n_group_pos[i] - shift_all
        targets = (coeff < 0).astype(float)
        sample_weights = np.abs(coeff) * n  # uniform 1.0 when all duals are zero
        member = fit_net_raw(
            train.features,
            targets,
            sample_weights,
            _mlp_config(hyper, seed + t),
        )
        members.append(member)
        probs = member.predict(train.features)
        tpr_all = float(probs[pos].mean())
        violation = np.array(
            [float(probs[gp].mean()) - tpr_all for gp in group_pos]
        )
        theta[:, 0] += eg_eta * violation
        theta[:, 1] -= eg_eta * violation
    return FairPredictor(
        algorithm="rdc",
        hyper=hyper,
        seed=seed,
        model=ProbabilityEnsemble(members),
        metadata={"iterations": iterations, "final_duals": lam.tolist()},
    )


def train_los(
    train: Dataset,
    val: Dataset,
    scheme: GroupingScheme,
    spec: AlgorithmSpec,
    seed: int = 0,
) -> FairPredictor:
    """Single network with a max log-TPR-ratio penalty added to each batch loss.

    The penalty is lam * log((max group TPR + eps) / (min group TPR + eps))
    over groups with at least one positive in the batch, computed from the
    batch's own soft TPRs; with fewer than two such groups it contributes
    nothing. With lam == 0 the training trajectory is exactly the baseline's.
    """
    hyper = spec.resolved_hyper()
    present, codes = _group_codes(train, scheme)
    lam = float(hyper["lam"])
    labels = train.labels.astype(float)
    n_groups = len(present)

    def regularizer(logits, probs, rows):
        y_batch = labels[rows]
        g_batch = codes[rows]
        pos = y_batch == 1.0
        if not pos.any():
            return 0.0, np.zeros(len(rows))
        tpr = np.full(n_groups, np.nan)
        counts = np.zeros(n_groups)
        for i in range(n_groups):
            gp = pos & (g_batch == i)
            c = gp.sum()
            if c:
                counts[i] = c
                tpr[i] = probs[gp].mean()
        with_pos = np.nonzero(counts > 0)[0]
        if with_pos.size < 2:
            return 0.0, np.zeros(len(rows))
        hi = with_pos[int(np.argmax(tpr[with_pos]))]
        lo = with_pos[int(np.argmin(tpr[with_pos]))]
        if hi == lo:
            return 0.0, np.zeros(len(rows))
        value = math.log((tpr[hi] + LOS_TPR_SMOOTHING) / (tpr[lo] + LOS_TPR_SMOOTHING))
        dprob = np.zeros(len(rows))
        dprob[pos & (g_batch == hi)] = 1.0 / (counts[hi] * (tpr[hi] + LOS_TPR_SMOOTHING))
        dprob[pos & (g_batch == lo)] = -1.0 / (counts[lo] * (tpr[lo] + LOS_TPR_SMOOTHING))
        dlogits = lam * dprob * probs * (1.0 - probs)
        return lam * value, dlogits

    model = train_mlp(
        train,
        np.ones(train.n),
        _mlp_config(hyper, seed),
        reg_fn=regularizer if lam != 0.0 else None,
        algorithm="los",
    )
    model.hyper.update(hyper)
    return model


def train_grp(
    train: Dataset,
    val: Dataset,
    scheme: GroupingScheme,
    spec: AlgorithmSpec,
    seed: int = 0,
) -> FairPredictor:
    """Plugin estimator: base logistic model plus per-group logit corrections.

    Corrections start at zero and follow projected gradient descent on the
    squared excess of |TPR_g - TPR_overall| over the slack nu, clipped to
    [-bound, bound]. Inference requires group ids; groups unseen at training
    raise :class:`UnseenGroupError`.
    """
    hyper = spec.resolved_hyper()
    present, codes = _group_codes(train, scheme)
    _require_positives(train, present, codes)
    nu = float(hyper["nu"])
    bound = float(hyper["bound"])
    lr = float(hyper["correction_lr"])
    epochs = int(hyper["correction_epochs"])

    base = train_logistic(
        train,
        np.ones(train.n),
        lr=float(hyper["base_lr"]),
        epochs=int(hyper["base_epochs"]),
        seed=seed,
    )
    pos = train.labels == 1
    base_logits_pos = base.model.net.logits(train.features[pos])
    codes_pos = codes[pos]
    n_pos = int(pos.sum())
    group_counts = np.array([(codes_pos == i).sum() for i in range(len(present))], dtype=float)

    c = np.zeros(len(present))
    for _ in range(epochs):
        p = sigmoid(base_logits_pos + c[codes_pos])
        s = p * (1.0 - p)
        tpr_all = p.mean()
        tpr = np.array([p[codes_pos == i].mean() for i in range(len(present))])
        v = tpr - tpr_all
        excess = np.abs(v) - nu
        active = excess > 0.0
        if not active.any():
            break
        s_group = np.array([s[codes_pos == i].sum() for i in range(len(present))])
        pull = 2.0 * np.where(active, excess, 0.0) * np.sign(v)
        grad = pull * s_group / group_counts - (pull.sum()) * s_group / n_pos
        c = np.clip(c - lr * grad, -bound, bound)

    corrections = {g: float(c[i]) for i, g in enumerate(present)}
    return FairPredictor(
        algorithm="grp",
        hyper=hyper,
        seed=seed,
        model=PluginCorrectedModel(base.model, corrections),
        metadata={"corrections": corrections},
    )


def train_gry(
    train: Dataset,
    val: Dataset,
    scheme: GroupingScheme,
    spec: AlgorithmSpec,
    seed: int = 0,
) -> FairPredictor:
    """Learner/auditor game over cost-sensitive linear models.

    Each round the auditor inspects the soft TPRs of the ensemble's average
    play, finds the group whose |TPR - overall| gap is largest and exceeds
    gamma, and moves that group's signed dual weight by dual_step (capped at
    C). The learner best-responds with a closed-form least-squares fit whose
    positive-example targets are shifted by the linearized dual terms. The
    returned predictor averages the rounds' hard 0/1 outputs.
    """
    hyper = spec.resolved_hyper()
    present, codes = _group_codes(train, scheme)
    _require_positives(train, present, codes)
    cap = float(hyper["C"])
    iterations = int(hyper["iterations"])
    gamma = float(hyper["gamma"])
    step = float(hyper["dual_step"])

    n = train.n
    y = train.labels.astype(float)
    pos = train.labels == 1
    n_pos = int(pos.sum())
    group_pos = [pos & (codes == i) for i in range(len(present))]
    n_group_pos = np.array([gp.sum() for gp in group_pos], dtype=float)

    duals = np.zeros(len(present))
    members: list[LinearModel] = []
    hard_sum = np.zeros(n)
    for t in range(iterations):
        targets = y.copy()
        dual_total = duals.sum()
        for i, gp in enumerate(group_pos):
            shift = (n / 2.0) * (duals[i] / n_group_pos[i] - dual_total / n_pos)
            targets[gp] = y[gp] - shift
        member = train_linear_cost_sensitive(train, targets, seed=seed)
        members.append(member.model)
        hard_sum += member.model.predict(train.features)
        avg = hard_sum / (t + 1)
        tpr_all = float(avg[pos].mean())
        gaps = np.array([float(avg[gp].mean()) - tpr_all for gp in group_pos])
        over = np.abs(gaps) > gamma
        if over.any():
            worst = int(np.argmax(np.where(over, np.abs(gaps), -np.inf)))
            duals[worst] = float(np.clip(duals[worst] + step * np.sign(gaps[worst]), -cap, cap))
    return FairPredictor(
        algorithm="gry",
        hyper=hyper,
        seed=seed,
        model=HardVoteEnsemble(members, trained_groups=present),
        metadata={"iterations": iterations, "final_duals": duals.tolist()},
    )


_TRAINERS = {
    "baseline": lambda train, val, scheme, spec, seed: train_baseline(train, scheme, spec, seed),
    "rwt": train_rwt,
    "rdc": train_rdc,
    "los": train_los,
    "grp": train_grp,
    "gry": train_gry,
}


def train_algorithm(
    spec: AlgorithmSpec,
    train: Dataset,
    val: Dataset,
    scheme: GroupingScheme,
    seed: int = 0,
) -> FairPredictor:
    """Train one algorithm at its resolved (non-searched) configuration."""
    return _TRAINERS[spec.kind](train, val, scheme, spec, seed)


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------


@dataclass
class GridSearchResult:
    best: FairPredictor
    best_hyper: dict
    table: list[dict]

    def to_table_dict(self) -> list[dict]:
        return [dict(row) for row in self.table]


def _validation_scores(
    model: FairPredictor,
    val: Dataset,
    scheme: GroupingScheme,
    val_group_ids: np.ndarray | None = None,
) -> tuple[float, float]:
    assigned = scheme.assign(val, strict=False) if val_group_ids is None else val_group_ids
    mapped = np.array([g is not None for g in assigned.tolist()])
    probs = model.predict(val.features, groups=assigned if model.needs_groups else None)
    acc = soft_accuracy(val.labels, probs)
    tprs = soft_tpr_by_group(val.labels[mapped], probs[mapped], assigned[mapped])
    # A single-group scheme has no pairwise gap; its fairness term is zero.
    diff = max_tpr_difference(tprs) if len(tprs) >= 2 else 0.0
    return acc, diff


def grid_search(
    spec: AlgorithmSpec,
    train: Dataset,
    val: Dataset,
    scheme: GroupingScheme,
    seed: int = 0,
    val_group_ids: np.ndarray | None = None,
) -> GridSearchResult:
    """Train every grid point and keep the validation-objective argmax.

    Ties keep the earlier point in grid order. Failed configurations are
    recorded in the table with their error; if every point fails the search
    raises with the collected diagnostics.
    """
    points = spec.grid_points()
    table: list[dict] = []
    best_model = None
    best_hyper: dict = {}
    best_objective = -math.inf
    for point in points:
        trial_spec = AlgorithmSpec(kind=spec.kind, hyper={**spec.hyper, **point}, grid={})
        row: dict = {"hyper": dict(point)}
        try:
            model = train_algorithm(trial_spec, train, val, scheme, seed=seed)
            acc, diff = _validation_scores(model, val, scheme, val_group_ids)
            objective = tuning_objective(acc, diff)
            row.update(
                {
                    "val_soft_accuracy": acc,
                    "val_max_tpr_difference": diff,
                    "objective": objective,
                    "error": None,
                }
            )
            if objective > best_objective:
                best_objective = objective
                best_model = model
                best_hyper = model.hyper
        except (ValidationError, FloatingPointError, UnseenGroupError) as exc:
            row.update(
                {
                    "val_soft_accuracy": None,
                    "val_max_tpr_difference": None,
                    "objective": None,
                    "error": f"{type(exc).__name__}: {exc}",
                }
            )
        table.append(row)
    if best_model is None:
        failures = "; ".join(f"{row['hyper']}: {row['error']}" for row in table)
        raise RuntimeError(f"every grid configuration failed: {failures}")
    return GridSearchResult(best=best_model, best_hyper=best_hyper, table=table)
