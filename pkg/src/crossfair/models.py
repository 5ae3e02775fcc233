"""From-scratch trainable predictors used by the fairness algorithms.

The workhorse is a small fully connected network (two rectifier hidden layers,
sigmoid output) trained on weighted binary cross-entropy with per-parameter
adaptive moment steps. A single-layer variant serves as the logistic learner,
and a closed-form ridge-damped least-squares model provides the cost-sensitive
linear learner. All training is deterministic given the seed.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, ValidationError

__all__ = [
    "FairPredictor",
    "LinearModel",
    "MlpConfig",
    "NetModel",
    "TrainingDivergedError",
    "UnseenGroupError",
    "continue_training",
    "load_model",
    "register_model_type",
    "save_model",
    "train_linear_cost_sensitive",
    "train_logistic",
    "train_mlp",
]

MODEL_FORMAT = "crossfair-model"
MODEL_FORMAT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class UnseenGroupError(ValueError):
    """Inference was asked about a group the model never saw at training."""


class TrainingDivergedError(FloatingPointError):
    """Loss became non-finite; the learning rate is too high for the data."""


@dataclass(frozen=True)
class MlpConfig:
    hidden_sizes: tuple[int, ...] = (30, 30)
    batch_size: int = 64
    learning_rate: float = 1e-3
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(self.hidden_sizes))
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# reg_fn(logits, probs, batch_rows) -> (extra loss, d extra / d logits)
RegFn = Callable[[np.ndarray, np.ndarray, np.ndarray], tuple[float, np.ndarray]]


class _AdamNet:
    """Feed-forward net with rectifier hidden layers and a sigmoid output.

    Holds its own optimizer moments and shuffle rng so training can be
    resumed exactly where it stopped.
    """

    def __init__(self, sizes: Sequence[int], seed: int, zero_init: bool = False):
        self.sizes = list(sizes)
        rng = np.random.default_rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            if zero_init:
                w = np.zeros((fan_in, fan_out))
            else:
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))
        self._rng = rng
        self._m = [np.zeros_like(p) for p in self._params()]
        self._v = [np.zeros_like(p) for p in self._params()]
        self._t = 0
        self.epochs_run = 0
        self.last_loss: float | None = None

    def _params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def _set_params(self, params: list[np.ndarray]) -> None:
        k = len(self.weights)
        self.weights = [np.array(p, dtype=float) for p in params[:k]]
        self.biases = [np.array(p, dtype=float) for p in params[k:]]

    def logits(self, x: np.ndarray) -> np.ndarray:
        a = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            a = np.maximum(a @ w + b, 0.0)
        return (a @ self.weights[-1] + self.biases[-1]).ravel()

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return sigmoid(self.logits(x))

    def loss_and_grads(
        self,
        x: np.ndarray,
        y: np.ndarray,
        sample_weight: np.ndarray,
        reg_fn: RegFn | None = None,
        rows: np.ndarray | None = None,
    ) -> tuple[float, list[np.ndarray]]:
        """Mean weighted BCE (+ optional regularizer) and gradients.

        Loss is (1/B) * sum_i w_i * bce_i, so uniform weights scale the
        unweighted loss by the constant.
        """
        n = x.shape[0]
        activations = [x]
        pre = []
        a = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            z = a @ w + b
            pre.append(z)
            a = np.maximum(z, 0.0)
            activations.append(a)
        logits = (a @ self.weights[-1] + self.biases[-1]).ravel()
        probs = sigmoid(logits)

        # numerically stable BCE: max(z,0) - y*z + log(1 + exp(-|z|))
        bce = np.maximum(logits, 0.0) - y * logits + np.log1p(np.exp(-np.abs(logits)))
        loss = float(np.mean(sample_weight * bce))
        dlogits = sample_weight * (probs - y) / n
        if reg_fn is not None:
            extra, dextra = reg_fn(logits, probs, rows if rows is not None else np.arange(n))
            loss += extra
            dlogits = dlogits + dextra

        grads_w = [np.zeros_like(w) for w in self.weights]
        grads_b = [np.zeros_like(b) for b in self.biases]
        delta = dlogits[:, None]
        grads_w[-1] = activations[-1].T @ delta
        grads_b[-1] = delta.sum(axis=0)
        for layer in range(len(self.weights) - 2, -1, -1):
            delta = (delta @ self.weights[layer + 1].T) * (pre[layer] > 0.0)
            grads_w[layer] = activations[layer].T @ delta
            grads_b[layer] = delta.sum(axis=0)
        return loss, [*grads_w, *grads_b]

    def _adam_step(self, grads: list[np.ndarray], lr: float) -> None:
        self._t += 1
        correction1 = 1.0 - ADAM_BETA1**self._t
        correction2 = 1.0 - ADAM_BETA2**self._t
        for p, g, m, v in zip(self._params(), grads, self._m, self._v):
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            p -= lr * (m / correction1) / (np.sqrt(v / correction2) + ADAM_EPS)

    def run_epochs(
        self,
        x: np.ndarray,
        y: np.ndarray,
        sample_weight: np.ndarray,
        epochs: int,
        batch_size: int,
        lr: float,
        reg_fn: RegFn | None = None,
    ) -> None:
        n = x.shape[0]
        batch_size = min(batch_size, n)
        for _ in range(epochs):
            order = self._rng.permutation(n)
            total = 0.0
            for start in range(0, n, batch_size):
                idx = order[start : start + batch_size]
                loss, grads = self.loss_and_grads(
                    x[idx], y[idx], sample_weight[idx], reg_fn=reg_fn, rows=idx
                )
                self._adam_step(grads, lr)
                total += loss * len(idx)
            self.last_loss = total / n
            self.epochs_run += 1
            if not np.isfinite(self.last_loss):
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {self.epochs_run}; "
                    f"lower the learning rate (currently {lr})"
                )

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "adam_m": [m.tolist() for m in self._m],
            "adam_v": [v.tolist() for v in self._v],
            "adam_t": self._t,
            "epochs_run": self.epochs_run,
            "last_loss": self.last_loss,
            "rng_state": _encode_rng_state(self._rng),
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "_AdamNet":
        net = cls(blob["sizes"], seed=0)
        net.weights = [np.array(w, dtype=float) for w in blob["weights"]]
        net.biases = [np.array(b, dtype=float) for b in blob["biases"]]
        net._m = [np.array(m, dtype=float) for m in blob["adam_m"]]
        net._v = [np.array(v, dtype=float) for v in blob["adam_v"]]
        net._t = int(blob["adam_t"])
        net.epochs_run = int(blob["epochs_run"])
        net.last_loss = blob["last_loss"]
        net._rng = _decode_rng_state(blob["rng_state"])
        return net


def _encode_rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": {k: str(v) for k, v in state["state"].items()},
        "has_uint32": state.get("has_uint32", 0),
        "uinteger": state.get("uinteger", 0),
    }


def _decode_rng_state(blob: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = {
        "bit_generator": blob["bit_generator"],
        "state": {k: int(v) for k, v in blob["state"].items()},
        "has_uint32": int(blob["has_uint32"]),
        "uinteger": int(blob["uinteger"]),
    }
    return rng


class NetModel:
    """Prediction wrapper around a trained :class:`_AdamNet`."""

    model_type = "net"
    needs_groups = False
    resumable = True

    def __init__(self, net: _AdamNet, config: dict):
        self.net = net
        self.config = config

    def predict(self, x: np.ndarray, groups=None) -> np.ndarray:
        return self.net.predict_proba(np.asarray(x, dtype=float))

    def to_dict(self) -> dict:
        return {"type": self.model_type, "net": self.net.to_dict(), "config": self.config}

    @classmethod
    def from_dict(cls, blob: dict) -> "NetModel":
        return cls(_AdamNet.from_dict(blob["net"]), blob["config"])


class LinearModel:
    """Least-squares model; predicts hard 0/1 at threshold 0.5, exposes the raw score."""

    model_type = "linear"
    needs_groups = False
    resumable = False

    def __init__(self, coefficients: np.ndarray, damping: float):
        self.coefficients = np.asarray(coefficients, dtype=float)
        self.damping = damping

    def score(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x @ self.coefficients[:-1] + self.coefficients[-1]

    def predict(self, x: np.ndarray, groups=None) -> np.ndarray:
        return (self.score(x) >= 0.5).astype(float)

    def to_dict(self) -> dict:
        return {
            "type": self.model_type,
            "coefficients": self.coefficients.tolist(),
            "damping": self.damping,
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "LinearModel":
        return cls(np.array(blob["coefficients"], dtype=float), blob["damping"])


_MODEL_TYPES: dict[str, type] = {}


def register_model_type(cls) -> type:
    _MODEL_TYPES[cls.model_type] = cls
    return cls


register_model_type(NetModel)
register_model_type(LinearModel)


@dataclass
class FairPredictor:
    """A trained model plus the provenance needed to reproduce it.

    ``predict`` returns probabilities in [0, 1] for each feature row and is a
    pure function of (parameters, input). Group-aware models (``needs_groups``)
    additionally require each row's group id and raise
    :class:`UnseenGroupError` for groups absent at training time.
    """

    algorithm: str
    hyper: dict
    seed: int
    model: object
    metadata: dict = field(default_factory=dict)

    @property
    def needs_groups(self) -> bool:
        return bool(getattr(self.model, "needs_groups", False))

    def predict(self, features, groups=None) -> np.ndarray:
        x = np.asarray(features, dtype=float)
        if self.needs_groups and groups is None:
            raise ValidationError(f"{self.algorithm} predictions require per-row group ids")
        p = np.asarray(self.model.predict(x, groups=groups), dtype=float)
        return np.clip(p, 0.0, 1.0)

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_FORMAT_VERSION,
            "algorithm": self.algorithm,
            "hyper": self.hyper,
            "seed": self.seed,
            "metadata": self.metadata,
            "model": self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "FairPredictor":
        if blob.get("format") != MODEL_FORMAT:
            raise ValidationError("not a crossfair model blob")
        if blob.get("version") != MODEL_FORMAT_VERSION:
            raise ValidationError(f"unsupported model format version {blob.get('version')}")
        model_blob = blob["model"]
        model_cls = _MODEL_TYPES.get(model_blob.get("type"))
        if model_cls is None:
            raise ValidationError(f"unknown model type {model_blob.get('type')!r}")
        return cls(
            algorithm=blob["algorithm"],
            hyper=blob["hyper"],
            seed=blob["seed"],
            model=model_cls.from_dict(model_blob),
            metadata=blob.get("metadata", {}),
        )


def save_model(predictor: FairPredictor, path) -> None:
    Path(path).write_bytes(json.dumps(predictor.to_dict(), sort_keys=True).encode())


def load_model(path) -> FairPredictor:
    return FairPredictor.from_dict(json.loads(Path(path).read_bytes()))


def fit_net_raw(
    features: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
    cfg: MlpConfig,
    reg_fn: RegFn | None = None,
) -> NetModel:
    """Fit a network on arbitrary 0/1 targets without the class-balance check.

    Used by cost-sensitive inner loops where targets are derived costs rather
    than observed labels and may legitimately collapse to a single class.
    """
    net = _AdamNet([features.shape[1], *cfg.hidden_sizes, 1], seed=cfg.seed)
    net.run_epochs(
        np.asarray(features, dtype=float),
        np.asarray(targets, dtype=float),
        np.asarray(weights, dtype=float),
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr=cfg.learning_rate,
        reg_fn=reg_fn,
    )
    config = {
        "hidden_sizes": list(cfg.hidden_sizes),
        "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate,
    }
    return NetModel(net, config)


def _check_training_inputs(train: Dataset, weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.shape != (train.n,):
        raise ValidationError(f"weights length {w.shape} does not match {train.n} rows")
    if np.any(w < 0):
        raise ValidationError("sample weights must be non-negative")
    if not (train.labels == 1).any() or not (train.labels == 0).any():
        raise ValidationError("training data needs at least one positive and one negative label")
    return w


def train_mlp(
    train: Dataset,
    weights,
    cfg: MlpConfig,
    reg_fn: RegFn | None = None,
    algorithm: str = "mlp",
) -> FairPredictor:
    """Train the fully connected baseline network on weighted cross-entropy."""
    w = _check_training_inputs(train, weights)
    model = fit_net_raw(train.features, train.labels.astype(float), w, cfg, reg_fn=reg_fn)
    net = model.net
    return FairPredictor(
        algorithm=algorithm,
        hyper={"epochs": cfg.epochs, "learning_rate": cfg.learning_rate, "batch_size": cfg.batch_size},
        seed=cfg.seed,
        model=model,
        metadata={"epochs_run": net.epochs_run, "final_loss": net.last_loss},
    )


def continue_training(
    model: FairPredictor, train: Dataset, weights, epochs: int, reg_fn: RegFn | None = None
) -> FairPredictor:
    """Resume a network from its current parameters with new sample weights.

    Only models produced by :func:`train_mlp` can resume; composite predictors
    (ensembles, corrected models) cannot. The input predictor is left
    untouched; a continued copy is returned.
    """
    inner = model.model
    if not isinstance(inner, NetModel) or not inner.resumable:
        raise ValidationError(f"model of type {type(inner).__name__} cannot resume training")
    w = _check_training_inputs(train, weights)
    net = copy.deepcopy(inner.net)
    if epochs > 0:
        net.run_epochs(
            train.features,
            train.labels.astype(float),
            w,
            epochs=epochs,
            batch_size=inner.config["batch_size"],
            lr=inner.config["learning_rate"],
            reg_fn=reg_fn,
        )
    return FairPredictor(
        algorithm=model.algorithm,
        hyper=dict(model.hyper),
        seed=model.seed,
        model=NetModel(net, dict(inner.config)),
        metadata={"epochs_run": net.epochs_run, "final_loss": net.last_loss},
    )


def train_logistic(
    train: Dataset,
    weights,
    lr: float,
    epochs: int,
    seed: int,
    batch_size: int | None = None,
) -> FairPredictor:
    """Single linear layer + sigmoid, zero-initialized, full-batch by default.

    With zero epochs the model predicts 0.5 everywhere.
    """
    w = _check_training_inputs(train, weights)
    net = _AdamNet([train.feature_dim, 1], seed=seed, zero_init=True)
    batch = train.n if batch_size is None else batch_size
    if epochs > 0:
        net.run_epochs(
            train.features,
            train.labels.astype(float),
            w,
            epochs=epochs,
            batch_size=batch,
            lr=lr,
        )
    config = {"hidden_sizes": [], "batch_size": batch, "learning_rate": lr}
    return FairPredictor(
        algorithm="logistic",
        hyper={"epochs": epochs, "learning_rate": lr},
        seed=seed,
        model=NetModel(net, config),
        metadata={"epochs_run": net.epochs_run, "final_loss": net.last_loss},
    )


def train_linear_cost_sensitive(
    train: Dataset, cost_labels, seed: int = 0, damping: float = 1e-6
) -> FairPredictor:
    """Closed-form least squares of real-valued costs on features.

    Solves the normal equations with ridge damping on all coefficients, which
    keeps collinear one-hot feature blocks solvable without special-casing.
    """
    c = np.asarray(cost_labels, dtype=float)
    if c.shape != (train.n,):
        raise ValidationError(f"cost_labels length {c.shape} does not match {train.n} rows")
    x = np.hstack([train.features, np.ones((train.n, 1))])
    gram = x.T @ x + damping * np.eye(x.shape[1])
    beta = np.linalg.solve(gram, x.T @ c)
    return FairPredictor(
        algorithm="linear",
        hyper={"damping": damping},
        seed=seed,
        model=LinearModel(beta, damping),
        metadata={},
    )
