"""Scratch calibration for the fairness algorithms on planted-disparity data."""
import time

import numpy as np

from crossfair.data import SplitSpec, SyntheticSpec, encode_attributes, generate_synthetic, split, standardize
from crossfair.fairness import AlgorithmSpec, train_algorithm
from crossfair.groups import conjunction_encode
from crossfair.metrics import max_tpr_difference, soft_accuracy, soft_tpr_by_group


def disparity_spec(n_per=3000, seed=13):
    w = (1.0, -0.8, 0.6, 0.5)
    return SyntheticSpec(
        axes=(("race", ("A", "B")), ("sex", ("F", "M"))),
        per_group_count={(r, s): n_per for r in "AB" for s in "FM"},
        base_weights={
            ("race", "A"): [*w, 0.9],
            ("race", "B"): [*w, -0.9],
            ("sex", "F"): [0, 0, 0, 0, 0.45],
            ("sex", "M"): [0, 0, 0, 0, -0.45],
        },
        feature_dim=4,
        seed=seed,
        noise_scale=0.3,
    )


def run(seed):
    ds = encode_attributes(generate_synthetic(disparity_spec()))
    train, val, test = split(ds, SplitSpec(seed=seed))
    (train, val, test), _, _ = standardize(train, [val, test])
    scheme = conjunction_encode(ds, ("race", "sex"))

    configs = {
        "baseline": AlgorithmSpec("baseline", hyper={"epochs": 50, "learning_rate": 5e-3}),
        "rwt": AlgorithmSpec("rwt", hyper={"epochs": 50, "eta": 1.0}),
        "rdc": AlgorithmSpec("rdc", hyper={"iterations": 5, "epochs": 30, "batch_size": 512, "learning_rate": 5e-3}),
        "los": AlgorithmSpec("los", hyper={"epochs": 60, "lam": 0.5}),
        "grp": AlgorithmSpec("grp", hyper={"nu": 0.003}),
        "gry": AlgorithmSpec("gry", hyper={"C": 5.0, "iterations": 50, "gamma": 1e-3}),
    }
    results = {}
    assigned_test = scheme.assign(test)
    for name, spec in configs.items():
        t0 = time.time()
        model = train_algorithm(spec, train, val, scheme, seed=seed)
        probs = model.predict(test.features, groups=assigned_test if model.needs_groups else None)
        tprs = soft_tpr_by_group(test.labels, probs, assigned_test)
        results[name] = (
            max_tpr_difference(tprs),
            soft_accuracy(test.labels, probs),
            time.time() - t0,
        )
    return results


if __name__ == "__main__":
    rows = {}
    t_start = time.time()
    for seed in range(3):
        for name, (diff, acc, dt) in run(seed).items():
            rows.setdefault(name, []).append((diff, acc, dt))
        print(f"seed {seed} done at {time.time()-t_start:.1f}s")
    print(f"{'algo':10} {'maxdiff':>8} {'acc':>7} {'sec':>6}")
    base = np.mean([r[0] for r in rows["baseline"]])
    for name, rs in rows.items():
        d = np.mean([r[0] for r in rs])
        a = np.mean([r[1] for r in rs])
        t = np.mean([r[2] for r in rs])
        flag = "" if name == "baseline" else ("  OK" if d <= base / 2 else "  FAIL>half")
        print(f"{name:10} {d:8.3f} {a:7.3f} {t:6.1f}{flag}")
