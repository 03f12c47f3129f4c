"""Regime-shift benchmark: identical B-shape backbones with and without input normalization.

Data: 3 pattern classes under 4 regimes with disjoint offset ranges,
2000 train / 1000 test windows of 40x10, seed 42; 20 epochs each.

    python3 scripts/regime_benchmark.py [--normalizers none bin ...] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import time

from threadpoolctl import threadpool_limits

from binorm.backbone import b_shape
from binorm.lob import synth_dataset
from binorm.training import TrainConfig, evaluate, train

SEED = 42
DATA = dict(n_regimes=4, samples_per_regime=750, D=40, H=10, noise=0.5, n_train=2000)
EPOCHS = 20


def run(normalizers=("none", "bin"), seed: int = SEED, epochs: int = EPOCHS) -> dict:
    train_ds, test_ds = synth_dataset(seed, **DATA)
    cfg = TrainConfig(epochs=epochs, seed=seed)
    results = {}
    for norm in normalizers:
        spec = b_shape(norm, "softmax3", (DATA["D"], DATA["H"]))
        res = train(spec, train_ds, cfg)
        results[norm] = evaluate(spec, res.params, test_ds)["accuracy"]
    return results


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--normalizers", nargs="+", default=["none", "bin"])
    ap.add_argument("--json", default=None)
    args = ap.parse_args()
    started = time.perf_counter()
    with threadpool_limits(limits=1):
        acc = run(args.normalizers)
    elapsed = time.perf_counter() - started
    for norm, a in acc.items():
        print(f"{norm:8s} test accuracy {100 * a:6.2f}%")
    print(f"elapsed {elapsed:.1f}s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"seed": SEED, "data": DATA, "epochs": EPOCHS, "test_accuracy": acc}, fh, indent=2, sort_keys=True)
            fh.write("\n")


if __name__ == "__main__":
    main()
