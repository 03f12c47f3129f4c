"""High-precision reference values for the 2x3 worked examples.

Evaluates the bilinear normalization (gamma=1, beta=0, both branch weights 1)
and the adaptive normalization with identity shift/scale matrices and a zero
gate directly from their defining formulas in 50-digit arithmetic. Shares
no code with the package.

    python3 scripts/bin_oracle.py [--write tests/fixtures/worked_examples.json]
"""
import argparse
import json

import mpmath as mp

mp.mp.dps = 50
X = [[1, 2, 3], [4, 5, 6]]


def mean(v):
    return mp.fsum(v) / len(v)


def pstd(v):
    m = mean(v)
    return mp.sqrt(mp.fsum((x - m) ** 2 for x in v) / len(v))


def standardized(v):
    m, s = mean(v), pstd(v)
    return [(x - m) / s for x in v]


def bilinear_norm(X):
    D, H = len(X), len(X[0])
    rows = [[mp.mpf(x) for x in r] for r in X]
    A = [standardized(r) for r in rows]
    cols = [standardized([rows[d][h] for d in range(D)]) for h in range(H)]
    B = [[cols[h][d] for h in range(H)] for d in range(D)]
    T = [[A[d][h] + B[d][h] for h in range(H)] for d in range(D)]
    return {"A": A, "B": B, "T": T}


def adaptive_norm(X):
    D, H = len(X), len(X[0])
    rows = [[mp.mpf(x) for x in r] for r in X]
    y = [[x - mean(r) for x in r] for r in rows]  # shift by the identity-mapped mean
    sigma = [mp.sqrt(mean([v * v for v in r])) for r in y]
    z = [[v / sigma[d] for v in y[d]] for d in range(D)]
    gate = [1 / (1 + mp.e ** 0) for _ in range(D)]  # zero gate weights and bias
    T = [[z[d][h] * gate[d] for h in range(H)] for d in range(D)]
    return {"y": y, "sigma": sigma, "z": z, "gate": gate, "T": T}


def as_float(obj):
    if isinstance(obj, list):
        return [as_float(o) for o in obj]
    return float(obj)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--write", default=None)
    args = ap.parse_args()
    result = {
        "X": X,
        "bin": {k: as_float(v) for k, v in bilinear_norm(X).items()},
        "dain": {k: as_float(v) for k, v in adaptive_norm(X).items()},
    }
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    if args.write:
        with open(args.write, "w") as fh:
            fh.write(text)
    print(text, end="")


if __name__ == "__main__":
    main()
