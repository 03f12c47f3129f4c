"""Count trainable backbone and head parameters by walking layer shapes.

Independent of the package: each layer's tensors are listed from its
definition. Bilinear (D,H)->(D',H'): W1 D'xD, W2 HxH', bias D'xH'.
Attention layer: the same plus an HxH attention matrix whose diagonal is
fixed (H*H - H free) and one mixing scalar. Dense head on the flattened
output: K*(n+1), plus n+1 for the regression unit when present.

    python3 scripts/count_params.py [--write tests/fixtures/param_counts.json]
"""
import argparse
import json

SHAPES = {
    "C": [("bilinear", 60, 10), ("tabl", 120, 5)],
    "B": [("tabl", 120, 5)],
}


def count(layers, D=40, H=10, head="softmax3"):
    backbone = 0
    for kind, Dp, Hp in layers:
        n = Dp * D + H * Hp + Dp * Hp
        if kind == "tabl":
            n += H * H - H + 1
        backbone += n
        D, H = Dp, Hp
    flat = D * H
    head_n = 3 * (flat + 1) if head == "softmax3" else 2 * (flat + 1) + (flat + 1)
    return {"backbone": backbone, "head": head_n, "total": backbone + head_n}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--write", default=None)
    args = ap.parse_args()
    result = {
        f"{shape}/{head}": count(layers, head=head)
        for shape, layers in SHAPES.items()
        for head in ("softmax3", "softmax2_plus_regression")
    }
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    if args.write:
        with open(args.write, "w") as fh:
            fh.write(text)
    print(text, end="")


if __name__ == "__main__":
    main()
