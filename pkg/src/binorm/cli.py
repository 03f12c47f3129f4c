"""``binorm`` command line: prepare, synth, train, eval, gradcheck, compare.

Exit codes: 0 success, 1 runtime failure, 2 config or validation failure.
Every command validates its inputs before writing anything.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ConfigError, RunConfig, load_config
from .formats import (
    FormatError,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
    save_history,
    save_timing,
)
from .gradcheck import E2E_CHECKS, LAYER_CHECKS, format_rows, run_gradcheck
from .lob import TableIOError, TableParseError, TableShapeError, build_dataset, concat_streams, load_table, synth_dataset
from .metrics import format_report, report_json
from .series import ValidationError
from .training import AdamState, TrainingDiverged, evaluate, train

log = logging.getLogger("binorm")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2
VALIDATION_ERRORS = (ConfigError, ValidationError, TableIOError, TableParseError, TableShapeError, FormatError)

SYNTH_DEFAULTS = {"n_regimes": 4, "samples_per_regime": 750, "D": 40, "H": 10, "noise": 0.5, "n_train": 2000}
METRIC_COLUMNS = {1: ("accuracy", "precision", "recall", "f1"), 2: ("accuracy", "precision", "recall", "f1", "rmse")}


class Invalid(ValueError):
    """Raised for semantic input problems detected before any output is written."""


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _manifest(cfg: RunConfig, train_ds, test_ds, extra: dict) -> dict:
    return {
        "config_hash": cfg.hash,
        "D": train_ds.D,
        "H": train_ds.H,
        "setting": train_ds.setting,
        "splits": {
            ds.split: {"n": len(ds), "class_counts": ds.class_counts()} for ds in (train_ds, test_ds)
        },
        **extra,
    }


def _save_datasets(cfg: RunConfig, train_ds, test_ds, extra: dict) -> None:
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(train_ds, out / "train.ds", cfg.hash)
    save_dataset(test_ds, out / "test.ds", cfg.hash)
    _write(out / "manifest.json", _dump(_manifest(cfg, train_ds, test_ds, extra)))
    _write(out / "config.json", _dump({"config_hash": cfg.hash, "config": cfg.raw}))
    print(f"wrote {len(train_ds)} train / {len(test_ds)} test samples to {out} (config {cfg.hash})")
    for ds in (train_ds, test_ds):
        print(f"  {ds.split}: {ds.class_counts()}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_prepare(cfg: RunConfig, args) -> int:
    data = cfg.section("data")
    if not data:
        raise Invalid("prepare needs a 'data' section with input files")
    layout = cfg.layout()
    base = cfg.source.parent if cfg.source else Path(".")
    files = [Path(f) if Path(f).is_absolute() else base / f for f in data["files"]]
    missing = [str(f) for f in files if not f.is_file()]
    if missing:
        raise Invalid(f"input files not found: {', '.join(missing)}")
    streams = [load_table(f, layout, day=None if layout.day_column is not None else i) for i, f in enumerate(files)]
    stream = concat_streams(streams)
    if "train_fraction" in data:
        stream = dataclasses.replace(stream, days=None)
    window = int(data.get("window", 10))
    train_ds, test_ds = build_dataset(
        stream,
        cfg.label_config(),
        window,
        cfg.setting,
        train_days=int(data.get("train_days", 7)),
        train_fraction=float(data.get("train_fraction", 0.7)),
    )
    extra = {
        "files": [str(f) for f in data["files"]],
        "events": stream.T,
        "split_boundary": int(train_ds.meta["split_boundary"]),
        "window": window,
    }
    _save_datasets(cfg, train_ds, test_ds, extra)
    return EXIT_OK


def cmd_synth(cfg: RunConfig, args) -> int:
    s = {**SYNTH_DEFAULTS, **cfg.section("synth")}
    n = s["n_regimes"] * s["samples_per_regime"]
    if not 0 < s["n_train"] < n:
        raise Invalid(f"synth.n_train must lie strictly between 0 and n_regimes*samples_per_regime={n}")
    train_ds, test_ds = synth_dataset(cfg.seed, **s)
    _save_datasets(cfg, train_ds, test_ds, {"synth": s, "seed": cfg.seed})
    return EXIT_OK


def _load_split(cfg: RunConfig, split: str):
    path = cfg.dataset_dir / f"{split}.ds"
    if not path.is_file():
        raise Invalid(f"dataset {path} not found; run 'prepare' or 'synth' first")
    return load_dataset(path)


def _datasets_and_spec(cfg: RunConfig, normalizer=None):
    train_ds, test_ds = _load_split(cfg, "train"), _load_split(cfg, "test")
    if train_ds.setting != cfg.setting:
        raise Invalid(f"dataset has setting {train_ds.setting}, config asks for labels.setting={cfg.setting}")
    try:
        spec = cfg.model_spec((train_ds.D, train_ds.H), normalizer)
    except ValueError as exc:
        raise Invalid(f"invalid model: {exc}") from None
    return train_ds, test_ds, spec


def _final_metrics(history, split: str) -> dict:
    row = history.rows[-1]
    prefix = f"{split}_"
    return {k[len(prefix):]: v for k, v in row.items() if k.startswith(prefix)}


def _median(per_run: list) -> dict:
    keys = per_run[0].keys()
    return {k: float(np.median([m[k] for m in per_run])) for k in keys}


def _train_runs(cfg: RunConfig, spec, train_ds, test_ds, run_root: Path):
    """Train ``cfg.runs`` models with seeds ``seed + i``; returns per-run final test metrics."""
    per_run = []
    for i in range(cfg.runs):
        seed = cfg.seed + i
        tc = cfg.train_config(seed)
        run_dir = run_root / f"run{i}"
        run_dir.mkdir(parents=True, exist_ok=True)
        log.info("run %d seed %d normalizer %s", i, seed, spec.normalizer)
        try:
            res = train(spec, train_ds, tc, test_ds)
        except TrainingDiverged as exc:
            if exc.last_good is not None:
                save_checkpoint(run_dir / "checkpoint.partial.json", spec, exc.last_good, AdamState(), 0,
                                dataclasses.asdict(tc), cfg.hash)
            if exc.history is not None and exc.history.rows:
                save_history(exc.history, run_dir / "history.partial.tsv", cfg.hash)
            _write(run_dir / "FAILED", f"config={cfg.hash}\nseed={seed}\n{exc}\n")
            raise
        save_checkpoint(run_dir / "checkpoint.json", spec, res.params, res.state, res.epoch,
                        dataclasses.asdict(tc), cfg.hash, res.horizon_scale)
        save_history(res.history, run_dir / "history.tsv", cfg.hash)
        save_timing(res.history, run_dir / "timing.tsv", cfg.hash)
        per_run.append({"seed": seed, "metrics": _final_metrics(res.history, "test" if len(test_ds) else "train")})
    return per_run


def cmd_train(cfg: RunConfig, args) -> int:
    train_ds, test_ds, spec = _datasets_and_spec(cfg)
    out = cfg.out
    per_run = _train_runs(cfg, spec, train_ds, test_ds, out)
    median = _median([r["metrics"] for r in per_run])
    summary = {
        "config_hash": cfg.hash,
        "normalizer": spec.normalizer,
        "seeds": [r["seed"] for r in per_run],
        "runs": per_run,
        "median": median,
    }
    _write(out / "summary.json", _dump(summary))
    _write(out / "summary.txt", f"# config={cfg.hash} runs={len(per_run)}\n" + format_report(median))
    print(f"median test metrics over {len(per_run)} run(s):")
    print(format_report(median), end="")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    if not args.checkpoint:
        raise Invalid("eval needs --checkpoint")
    ckpt = load_checkpoint(args.checkpoint)
    spec = ckpt["spec"]
    ds = _load_split(cfg, args.split)
    if (ds.D, ds.H) != spec.input_shape or ds.n_classes != spec.n_classes:
        raise Invalid(
            f"spec/checkpoint mismatch: dataset has {(ds.D, ds.H)} windows and {ds.n_classes} classes, "
            f"checkpoint expects {spec.input_shape} and {spec.n_classes}"
        )
    metrics = evaluate(spec, ckpt["params"], ds, ckpt["horizon_scale"])
    metrics["split"] = args.split
    metrics["checkpoint_config_hash"] = ckpt["config_hash"]
    out = cfg.out
    text = f"# config={cfg.hash}\n" + format_report(metrics)
    _write(out / f"eval_{args.split}.txt", text)
    _write(out / f"eval_{args.split}.json", report_json(metrics, cfg.hash))
    print(text, end="")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    g = cfg.section("gradcheck")
    known = set(LAYER_CHECKS) | set(E2E_CHECKS)
    for name in [args.corrupt] + (args.only or []):
        if name is not None and name not in known:
            raise Invalid(f"unknown gradcheck component {name!r}; choose from {sorted(known)}")
    kwargs = {k: g[k] for k in ("instances", "extra_instances", "layer_tol", "e2e_tol") if k in g}
    rows = run_gradcheck(seed=cfg.seed, corrupt=args.corrupt, components=args.only, **kwargs)
    table = format_rows(rows)
    failed = [r for r in rows if not r.passed]
    footer = f"{len(rows) - len(failed)}/{len(rows)} passed"
    _write(cfg.out / "gradcheck.txt", f"# config={cfg.hash}\n{table}\n{footer}\n")
    print(table)
    print(footer)
    return EXIT_RUNTIME if failed else EXIT_OK


def _compare_one(cfg_raw: dict, source, normalizer: str):
    cfg = RunConfig(cfg_raw, source)
    train_ds, test_ds, spec = _datasets_and_spec(cfg, normalizer)
    per_run = _train_runs(cfg, spec, train_ds, test_ds, cfg.out / "compare" / normalizer)
    return _median([r["metrics"] for r in per_run])


def format_table(rows: dict, columns, seeds, config_hash: str) -> str:
    """Rows keyed by normalizer; the best F1 gets a ``*`` (first listed wins ties)."""
    best = None
    for name, m in rows.items():
        if best is None or m["f1"] > rows[best]["f1"]:
            best = name
    lines = [f"{'normalizer':12s} " + " ".join(f"{c:>10s}" for c in columns) + "  best"]
    for name, m in rows.items():
        cells = " ".join(f"{m[c]:10.4f}" for c in columns)
        lines.append(f"{name:12s} {cells}  {'*' if name == best else ''}".rstrip())
    lines.append(f"# seeds={','.join(str(s) for s in seeds)} config={config_hash}")
    return "\n".join(lines) + "\n"


def cmd_compare(cfg: RunConfig, args) -> int:
    normalizers = cfg.section("compare").get("normalizers", ["none", "zscore", "bin"])
    for n in normalizers:
        _datasets_and_spec(cfg, n)  # validate every row before training any
    if cfg.threads > 1 and len(normalizers) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.threads, len(normalizers))) as pool:
            results = list(pool.map(_compare_one, [cfg.raw] * len(normalizers), [cfg.source] * len(normalizers), normalizers))
    else:
        results = [_compare_one(cfg.raw, cfg.source, n) for n in normalizers]
    rows = dict(zip(normalizers, results))
    seeds = [cfg.seed + i for i in range(cfg.runs)]
    table = format_table(rows, METRIC_COLUMNS[cfg.setting], seeds, cfg.hash)
    _write(cfg.out / "compare.txt", table)
    _write(cfg.out / "compare.json", _dump({"config_hash": cfg.hash, "seeds": seeds, "rows": rows}))
    print(table, end="")
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "compare": cmd_compare,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _common(parser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="YAML or JSON run configuration")
    parser.add_argument("--seed", type=int, default=d, help="override the config seed")
    parser.add_argument("--out", default=d, help="output directory")
    parser.add_argument("--threads", type=int, default=d, help="BLAS threads (determinism guaranteed only at 1)")
    parser.add_argument("-v", "--verbose", action="store_true", default=d)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="binorm", description=__doc__.splitlines()[0])
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _common(p, suppress=True)
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--split", choices=("train", "test"), default="test")
        if name == "gradcheck":
            p.add_argument("--corrupt", default=None, help="test hook: perturb this component's analytic gradient")
            p.add_argument("--only", nargs="+", default=None, help="restrict to these components")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = {"seed": args.seed, "threads": args.threads, "out": args.out}
        cfg = load_config(args.config, overrides)
        with threadpool_limits(limits=cfg.threads):
            return COMMANDS[args.command](cfg, args)
    except (Invalid, *VALIDATION_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc} (partial artifacts flagged with FAILED)", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - the exit-code contract covers every failure
        log.debug("unhandled failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
