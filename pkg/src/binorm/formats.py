"""On-disk formats: labeled datasets, checkpoints and training histories.

Dataset (text)::

    # binorm-dataset/1 D=40 H=10 setting=1 split=train n=123 counts=up:40,stationary:50,down:33 config=<hash>
    <end_index> <label> [<horizon>] <D*H values, row-major (feature-major)>
    ...

Values are written with Python's shortest round-trip float repr, so a
reload is bit-exact. ``horizon`` is present only for setting 2.

Checkpoint (JSON)::

    {"format": "binorm-checkpoint/1", "sha256": <hex digest of payload>, "payload": {
        "config_hash", "spec", "train_config", "epoch", "horizon_scale",
        "static": {"kind"}, "tensors": {name: {"shape", "data"}},
        "adam": {"t", "m": {...}, "v": {...}}}}

The digest covers the canonical (sorted-key, compact) serialization of the
payload; any edit to the file is detected on load.

History (TSV): a ``# config=<hash>`` line, a header, one row per epoch.
Wall-clock timings are kept out of it so identical runs give identical
files; they go to a separate ``timing.tsv``.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .backbone import ModelParams, ModelSpec, init_params
from .lob import LabeledDataset
from .series import StaticNormalizer
from .training import AdamState, TrainHistory

DATASET_TAG = "binorm-dataset/1"
CHECKPOINT_TAG = "binorm-checkpoint/1"


class FormatError(ValueError):
    pass


class ChecksumError(FormatError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def save_dataset(ds: LabeledDataset, path, config_hash: str = "") -> None:
    counts = ",".join(f"{k}:{v}" for k, v in ds.class_counts().items())
    header = f"# {DATASET_TAG} D={ds.D} H={ds.H} setting={ds.setting} split={ds.split} n={len(ds)} counts={counts} config={config_hash or '-'}"
    lines = [header]
    flat = ds.X.reshape(len(ds), -1)
    for i in range(len(ds)):
        head = [str(int(ds.end_index[i])), str(int(ds.labels[i]))]
        if ds.setting == 2:
            head.append(str(int(ds.horizons[i])))
        lines.append(" ".join(head + [repr(v) for v in flat[i].tolist()]))
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_header(line: str) -> dict:
    parts = line.lstrip("#").split()
    if not parts or parts[0] != DATASET_TAG:
        raise FormatError(f"not a {DATASET_TAG} file")
    return dict(p.split("=", 1) for p in parts[1:])


def load_dataset(path) -> LabeledDataset:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty dataset file")
    meta = _parse_header(lines[0])
    D, H, setting, n = int(meta["D"]), int(meta["H"]), int(meta["setting"]), int(meta["n"])
    lead = 3 if setting == 2 else 2
    rows = [ln.split() for ln in lines[1:] if ln.strip()]
    if len(rows) != n:
        raise FormatError(f"{path}: header declares {n} samples, found {len(rows)}")
    if any(len(r) != lead + D * H for r in rows):
        raise FormatError(f"{path}: record width does not match D*H={D * H}")
    if n == 0:
        X = np.zeros((0, D, H))
        arr = np.zeros((0, lead), dtype=np.int64)
    else:
        arr = np.array([r[:lead] for r in rows], dtype=np.int64)
        X = np.array([[float(v) for v in r[lead:]] for r in rows]).reshape(n, D, H)
    return LabeledDataset(
        X,
        arr[:, 1],
        setting,
        arr[:, 2] if setting == 2 else None,
        arr[:, 0],
        meta.get("split", "train"),
        {"config_hash": meta.get("config")},
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _tensor(a) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _array(d) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def save_checkpoint(path, spec: ModelSpec, params: ModelParams, state: AdamState, epoch: int,
                    train_config: dict, config_hash: str = "", horizon_scale: float = 1.0) -> None:
    static_kind = params.norm.kind if isinstance(params.norm, StaticNormalizer) else None
    payload = {
        "config_hash": config_hash,
        "spec": spec.to_dict(),
        "train_config": train_config,
        "epoch": int(epoch),
        "horizon_scale": float(horizon_scale),
        "static": {"kind": static_kind},
        "tensors": {k: _tensor(v) for k, v in params.tensors(trainable_only=False).items()},
        "adam": {
            "t": state.t,
            "m": {k: _tensor(v) for k, v in state.m.items()},
            "v": {k: _tensor(v) for k, v in state.v.items()},
        },
    }
    body = canonical_json(payload)
    doc = {"format": CHECKPOINT_TAG, "sha256": sha256_text(body), "payload": payload}
    Path(path).write_text(canonical_json(doc) + "\n")


def load_checkpoint(path) -> dict:
    """Returns ``{"spec", "params", "state", "epoch", "train_config", "config_hash", "horizon_scale"}``."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ChecksumError(f"{path}: corrupted checkpoint ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_TAG:
        raise FormatError(f"{path}: not a {CHECKPOINT_TAG} file")
    payload = doc.get("payload")
    if sha256_text(canonical_json(payload)) != doc.get("sha256"):
        raise ChecksumError(f"{path}: checksum mismatch, checkpoint is corrupted")
    spec = ModelSpec.from_dict(payload["spec"])
    tensors = {k: _array(v) for k, v in payload["tensors"].items()}
    static = None
    kind = payload["static"]["kind"]
    if kind is not None:
        if kind == "none":
            static = StaticNormalizer("none", fitted=True)
        else:
            static = StaticNormalizer(kind, tensors["norm.loc"], tensors["norm.spread"], True)
    params = init_params(spec, 0, static)
    for name, arr in params.tensors(trainable_only=False).items():
        if name not in tensors:
            raise FormatError(f"{path}: missing tensor {name}")
        if tuple(arr.shape) != tensors[name].shape:
            raise FormatError(f"{path}: tensor {name} has shape {tensors[name].shape}, spec needs {arr.shape}")
        arr[...] = tensors[name]
    adam = payload["adam"]
    state = AdamState(adam["t"], {k: _array(v) for k, v in adam["m"].items()}, {k: _array(v) for k, v in adam["v"].items()})
    return {
        "spec": spec,
        "params": params,
        "state": state,
        "epoch": payload["epoch"],
        "train_config": payload["train_config"],
        "config_hash": payload["config_hash"],
        "horizon_scale": payload.get("horizon_scale", 1.0),
    }


# ---------------------------------------------------------------------------
# Histories
# ---------------------------------------------------------------------------


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def save_history(history: TrainHistory, path, config_hash: str = "") -> None:
    keys = list(history.rows[0]) if history.rows else ["epoch"]
    lines = [f"# config={config_hash or '-'}", "\t".join(keys)]
    lines += ["\t".join(_fmt(row[k]) for k in keys) for row in history.rows]
    Path(path).write_text("\n".join(lines) + "\n")


def load_history(path) -> list:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    keys = lines[0].split("\t")
    rows = []
    for ln in lines[1:]:
        vals = ln.split("\t")
        rows.append({k: (int(v) if k == "epoch" else float(v)) for k, v in zip(keys, vals)})
    return rows


def save_timing(history: TrainHistory, path, config_hash: str = "") -> None:
    lines = [f"# config={config_hash or '-'}", "epoch\tseconds"] + [f"{i + 1}\t{t:.6f}" for i, t in enumerate(history.wall_clock)]
    Path(path).write_text("\n".join(lines) + "\n")
