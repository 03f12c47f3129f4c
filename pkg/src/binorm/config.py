"""Run configuration: YAML/JSON files validated against ``config_schema.json``."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import yaml

from .backbone import ModelSpec, b_shape, c_shape
from .formats import canonical_json, sha256_text
from .lob import LabelConfig, TableLayout
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def schema() -> dict:
    return json.loads(resources.files("binorm").joinpath("config_schema.json").read_text())


DEFAULT_TRAIN = {
    "epochs": 80,
    "lr": 1e-3,
    "drops": [[11, 0.1], [71, 0.1]],
    "weight_decay": 1e-4,
    "max_norm": 10.0,
    "batch_size": 256,
    "w_reg": 1.0,
    "decay_normalizer": False,
    "standardize_horizon": False,
    "runs": 1,
}


@dataclass
class RunConfig:
    raw: dict
    source: Optional[Path] = None

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    @property
    def out(self) -> Path:
        return Path(self.raw.get("out", "runs/default"))

    @property
    def threads(self) -> int:
        return int(self.raw.get("threads", 1))

    @property
    def dataset_dir(self) -> Path:
        return Path(self.raw.get("dataset_dir", self.out))

    @property
    def hash(self) -> str:
        """Digest of every setting that affects numbers (output location and threads excluded)."""
        numeric = {k: v for k, v in self.raw.items() if k not in ("out", "threads")}
        return sha256_text(canonical_json(numeric))[:16]

    def section(self, name: str) -> dict:
        return dict(self.raw.get(name, {}))

    def label_config(self) -> LabelConfig:
        lab = self.section("labels")
        lab.pop("setting", None)
        return LabelConfig(**lab)

    @property
    def setting(self) -> int:
        return int(self.section("labels").get("setting", 1))

    def layout(self) -> TableLayout:
        lay = dict(self.section("data").get("layout", {}))
        fc = lay.get("feature_columns")
        if isinstance(fc, str):
            a, b = (int(v) for v in fc.split(":"))
            lay["feature_columns"] = list(range(a, b))
        return TableLayout(**lay)

    def train_config(self, seed: Optional[int] = None) -> TrainConfig:
        t = {**DEFAULT_TRAIN, **self.section("train")}
        t.pop("runs")
        t["drops"] = tuple(tuple(d) for d in t["drops"])
        return TrainConfig(seed=self.seed if seed is None else seed, setting=self.setting, **t)

    @property
    def runs(self) -> int:
        return int(self.section("train").get("runs", 1))

    def model_spec(self, input_shape, normalizer: Optional[str] = None) -> ModelSpec:
        m = self.section("model")
        norm = normalizer or m.get("normalizer", "bin")
        head = m.get("head", "softmax3" if self.setting == 1 else "softmax2_plus_regression")
        if "layers" in m:
            return ModelSpec(norm, tuple(m["layers"]), head, tuple(input_shape))
        build = c_shape if m.get("shape", "C") == "C" else b_shape
        return build(norm, head, tuple(input_shape))


def validate(raw: dict) -> None:
    try:
        jsonschema.validate(raw, schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    cfg = RunConfig(raw)
    try:
        cfg.label_config()
        cfg.train_config()
        cfg.layout()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config error: {exc}") from None
    head = raw.get("model", {}).get("head")
    if head is not None and (head == "softmax3") != (cfg.setting == 1):
        raise ConfigError(f"config error: head {head!r} does not match labels.setting={cfg.setting}")


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
    raw = copy.deepcopy(raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
    validate(raw)
    return RunConfig(raw, Path(path) if path else None)
