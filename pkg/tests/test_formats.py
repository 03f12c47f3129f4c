import json

import numpy as np
import pytest

from binorm.backbone import c_shape, init_params
from binorm.formats import (
    ChecksumError,
    FormatError,
    load_checkpoint,
    load_dataset,
    load_history,
    save_checkpoint,
    save_dataset,
    save_history,
)
from binorm.lob import LabeledDataset
from binorm.training import AdamState, TrainConfig, train


def dataset(setting=1, n=12, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 4, 3)) * 1e3
    if setting == 1:
        return LabeledDataset(X, rng.integers(0, 3, n), 1, end_index=np.arange(n) + 2)
    return LabeledDataset(X, rng.integers(0, 2, n), 2, rng.integers(1, 9, n), np.arange(n) + 2)


@pytest.mark.parametrize("setting", [1, 2])
def test_dataset_roundtrip_is_exact(tmp_path, setting):
    ds = dataset(setting)
    save_dataset(ds, tmp_path / "d.ds", "h1")
    back = load_dataset(tmp_path / "d.ds")
    assert back.X.tobytes() == ds.X.tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.end_index, ds.end_index)
    if setting == 2:
        np.testing.assert_array_equal(back.horizons, ds.horizons)
    assert back.meta["config_hash"] == "h1"
    assert "config=h1" in (tmp_path / "d.ds").read_text().splitlines()[0]


def test_dataset_truncated(tmp_path):
    save_dataset(dataset(), tmp_path / "d.ds")
    lines = (tmp_path / "d.ds").read_text().splitlines()
    (tmp_path / "d.ds").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "d.ds")


@pytest.mark.parametrize("normalizer", ["bin", "dain", "bn", "zscore", "minmax", "none"])
def test_checkpoint_roundtrip(tmp_path, normalizer):
    spec = c_shape(normalizer, "softmax3", (4, 3))
    ds = dataset()
    res = train(spec, ds, TrainConfig(epochs=2, batch_size=5))
    save_checkpoint(tmp_path / "c.json", spec, res.params, res.state, 2, {"epochs": 2}, "hash")
    ck = load_checkpoint(tmp_path / "c.json")
    assert ck["spec"] == spec and ck["epoch"] == 2 and ck["config_hash"] == "hash"
    for k, v in res.params.tensors(False).items():
        assert ck["params"].tensors(False)[k].tobytes() == v.tobytes()
    assert ck["state"].t == res.state.t


def test_checkpoint_corruption(tmp_path):
    spec = c_shape("bin", "softmax3", (4, 3))
    save_checkpoint(tmp_path / "c.json", spec, init_params(spec), AdamState(), 0, {})
    doc = json.loads((tmp_path / "c.json").read_text())
    doc["payload"]["tensors"]["head.b"]["data"][0] = 1.0
    (tmp_path / "c.json").write_text(json.dumps(doc))
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "c.json")
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "c.json")


def test_history_roundtrip(tmp_path):
    spec = c_shape("zscore", "softmax3", (4, 3))
    res = train(spec, dataset(), TrainConfig(epochs=3, batch_size=5), test=dataset(seed=1))
    save_history(res.history, tmp_path / "h.tsv", "cfg")
    rows = load_history(tmp_path / "h.tsv")
    assert len(rows) == 3
    assert rows == res.history.rows
    assert (tmp_path / "h.tsv").read_text().startswith("# config=cfg")
