import json

import numpy as np
import pytest
import yaml

from binorm.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, format_table, main
from binorm.config import ConfigError, load_config
from binorm.formats import load_checkpoint, load_history

SMALL_MODEL = {"shape": "B", "layers": [{"kind": "bilinear", "out": [4, 3], "activation": "relu"}, {"kind": "tabl", "out": [3, 1], "activation": "identity"}]}
SYNTH = {"n_regimes": 2, "samples_per_regime": 60, "D": 6, "H": 5, "noise": 0.5, "n_train": 80}


def write_config(tmp_path, name="cfg.yaml", **sections):
    raw = {"seed": 3, "synth": SYNTH, "model": SMALL_MODEL, "train": {"epochs": 3, "batch_size": 16}}
    raw.update(sections)
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return path


def run(path, *argv, out=None):
    args = ["--config", str(path)] + (["--out", str(out)] if out else [])
    return main(list(argv[:1]) + args + list(argv[1:]))


def fi2010_file(path, T=400, seed=0):
    """Features-as-rows file: 40 LOB rows, 104 auxiliary rows and 5 label rows."""
    rng = np.random.default_rng(seed)
    mid = 10 * np.exp(np.cumsum(rng.normal(0, 5e-4, T) * (rng.random(T) < 0.5)))
    rows = np.zeros((149, T))
    for lvl in range(10):
        rows[4 * lvl] = mid + 0.01 * (lvl + 1)
        rows[4 * lvl + 2] = mid - 0.01 * (lvl + 1)
        rows[4 * lvl + 1] = rows[4 * lvl + 3] = rng.integers(1, 100, T)
    rows[40:144] = rng.normal(size=(104, T))
    rows[144:] = rng.integers(1, 4, (5, T))
    path.write_text("\n".join("  ".join(f"{v:.10g}" for v in r) for r in rows) + "\n")
    return path


FI_LAYOUT = {"delimiter": "whitespace", "orientation": "columns", "feature_columns": "0:40"}


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path, capsys):
        path = write_config(tmp_path, bogus=1)
        out = tmp_path / "o"
        assert run(path, "synth", out=out) == EXIT_INVALID
        assert not out.exists()
        assert "bogus" in capsys.readouterr().err

    def test_bad_types(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, train={"epochs": "many"}))
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, labels={"setting": 1}, model={"head": "softmax2_plus_regression"}))

    def test_hash_ignores_out_and_threads(self, tmp_path):
        p = write_config(tmp_path)
        a = load_config(p, {"out": "x", "threads": 2})
        b = load_config(p, {"out": "y", "threads": None})
        assert a.hash == b.hash
        assert load_config(p, {"seed": 4}).hash != a.hash

    def test_missing_config_file(self, tmp_path):
        assert main(["synth", "--config", str(tmp_path / "none.yaml")]) == EXIT_INVALID


class TestSynthAndPrepare:
    def test_synth_deterministic(self, tmp_path):
        p = write_config(tmp_path)
        assert run(p, "synth", out=tmp_path / "a") == EXIT_OK
        assert run(p, "synth", out=tmp_path / "b") == EXIT_OK
        for f in ("train.ds", "test.ds", "manifest.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_synth_bad_split(self, tmp_path):
        p = write_config(tmp_path, synth={**SYNTH, "n_train": 500})
        assert run(p, "synth", out=tmp_path / "o") == EXIT_INVALID

    def test_prepare_fi2010_layout(self, tmp_path):
        fi2010_file(tmp_path / "day1.txt", seed=1)
        fi2010_file(tmp_path / "day2.txt", seed=2)
        p = write_config(
            tmp_path,
            data={"files": ["day1.txt", "day2.txt"], "train_days": 1, "layout": FI_LAYOUT},
            labels={"setting": 1, "horizon": 10, "threshold": 2e-5},
        )
        assert run(p, "prepare", out=tmp_path / "o") == EXIT_OK
        man = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert man["D"] == 40 and man["H"] == 10
        for split in ("train", "test"):
            counts = man["splits"][split]["class_counts"]
            assert set(counts) == {"up", "stationary", "down"}
            assert sum(counts.values()) == man["splits"][split]["n"] > 0

    def test_prepare_horizon_too_long(self, tmp_path, capsys):
        fi2010_file(tmp_path / "d.txt", T=60)
        p = write_config(tmp_path, data={"files": ["d.txt"], "train_fraction": 0.7, "layout": FI_LAYOUT}, labels={"horizon": 100})
        assert run(p, "prepare", out=tmp_path / "o") == EXIT_INVALID
        assert "horizon" in capsys.readouterr().err
        assert not (tmp_path / "o" / "train.ds").exists()

    def test_prepare_missing_file(self, tmp_path):
        p = write_config(tmp_path, data={"files": ["missing.txt"]})
        assert run(p, "prepare", out=tmp_path / "o") == EXIT_INVALID


@pytest.fixture
def synth_dir(tmp_path):
    p = write_config(tmp_path)
    out = tmp_path / "run"
    assert run(p, "synth", out=out) == EXIT_OK
    return p, out


class TestTrainEval:
    def test_history_rows_and_hash(self, tmp_path, synth_dir):
        p, out = synth_dir
        assert run(p, "train", out=out) == EXIT_OK
        rows = load_history(out / "run0" / "history.tsv")
        assert len(rows) == 3
        h = load_config(p).hash
        for f in ("run0/history.tsv", "run0/timing.tsv", "summary.txt", "manifest.json", "summary.json", "train.ds"):
            assert h in (out / f).read_text(), f
        assert load_checkpoint(out / "run0" / "checkpoint.json")["config_hash"] == h

    def test_median_over_runs(self, tmp_path):
        p = write_config(tmp_path, train={"epochs": 2, "batch_size": 16, "runs": 5})
        out = tmp_path / "o"
        assert run(p, "synth", out=out) == EXIT_OK
        assert run(p, "train", out=out) == EXIT_OK
        s = json.loads((out / "summary.json").read_text())
        assert s["seeds"] == [3, 4, 5, 6, 7]
        for k, v in s["median"].items():
            assert v == pytest.approx(float(np.median([r["metrics"][k] for r in s["runs"]])))

    def test_byte_identical_reruns(self, tmp_path):
        p = write_config(tmp_path)
        for d in ("a", "b"):
            assert run(p, "synth", out=tmp_path / d) == EXIT_OK
            assert run(p, "train", out=tmp_path / d) == EXIT_OK
        for f in ("run0/checkpoint.json", "run0/history.tsv", "summary.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_eval_reproduces_final_train_metrics(self, synth_dir):
        p, out = synth_dir
        assert run(p, "train", out=out) == EXIT_OK
        assert run(p, "eval", "--checkpoint", str(out / "run0" / "checkpoint.json"), "--split", "train", out=out) == EXIT_OK
        got = json.loads((out / "eval_train.json").read_text())["metrics"]
        last = load_history(out / "run0" / "history.tsv")[-1]
        for k in ("accuracy", "f1", "loss"):
            assert got[k] == pytest.approx(last[f"train_{k}"], rel=1e-12)

    def test_eval_corrupt_checkpoint(self, synth_dir):
        p, out = synth_dir
        assert run(p, "train", out=out) == EXIT_OK
        ck = out / "run0" / "checkpoint.json"
        ck.write_text(ck.read_text().replace("0.", "1.", 1))
        assert run(p, "eval", "--checkpoint", str(ck), out=out) != EXIT_OK

    def test_eval_shape_mismatch(self, tmp_path, synth_dir):
        p, out = synth_dir
        assert run(p, "train", out=out) == EXIT_OK
        q = write_config(tmp_path, "other.yaml", synth={**SYNTH, "D": 7})
        assert run(q, "synth", out=tmp_path / "other") == EXIT_OK
        assert run(q, "eval", "--checkpoint", str(out / "run0" / "checkpoint.json"), out=tmp_path / "other") == EXIT_INVALID

    def test_setting2_report_has_rmse(self, tmp_path):
        fi2010_file(tmp_path / "d.txt", T=300, seed=5)
        p = write_config(
            tmp_path,
            data={"files": ["d.txt"], "train_fraction": 0.7, "layout": FI_LAYOUT},
            labels={"setting": 2, "threshold": 2e-5, "max_horizon": 50},
            model={"shape": "B", "layers": SMALL_MODEL["layers"]},
            train={"epochs": 2, "batch_size": 16},
        )
        out = tmp_path / "o"
        assert run(p, "prepare", out=out) == EXIT_OK
        assert run(p, "train", out=out) == EXIT_OK
        assert run(p, "eval", "--checkpoint", str(out / "run0" / "checkpoint.json"), out=out) == EXIT_OK
        assert "rmse" in json.loads((out / "eval_test.json").read_text())["metrics"]
        assert "rmse" in (out / "summary.txt").read_text()

    def test_train_without_dataset(self, tmp_path):
        assert run(write_config(tmp_path), "train", out=tmp_path / "empty") == EXIT_INVALID


class TestGradcheckCommand:
    def test_corrupt_component_fails(self, tmp_path):
        p = write_config(tmp_path, gradcheck={"instances": 2, "extra_instances": 1})
        out = tmp_path / "g"
        assert run(p, "gradcheck", "--only", "bin", "tabl_relu", "--corrupt", "bin", out=out) == EXIT_RUNTIME
        lines = (out / "gradcheck.txt").read_text().splitlines()
        bin_rows = [l for l in lines if l.startswith("bin ")]
        assert {l.split()[1] for l in bin_rows} == {"gamma1", "beta1", "gamma2", "beta2", "lam_a", "lam_b", "X"}
        assert all(l.endswith("FAIL") for l in bin_rows)
        assert all(l.endswith("PASS") for l in lines if l.startswith("tabl_relu"))

    def test_clean_subset_passes(self, tmp_path):
        p = write_config(tmp_path, gradcheck={"instances": 2})
        assert run(p, "gradcheck", "--only", "loss_setting1", "dain", out=tmp_path / "g") == EXIT_OK

    def test_unknown_component(self, tmp_path):
        assert run(write_config(tmp_path), "gradcheck", "--corrupt", "nope", out=tmp_path / "g") == EXIT_INVALID


class TestCompare:
    def test_three_row_table(self, tmp_path, synth_dir):
        p, out = synth_dir
        assert run(p, "compare", out=out) == EXIT_OK
        lines = (out / "compare.txt").read_text().splitlines()
        body = [l for l in lines[1:] if not l.startswith("#")]
        assert [l.split()[0] for l in body] == ["none", "zscore", "bin"]
        assert sum(l.endswith("*") for l in body) == 1
        assert lines[-1] == f"# seeds=3 config={load_config(p).hash}"
        assert (out / "compare" / "bin" / "run0" / "history.tsv").exists()

    def test_invalid_row_trains_nothing(self, tmp_path, synth_dir):
        _, out = synth_dir
        p = write_config(tmp_path, "bad.yaml", compare={"normalizers": ["bin", "layernorm"]})
        assert run(p, "compare", out=out) == EXIT_INVALID
        assert not (out / "compare").exists()

    def test_tie_goes_to_first_listed(self):
        m = {"accuracy": 0.5, "precision": 0.5, "recall": 0.5, "f1": 0.5}
        table = format_table({"zscore": m, "bin": dict(m)}, ("accuracy", "f1"), [1, 2], "h")
        lines = table.splitlines()
        assert lines[1].endswith("*") and not lines[2].endswith("*")
        assert lines[-1] == "# seeds=1,2 config=h"
