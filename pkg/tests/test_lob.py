from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from binorm.lob import (
    Direction,
    LabelConfig,
    LobEvent,
    Movement,
    TableLayout,
    TableParseError,
    TableShapeError,
    TableIOError,
    build_dataset,
    label_movement,
    label_next_move,
    load_table,
    mid_price,
    pattern_templates,
    synth_dataset,
    synth_regime_data,
)
from binorm.series import SampleStream, ValidationError
from oracles import exact_mid, movement_label, next_move


def random_path(rng, n=300):
    steps = rng.normal(0, 2e-4, n) * (rng.random(n) < 0.6)  # many flat steps keep stationary labels frequent
    return 100.0 * np.exp(np.cumsum(steps))


def lob_stream(mids, D=8):
    v = np.zeros((len(mids), D))
    v[:, 0] = mids + 0.01
    v[:, 2] = mids - 0.01
    v[:, 1] = v[:, 3] = 5.0
    v[:, 4:] = np.arange(D - 4)
    return v


class TestMidPrice:
    def test_definition(self):
        assert mid_price(LobEvent(np.array([[12.0, 1, 10, 1]]))) == 11
        assert mid_price(LobEvent(np.array([[10.0, 1, 10, 1]]))) == 10

    def test_exact_decimal(self):
        ev = LobEvent(np.array([[100.08, 1, 100.02, 1]]))
        got = mid_price(ev, tick_factor=100)
        assert exact_mid(100.08, 100.02) == Fraction(10005, 100)
        assert got == float(exact_mid(100.08, 100.02)) == 100.05

    def test_crossed_book_rejected(self):
        with pytest.raises(ValidationError):
            LobEvent(np.array([[9.0, 1, 10, 1]]))


class TestLabels:
    def test_hand_example_up(self):
        cfg = LabelConfig(horizon=2, threshold=1e-5)
        assert label_movement([100.0, 100.2, 100.4], 0, cfg) == Movement.UP

    def test_constant_future_is_stationary(self):
        assert label_movement(np.full(20, 50.0), 3, LabelConfig(horizon=5, threshold=1e-12)) == Movement.STATIONARY

    def test_threshold_tie_is_stationary(self):
        alpha = 0.25
        assert label_movement([4.0, 5.0], 0, LabelConfig(horizon=1, threshold=alpha)) == Movement.STATIONARY
        assert label_movement([4.0, 3.0], 0, LabelConfig(horizon=1, threshold=alpha)) == Movement.STATIONARY

    def test_horizon_must_fit(self):
        assert label_movement([1.0, 2.0, 3.0], 1, LabelConfig(horizon=2)) is None

    def test_next_move_rise_at_three(self):
        prices = [100.0, 100.0, 100.0005, 100.002, 100.01, 100.02]
        assert label_next_move(prices, 0, LabelConfig(threshold=1e-5)) == (Direction.UP, 3)

    def test_next_move_flat_and_drop(self):
        assert label_next_move(np.full(30, 7.0), 0, LabelConfig()) is None
        assert label_next_move([10.0, 9.0, 11.0], 0, LabelConfig()) == (Direction.DOWN, 1)

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("rule", ["forward", "symmetric"])
    def test_movement_matches_oracle(self, seed, rule):
        rng = np.random.default_rng(seed)
        p = random_path(rng)
        for k in (1, 5, 10):
            cfg = LabelConfig(horizon=k, threshold=2e-5, rule=rule)
            for t in range(len(p)):
                got = label_movement(p, t, cfg)
                assert (None if got is None else int(got)) == movement_label(p.tolist(), t, k, 2e-5, rule)

    @pytest.mark.parametrize("seed", range(10))
    def test_next_move_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        p = random_path(rng)
        for s, mh in ((1, 1000), (3, 20)):
            cfg = LabelConfig(threshold=2e-5, smoothing=s, max_horizon=mh)
            for t in range(len(p)):
                got = label_next_move(p, t, cfg)
                got = None if got is None else (int(got[0]), got[1])
                assert got == next_move(p.tolist(), t, 2e-5, s, mh)

    @given(st.integers(0, 2**31 - 1), st.floats(0.01, 100))
    def test_scale_invariant(self, seed, c):
        p = random_path(np.random.default_rng(seed), 60)
        cfg = LabelConfig(horizon=4, threshold=1e-4)
        for t in range(len(p)):
            assert label_movement(p, t, cfg) == label_movement(p * c, t, cfg)

    @given(st.integers(0, 2**31 - 1))
    def test_next_move_horizon_bounds(self, seed):
        p = random_path(np.random.default_rng(seed), 80)
        cfg = LabelConfig(threshold=1e-5, max_horizon=15)
        for t in range(len(p)):
            r = label_next_move(p, t, cfg)
            if r is not None:
                assert 1 <= r[1] <= 15 and r[0] in (Direction.UP, Direction.DOWN)

    def test_random_walk_symmetry(self):
        rng = np.random.default_rng(123)
        p = 100 * np.exp(np.cumsum(rng.choice([-1e-4, 1e-4], size=20001)))
        cfg = LabelConfig(horizon=1, threshold=1e-5)
        labels = [label_movement(p, t, cfg) for t in range(0, 20000, 2)]  # disjoint steps are independent
        up = sum(l == Movement.UP for l in labels)
        down = sum(l == Movement.DOWN for l in labels)
        n = up + down
        assert abs(up - n / 2) < 3 * np.sqrt(n / 4)


class TestBuildDataset:
    def test_count_bound(self):
        p = random_path(np.random.default_rng(0), 100)
        s = SampleStream(lob_stream(p), mids=p)
        tr, te = build_dataset(s, LabelConfig(horizon=10), 10, train_fraction=0.7)
        assert len(tr) + len(te) <= 81
        full, _ = build_dataset(s, LabelConfig(horizon=10), 10, train_fraction=0.999)
        assert len(full) == 81

    def test_constant_stream_all_stationary(self):
        s = SampleStream(lob_stream(np.full(60, 20.0)))
        tr, te = build_dataset(s, LabelConfig(horizon=5), 10)
        assert set(tr.labels) == set(te.labels) == {int(Movement.STATIONARY)}

    def test_labels_match_oracle(self):
        p = random_path(np.random.default_rng(1), 200)
        s = SampleStream(lob_stream(p), mids=p)
        tr, te = build_dataset(s, LabelConfig(horizon=5, threshold=2e-5), 10)
        for ds in (tr, te):
            for e, lab in zip(ds.end_index, ds.labels):
                assert lab == movement_label(p.tolist(), int(e), 5, 2e-5)
            for i in range(len(ds)):
                np.testing.assert_array_equal(ds.X[i], s.values[ds.end_index[i] - 9 : ds.end_index[i] + 1].T)

    def test_day_split_chronology(self):
        p = random_path(np.random.default_rng(2), 500)
        days = np.repeat(np.arange(10), 50)
        s = SampleStream(lob_stream(p), days=days, mids=p)
        tr, te = build_dataset(s, LabelConfig(horizon=5), 10)
        assert tr.end_index.max() < te.end_index.min() - 9 + 1
        assert tr.meta["split_boundary"] == 350
        assert tr.end_index.max() < 350 <= te.end_index.min() - 9

    def test_setting2(self):
        p = random_path(np.random.default_rng(3), 200)
        tr, te = build_dataset(SampleStream(lob_stream(p), mids=p), LabelConfig(threshold=2e-5, max_horizon=50), 10, setting=2)
        assert tr.n_classes == 2 and set(np.unique(tr.labels)) <= {0, 1}
        assert tr.horizons.min() >= 1 and tr.horizons.max() <= 50
        for e, lab, h in zip(tr.end_index, tr.labels, tr.horizons):
            assert (lab, h) == next_move(p.tolist(), int(e), 2e-5, 1, 50)

    def test_horizon_too_long(self):
        s = SampleStream(lob_stream(np.linspace(10, 11, 30)))
        with pytest.raises(ValidationError, match="horizon"):
            build_dataset(s, LabelConfig(horizon=50), 10)


class TestTables:
    def test_rows_parse(self, tmp_path):
        f = tmp_path / "a.csv"
        rows = np.random.default_rng(0).uniform(1, 2, (3, 40))
        rows[:, 0] = rows[:, 2] + 0.5  # ask above bid
        f.write_text("\n".join(",".join(repr(float(v)) for v in r) for r in rows))
        s = load_table(f)
        assert (s.T, s.D) == (3, 40)
        np.testing.assert_array_equal(s.values, rows)

    def test_columns_orientation(self, tmp_path):
        rows = np.random.default_rng(1).uniform(1, 2, (3, 40))
        rows[:, 0] = rows[:, 2] + 0.5
        a, b = tmp_path / "rows.txt", tmp_path / "cols.txt"
        a.write_text("\n".join(" ".join(repr(float(v)) for v in r) for r in rows))
        b.write_text("\n".join(" ".join(repr(float(v)) for v in r) for r in rows.T))
        sa = load_table(a, TableLayout(delimiter=" "))
        sb = load_table(b, TableLayout(delimiter=" ", orientation="columns"))
        np.testing.assert_array_equal(sa.values, sb.values)

    def test_parse_error_location(self, tmp_path):
        f = tmp_path / "bad.csv"
        f.write_text("3,1,2,1,1,1\n3,1,2,1,abc,1\n")
        with pytest.raises(TableParseError) as exc:
            load_table(f)
        assert (exc.value.row, exc.value.col) == (2, 5)
        assert "row 2, column 5" in str(exc.value)

    def test_ragged_and_missing(self, tmp_path):
        f = tmp_path / "r.csv"
        f.write_text("3,1,2,1\n3,1,2\n")
        with pytest.raises(TableShapeError):
            load_table(f)
        with pytest.raises(TableIOError):
            load_table(tmp_path / "nope.csv")


class TestSynth:
    def test_deterministic(self):
        a, la = synth_regime_data(5, 2, 20, 4, 6)
        b, lb = synth_regime_data(5, 2, 20, 4, 6)
        assert a.values.tobytes() == b.values.tobytes()
        np.testing.assert_array_equal(la, lb)

    def test_noiseless_template_matching(self):
        stream, labels = synth_regime_data(6, 1, 90, 5, 10, noise=0.0)
        X = stream.values.reshape(90, 10, 5).transpose(0, 2, 1)
        tmpl = pattern_templates(10)
        # template matching on per-feature centered series recovers the class exactly
        Xc = X - X.mean(axis=2, keepdims=True)
        scores = np.einsum("ndh,kh->nk", Xc, tmpl - tmpl.mean(axis=1, keepdims=True))
        pred = np.where(np.abs(scores).max(axis=1) < 1e-9, 2, scores.argmax(axis=1))
        np.testing.assert_array_equal(pred, labels)

    def test_regimes_disjoint(self):
        stream, _ = synth_regime_data(7, 3, 200, 6, 10)
        for r in range(2):
            lo = stream.values[stream.days == r]
            hi = stream.values[stream.days == r + 1]
            assert np.all(hi.min(axis=0) > lo.max(axis=0))

    def test_dataset_split(self):
        tr, te = synth_dataset(1, 4, 30, 3, 5, n_train=80)
        assert len(tr) == 80 and len(te) == 40
        assert tr.X.shape == (80, 3, 5)
        assert tr.end_index.max() < te.end_index.min()
