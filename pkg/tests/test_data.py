"""Data handling: ingestion, labeling, features, splits, co-movement."""

import numpy as np
import pytest

from lobnet.data import (
    DataError,
    IngestError,
    JointMove,
    LabeledSample,
    LOBState,
    N_LEVELS,
    NormalizationStats,
    build_dataset,
    comovement_stats,
    featureize,
    imbalance_features,
    ingest_events,
    label_case1,
    label_case2,
    read_labeled,
    remove_halts,
    split,
    write_events,
    write_labeled,
)

SEC = 1_000_000_000


def make_state(ts=0, ask=101, bid=100, ask_sizes=None, bid_sizes=None, halted=False):
    return LOBState(
        timestamp=ts,
        best_ask_price=ask,
        best_bid_price=bid,
        ask_sizes=np.full(N_LEVELS, 10) if ask_sizes is None else ask_sizes,
        bid_sizes=np.full(N_LEVELS, 10) if bid_sizes is None else bid_sizes,
        halted=halted,
    )


class TestLOBState:
    def test_spread_invariant(self):
        with pytest.raises(DataError, match="exceed"):
            make_state(ask=100, bid=100)

    def test_negative_size_rejected(self):
        sizes = np.full(N_LEVELS, 5)
        sizes[3] = -1
        with pytest.raises(DataError, match="nonnegative"):
            make_state(ask_sizes=sizes)

    def test_vector_length(self):
        with pytest.raises(DataError, match="50"):
            make_state(ask_sizes=np.ones(10, dtype=np.int64))


class TestIngest:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        assert ingest_events(path) == []

    def test_round_trip(self, tmp_path):
        states = [make_state(ts=i * SEC, ask=101 + i) for i in range(3)]
        path = tmp_path / "events.csv"
        write_events(states, path)
        back = ingest_events(path)
        assert len(back) == 3
        for a, b in zip(states, back):
            assert a.timestamp == b.timestamp
            assert a.best_ask_price == b.best_ask_price
            np.testing.assert_array_equal(a.ask_sizes, b.ask_sizes)

    def test_negative_size_row_named(self, tmp_path):
        states = [make_state(ts=i * SEC) for i in range(3)]
        path = tmp_path / "events.csv"
        write_events(states, path)
        lines = path.read_text().splitlines()
        cells = lines[2].split(",")
        cells[5] = "-4"
        lines[2] = ",".join(cells)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(IngestError, match="row 2"):
            ingest_events(path)

    def test_non_monotone_time(self, tmp_path):
        states = [make_state(ts=2 * SEC), make_state(ts=1 * SEC)]
        path = tmp_path / "events.csv"
        write_events(states, path)
        with pytest.raises(IngestError, match="timestamp"):
            ingest_events(path)

    def test_malformed_cell_row_named(self, tmp_path):
        states = [make_state(ts=i * SEC) for i in range(2)]
        path = tmp_path / "events.csv"
        write_events(states, path)
        text = path.read_text().replace("101", "abc", 1)
        path.write_text(text)
        with pytest.raises(IngestError, match="row 1"):
            ingest_events(path)

    def test_labeled_round_trip(self, tmp_path):
        samples = [
            LabeledSample(state=make_state(ts=i * SEC), label=JointMove(i - 1, 0))
            for i in range(3)
        ]
        path = tmp_path / "labeled.csv"
        write_labeled(samples, path)
        back = read_labeled(path)
        assert [s.label.as_tuple() for s in back] == [(-1, 0), (0, 0), (1, 0)]


class TestHalts:
    def test_no_halts_identity(self):
        states = [make_state(ts=i) for i in range(4)]
        assert remove_halts(states) == states

    def test_all_halted(self):
        states = [make_state(ts=i, halted=True) for i in range(4)]
        assert remove_halts(states) == []

    def test_alternating(self):
        states = [make_state(ts=i, halted=bool(i % 2)) for i in range(6)]
        kept = remove_halts(states)
        assert [s.timestamp for s in kept] == [0, 2, 4]


class TestLabelCase1:
    def test_constant_book(self):
        states = [make_state(ts=i * SEC) for i in range(5)]
        samples = label_case1(states, dt_ns=SEC, clock_ns=SEC)
        assert samples
        assert all(s.label.as_tuple() == (0, 0) for s in samples)

    def test_single_ask_rise(self):
        states = [
            make_state(ts=0),
            make_state(ts=SEC // 2, ask=102),
            make_state(ts=2 * SEC, ask=102),
        ]
        samples = label_case1(states, dt_ns=SEC, clock_ns=SEC)
        assert samples[0].label.as_tuple() == (1, 0)

    def test_scripted_path(self):
        # ask path per second: 101, 103, 102, 102; bid: 100, 100, 101, 99
        asks = [101, 103, 102, 102]
        bids = [100, 100, 101, 99]
        states = [
            make_state(ts=i * SEC, ask=a, bid=b) for i, (a, b) in enumerate(zip(asks, bids))
        ]
        samples = label_case1(states, dt_ns=SEC, clock_ns=SEC)
        want = [
            (asks[i + 1] - asks[i], bids[i + 1] - bids[i]) for i in range(3)
        ]
        assert [s.label.as_tuple() for s in samples] == want

    def test_missing_horizon_dropped(self):
        states = [make_state(ts=0)]
        assert label_case1(states, dt_ns=SEC, clock_ns=SEC) == []


class TestLabelCase2:
    def test_single_move(self):
        states = [make_state(ts=0, ask=100, bid=99), make_state(ts=1, ask=100, bid=99),
                  make_state(ts=2, ask=101, bid=99)]
        samples = label_case2(states)
        assert len(samples) == 1
        assert samples[0].label.as_tuple() == (1, 0)
        assert samples[0].state is states[0]

    def test_no_moves(self):
        states = [make_state(ts=i) for i in range(5)]
        assert label_case2(states) == []

    def test_scripted_five_moves(self):
        asks = [100, 101, 101, 103, 103, 102, 102, 104]
        bids = [99, 99, 98, 98, 97, 97, 97, 97]
        states = [
            make_state(ts=i, ask=a, bid=b) for i, (a, b) in enumerate(zip(asks, bids))
        ]
        samples = label_case2(states)
        want = [(1, 0), (0, -1), (2, 0), (0, -1), (-1, 0), (2, 0)]
        assert [s.label.as_tuple() for s in samples] == want
        assert all(s.label.as_tuple() != (0, 0) for s in samples)


class TestFeatureize:
    def _stats(self):
        return NormalizationStats(
            ask_mean=np.full(N_LEVELS, 10.0),
            ask_std=np.full(N_LEVELS, 4.0),
            bid_mean=np.full(N_LEVELS, 10.0),
            bid_std=np.full(N_LEVELS, 4.0),
        )

    def test_mean_state_is_zero(self):
        f = featureize(make_state(), self._stats())
        np.testing.assert_array_equal(f[: 2 * N_LEVELS], 0.0)
        assert f[-1] == 1.0  # spread

    def test_one_std_above(self):
        sizes = np.full(N_LEVELS, 10)
        sizes[3] = 14
        f = featureize(make_state(ask_sizes=sizes), self._stats())
        assert f[3] == pytest.approx(1.0)

    def test_bid_sign_negated(self):
        sizes = np.full(N_LEVELS, 10)
        sizes[7] = 14
        f = featureize(make_state(bid_sizes=sizes), self._stats())
        assert f[N_LEVELS + 7] == pytest.approx(-1.0)

    def test_zero_std_passes_centered(self):
        stats = self._stats()
        stats.ask_std[0] = 0.0
        sizes = np.full(N_LEVELS, 10)
        sizes[0] = 13
        f = featureize(make_state(ask_sizes=sizes), stats)
        assert f[0] == pytest.approx(3.0)

    def test_training_set_standardization(self):
        rng = np.random.Generator(np.random.PCG64(0))
        states = [
            make_state(
                ts=i,
                ask_sizes=rng.integers(1, 100, N_LEVELS),
                bid_sizes=rng.integers(1, 100, N_LEVELS),
            )
            for i in range(500)
        ]
        stats = NormalizationStats.fit(states)
        F = np.stack([featureize(s, stats) for s in states])
        sizes = F[:, : 2 * N_LEVELS]
        assert np.abs(sizes.mean(axis=0)).max() < 1e-10
        assert np.abs(np.abs(sizes).std(axis=0) * 0 + sizes.std(axis=0)).max() == pytest.approx(
            1.0, abs=1e-10
        )


class TestImbalance:
    def test_balanced(self):
        imb = imbalance_features(make_state())
        np.testing.assert_array_equal(imb, 0.0)

    def test_exact_value(self):
        ask = np.full(N_LEVELS, 1)
        bid = np.full(N_LEVELS, 3)
        imb = imbalance_features(make_state(ask_sizes=ask, bid_sizes=bid))
        np.testing.assert_allclose(imb, 0.5)

    def test_boundary(self):
        ask = np.zeros(N_LEVELS, dtype=np.int64)
        bid = np.full(N_LEVELS, 5)
        imb = imbalance_features(make_state(ask_sizes=ask, bid_sizes=bid))
        np.testing.assert_allclose(imb, 1.0)

    def test_empty_pair_is_zero(self):
        ask = np.zeros(N_LEVELS, dtype=np.int64)
        bid = np.zeros(N_LEVELS, dtype=np.int64)
        imb = imbalance_features(make_state(ask_sizes=ask, bid_sizes=bid))
        np.testing.assert_array_equal(imb, 0.0)

    def test_range_random(self):
        rng = np.random.Generator(np.random.PCG64(1))
        for _ in range(100):
            s = make_state(
                ask_sizes=rng.integers(0, 1000, N_LEVELS),
                bid_sizes=rng.integers(0, 1000, N_LEVELS),
            )
            imb = imbalance_features(s)
            assert np.all((imb >= -1.0) & (imb <= 1.0))


class TestSplit:
    def _samples(self, n):
        return [
            LabeledSample(state=make_state(ts=i * SEC), label=JointMove(0, 0))
            for i in range(n)
        ]

    def test_fraction_arithmetic(self):
        parts = split(self._samples(1000), seed=0)
        assert len(parts.test) == 150
        assert len(parts.validation) == 42  # floor(0.05 * 850)
        assert len(parts.train) == 808

    def test_deterministic(self):
        samples = self._samples(500)
        a = split(samples, seed=7)
        b = split(samples, seed=7)
        np.testing.assert_array_equal(a.train, b.train)
        np.testing.assert_array_equal(a.validation, b.validation)

    def test_disjoint_and_complete(self):
        rng = np.random.Generator(np.random.PCG64(2))
        for n in (100, 237, 512):
            samples = self._samples(n)
            parts = split(samples, seed=int(rng.integers(1 << 30)))
            union = np.concatenate([parts.train, parts.validation, parts.test])
            assert len(np.unique(union)) == n

    def test_test_is_chronological_tail(self):
        parts = split(self._samples(200), seed=3)
        assert parts.test.min() == 200 - len(parts.test)

    def test_too_few_samples(self):
        with pytest.raises(DataError, match="100"):
            split(self._samples(99))


class TestComovement:
    def _sample(self, y1, y2, spread=1):
        return LabeledSample(
            state=make_state(ask=100 + spread, bid=100), label=JointMove(y1, y2)
        )

    def test_direct_count(self):
        samples = [self._sample(1, 1), self._sample(1, 0), self._sample(0, 0)]
        stats = comovement_stats(samples)
        assert stats["lockstep_rate"] == 0.5
        assert stats["single_side_rate"] == 0.5

    def test_all_lockstep(self):
        samples = [self._sample(2, 2), self._sample(-1, -1)]
        stats = comovement_stats(samples)
        assert stats["lockstep_rate"] == 1.0
        assert stats["single_side_rate"] == 0.0

    def test_no_moves_error(self):
        with pytest.raises(DataError, match="nonzero"):
            comovement_stats([self._sample(0, 0)])

    def test_spread_quantiles(self):
        samples = [self._sample(1, 0, spread=s) for s in (1, 1, 1, 2, 5)]
        stats = comovement_stats(samples)
        assert stats["spread_q50"] == 1.0


class TestDataset:
    def test_build_shapes(self):
        samples = [
            LabeledSample(state=make_state(ts=i), label=JointMove(1, 0)) for i in range(5)
        ]
        stats = NormalizationStats.fit([s.state for s in samples])
        ds = build_dataset(samples, stats)
        assert ds.features.shape == (5, 2 * N_LEVELS + 1)
        assert ds.imbalances.shape == (5, N_LEVELS)
        assert ds.labels.shape == (5, 2)
