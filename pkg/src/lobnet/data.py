"""Order-book snapshots, event ingestion, labeling, features, and splits.

A snapshot records the best bid/ask price in integer ticks and the share
sizes at the first 50 nonzero levels on each side.  Two labeling schemes
produce (y1, y2) = (change in best ask, change in best bid) in levels:
a fixed-horizon clock (label at t + dt) and a next-move scheme (label at
the first time either best price changes).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

N_LEVELS = 50

EVENT_COLUMNS = (
    ["ts_ns", "best_ask_ticks", "best_bid_ticks"]
    + [f"ask_{i}" for i in range(N_LEVELS)]
    + [f"bid_{i}" for i in range(N_LEVELS)]
    + ["halted"]
)
LABELED_COLUMNS = EVENT_COLUMNS + ["y1", "y2"]


class DataError(Exception):
    operation = "data"


class IngestError(DataError):
    operation = "data.ingest_events"


@dataclass
class LOBState:
    """One snapshot: prices in ticks, sizes over the first 50 levels a side."""

    timestamp: int  # nanoseconds since epoch
    best_ask_price: int
    best_bid_price: int
    ask_sizes: np.ndarray  # (50,) nonnegative share counts
    bid_sizes: np.ndarray
    halted: bool = False

    def __post_init__(self):
        self.ask_sizes = np.asarray(self.ask_sizes, dtype=np.int64)
        self.bid_sizes = np.asarray(self.bid_sizes, dtype=np.int64)
        if self.ask_sizes.shape != (N_LEVELS,) or self.bid_sizes.shape != (N_LEVELS,):
            raise DataError(f"size vectors must have exactly {N_LEVELS} entries")
        if (self.ask_sizes < 0).any() or (self.bid_sizes < 0).any():
            raise DataError("sizes must be nonnegative")
        if not self.best_ask_price > self.best_bid_price:
            raise DataError(
                f"best ask {self.best_ask_price} must exceed best bid {self.best_bid_price}"
            )

    @property
    def spread(self):
        return self.best_ask_price - self.best_bid_price


@dataclass(frozen=True)
class JointMove:
    """Label: change in (best ask, best bid), in integer levels."""

    y1: int
    y2: int

    def as_tuple(self):
        return (self.y1, self.y2)

    def __getitem__(self, i):
        return (self.y1, self.y2)[i]


@dataclass
class LabeledSample:
    state: LOBState
    label: JointMove

    @property
    def timestamp(self):
        return self.state.timestamp


# ---------------------------------------------------------------------------
# CSV event files
# ---------------------------------------------------------------------------


def ingest_events(path):
    """Read an event CSV into time-ordered LOBStates.

    Malformed rows and invariant violations are reported with their 1-based
    data row number (header excluded).
    """
    try:
        frame = pd.read_csv(path, dtype=np.int64)
    except pd.errors.EmptyDataError:
        return []
    except ValueError:
        _locate_bad_row(path)
        raise
    if list(frame.columns) != EVENT_COLUMNS:
        raise IngestError(
            f"{path}: expected header {','.join(EVENT_COLUMNS[:4])},...; got "
            f"{','.join(map(str, frame.columns[:4]))},..."
        )
    return _states_from_frame(frame, str(path))


def _locate_bad_row(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        n_cols = len(header.rstrip("\n").split(","))
        for i, line in enumerate(fh, start=1):
            cells = line.rstrip("\n").split(",")
            if len(cells) != n_cols:
                raise IngestError(f"{path}: row {i}: expected {n_cols} fields, got {len(cells)}")
            for c in cells:
                try:
                    int(c)
                except ValueError:
                    raise IngestError(f"{path}: row {i}: non-integer field {c!r}") from None


def _states_from_frame(frame, origin):
    if len(frame) == 0:
        return []
    ts = frame["ts_ns"].to_numpy()
    if (np.diff(ts) < 0).any():
        bad = int(np.argmax(np.diff(ts) < 0)) + 2
        raise IngestError(f"{origin}: row {bad}: timestamp decreases")
    ask = frame[[f"ask_{i}" for i in range(N_LEVELS)]].to_numpy()
    bid = frame[[f"bid_{i}" for i in range(N_LEVELS)]].to_numpy()
    if (ask < 0).any() or (bid < 0).any():
        bad = int(np.argmax((ask < 0).any(axis=1) | (bid < 0).any(axis=1))) + 1
        raise IngestError(f"{origin}: row {bad}: negative size")
    spread_ok = frame["best_ask_ticks"].to_numpy() > frame["best_bid_ticks"].to_numpy()
    if not spread_ok.all():
        bad = int(np.argmax(~spread_ok)) + 1
        raise IngestError(f"{origin}: row {bad}: best ask must exceed best bid")
    states = []
    aask = frame["best_ask_ticks"].to_numpy()
    abid = frame["best_bid_ticks"].to_numpy()
    halted = frame["halted"].to_numpy()
    for i in range(len(frame)):
        states.append(
            LOBState(
                timestamp=int(ts[i]),
                best_ask_price=int(aask[i]),
                best_bid_price=int(abid[i]),
                ask_sizes=ask[i],
                bid_sizes=bid[i],
                halted=bool(halted[i]),
            )
        )
    return states


def write_events(states, path):
    _write_rows(states, None, path)


def write_labeled(samples, path):
    states = [s.state for s in samples]
    labels = np.array([(s.label.y1, s.label.y2) for s in samples], dtype=np.int64)
    _write_rows(states, labels, path)


def _write_rows(states, labels, path):
    n = len(states)
    empty = np.zeros((0, N_LEVELS), dtype=np.int64)
    ask = np.array([s.ask_sizes for s in states], dtype=np.int64) if n else empty
    bid = np.array([s.bid_sizes for s in states], dtype=np.int64) if n else empty
    cols = {
        "ts_ns": np.array([s.timestamp for s in states], dtype=np.int64),
        "best_ask_ticks": np.array([s.best_ask_price for s in states], dtype=np.int64),
        "best_bid_ticks": np.array([s.best_bid_price for s in states], dtype=np.int64),
    }
    for i in range(N_LEVELS):
        cols[f"ask_{i}"] = ask[:, i]
    for i in range(N_LEVELS):
        cols[f"bid_{i}"] = bid[:, i]
    cols["halted"] = np.array([int(s.halted) for s in states], dtype=np.int64)
    if labels is not None:
        cols["y1"] = labels[:, 0] if n else np.zeros(0, dtype=np.int64)
        cols["y2"] = labels[:, 1] if n else np.zeros(0, dtype=np.int64)
    pd.DataFrame(cols).to_csv(path, index=False, lineterminator="\n")


def read_labeled(path):
    """Read a labeled-dataset CSV (event columns plus y1, y2)."""
    try:
        frame = pd.read_csv(path, dtype=np.int64)
    except ValueError:
        _locate_bad_row(path)
        raise
    if list(frame.columns) != LABELED_COLUMNS:
        raise IngestError(f"{path}: expected labeled-dataset header with y1,y2")
    states = _states_from_frame(frame[EVENT_COLUMNS], str(path))
    y1 = frame["y1"].to_numpy()
    y2 = frame["y2"].to_numpy()
    return [
        LabeledSample(state=st, label=JointMove(int(y1[i]), int(y2[i])))
        for i, st in enumerate(states)
    ]


# ---------------------------------------------------------------------------
# halts and labeling
# ---------------------------------------------------------------------------


def remove_halts(states):
    """Drop snapshots flagged as trading halts, preserving order."""
    return [s for s in states if not s.halted]


def label_case1(states, dt_ns=1_000_000_000, clock_ns=1_000_000_000):
    """Fixed-horizon labels: the change in best prices between t and t + dt.

    Snapshots are taken on a clock of period `clock_ns` starting at the
    first event (pass clock_ns=None to snapshot at every event).  The book
    at any time is the last event at or before it; snapshot times whose
    horizon extends past the last event are dropped.
    """
    if not states:
        return []
    ts = np.array([s.timestamp for s in states], dtype=np.int64)
    if clock_ns is None:
        snap_times = ts
    else:
        snap_times = np.arange(ts[0], ts[-1] + 1, clock_ns, dtype=np.int64)
    # last event index at or before each time
    at = np.searchsorted(ts, snap_times, side="right") - 1
    horizon = snap_times + dt_ns
    keep = horizon <= ts[-1]
    at_future = np.searchsorted(ts, horizon, side="right") - 1
    samples = []
    for i in np.nonzero(keep)[0]:
        now = states[at[i]]
        fut = states[at_future[i]]
        samples.append(
            LabeledSample(
                state=now,
                label=JointMove(
                    fut.best_ask_price - now.best_ask_price,
                    fut.best_bid_price - now.best_bid_price,
                ),
            )
        )
    return samples


def label_case2(states):
    """Next-move labels: one sample per interval between best-price changes.

    The reference state starts at the first event and advances to each
    state where either best price differs from the reference; every emitted
    label has y1 != 0 or y2 != 0.
    """
    samples = []
    if not states:
        return samples
    ref = states[0]
    for st in states[1:]:
        dy1 = st.best_ask_price - ref.best_ask_price
        dy2 = st.best_bid_price - ref.best_bid_price
        if dy1 != 0 or dy2 != 0:
            samples.append(LabeledSample(state=ref, label=JointMove(dy1, dy2)))
            ref = st
    return samples


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

FEATURE_DIM = 2 * N_LEVELS + 1  # signed normalized sizes + spread


@dataclass
class NormalizationStats:
    """Per-level size mean/std estimated on the training split only."""

    ask_mean: np.ndarray
    ask_std: np.ndarray
    bid_mean: np.ndarray
    bid_std: np.ndarray

    @classmethod
    def fit(cls, states):
        if not states:
            raise DataError("NormalizationStats.fit: empty input")
        ask = np.array([s.ask_sizes for s in states], dtype=np.float64)
        bid = np.array([s.bid_sizes for s in states], dtype=np.float64)
        return cls(
            ask_mean=ask.mean(axis=0),
            ask_std=ask.std(axis=0),
            bid_mean=bid.mean(axis=0),
            bid_std=bid.std(axis=0),
        )

    def to_dict(self):
        return {
            "ask_mean": [float(v) for v in self.ask_mean],
            "ask_std": [float(v) for v in self.ask_std],
            "bid_mean": [float(v) for v in self.bid_mean],
            "bid_std": [float(v) for v in self.bid_std],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            ask_mean=np.array(d["ask_mean"], dtype=np.float64),
            ask_std=np.array(d["ask_std"], dtype=np.float64),
            bid_mean=np.array(d["bid_mean"], dtype=np.float64),
            bid_std=np.array(d["bid_std"], dtype=np.float64),
        )


def _zscore(values, mean, std):
    centered = values - mean
    out = np.where(std > 0, centered / np.where(std > 0, std, 1.0), centered)
    return out


def featureize(state, stats):
    """Feature vector: z-scored ask sizes (+), z-scored bid sizes (-), spread.

    Levels with zero training-set std pass through centered only.  Layout:
    [ask level 0..49, bid level 0..49 (negated), spread in ticks].
    """
    ask = _zscore(state.ask_sizes.astype(np.float64), stats.ask_mean, stats.ask_std)
    bid = -_zscore(state.bid_sizes.astype(np.float64), stats.bid_mean, stats.bid_std)
    return np.concatenate([ask, bid, [float(state.spread)]])


def featureize_batch(states, stats):
    ask = np.array([s.ask_sizes for s in states], dtype=np.float64)
    bid = np.array([s.bid_sizes for s in states], dtype=np.float64)
    spread = np.array([s.spread for s in states], dtype=np.float64)
    fa = _zscore(ask, stats.ask_mean, stats.ask_std)
    fb = -_zscore(bid, stats.bid_mean, stats.bid_std)
    return np.column_stack([fa, fb, spread])


def imbalance_features(state):
    """(bid - ask)/(bid + ask) per level, in [-1, 1]; empty pairs give 0."""
    a = state.ask_sizes.astype(np.float64)
    b = state.bid_sizes.astype(np.float64)
    total = a + b
    with np.errstate(invalid="ignore"):
        imb = np.where(total > 0, (b - a) / np.where(total > 0, total, 1.0), 0.0)
    return imb


def imbalance_batch(states):
    return np.array([imbalance_features(s) for s in states])


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


@dataclass
class DatasetSplit:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


def split(samples, *, test_fraction=0.15, val_fraction=0.05, seed=0):
    """Chronological test tail, then a random train/validation partition.

    The last ceil-free `test_fraction` of samples (by time order) is the
    test set; the remaining pool is split with floor(val_fraction * pool)
    validation indices drawn at random with the given seed.
    """
    n = len(samples)
    if n < 100:
        raise DataError(f"split: need at least 100 samples, got {n}")
    order = np.argsort([s.timestamp for s in samples], kind="stable")
    n_test = int(round(test_fraction * n))
    pool = order[: n - n_test]
    test = order[n - n_test :]
    n_val = int(np.floor(val_fraction * len(pool)))
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(len(pool))
    val = pool[perm[:n_val]]
    train = pool[perm[n_val:]]
    return DatasetSplit(
        train=np.sort(train), validation=np.sort(val), test=np.sort(test)
    )


# ---------------------------------------------------------------------------
# co-movement statistics
# ---------------------------------------------------------------------------


def comovement_stats(samples):
    """Lockstep and single-sided move rates plus spread quantiles.

    Z = P[y1 == y2 | a move occurred]; V = P[exactly one component moved |
    a move occurred]; spread quantiles at 10/50/90%.
    """
    labels = np.array([(s.label.y1, s.label.y2) for s in samples], dtype=np.int64)
    if labels.size == 0:
        raise DataError("comovement_stats: empty input")
    moved = (labels != 0).any(axis=1)
    n_moved = int(moved.sum())
    if n_moved == 0:
        raise DataError("comovement_stats: no nonzero-move samples")
    sub = labels[moved]
    z = float((sub[:, 0] == sub[:, 1]).mean())
    v = float(((sub != 0).sum(axis=1) == 1).mean())
    spreads = np.array([s.state.spread for s in samples], dtype=np.float64)
    q10, q50, q90 = np.percentile(spreads, [10, 50, 90])
    return {
        "lockstep_rate": z,
        "single_side_rate": v,
        "spread_q10": float(q10),
        "spread_q50": float(q50),
        "spread_q90": float(q90),
        "n_moved": n_moved,
    }


# ---------------------------------------------------------------------------
# model-ready matrices
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Feature matrices and labels for a list of samples under fixed stats."""

    features: np.ndarray  # (n, FEATURE_DIM)
    imbalances: np.ndarray  # (n, N_LEVELS)
    labels: np.ndarray  # (n, 2) int
    timestamps: np.ndarray = field(default=None)

    def __len__(self):
        return self.features.shape[0]

    def subset(self, idx):
        return Dataset(
            features=self.features[idx],
            imbalances=self.imbalances[idx],
            labels=self.labels[idx],
            timestamps=None if self.timestamps is None else self.timestamps[idx],
        )


def build_dataset(samples, stats):
    states = [s.state for s in samples]
    return Dataset(
        features=featureize_batch(states, stats),
        imbalances=imbalance_batch(states),
        labels=np.array([(s.label.y1, s.label.y2) for s in samples], dtype=np.int64),
        timestamps=np.array([s.timestamp for s in samples], dtype=np.int64),
    )
