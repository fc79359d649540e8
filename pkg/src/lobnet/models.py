"""Model families for the joint distribution of best-ask/best-bid moves.

Four families share one evaluation interface (log-likelihood, materialized
pmf, top-k prediction, tail conditionals, ancestral sampling):

* naive      -- empirical outcome tables, no conditioning on the book;
* logistic   -- affine softmax over the truncated grid, fed sizes,
                per-level imbalances, and the spread;
* standard   -- dense softmax networks over the truncated grid;
* spatial    -- a class head over {up, zero, down} plus step networks
                modeling P[Y = y | Y >= y] level by level, giving an
                open-support distribution evaluated at only |y| points.

All families factor the joint law as P[y1] * P[y2 | y1] ("dimension
splitting").  In case-2 mode the support is restricted to moves of exactly
one component: the conditional collapses to a point mass at zero whenever
the other component moved.

Levels live on the integer grid -N..N with N = 50; the spatial model is
open-ended but is compared against grid-bound families by absorbing its
tail mass into the +-N boundary cells.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import FEATURE_DIM, N_LEVELS, NormalizationStats, JointMove
from .nn import (
    ActivationKind,
    BatchNormState,
    forward,
    init_network,
    log_sigmoid,
    log_softmax,
    network_from_dict,
    network_to_dict,
    sigmoid,
)

GRID_N = 50

FAMILIES = ("naive", "logistic", "standard", "spatial")

# class-head output order
CLS_UP, CLS_ZERO, CLS_DOWN = 0, 1, 2

# spatial local feature map: window half-width and near-origin block depth
K_WINDOW = 10
ORIGIN_BLOCK = 10
Y_SCALE = 50.0


class ModelError(Exception):
    operation = "models"


class Grid:
    """Integer levels -n..n; index 0 corresponds to level -n."""

    def __init__(self, n=GRID_N):
        if n < 1:
            raise ModelError("grid needs n >= 1")
        self.n = n
        self.levels = np.arange(-n, n + 1)

    @property
    def size(self):
        return 2 * self.n + 1

    def index(self, level):
        idx = np.asarray(level) + self.n
        if np.any(idx < 0) or np.any(idx >= self.size):
            raise ModelError(f"level outside grid of +-{self.n}")
        return idx if np.ndim(level) else int(idx)


@dataclass
class PredictiveDistribution:
    """Support, matching probabilities, and any unassigned tail mass."""

    outcomes: np.ndarray  # (k, d) integer outcomes
    probs: np.ndarray  # (k,)
    residual: float = 0.0
    model_id: str = ""

    def total_mass(self):
        return float(self.probs.sum()) + self.residual


def predict_topk(dist, k):
    """The k most probable outcomes, ties broken by (|y1|, |y2|, sign).

    Nonnegative values precede negative ones at equal magnitude; the
    ordering is a total order, so top-k is a prefix of top-(k+1).
    """
    outcomes = np.atleast_2d(dist.outcomes)
    if not 1 <= k <= outcomes.shape[0]:
        raise ModelError(f"k must be in 1..{outcomes.shape[0]}")
    keys = [-np.asarray(dist.probs)]
    for col in range(outcomes.shape[1]):
        keys.append(np.abs(outcomes[:, col]))
        keys.append((outcomes[:, col] < 0).astype(np.int8))
    order = np.lexsort(tuple(reversed(keys)))
    return [tuple(int(v) for v in outcomes[i]) for i in order[:k]]


@dataclass
class EvalCounter:
    """Counts network invocations; one row of a batched forward is one call."""

    step_calls: int = 0
    class_calls: int = 0
    net_calls: int = 0


def sample(model, x, rng, imbalances=None):
    """Draw one joint move; returns (JointMove, capped_flag)."""
    labels, capped = model.sample_batch(x, 1, rng, imbalances=imbalances)
    return JointMove(int(labels[0, 0]), int(labels[0, 1])), bool(capped[0])


def _outcome_grid(grid):
    return np.stack(
        np.meshgrid(grid.levels, grid.levels, indexing="ij"), axis=-1
    ).reshape(-1, 2)


def _logsumexp_rows(z):
    m = z.max(axis=1, keepdims=True)
    return m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def _case2_distribution(grid, p1, p2_given_zero, model_id, residual=0.0):
    """Support {(l, 0): l != 0} | {(0, l): l != 0} with the given tables."""
    nz = grid.levels != 0
    outcomes = np.concatenate(
        [
            np.column_stack([grid.levels[nz], np.zeros(nz.sum(), dtype=np.int64)]),
            np.column_stack([np.zeros(nz.sum(), dtype=np.int64), grid.levels[nz]]),
        ]
    )
    zero_idx = grid.index(0)
    probs = np.concatenate([p1[nz], p1[zero_idx] * p2_given_zero[nz]])
    return PredictiveDistribution(
        outcomes=outcomes, probs=probs, residual=residual, model_id=model_id
    )


# ---------------------------------------------------------------------------
# naive empirical model
# ---------------------------------------------------------------------------


class NaiveEmpiricalModel:
    """Count-based tables P[y1] and P[y2 | y1] over the truncated grid.

    With `smoothing` enabled (the evaluation default, so unseen test
    outcomes keep positive probability) add-one smoothing runs over the
    relevant truncated support; without it unseen outcomes score -inf.
    """

    family = "naive"

    def __init__(self, grid_n=GRID_N, case_mode=1, smoothing=True):
        self.grid = Grid(grid_n)
        self.case_mode = case_mode
        self.smoothing = smoothing
        m = self.grid.size
        self.marg_counts = np.zeros(m, dtype=np.int64)
        self.cond_counts = np.zeros((m, m), dtype=np.int64)
        self.n_total = 0

    def fit(self, labels):
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size == 0:
            raise ModelError("naive_fit: empty training labels")
        i1 = self.grid.index(labels[:, 0])
        i2 = self.grid.index(labels[:, 1])
        np.add.at(self.marg_counts, i1, 1)
        np.add.at(self.cond_counts, (i1, i2), 1)
        self.n_total = int(labels.shape[0])
        return self

    def marginal1(self, smoothed=None):
        smoothed = self.smoothing if smoothed is None else smoothed
        counts = self.marg_counts.astype(np.float64)
        if smoothed:
            return (counts + 1.0) / (self.n_total + self.grid.size)
        return counts / self.n_total

    def conditional2(self, y1, smoothed=None):
        smoothed = self.smoothing if smoothed is None else smoothed
        m = self.grid.size
        zero_idx = self.grid.index(0)
        if self.case_mode == 2 and y1 != 0:
            out = np.zeros(m)
            out[zero_idx] = 1.0
            return out
        row = self.cond_counts[self.grid.index(y1)].astype(np.float64)
        if self.case_mode == 2:
            row[zero_idx] = 0.0
            n_row = row.sum()
            if smoothed:
                out = row + 1.0
                out[zero_idx] = 0.0
                return out / (n_row + (m - 1))
            return row / n_row if n_row > 0 else row
        n_row = row.sum()
        if smoothed:
            return (row + 1.0) / (n_row + m)
        return row / n_row if n_row > 0 else row

    def loglik(self, x, label, counter=None, imbalances=None):
        p1 = self.marginal1()[self.grid.index(int(label[0]))]
        p2 = self.conditional2(int(label[0]))[self.grid.index(int(label[1]))]
        with np.errstate(divide="ignore"):
            return float(np.log(p1) + np.log(p2))

    def loglik_batch(self, X, labels, imbalances=None):
        return np.array(
            [self.loglik(None, (int(l[0]), int(l[1]))) for l in np.asarray(labels)]
        )

    def joint_pmf(self, x, imbalances=None):
        p1 = self.marginal1()
        if self.case_mode == 2:
            return _case2_distribution(self.grid, p1, self.conditional2(0), "naive")
        rows = np.stack([self.conditional2(int(l)) for l in self.grid.levels])
        joint = p1[:, None] * rows
        return PredictiveDistribution(
            outcomes=_outcome_grid(self.grid), probs=joint.reshape(-1), model_id="naive"
        )

    def marginal_distribution(self, x, component=1, imbalances=None):
        if component == 1:
            probs = self.marginal1()
        else:
            p1 = self.marginal1()
            rows = np.stack([self.conditional2(int(l)) for l in self.grid.levels])
            probs = p1 @ rows
        return PredictiveDistribution(
            outcomes=self.grid.levels[:, None].copy(), probs=probs, model_id="naive"
        )

    def sample_batch(self, x, n, rng, imbalances=None):
        p1 = self.marginal1()
        i1 = rng.choice(self.grid.size, size=n, p=p1 / p1.sum())
        y1 = self.grid.levels[i1]
        y2 = np.zeros(n, dtype=np.int64)
        for lvl in np.unique(y1):
            mask = y1 == lvl
            p2 = self.conditional2(int(lvl))
            total = p2.sum()
            if total == 0:
                continue
            i2 = rng.choice(self.grid.size, size=int(mask.sum()), p=p2 / total)
            y2[mask] = self.grid.levels[i2]
        return np.column_stack([y1, y2]), np.zeros(n, dtype=bool)

    def to_dict(self):
        return {
            "grid_n": self.grid.n,
            "case_mode": self.case_mode,
            "smoothing": self.smoothing,
            "n_total": self.n_total,
            "marg_counts": self.marg_counts.tolist(),
            "cond_counts": self.cond_counts.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        model = cls(grid_n=d["grid_n"], case_mode=d["case_mode"], smoothing=d["smoothing"])
        model.n_total = d["n_total"]
        model.marg_counts = np.array(d["marg_counts"], dtype=np.int64)
        model.cond_counts = np.array(d["cond_counts"], dtype=np.int64)
        return model


def naive_fit(labels, grid_n=GRID_N, case_mode=1, smoothing=True):
    return NaiveEmpiricalModel(
        grid_n=grid_n, case_mode=case_mode, smoothing=smoothing
    ).fit(labels)


# ---------------------------------------------------------------------------
# grid softmax models (logistic regression and the standard network)
# ---------------------------------------------------------------------------


class GridSoftmaxModel:
    """Dimension-split softmax classifiers over the truncated grid.

    `net1` maps the input vector to 2n+1 class logits for y1; `net2`
    receives the input with y1/50 appended and produces logits for y2.
    The logistic family is the zero-hidden-layer case whose input also
    carries the per-level order-book imbalances.
    """

    def __init__(self, family, net1, net2, bn1=None, bn2=None, grid_n=GRID_N, case_mode=1):
        if family not in ("logistic", "standard"):
            raise ModelError(f"not a grid-softmax family: {family}")
        self.family = family
        self.net1, self.net2 = net1, net2
        self.bn1, self.bn2 = bn1, bn2
        self.grid = Grid(grid_n)
        self.case_mode = case_mode

    @property
    def uses_imbalances(self):
        return self.family == "logistic"

    def model_input(self, features, imbalances=None):
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if not self.uses_imbalances:
            return features
        if imbalances is None:
            raise ModelError("logistic model input requires imbalance features")
        return np.concatenate([features, np.atleast_2d(imbalances)], axis=1)

    def head1_logp(self, X):
        logits = forward(self.net1, np.atleast_2d(X), bn=self.bn1, mode="infer").logits
        return log_softmax(logits)

    def head2_logp(self, X, y1):
        """Rows of log P[y2 | y1]; y1 is a scalar or per-row vector."""
        X = np.atleast_2d(X)
        y1 = np.broadcast_to(np.asarray(y1, dtype=np.float64), (X.shape[0],))
        inp = np.column_stack([X, y1 / Y_SCALE])
        logits = forward(self.net2, inp, bn=self.bn2, mode="infer").logits
        if self.case_mode == 1:
            return log_softmax(logits)
        zero_idx = self.grid.index(0)
        out = np.full_like(logits, -np.inf)
        moved = y1 != 0
        out[moved, zero_idx] = 0.0
        if (~moved).any():
            sub = logits[~moved].copy()
            sub[:, zero_idx] = -np.inf
            out[~moved] = sub - _logsumexp_rows(sub)
        return out

    def loglik(self, x, label, counter=None, imbalances=None):
        X = self.model_input(x, imbalances)
        lp1 = self.head1_logp(X)[0, self.grid.index(int(label[0]))]
        lp2 = self.head2_logp(X, float(label[0]))[0, self.grid.index(int(label[1]))]
        return float(lp1 + lp2)

    def loglik_batch(self, X, labels, imbalances=None):
        labels = np.asarray(labels, dtype=np.int64)
        Xm = self.model_input(X, imbalances)
        rows = np.arange(Xm.shape[0])
        lp1 = self.head1_logp(Xm)[rows, self.grid.index(labels[:, 0])]
        lp2 = self.head2_logp(Xm, labels[:, 0].astype(np.float64))
        return lp1 + lp2[rows, self.grid.index(labels[:, 1])]

    def joint_pmf(self, x, imbalances=None):
        X = self.model_input(x, imbalances)
        p1 = np.exp(self.head1_logp(X))[0]
        if self.case_mode == 2:
            p2z = np.exp(self.head2_logp(X, 0.0))[0]
            return _case2_distribution(self.grid, p1, p2z, self.family)
        reps = np.repeat(X, self.grid.size, axis=0)
        p2 = np.exp(self.head2_logp(reps, self.grid.levels.astype(np.float64)))
        joint = p1[:, None] * p2
        return PredictiveDistribution(
            outcomes=_outcome_grid(self.grid), probs=joint.reshape(-1),
            model_id=self.family,
        )

    def marginal_distribution(self, x, component=1, imbalances=None):
        X = self.model_input(x, imbalances)
        p1 = np.exp(self.head1_logp(X))[0]
        if component == 1:
            probs = p1
        else:
            reps = np.repeat(X, self.grid.size, axis=0)
            p2 = np.exp(self.head2_logp(reps, self.grid.levels.astype(np.float64)))
            probs = p1 @ p2
        return PredictiveDistribution(
            outcomes=self.grid.levels[:, None].copy(), probs=probs, model_id=self.family
        )

    def sample_batch(self, x, n, rng, imbalances=None):
        X = self.model_input(x, imbalances)
        p1 = np.exp(self.head1_logp(X))[0]
        i1 = rng.choice(self.grid.size, size=n, p=p1 / p1.sum())
        y1 = self.grid.levels[i1]
        y2 = np.zeros(n, dtype=np.int64)
        for lvl in np.unique(y1):
            mask = y1 == lvl
            p2 = np.exp(self.head2_logp(X, float(lvl)))[0]
            i2 = rng.choice(self.grid.size, size=int(mask.sum()), p=p2 / p2.sum())
            y2[mask] = self.grid.levels[i2]
        return np.column_stack([y1, y2]), np.zeros(n, dtype=bool)

    def to_dict(self):
        return {
            "family": self.family,
            "grid_n": self.grid.n,
            "case_mode": self.case_mode,
            "components": {
                "net1": network_to_dict(self.net1, self.bn1),
                "net2": network_to_dict(self.net2, self.bn2),
            },
        }

    @classmethod
    def from_dict(cls, d):
        net1, bn1 = network_from_dict(d["components"]["net1"])
        net2, bn2 = network_from_dict(d["components"]["net2"])
        return cls(
            d["family"], net1, net2, bn1=bn1, bn2=bn2,
            grid_n=d["grid_n"], case_mode=d["case_mode"],
        )


# ---------------------------------------------------------------------------
# spatial model
# ---------------------------------------------------------------------------


def step_input_dim(component):
    base = (2 * K_WINDOW + 1) + 2 * ORIGIN_BLOCK + 1
    return base + (1 if component == 2 else 0)


def build_step_inputs(X, sample_idx, ys, direction, y1=None):
    """Local feature rows for the step networks.

    One row per (sample, level) pair: the signed normalized sizes in a
    window of half-width K_WINDOW around level y on the side being consumed
    (ask block for '+', bid block for '-'; levels outside the recorded 50
    contribute 0), the near-origin block (first ORIGIN_BLOCK ask and bid
    features), y / 50, and for component 2 the y1 / 50 encoding.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    sample_idx = np.asarray(sample_idx, dtype=np.int64)
    ys = np.asarray(ys, dtype=np.int64)
    block = 0 if direction == "+" else N_LEVELS
    offsets = np.arange(-K_WINDOW, K_WINDOW + 1)
    levels = ys[:, None] + offsets[None, :]
    valid = (levels >= 0) & (levels < N_LEVELS)
    cols = block + np.clip(levels, 0, N_LEVELS - 1)
    window = X[sample_idx[:, None], cols] * valid
    origin = X[sample_idx][:, np.r_[0:ORIGIN_BLOCK, N_LEVELS : N_LEVELS + ORIGIN_BLOCK]]
    parts = [window, origin, (ys / Y_SCALE)[:, None]]
    if y1 is not None:
        parts.append(np.asarray(y1, dtype=np.float64).reshape(-1, 1) / Y_SCALE)
    return np.concatenate(parts, axis=1)


def _expansion_rows(sample_idx, magnitudes, truncation):
    """Flattened (sample, level, is_stop) rows for telescoped magnitudes.

    Magnitude m contributes rows y = 1..m with a stop at y = m; at the
    truncation boundary (m >= truncation) it contributes continuation rows
    y = 1..truncation-1 only, matching the absorbed-tail convention.
    """
    magnitudes = np.asarray(magnitudes, dtype=np.int64)
    empty = np.zeros(0, dtype=np.int64)
    if magnitudes.size == 0:
        return empty, empty, np.zeros(0, dtype=bool)
    counts = np.where(magnitudes >= truncation, truncation - 1, magnitudes)
    total = int(counts.sum())
    s_idx = np.repeat(sample_idx, counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    ys = np.arange(total, dtype=np.int64) - np.repeat(starts, counts) + 1
    stop = np.zeros(total, dtype=bool)
    interior = (magnitudes < truncation) & (counts > 0)
    ends = np.cumsum(counts) - 1
    stop[ends[interior]] = True
    return s_idx, ys, stop


@dataclass
class MarginalPmf:
    """Level probabilities plus explicit tail masses beyond the range."""

    levels: np.ndarray
    probs: np.ndarray
    residual_plus: float
    residual_minus: float

    def total_mass(self):
        return float(self.probs.sum()) + self.residual_plus + self.residual_minus


class SpatialModel:
    """Class heads plus step networks realizing the geometric decomposition.

    h1(x) gives P[y1 > 0], P[y1 = 0], P[y1 < 0]; f1+/f1- give the stopping
    hazard at each level away from the origin; h2/f2+/f2- do the same for
    y2 with the realized y1 appended to their inputs.  The distribution has
    unbounded support; `grid_n` only sets the truncation used when
    comparing against grid-bound families.
    """

    family = "spatial"
    SAMPLE_CAP = 10_000

    def __init__(
        self, h1, f1_plus, f1_minus, h2, f2_plus, f2_minus,
        bns=None, grid_n=GRID_N, case_mode=1,
    ):
        self.h1, self.f1_plus, self.f1_minus = h1, f1_plus, f1_minus
        self.h2, self.f2_plus, self.f2_minus = h2, f2_plus, f2_minus
        self.bns = bns or {}
        self.grid = Grid(grid_n)
        self.case_mode = case_mode

    def _net(self, name):
        return getattr(self, name), self.bns.get(name)

    def class_logp(self, X, component, y1=None):
        if component == 1:
            net, bn = self._net("h1")
            inp = np.atleast_2d(X)
        else:
            net, bn = self._net("h2")
            X = np.atleast_2d(X)
            y1 = np.broadcast_to(np.asarray(y1, dtype=np.float64), (X.shape[0],))
            inp = np.column_stack([X, y1 / Y_SCALE])
        return log_softmax(forward(net, inp, bn=bn, mode="infer").logits)

    def step_logits(self, X, sample_idx, ys, component, direction, y1=None):
        name = f"f{component}_{'plus' if direction == '+' else 'minus'}"
        net, bn = self._net(name)
        rows = build_step_inputs(
            X, sample_idx, ys, direction, y1=y1 if component == 2 else None
        )
        return forward(net, rows, bn=bn, mode="infer").logits[:, 0]

    def spatial_step(self, x, direction, component, y, y_prev=None, counter=None):
        """P[Y = y | Y >= y] (or the mirrored quantity for '-') at one level."""
        if y < 1:
            raise ModelError("spatial_step: y must be >= 1 levels from the origin")
        z = self.step_logits(
            np.atleast_2d(x), [0], [y], component, direction,
            y1=None if component == 1 else [y_prev],
        )
        if counter is not None:
            counter.step_calls += 1
        return float(sigmoid(z[0]))

    # -- log-likelihood ------------------------------------------------------

    def _magnitude_loglik(self, x, component, value, y_prev=None, counter=None):
        """Telescoped log P[|Y| = m]; labels at or beyond the grid boundary
        score the absorbed tail log P[|Y| >= n]."""
        m_raw = abs(int(value))
        boundary = m_raw >= self.grid.n
        m = min(m_raw, self.grid.n)
        direction = "+" if value > 0 else "-"
        ys = np.arange(1, m) if boundary else np.arange(1, m + 1)
        if ys.size == 0:
            return 0.0
        z = self.step_logits(
            np.atleast_2d(x), np.zeros(ys.size, dtype=np.int64), ys, component,
            direction, y1=None if component == 1 else np.full(ys.size, y_prev),
        )
        if counter is not None:
            counter.step_calls += int(ys.size)
        if boundary:
            return float(log_sigmoid(-z).sum())
        return float(log_sigmoid(-z[:-1]).sum() + log_sigmoid(z[-1]))

    def loglik(self, x, label, counter=None, imbalances=None):
        y1, y2 = int(label[0]), int(label[1])
        lp1 = self.class_logp(np.atleast_2d(x), 1)[0]
        lp2 = self.class_logp(np.atleast_2d(x), 2, y1=float(y1))[0]
        if counter is not None:
            counter.class_calls += 2
        total = float(lp1[_cls(y1)])
        if y1 != 0:
            total += self._magnitude_loglik(x, 1, y1, counter=counter)
        if self.case_mode == 2:
            if y1 != 0:
                if y2 != 0:
                    raise ModelError("case-2 label moves both components")
                return total  # P[y2 = 0 | y1 != 0] = 1
            renorm = np.logaddexp(lp2[CLS_UP], lp2[CLS_DOWN])
            total += float(lp2[_cls(y2)] - renorm)
        else:
            total += float(lp2[_cls(y2)])
        if y2 != 0:
            total += self._magnitude_loglik(x, 2, y2, y_prev=y1, counter=counter)
        return total

    def loglik_batch(self, X, labels, imbalances=None):
        X = np.atleast_2d(X)
        labels = np.asarray(labels, dtype=np.int64)
        n = X.shape[0]
        rows = np.arange(n)
        out = np.zeros(n)
        lp1 = self.class_logp(X, 1)
        lp2 = self.class_logp(X, 2, y1=labels[:, 0].astype(np.float64))
        out += lp1[rows, _cls_array(labels[:, 0])]
        if self.case_mode == 2:
            stay = labels[:, 0] == 0
            renorm = np.logaddexp(lp2[:, CLS_UP], lp2[:, CLS_DOWN])
            out[stay] += (lp2[rows, _cls_array(labels[:, 1])] - renorm)[stay]
        else:
            out += lp2[rows, _cls_array(labels[:, 1])]
        for component in (1, 2):
            values = labels[:, component - 1]
            y_other = labels[:, 0] if component == 2 else None
            for direction, mask in (("+", values > 0), ("-", values < 0)):
                if not mask.any():
                    continue
                idx = np.nonzero(mask)[0]
                s_idx, ys, stop = _expansion_rows(idx, np.abs(values[idx]), self.grid.n)
                z = self.step_logits(
                    X, s_idx, ys, component, direction,
                    y1=None if component == 1 else y_other[s_idx],
                )
                np.add.at(out, s_idx, np.where(stop, log_sigmoid(z), log_sigmoid(-z)))
        return out

    # -- distributions ---------------------------------------------------------

    def _magnitude_blocks(self, x, component, y_prevs, n_max):
        """Per-direction magnitude pmfs for a batch of y1 contexts.

        Returns {direction: (pmf (k, n_max), residual (k,))} where k is 1
        for component 1 or len(y_prevs) for component 2.
        """
        k = 1 if y_prevs is None else len(y_prevs)
        ys = np.tile(np.arange(1, n_max + 1), k)
        s_idx = np.zeros(k * n_max, dtype=np.int64)
        y1 = None if y_prevs is None else np.repeat(np.asarray(y_prevs, float), n_max)
        out = {}
        for direction in ("+", "-"):
            z = self.step_logits(
                np.atleast_2d(x), s_idx, ys, component, direction, y1=y1
            ).reshape(k, n_max)
            log_q = log_sigmoid(z)
            cum = np.concatenate(
                [np.zeros((k, 1)), np.cumsum(log_sigmoid(-z), axis=1)], axis=1
            )
            out[direction] = (np.exp(cum[:, :-1] + log_q), np.exp(cum[:, -1]))
        return out

    def marginal_pmf(self, x, component=1, y_prev=None, n_max=None, counter=None):
        """Class-weighted level probabilities on -n_max..n_max plus explicit
        residual tail masses (never silently renormalized)."""
        n_max = n_max or self.grid.n
        lp = self.class_logp(np.atleast_2d(x), component, y1=y_prev)[0]
        if self.case_mode == 2 and component == 2:
            if y_prev is None:
                raise ModelError("component 2 needs the realized y1")
            if y_prev != 0:
                probs = np.zeros(2 * n_max + 1)
                probs[n_max] = 1.0
                return MarginalPmf(np.arange(-n_max, n_max + 1), probs, 0.0, 0.0)
            renorm = np.logaddexp(lp[CLS_UP], lp[CLS_DOWN])
            lp = lp.copy()
            lp[CLS_UP] -= renorm
            lp[CLS_DOWN] -= renorm
            lp[CLS_ZERO] = -np.inf
        if counter is not None:
            counter.class_calls += 1
            counter.step_calls += 2 * n_max
        blocks = self._magnitude_blocks(
            x, component, None if component == 1 else [y_prev], n_max
        )
        probs = np.zeros(2 * n_max + 1)
        probs[n_max] = np.exp(lp[CLS_ZERO])
        up_pmf, up_res = blocks["+"]
        dn_pmf, dn_res = blocks["-"]
        probs[n_max + 1 :] = np.exp(lp[CLS_UP]) * up_pmf[0]
        probs[n_max - 1 :: -1] = np.exp(lp[CLS_DOWN]) * dn_pmf[0]
        return MarginalPmf(
            np.arange(-n_max, n_max + 1),
            probs,
            float(np.exp(lp[CLS_UP]) * up_res[0]),
            float(np.exp(lp[CLS_DOWN]) * dn_res[0]),
        )

    def joint_pmf(self, x, imbalances=None, absorb=True):
        """Materialized joint law on the truncated grid.

        With absorb=True the tail mass lands in the +-n boundary cells (the
        comparison convention); otherwise it is reported as `residual`.
        """
        n = self.grid.n
        pmf1 = self.marginal_pmf(x, 1)
        p1 = pmf1.probs.copy()
        resid = 0.0
        if absorb:
            p1[-1] += pmf1.residual_plus
            p1[0] += pmf1.residual_minus
        else:
            resid += pmf1.residual_plus + pmf1.residual_minus
        if self.case_mode == 2:
            pmf2 = self.marginal_pmf(x, 2, y_prev=0)
            p2 = pmf2.probs.copy()
            if absorb:
                p2[-1] += pmf2.residual_plus
                p2[0] += pmf2.residual_minus
            else:
                resid += p1[self.grid.index(0)] * (
                    pmf2.residual_plus + pmf2.residual_minus
                )
            return _case2_distribution(self.grid, p1, p2, "spatial", residual=resid)
        lp2 = self.class_logp(
            np.repeat(np.atleast_2d(x), self.grid.size, axis=0), 2,
            y1=self.grid.levels.astype(np.float64),
        )
        blocks = self._magnitude_blocks(x, 2, self.grid.levels, n)
        p_up = np.exp(lp2[:, CLS_UP])
        p_dn = np.exp(lp2[:, CLS_DOWN])
        up_pmf, up_res = blocks["+"]
        dn_pmf, dn_res = blocks["-"]
        cond = np.zeros((self.grid.size, self.grid.size))
        cond[:, n] = np.exp(lp2[:, CLS_ZERO])
        cond[:, n + 1 :] = p_up[:, None] * up_pmf
        cond[:, n - 1 :: -1] = p_dn[:, None] * dn_pmf
        row_resid = p_up * up_res + p_dn * dn_res
        if absorb:
            cond[:, -1] += p_up * up_res
            cond[:, 0] += p_dn * dn_res
        else:
            resid += float(p1 @ row_resid)
        joint = p1[:, None] * cond
        return PredictiveDistribution(
            outcomes=_outcome_grid(self.grid), probs=joint.reshape(-1),
            residual=resid, model_id="spatial",
        )

    def marginal_distribution(self, x, component=1, imbalances=None, absorb=True):
        if component == 1:
            pmf = self.marginal_pmf(x, 1)
            probs = pmf.probs.copy()
            residual = 0.0
            if absorb:
                probs[-1] += pmf.residual_plus
                probs[0] += pmf.residual_minus
            else:
                residual = pmf.residual_plus + pmf.residual_minus
            return PredictiveDistribution(
                outcomes=pmf.levels[:, None].copy(), probs=probs,
                residual=residual, model_id="spatial",
            )
        joint = self.joint_pmf(x, absorb=absorb)
        idx = joint.outcomes[:, 1] + self.grid.n
        probs = np.bincount(idx, weights=joint.probs, minlength=self.grid.size)
        return PredictiveDistribution(
            outcomes=self.grid.levels[:, None].copy(), probs=probs,
            residual=joint.residual, model_id="spatial",
        )

    # -- sampling ----------------------------------------------------------------

    def _draw_magnitudes(self, x, component, direction, count, rng, y_prev=0.0):
        """Sequential hazard trials, extended in blocks, capped at 10^4."""
        out = np.zeros(count, dtype=np.int64)
        alive = np.arange(count)
        base = 0
        block = 64
        while alive.size and base < self.SAMPLE_CAP:
            ys = np.arange(base + 1, min(base + block, self.SAMPLE_CAP) + 1)
            z = self.step_logits(
                np.atleast_2d(x), np.zeros(ys.size, dtype=np.int64), ys, component,
                direction, y1=None if component == 1 else np.full(ys.size, y_prev),
            )
            q = sigmoid(z)
            hits = rng.random((alive.size, ys.size)) < q
            any_hit = hits.any(axis=1)
            first = hits.argmax(axis=1)
            out[alive[any_hit]] = ys[first[any_hit]]
            alive = alive[~any_hit]
            base = int(ys[-1])
        capped = np.zeros(count, dtype=bool)
        if alive.size:
            out[alive] = self.SAMPLE_CAP
            capped[alive] = True
        return out, capped

    def sample_batch(self, x, n, rng, imbalances=None):
        p_cls1 = np.exp(self.class_logp(np.atleast_2d(x), 1))[0]
        c1 = rng.choice(3, size=n, p=p_cls1 / p_cls1.sum())
        y1 = np.zeros(n, dtype=np.int64)
        capped = np.zeros(n, dtype=bool)
        for cls, direction, sign in ((CLS_UP, "+", 1), (CLS_DOWN, "-", -1)):
            mask = c1 == cls
            if mask.any():
                mags, cap = self._draw_magnitudes(x, 1, direction, int(mask.sum()), rng)
                y1[mask] = sign * mags
                capped[mask] |= cap
        y2 = np.zeros(n, dtype=np.int64)
        for lvl in np.unique(y1):
            mask = y1 == lvl
            cnt = int(mask.sum())
            lp2 = self.class_logp(np.atleast_2d(x), 2, y1=float(lvl))[0]
            if self.case_mode == 2:
                if lvl != 0:
                    continue
                p_up = float(
                    np.exp(lp2[CLS_UP] - np.logaddexp(lp2[CLS_UP], lp2[CLS_DOWN]))
                )
                c2 = np.where(rng.random(cnt) < p_up, CLS_UP, CLS_DOWN)
            else:
                p2 = np.exp(lp2)
                c2 = rng.choice(3, size=cnt, p=p2 / p2.sum())
            sub = np.zeros(cnt, dtype=np.int64)
            for cls, direction, sign in ((CLS_UP, "+", 1), (CLS_DOWN, "-", -1)):
                m2 = c2 == cls
                if m2.any():
                    mags, cap = self._draw_magnitudes(
                        x, 2, direction, int(m2.sum()), rng, y_prev=float(lvl)
                    )
                    sub[m2] = sign * mags
                    capped[np.nonzero(mask)[0][m2]] |= cap
            y2[mask] = sub
        return np.column_stack([y1, y2]), capped

    def to_dict(self):
        comps = {
            name: network_to_dict(getattr(self, name), self.bns.get(name))
            for name in ("h1", "f1_plus", "f1_minus", "h2", "f2_plus", "f2_minus")
        }
        return {
            "family": "spatial",
            "grid_n": self.grid.n,
            "case_mode": self.case_mode,
            "k_window": K_WINDOW,
            "components": comps,
        }

    @classmethod
    def from_dict(cls, d):
        nets, bns = {}, {}
        for name, blob in d["components"].items():
            net, bn = network_from_dict(blob)
            nets[name] = net
            if bn is not None:
                bns[name] = bn
        return cls(
            nets["h1"], nets["f1_plus"], nets["f1_minus"],
            nets["h2"], nets["f2_plus"], nets["f2_minus"],
            bns=bns, grid_n=d["grid_n"], case_mode=d["case_mode"],
        )


def _cls(value):
    return CLS_UP if value > 0 else (CLS_ZERO if value == 0 else CLS_DOWN)


def _cls_array(values):
    out = np.full(values.shape, CLS_ZERO, dtype=np.int64)
    out[values > 0] = CLS_UP
    out[values < 0] = CLS_DOWN
    return out


# ---------------------------------------------------------------------------
# tail conditionals
# ---------------------------------------------------------------------------

TAIL_EVENTS = ("ask_up", "ask_down", "bid_up", "bid_down")


def tail_conditional(model, x, event, n_max=None, imbalances=None):
    """Magnitude distribution {1..N} conditional on the given move event.

    For the spatial model's first component the class head cancels and the
    conditional is the plain telescoping product with its residual reported
    explicitly; other cases renormalize the relevant marginal tail.
    """
    if event not in TAIL_EVENTS:
        raise ModelError(f"unknown tail event {event!r}")
    component = 1 if event.startswith("ask") else 2
    positive = event.endswith("up")
    if isinstance(model, SpatialModel) and component == 1:
        n_max = n_max or model.grid.n
        direction = "+" if positive else "-"
        cls = CLS_UP if positive else CLS_DOWN
        if np.exp(model.class_logp(np.atleast_2d(x), 1))[0, cls] == 0.0:
            raise ModelError("tail_conditional: event has zero probability")
        ys = np.arange(1, n_max + 1)
        z = model.step_logits(
            np.atleast_2d(x), np.zeros(n_max, dtype=np.int64), ys, 1, direction
        )
        log_q = log_sigmoid(z)
        cum = np.concatenate([[0.0], np.cumsum(log_sigmoid(-z))])
        return PredictiveDistribution(
            outcomes=ys[:, None].copy(), probs=np.exp(cum[:-1] + log_q),
            residual=float(np.exp(cum[-1])), model_id="spatial",
        )
    marg = model.marginal_distribution(x, component=component, imbalances=imbalances)
    levels = marg.outcomes[:, 0]
    mask = levels > 0 if positive else levels < 0
    sub = marg.probs[mask]
    total = sub.sum()
    if total <= 0:
        raise ModelError("tail_conditional: event has zero probability")
    mags = np.abs(levels[mask])
    order = np.argsort(mags)
    return PredictiveDistribution(
        outcomes=mags[order][:, None].copy(), probs=(sub / total)[order],
        model_id=marg.model_id,
    )


# ---------------------------------------------------------------------------
# joint-input baseline (softmax over the whole grid; cost comparison)
# ---------------------------------------------------------------------------


def joint_input_loglik(net, x, y, grid_n=GRID_N, y_prev=None, counter=None):
    """Softmax-over-grid log-likelihood for one component.

    The network scores (x, [y_prev/50,] y/50) at every grid level, so each
    call performs exactly 2*grid_n + 1 network evaluations; the count is
    returned alongside the log-probability.
    """
    grid = Grid(grid_n)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    rows = [np.tile(x, (grid.size, 1))]
    if y_prev is not None:
        rows.append(np.full((grid.size, 1), y_prev / Y_SCALE))
    rows.append((grid.levels / Y_SCALE)[:, None])
    scores = forward(net, np.concatenate(rows, axis=1), mode="infer").logits[:, 0]
    logp = scores - float(_logsumexp_rows(scores[None, :])[0, 0])
    n_evals = grid.size
    if counter is not None:
        counter.net_calls += n_evals
    return float(logp[grid.index(y)]), n_evals


# ---------------------------------------------------------------------------
# constructors and serialization
# ---------------------------------------------------------------------------


def _dims(d_in, d_out, hidden_layers, neurons):
    return [d_in] + [neurons] * hidden_layers + [d_out]


def init_grid_softmax(
    family, rng, case_mode=1, grid_n=GRID_N,
    hidden_layers=3, neurons=250, activation=None, use_batchnorm=False,
):
    """Fresh logistic (no hidden layers) or standard-net model."""
    activation = activation or ActivationKind("tanh")
    if family == "logistic":
        d_in = FEATURE_DIM + N_LEVELS
        hidden_layers = 0
    elif family == "standard":
        d_in = FEATURE_DIM
    else:
        raise ModelError(f"not a grid-softmax family: {family}")
    size = 2 * grid_n + 1
    net1 = init_network(_dims(d_in, size, hidden_layers, neurons), activation, "softmax", rng)
    net2 = init_network(
        _dims(d_in + 1, size, hidden_layers, neurons), activation, "softmax", rng
    )
    bn1 = BatchNormState.for_network(net1) if use_batchnorm and hidden_layers else None
    bn2 = BatchNormState.for_network(net2) if use_batchnorm and hidden_layers else None
    return GridSoftmaxModel(
        family, net1, net2, bn1=bn1, bn2=bn2, grid_n=grid_n, case_mode=case_mode
    )


def init_spatial(
    rng, case_mode=1, grid_n=GRID_N,
    hidden_layers=3, neurons=50, activation=None, use_batchnorm=False,
):
    activation = activation or ActivationKind("tanh")
    spec = {
        "h1": (FEATURE_DIM, 3),
        "h2": (FEATURE_DIM + 1, 3),
        "f1_plus": (step_input_dim(1), 1),
        "f1_minus": (step_input_dim(1), 1),
        "f2_plus": (step_input_dim(2), 1),
        "f2_minus": (step_input_dim(2), 1),
    }
    nets, bns = {}, {}
    for name, (d_in, d_out) in spec.items():
        head = "softmax" if d_out == 3 else "scalar_logit"
        nets[name] = init_network(
            _dims(d_in, d_out, hidden_layers, neurons), activation, head, rng
        )
        if use_batchnorm and hidden_layers:
            bns[name] = BatchNormState.for_network(nets[name])
    return SpatialModel(
        nets["h1"], nets["f1_plus"], nets["f1_minus"],
        nets["h2"], nets["f2_plus"], nets["f2_minus"],
        bns=bns, grid_n=grid_n, case_mode=case_mode,
    )


@dataclass
class ModelBundle:
    """A fitted model plus the normalization context it was trained with."""

    model: object
    stats: NormalizationStats
    case_mode: int
    grid_n: int = GRID_N

    def to_json(self):
        return json.dumps(
            {
                "format_version": 1,
                "family": self.model.family,
                "grid": {"n": self.grid_n},
                "case_mode": self.case_mode,
                "normalization_stats": self.stats.to_dict() if self.stats else None,
                "model": self.model.to_dict(),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        if d.get("format_version") != 1:
            raise ModelError(f"unsupported bundle version {d.get('format_version')!r}")
        family = d["family"]
        if family == "naive":
            model = NaiveEmpiricalModel.from_dict(d["model"])
        elif family in ("logistic", "standard"):
            model = GridSoftmaxModel.from_dict(d["model"])
        elif family == "spatial":
            model = SpatialModel.from_dict(d["model"])
        else:
            raise ModelError(f"unknown family {family!r}")
        stats = (
            NormalizationStats.from_dict(d["normalization_stats"])
            if d.get("normalization_stats")
            else None
        )
        return cls(model=model, stats=stats, case_mode=d["case_mode"], grid_n=d["grid"]["n"])
