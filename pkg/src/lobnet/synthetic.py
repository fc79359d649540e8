"""Synthetic order-book samples with a planted, exactly scorable law.

Book sizes are i.i.d. log-normal per level.  Price moves follow a
sequential-hazard law: conditional on direction, the probability that a
move stops at level y is a logistic function of the (standardized) size at
level y on the side being consumed.  Upward moves read ask sizes, downward
moves read bid sizes; the "into book" directions (ask up, bid down) carry
the planted local coefficients while the improving directions use a
separate, by default size-independent, hazard.  Directions themselves are
a logistic function of the top-of-book imbalance.

Magnitudes are capped at 50 levels: the residual mass beyond level 49 is
assigned to 50, and the exact oracle scores labels under the same capped
law, so model cross-entropies on a +-50 grid are directly comparable to
the oracle's.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .data import N_LEVELS, LOBState, JointMove, LabeledSample
from .nn import log_sigmoid, sigmoid

MAX_MAGNITUDE = N_LEVELS  # residual mass beyond 49 collapses onto 50

DIRECTIONS = ("ask_up", "ask_down", "bid_up", "bid_down")
INTO_BOOK = ("ask_up", "bid_down")


class SyntheticError(Exception):
    operation = "data.synth_generate"


@dataclass(frozen=True)
class SyntheticGenConfig:
    n_samples: int
    case_mode: int = 2
    seed: int = 0
    # log-normal size law per level
    size_log_mean: float = 4.0
    size_log_std: float = 0.9
    # planted local hazard P[stop at y | reach y] = sigmoid(a + b * zscore(size_y))
    hazard_intercept: float = -0.5
    hazard_size_coeff: float = 1.5
    # hazard for the improving directions (ask down / bid up)
    away_hazard_intercept: float = -0.2
    away_hazard_size_coeff: float = 0.0
    # direction law P[up] = sigmoid(c0 + slope * top-of-book imbalance) with
    # slope = c1 + c_spread * (spread - 1): the spread modulates how strongly
    # the queue imbalance drives the next move, a product interaction beyond
    # the per-level imbalance features themselves
    direction_intercept: float = 0.0
    direction_imbalance_coeff: float = 2.0
    direction_spread_coeff: float = 2.5
    # case-1 only: P[a component moves at all]
    move_prob: float = 0.4
    spread_choices: tuple = (1, 2, 3)
    spread_probs: tuple = (0.55, 0.3, 0.15)
    base_price_ticks: int = 10_000

    def __post_init__(self):
        if self.n_samples <= 0:
            raise SyntheticError("n_samples must be positive")
        if self.case_mode not in (1, 2):
            raise SyntheticError("case_mode must be 1 or 2")
        if not 0.0 < self.move_prob < 1.0:
            raise SyntheticError("move_prob must be in (0, 1)")

    def hazard_coeffs(self, direction):
        if direction in INTO_BOOK:
            return self.hazard_intercept, self.hazard_size_coeff
        return self.away_hazard_intercept, self.away_hazard_size_coeff

    @property
    def size_norm_mean(self):
        return float(np.exp(self.size_log_mean + 0.5 * self.size_log_std**2))

    @property
    def size_norm_std(self):
        s2 = self.size_log_std**2
        return float(np.sqrt((np.exp(s2) - 1.0) * np.exp(2 * self.size_log_mean + s2)))


class GroundTruth:
    """Exact conditional law of the generator, able to score any sample."""

    def __init__(self, config):
        self.config = config

    # -- pieces of the law -------------------------------------------------

    def _zscore_sizes(self, sizes):
        c = self.config
        return (np.asarray(sizes, dtype=np.float64) - c.size_norm_mean) / c.size_norm_std

    def step_logits(self, state, direction):
        """Hazard logits at levels 1..49 for the given move direction."""
        a, b = self.config.hazard_coeffs(direction)
        side = state.ask_sizes if direction.endswith("up") else state.bid_sizes
        return a + b * self._zscore_sizes(side[1:MAX_MAGNITUDE])

    def step_probs(self, state, direction):
        return sigmoid(self.step_logits(state, direction))

    def up_probability(self, state):
        c = self.config
        a0 = float(state.ask_sizes[0])
        b0 = float(state.bid_sizes[0])
        imb = 0.0 if a0 + b0 == 0 else (b0 - a0) / (a0 + b0)
        slope = c.direction_imbalance_coeff + c.direction_spread_coeff * (state.spread - 1)
        return float(sigmoid(c.direction_intercept + slope * imb))

    def magnitude_logpmf(self, state, direction):
        """Log-pmf over magnitudes 1..50 under the capped hazard law."""
        z = self.step_logits(state, direction)
        log_q = log_sigmoid(z)
        log_1mq = log_sigmoid(-z)
        cum = np.concatenate([[0.0], np.cumsum(log_1mq)])
        out = np.empty(MAX_MAGNITUDE)
        out[: MAX_MAGNITUDE - 1] = cum[: MAX_MAGNITUDE - 1] + log_q
        out[MAX_MAGNITUDE - 1] = cum[MAX_MAGNITUDE - 1]  # residual at the cap
        return out

    def component_logpmf(self, state, component):
        """Case-1 log-pmf of one component over the grid -50..50 (index 0 = -50)."""
        c = self.config
        p_up = self.up_probability(state)
        up = "ask_up" if component == 1 else "bid_up"
        down = "ask_down" if component == 1 else "bid_down"
        with np.errstate(divide="ignore"):
            log_move = np.log(c.move_prob)
            out = np.full(2 * MAX_MAGNITUDE + 1, -np.inf)
            out[MAX_MAGNITUDE] = np.log1p(-c.move_prob)
            out[MAX_MAGNITUDE + 1 :] = (
                log_move + np.log(p_up) + self.magnitude_logpmf(state, up)
            )
            out[MAX_MAGNITUDE - 1 :: -1] = (
                log_move + np.log1p(-p_up) + self.magnitude_logpmf(state, down)
            )
        return out

    # -- scoring -----------------------------------------------------------

    def loglik(self, state, label):
        """Exact log-probability of the label given the state."""
        y1, y2 = label.y1, label.y2
        if self.config.case_mode == 2:
            if (y1 == 0) == (y2 == 0):
                raise SyntheticError(
                    f"case-2 label must move exactly one component, got ({y1}, {y2})"
                )
            moving = y1 if y1 != 0 else y2
            side = "ask" if y1 != 0 else "bid"
            direction = f"{side}_{'up' if moving > 0 else 'down'}"
            p_up = self.up_probability(state)
            log_dir = np.log(p_up) if moving > 0 else np.log1p(-p_up)
            m = abs(moving)
            if m > MAX_MAGNITUDE:
                raise SyntheticError(f"label magnitude {m} beyond the cap")
            log_mag = self.magnitude_logpmf(state, direction)[m - 1]
            return float(np.log(0.5) + log_dir + log_mag)
        total = 0.0
        for component, y in ((1, y1), (2, y2)):
            if abs(y) > MAX_MAGNITUDE:
                raise SyntheticError(f"label magnitude {abs(y)} beyond the cap")
            total += float(self.component_logpmf(state, component)[y + MAX_MAGNITUDE])
        return total

    def cross_entropy(self, samples):
        """Mean negative log-likelihood of the samples under the true law."""
        return -float(
            np.mean([self.loglik(s.state, s.label) for s in samples])
        )

    def lockstep_rate(self, states):
        """Case-1 P[y1 == y2 | a move] averaged over the given books."""
        if self.config.case_mode != 1:
            raise SyntheticError("lockstep_rate is a case-1 quantity")
        rates = []
        for st in states:
            p1 = np.exp(self.component_logpmf(st, 1))
            p2 = np.exp(self.component_logpmf(st, 2))
            both_zero = p1[MAX_MAGNITUDE] * p2[MAX_MAGNITUDE]
            lock = float(p1 @ p2) - both_zero
            rates.append(lock / (1.0 - both_zero))
        return float(np.mean(rates))

    # -- serialization -----------------------------------------------------

    def to_json(self):
        d = asdict(self.config)
        d["spread_choices"] = list(d["spread_choices"])
        d["spread_probs"] = list(d["spread_probs"])
        d["size_norm_mean"] = self.config.size_norm_mean
        d["size_norm_std"] = self.config.size_norm_std
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d.pop("size_norm_mean", None)
        d.pop("size_norm_std", None)
        d["spread_choices"] = tuple(d["spread_choices"])
        d["spread_probs"] = tuple(d["spread_probs"])
        return cls(SyntheticGenConfig(**d))


def _draw_magnitudes(rng, z_logits):
    """First level whose hazard trial succeeds, else the 50-level cap.

    z_logits has one row per sample and 49 columns (levels 1..49).
    """
    q = sigmoid(z_logits)
    hits = rng.random(q.shape) < q
    any_hit = hits.any(axis=1)
    first = hits.argmax(axis=1) + 1
    return np.where(any_hit, first, MAX_MAGNITUDE).astype(np.int64)


def synth_generate(config):
    """Generate labeled samples and the exact oracle for the planted law.

    Deterministic given config.seed; returns (samples, GroundTruth).
    """
    rng = np.random.Generator(np.random.PCG64(config.seed))
    n = config.n_samples

    ask_sizes = np.maximum(
        1, np.rint(rng.lognormal(config.size_log_mean, config.size_log_std, (n, N_LEVELS)))
    ).astype(np.int64)
    bid_sizes = np.maximum(
        1, np.rint(rng.lognormal(config.size_log_mean, config.size_log_std, (n, N_LEVELS)))
    ).astype(np.int64)

    spreads = rng.choice(
        np.asarray(config.spread_choices, dtype=np.int64), size=n, p=config.spread_probs
    )
    drift = rng.integers(-2, 3, size=n).cumsum()
    best_bid = config.base_price_ticks + drift
    best_ask = best_bid + spreads
    timestamps = 1_000_000_000 * np.arange(1, n + 1, dtype=np.int64)

    z_ask = (ask_sizes - config.size_norm_mean) / config.size_norm_std
    z_bid = (bid_sizes - config.size_norm_mean) / config.size_norm_std

    a0 = ask_sizes[:, 0].astype(np.float64)
    b0 = bid_sizes[:, 0].astype(np.float64)
    imb0 = (b0 - a0) / (a0 + b0)
    slopes = config.direction_imbalance_coeff + config.direction_spread_coeff * (spreads - 1)
    p_up = sigmoid(config.direction_intercept + slopes * imb0)

    def magnitudes(direction, mask):
        a, b = config.hazard_coeffs(direction)
        z = z_ask if direction.endswith("up") else z_bid
        logits = a + b * z[mask][:, 1:MAX_MAGNITUDE]
        return _draw_magnitudes(rng, logits)

    y1 = np.zeros(n, dtype=np.int64)
    y2 = np.zeros(n, dtype=np.int64)
    if config.case_mode == 2:
        ask_side = rng.random(n) < 0.5
        up = rng.random(n) < p_up
        for side_name, side_mask, target in (("ask", ask_side, y1), ("bid", ~ask_side, y2)):
            for dir_name, dir_mask, sign in (
                (f"{side_name}_up", side_mask & up, 1),
                (f"{side_name}_down", side_mask & ~up, -1),
            ):
                if dir_mask.any():
                    target[dir_mask] = sign * magnitudes(dir_name, dir_mask)
    else:
        for side_name, target in (("ask", y1), ("bid", y2)):
            moves = rng.random(n) < config.move_prob
            up = rng.random(n) < p_up
            for dir_name, dir_mask, sign in (
                (f"{side_name}_up", moves & up, 1),
                (f"{side_name}_down", moves & ~up, -1),
            ):
                if dir_mask.any():
                    target[dir_mask] = sign * magnitudes(dir_name, dir_mask)

    samples = []
    for i in range(n):
        state = LOBState(
            timestamp=int(timestamps[i]),
            best_ask_price=int(best_ask[i]),
            best_bid_price=int(best_bid[i]),
            ask_sizes=ask_sizes[i],
            bid_sizes=bid_sizes[i],
            halted=False,
        )
        samples.append(LabeledSample(state=state, label=JointMove(int(y1[i]), int(y2[i]))))
    return samples, GroundTruth(config)
