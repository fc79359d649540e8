"""Numerical checks that the hazard decomposition places no mass at infinity.

The cumulative mass assigned to levels 1..N is F_N = 1 - prod(1 - q_n)
where q_n is the stopping hazard at level n.  Bounded hidden units imply
hazard bounds 0 < a <= q_n <= b < 1 and the sandwich
1 - (1-a)^N <= F_N <= 1 - (1-b)^N, so F_N -> 1.  All-ReLU networks have
an affine tail in the level coordinate: constant tails and increasing
tails drive F_N -> 1, while a decaying tail f = C - K*y leaves positive
mass at infinity, bounded by a closed-form G < 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import forward, log_sigmoid, sigmoid

DEFAULT_CHECKPOINTS = (10, 100, 1_000, 10_000)

RELU_CASES = ("relu_case1", "relu_case2", "relu_case3")


class WellPosedError(Exception):
    operation = "wellposed"


@dataclass
class MassProfile:
    """Cumulative masses F_N at increasing checkpoints."""

    checkpoints: np.ndarray
    masses: np.ndarray
    bound: float = None
    case: str = None

    def final_mass(self):
        return float(self.masses[-1])

    def rows(self):
        for n, f in zip(self.checkpoints, self.masses):
            yield int(n), float(f)


def partial_mass(step_prob_fn, checkpoints=DEFAULT_CHECKPOINTS):
    """F_N at each checkpoint, via the product form in log space.

    `step_prob_fn(levels)` must return hazards in [0, 1] for an integer
    level array.
    """
    checkpoints = np.asarray(sorted(checkpoints), dtype=np.int64)
    n_max = int(checkpoints[-1])
    levels = np.arange(1, n_max + 1)
    q = np.asarray(step_prob_fn(levels), dtype=np.float64)
    if q.shape != levels.shape:
        raise WellPosedError("step_prob_fn must return one hazard per level")
    if (q < 0).any() or (q > 1).any():
        raise WellPosedError("hazards must lie in [0, 1]")
    log_surv = np.cumsum(np.log1p(-np.minimum(q, 1.0 - 1e-300)))
    masses = -np.expm1(log_surv[checkpoints - 1])
    return MassProfile(checkpoints=checkpoints, masses=masses)


def converged_mass(step_prob_fn, increment_tol=1e-15, n_cap=1_000_000, block=4096):
    """Total mass sum p_n, stopping once increments fall below the tolerance.

    Returns (limit, n_reached).
    """
    log_surv = 0.0
    total = 0.0
    n = 0
    while n < n_cap:
        levels = np.arange(n + 1, min(n + block, n_cap) + 1)
        q = np.asarray(step_prob_fn(levels), dtype=np.float64)
        for qi in q:
            p = np.exp(log_surv) * qi
            total += p
            log_surv += np.log1p(-qi) if qi < 1.0 else -np.inf
            n += 1
            if p < increment_tol and n > 1:
                return float(total), n
    return float(total), n


@dataclass
class BoundsCheckResult:
    ok: bool
    violations: list = field(default_factory=list)

    def __bool__(self):
        return self.ok


def bounds_check(profile, a, b):
    """Verify 1-(1-a)^N <= F_N <= 1-(1-b)^N at every checkpoint."""
    if not (0 < a <= b < 1):
        raise WellPosedError("bounds require 0 < a <= b < 1")
    violations = []
    for n, f in profile.rows():
        lower = -np.expm1(n * np.log1p(-a))
        upper = -np.expm1(n * np.log1p(-b))
        tol = 1e-12
        if f < lower - tol or f > upper + tol:
            violations.append({"N": n, "F_N": f, "lower": float(lower), "upper": float(upper)})
    return BoundsCheckResult(ok=not violations, violations=violations)


def hazard_bounds_from_logit_bound(m):
    """Hazard range (sigmoid(-m), sigmoid(m)) implied by |logit| <= m."""
    if not m > 0:
        raise WellPosedError("logit bound must be positive")
    return float(sigmoid(-m)), float(sigmoid(m))


# ---------------------------------------------------------------------------
# ReLU tail analysis
# ---------------------------------------------------------------------------


@dataclass
class ReluTail:
    case: str  # relu_case1 / relu_case2 / relu_case3
    intercept: float  # C (the constant once the tail is affine)
    slope_magnitude: float  # K >= 0
    probe_start: int
    residual: float


def _net_logits_at_levels(net, x, levels):
    """Score f(x, y) with y appended as the last input coordinate."""
    levels = np.asarray(levels, dtype=np.float64)
    if x is None or np.size(x) == 0:
        rows = levels[:, None]
    else:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        rows = np.column_stack([np.tile(x, (levels.size, 1)), levels])
    return forward(net, rows, mode="infer").logits[:, 0]


def classify_relu_tail(
    net, x, probe_start=8, probe_len=16, max_probe=2**20,
    slope_tol=1e-9, residual_tol=1e-6, adaptive=True,
):
    """Find the affine tail form of an all-ReLU network in the level input.

    Probes f at integer levels [n0, n0 + probe_len], fits a line, and
    doubles n0 until the residual is below tolerance (when adaptive).
    Classifies by the fitted slope: |slope| <= slope_tol is the constant
    case (case 1), positive slopes case 2, negative slopes case 3.
    """
    if probe_len < 10:
        raise WellPosedError("probe range must span at least 10 levels")
    n0 = probe_start
    while True:
        levels = np.arange(n0, n0 + probe_len + 1)
        f = _net_logits_at_levels(net, x, levels)
        coeffs = np.polyfit(levels.astype(np.float64), f, 1)
        fit = np.polyval(coeffs, levels)
        residual = float(np.abs(f - fit).max())
        if residual <= residual_tol:
            break
        if not adaptive or n0 * 2 > max_probe:
            raise WellPosedError(
                f"probe range below N0: tail not affine at n0={n0} "
                f"(residual {residual:.3g})"
            )
        n0 *= 2
    slope, intercept = float(coeffs[0]), float(coeffs[1])
    if abs(slope) <= slope_tol:
        case = "relu_case1"
        k = 0.0
        c = float(np.mean(f))
    elif slope > 0:
        case, k, c = "relu_case2", slope, intercept
    else:
        case, k, c = "relu_case3", -slope, intercept
    return ReluTail(case=case, intercept=c, slope_magnitude=k, probe_start=n0, residual=residual)


def case3_bound(c3, k3, n0, partial_sum_d3=0.0):
    """Closed-form upper bound G < 1 on the total mass for a decaying tail.

    With f(x, n) = C3 - K3*n beyond N0, sum log(1 + e^f) <= D3 +
    e^{C3-K3*N0} + e^{C3-K3*N0}/K3, so F_N <= 1 - exp(-that) = G < 1.
    D3 is the head contribution sum_{n < N0} e^{f(x,n)} computed by the
    caller for the concrete network.
    """
    if not k3 > 0:
        raise WellPosedError("case3_bound requires K3 > 0")
    head = np.exp(c3 - k3 * n0)
    exponent = partial_sum_d3 + head + head / k3
    return float(-np.expm1(-exponent))


def head_sum_exp(net, x, n0):
    """sum_{n=1}^{N0-1} e^{f(x,n)}, the D3 constant for a concrete net."""
    if n0 <= 1:
        return 0.0
    levels = np.arange(1, n0)
    return float(np.exp(_net_logits_at_levels(net, x, levels)).sum())


@dataclass
class DivergenceResult:
    ok: bool
    n_max: int
    final_mass: float

    def __bool__(self):
        return self.ok


def divergence_check(case, intercept, slope_magnitude, n_max=None, threshold=1e-6):
    """Verify that constant or increasing tails reach F_N >= 1 - threshold.

    Case 1 uses the constant hazard sigmoid(C); case 2 the increasing
    hazards sigmoid(C + K*n).  Case 3 is rejected: its mass escapes.
    """
    if case == "relu_case3":
        raise WellPosedError("divergence_check: case 3 mass escapes; use case3_bound")
    if case not in ("relu_case1", "relu_case2"):
        raise WellPosedError(f"unknown case {case!r}")
    if n_max is None:
        n_max = 200 if case == "relu_case1" else 50
    levels = np.arange(1, n_max + 1)
    logits = (
        np.full(n_max, intercept)
        if case == "relu_case1"
        else intercept + slope_magnitude * levels
    )
    log_surv = float(log_sigmoid(-logits).sum())
    final = float(-np.expm1(log_surv))
    return DivergenceResult(ok=final >= 1.0 - threshold, n_max=n_max, final_mass=final)


# ---------------------------------------------------------------------------
# model-facing helpers
# ---------------------------------------------------------------------------


def spatial_step_function(model, x, component=1, direction="+", y_prev=None):
    """The hazard q(y) of one step network at a fixed input, vectorized."""

    def step_fn(levels):
        levels = np.asarray(levels, dtype=np.int64)
        z = model.step_logits(
            np.atleast_2d(x), np.zeros(levels.size, dtype=np.int64), levels,
            component, direction,
            y1=None if component == 1 else np.full(levels.size, y_prev),
        )
        return sigmoid(z)

    return step_fn


def profile_to_csv(profile, path):
    import pandas as pd

    frame = pd.DataFrame(
        {
            "N": profile.checkpoints,
            "F_N": profile.masses,
            "bound": [profile.bound] * len(profile.checkpoints),
        }
    )
    frame.to_csv(path, index=False, lineterminator="\n")
