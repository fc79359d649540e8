"""Evaluation metrics and statistical studies.

Cross-entropy (mean negative log-likelihood, in nats), accuracy and top-k
accuracy, pairwise win counts and percent error decreases, tail metrics
conditional on a move event, the local-coefficient-ratio regression study,
and the arctan imbalance benchmark for next-move direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import N_LEVELS
from .models import (
    GridSoftmaxModel,
    NaiveEmpiricalModel,
    SpatialModel,
    _expansion_rows,
    predict_topk,
    tail_conditional,
)
from .nn import (
    ActivationKind,
    DenseLayer,
    NetworkParams,
    RmsPropState,
    backward,
    bernoulli_nll,
    forward,
    log_sigmoid,
    rmsprop_step,
)


class MetricsError(Exception):
    operation = "eval"


# ---------------------------------------------------------------------------
# cross-entropy and pairwise comparisons
# ---------------------------------------------------------------------------


def cross_entropy(model, dataset):
    """Mean negative log-likelihood of the test labels, in nats."""
    lls = model.loglik_batch(
        dataset.features, dataset.labels, imbalances=dataset.imbalances
    )
    if not np.isfinite(lls).all():
        bad = np.nonzero(~np.isfinite(lls))[0]
        raise MetricsError(
            f"cross_entropy: non-finite log-likelihood at samples {bad[:10].tolist()}"
            + ("..." if bad.size > 10 else "")
        )
    return float(-lls.mean())


def pct_decrease(err1, err2):
    """Percent decrease of err1 relative to err2: (err2 - err1)/err2 * 100."""
    if not err2 > 0:
        raise MetricsError("pct_decrease: reference error must be positive")
    return (err2 - err1) / err2 * 100.0


def win_matrix(errors):
    """entry (i, j) = number of runs where model i beat model j strictly.

    `errors` has shape (runs, models); the diagonal is NaN.
    """
    errors = np.atleast_2d(np.asarray(errors, dtype=np.float64))
    n_models = errors.shape[1]
    wins = np.zeros((n_models, n_models))
    for i in range(n_models):
        for j in range(n_models):
            if i == j:
                wins[i, j] = np.nan
            else:
                wins[i, j] = int((errors[:, i] < errors[:, j]).sum())
    return wins


def pct_decrease_matrix(errors):
    """entry (i, j) = mean over runs of pct_decrease(err_i, err_j)."""
    errors = np.atleast_2d(np.asarray(errors, dtype=np.float64))
    n_models = errors.shape[1]
    out = np.full((n_models, n_models), np.nan)
    for i in range(n_models):
        for j in range(n_models):
            if i != j:
                out[i, j] = float(
                    np.mean(
                        [pct_decrease(a, b) for a, b in zip(errors[:, i], errors[:, j])]
                    )
                )
    return out


# ---------------------------------------------------------------------------
# accuracy
# ---------------------------------------------------------------------------


def topk_accuracy(model, dataset, k_max=10, max_samples=None, seed=0):
    """Fraction of samples whose label is among the k most likely outcomes,
    for k = 1..k_max, in percent.  `max_samples` caps the evaluation via a
    deterministic subsample."""
    n = len(dataset)
    idx = np.arange(n)
    if max_samples is not None and n > max_samples:
        rng = np.random.Generator(np.random.PCG64(seed))
        idx = np.sort(rng.choice(n, size=max_samples, replace=False))
    hits = np.zeros(k_max)
    for i in idx:
        dist = model.joint_pmf(dataset.features[i], imbalances=dataset.imbalances[i])
        top = predict_topk(dist, k_max)
        label = (int(dataset.labels[i, 0]), int(dataset.labels[i, 1]))
        if label in top:
            rank = top.index(label)
            hits[rank:] += 1
    return hits / idx.size * 100.0


def accuracy(model, dataset, max_samples=None, seed=0):
    return float(topk_accuracy(model, dataset, 1, max_samples, seed)[0])


# ---------------------------------------------------------------------------
# tail metrics
# ---------------------------------------------------------------------------


def _event_mask(labels, event):
    comp = 0 if event.startswith("ask") else 1
    return labels[:, comp] > 0 if event.endswith("up") else labels[:, comp] < 0


def tail_cross_entropy(model, dataset, event="ask_up"):
    """Cross-entropy of the magnitude distribution conditional on the event.

    For the spatial model on an ask event this is the telescoped hazard
    likelihood directly (the class head cancels); grid families use their
    renormalized marginal tail.  Magnitudes at the truncation boundary
    score the absorbed tail cell.
    """
    mask = _event_mask(dataset.labels, event)
    if not mask.any():
        raise MetricsError(f"tail_cross_entropy: no samples with event {event}")
    comp = 0 if event.startswith("ask") else 1
    sub = dataset.subset(np.nonzero(mask)[0])
    mags = np.abs(sub.labels[:, comp])
    if isinstance(model, SpatialModel) and comp == 0:
        direction = "+" if event.endswith("up") else "-"
        idx = np.arange(len(sub))
        s_idx, ys, stop = _expansion_rows(idx, mags, model.grid.n)
        z = model.step_logits(sub.features, s_idx, ys, 1, direction)
        out = np.zeros(len(sub))
        np.add.at(out, s_idx, np.where(stop, log_sigmoid(z), log_sigmoid(-z)))
        return float(-out.mean())
    total = 0.0
    n_max = model.grid.n
    for i in range(len(sub)):
        dist = tail_conditional(
            model, sub.features[i], event, imbalances=sub.imbalances[i]
        )
        probs = dist.probs.copy()
        probs[-1] += dist.residual
        m = min(int(mags[i]), n_max)
        total -= math.log(probs[m - 1])
    return total / len(sub)


def tail_topk_accuracy(model, dataset, event="ask_up", k_max=10, max_samples=None, seed=0):
    mask = _event_mask(dataset.labels, event)
    if not mask.any():
        raise MetricsError(f"tail_topk_accuracy: no samples with event {event}")
    comp = 0 if event.startswith("ask") else 1
    sub = dataset.subset(np.nonzero(mask)[0])
    idx = np.arange(len(sub))
    if max_samples is not None and idx.size > max_samples:
        rng = np.random.Generator(np.random.PCG64(seed))
        idx = np.sort(rng.choice(idx.size, size=max_samples, replace=False))
    hits = np.zeros(k_max)
    for i in idx:
        dist = tail_conditional(model, sub.features[i], event, imbalances=sub.imbalances[i])
        top = predict_topk(dist, min(k_max, dist.probs.size))
        label = (min(int(abs(sub.labels[i, comp])), model.grid.n),)
        if label in top:
            hits[top.index(label) :] += 1
    return hits / idx.size * 100.0


# ---------------------------------------------------------------------------
# coefficient-ratio study
# ---------------------------------------------------------------------------


@dataclass
class CoeffRatioResult:
    theta: np.ndarray  # window coefficients, offsets -K..K
    intercept: float
    ratios: dict  # p -> coefficient ratio
    degenerate: dict  # p -> bool
    n_rows: int


def _window_rows(features, magnitudes, K, y_max):
    """Pooled conditional rows: ask-side windows at each level reached."""
    idx = np.arange(magnitudes.shape[0])
    counts = np.minimum(magnitudes, y_max)
    s_idx = np.repeat(idx, counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    ys = np.arange(int(counts.sum()), dtype=np.int64) - np.repeat(starts, counts) + 1
    targets = (np.repeat(magnitudes, counts) > ys).astype(np.float64)
    offsets = np.arange(-K, K + 1)
    levels = ys[:, None] + offsets[None, :]
    valid = (levels >= 0) & (levels < N_LEVELS)
    cols = np.clip(levels, 0, N_LEVELS - 1)
    rows = features[s_idx[:, None], cols] * valid
    return rows, targets


def _fit_logistic(rows, targets, seed, epochs=60, lr=0.05, batch_size=1024):
    """Plain logistic regression by minibatch RMSProp on the shared engine."""
    rng = np.random.Generator(np.random.PCG64(seed))
    d = rows.shape[1]
    net = NetworkParams(
        layers=[DenseLayer(weights=np.zeros((1, d)), bias=np.zeros(1))],
        hidden_activation=ActivationKind("tanh"),
        output_head="scalar_logit",
    )
    opt = RmsPropState.for_network(net, lr)
    n = rows.shape[0]
    prev = None
    for _ in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            cache = forward(net, rows[idx], mode="train")
            nll, dlogits = bernoulli_nll(cache.logits, targets[idx])
            grads = backward(net, cache, dlogits / idx.size)
            rmsprop_step(opt, net, grads)
            total += nll
        if prev is not None and total > prev:
            opt.learning_rate *= 0.5
        prev = total
    return net


def coeff_ratio_study(dataset, K=10, p_values=(0, 1), y_max=20, seed=0):
    """Fit the pooled window regression for upward ask moves and report the
    local-versus-distant coefficient ratios.

    The regression models P[Y > y | Y >= y] = 1/(1 + exp(b + theta . w))
    over windows w of ask features at offsets -K..K around each level y
    reached; theta and b are recovered from the fitted logit by negation.
    """
    up = dataset.labels[:, 0] >= 1
    mags = dataset.labels[up, 0]
    if not (mags >= 2).any():
        raise MetricsError("coeff_ratio_study: need ask-up samples with magnitude >= 2")
    rows, targets = _window_rows(dataset.features[up], mags, K, y_max)
    net = _fit_logistic(rows, targets, seed)
    theta = -net.layers[0].weights[0].copy()
    intercept = -float(net.layers[0].bias[0])
    ratios, degenerate = {}, {}
    for p in p_values:
        center = theta[K - p : K + p + 1].max()
        rest = np.concatenate([np.abs(theta[: K - p]), np.abs(theta[K + p + 1 :])])
        den = rest.max() if rest.size else 0.0
        degenerate[p] = not den > 1e-12
        ratios[p] = float(center / den) if not degenerate[p] else float("nan")
    return CoeffRatioResult(
        theta=theta, intercept=intercept, ratios=ratios,
        degenerate=degenerate, n_rows=int(rows.shape[0]),
    )


# ---------------------------------------------------------------------------
# theoretical direction benchmark
# ---------------------------------------------------------------------------


def theoretical_pup(best_ask_size, best_bid_size, rho):
    """Arctan imbalance formula for the probability the ask moves up next.

    p = 1/2 - arctan(sqrt((1+rho)/(1-rho)) * (a-b)/(a+b))
              / (2 * arctan(sqrt((1+rho)/(1-rho))))
    """
    if not -1.0 < rho < 1.0:
        raise MetricsError("theoretical_pup: rho must be in (-1, 1)")
    a, b = float(best_ask_size), float(best_bid_size)
    if a < 0 or b < 0 or a + b == 0:
        raise MetricsError("theoretical_pup: sizes must be nonnegative, not both 0")
    scale = math.sqrt((1.0 + rho) / (1.0 - rho))
    return 0.5 - math.atan(scale * (a - b) / (a + b)) / (2.0 * math.atan(scale))


def estimate_increment_correlation(states):
    """Sample correlation of first differences of the best ask and bid sizes."""
    ask = np.array([s.ask_sizes[0] for s in states], dtype=np.float64)
    bid = np.array([s.bid_sizes[0] for s in states], dtype=np.float64)
    da, db = np.diff(ask), np.diff(bid)
    if da.size < 2 or da.std() == 0 or db.std() == 0:
        return 0.0
    return float(np.corrcoef(da, db)[0, 1])


def _binary_ce(p, targets):
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return float(-np.mean(targets * np.log(p) + (1 - targets) * np.log1p(-p)))


def direction_comparison(train_samples, test_samples, stats, seed=0, epochs=40):
    """Binary cross-entropy for predicting the direction of the next ask move.

    Compares a logistic regression (sizes + imbalances + spread), a small
    tanh network, and the arctan imbalance formula with rho estimated from
    the training stream.
    """
    from .data import build_dataset

    train = build_dataset(train_samples, stats)
    test = build_dataset(test_samples, stats)
    tr_mask = train.labels[:, 0] != 0
    te_mask = test.labels[:, 0] != 0
    if not tr_mask.any() or not te_mask.any():
        raise MetricsError("direction_comparison: no ask-move samples")
    Xtr = np.column_stack([train.features[tr_mask], train.imbalances[tr_mask]])
    Xte = np.column_stack([test.features[te_mask], test.imbalances[te_mask]])
    ttr = (train.labels[tr_mask, 0] > 0).astype(np.float64)
    tte = (test.labels[te_mask, 0] > 0).astype(np.float64)

    logi = _fit_logistic(Xtr, ttr, seed, epochs=epochs)
    p_logi = nn.sigmoid(forward(logi, Xte, mode="infer").logits[:, 0])

    rng = np.random.Generator(np.random.PCG64(seed + 1))
    net = nn.init_network([Xtr.shape[1], 32, 32, 1], ActivationKind("tanh"), "scalar_logit", rng)
    opt = RmsPropState.for_network(net, 1e-3)
    n = Xtr.shape[0]
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, 1024):
            idx = perm[start : start + 1024]
            cache = forward(net, Xtr[idx], mode="train")
            _, dlogits = bernoulli_nll(cache.logits, ttr[idx])
            grads = backward(net, cache, dlogits / idx.size)
            rmsprop_step(opt, net, grads)
    p_net = nn.sigmoid(forward(net, Xte, mode="infer").logits[:, 0])

    rho = estimate_increment_correlation([s.state for s in train_samples])
    p_theory = np.array(
        [
            theoretical_pup(s.state.ask_sizes[0], s.state.bid_sizes[0], rho)
            for s, m in zip(test_samples, te_mask)
            if m
        ]
    )
    return {
        "logistic": _binary_ce(p_logi, tte),
        "standard": _binary_ce(p_net, tte),
        "theoretical": _binary_ce(p_theory, tte),
        "rho": rho,
        "n_test": int(te_mask.sum()),
    }


# ---------------------------------------------------------------------------
# evaluation report
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    model_names: list
    cross_entropies: dict
    accuracies: dict
    topk: dict  # name -> list of percentages, k = 1..k_max
    tail_cross_entropies: dict
    tail_event: str
    wins: np.ndarray
    pct_matrix: np.ndarray
    n_test: int = 0
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "model_names": self.model_names,
            "n_test": self.n_test,
            "cross_entropy": {k: float(v) for k, v in self.cross_entropies.items()},
            "accuracy": {k: float(v) for k, v in self.accuracies.items()},
            "topk_accuracy": {k: [float(x) for x in v] for k, v in self.topk.items()},
            "tail_event": self.tail_event,
            "tail_cross_entropy": {
                k: float(v) for k, v in self.tail_cross_entropies.items()
            },
            "win_matrix": [
                [None if np.isnan(v) else int(v) for v in row] for row in self.wins
            ],
            "pct_decrease_matrix": [
                [None if np.isnan(v) else float(v) for v in row]
                for row in self.pct_matrix
            ],
            "extras": self.extras,
        }


def build_eval_report(
    models, dataset, k_max=10, tail_event="ask_up", topk_samples=2000, seed=0
):
    """Evaluate a dict of {name: model} on one test Dataset."""
    names = list(models)
    ces, accs, topks, tails = {}, {}, {}, {}
    for name, model in models.items():
        ces[name] = cross_entropy(model, dataset)
        tk = topk_accuracy(model, dataset, k_max, max_samples=topk_samples, seed=seed)
        topks[name] = tk.tolist()
        accs[name] = float(tk[0])
        try:
            tails[name] = tail_cross_entropy(model, dataset, tail_event)
        except MetricsError:
            tails[name] = float("nan")
    errs = np.array([[ces[n] for n in names]])
    return EvalReport(
        model_names=names,
        cross_entropies=ces,
        accuracies=accs,
        topk=topks,
        tail_cross_entropies=tails,
        tail_event=tail_event,
        wins=win_matrix(errs),
        pct_matrix=pct_decrease_matrix(errs),
        n_test=len(dataset),
    )
