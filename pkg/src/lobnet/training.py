"""Minibatch RMSProp training with validation-based early stopping.

All trainable families share one loop: reshuffle each epoch, minibatch
updates on the negative log-likelihood plus an optional L2 penalty, halve
the learning rate after any epoch whose mean training loss rose, record
the validation loss each epoch, and return the parameters from the epoch
with the lowest validation loss.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .models import (
    CLS_DOWN,
    CLS_UP,
    GridSoftmaxModel,
    SpatialModel,
    _cls_array,
    _expansion_rows,
    init_grid_softmax,
    init_spatial,
    naive_fit,
)
from .nn import (
    ActivationKind,
    RmsPropState,
    backward,
    bernoulli_nll,
    forward,
    l2_penalty,
    masked_softmax_nll,
    rmsprop_step,
    softmax_nll,
)


class TrainingError(Exception):
    operation = "models.train_model"


class TrainingDivergedError(TrainingError):
    """Loss became non-finite; `last_model` holds the last finite snapshot."""

    def __init__(self, message, last_model=None, history=None):
        super().__init__(message)
        self.last_model = last_model
        self.history = history or []


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 75
    batch_size: int = 256
    initial_lr: float = 1e-3
    lr_decay_factor: float = 0.5
    l2_lambda: float = 0.0
    dropout_rate: float = 0.1
    seed: int = 0
    neurons_per_hidden_layer: int = 50
    hidden_layers: int = 3
    use_batchnorm: bool = True
    activation: str = "tanh"
    activation_clip: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")
        if self.hidden_layers < 1:
            raise TrainingError("hidden_layers must be >= 1")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if not self.initial_lr > 0:
            raise TrainingError("initial_lr must be positive")
        if not 0 < self.lr_decay_factor < 1:
            raise TrainingError("lr_decay_factor must be in (0, 1)")
        if self.l2_lambda < 0:
            raise TrainingError("l2_lambda must be nonnegative")
        if not 0 <= self.dropout_rate < 1:
            raise TrainingError("dropout_rate must be in [0, 1)")

    def activation_kind(self):
        return ActivationKind(self.activation, clip=self.activation_clip)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    learning_rate: float


class _NetTask:
    """One network with its optimizer state and training-mode context."""

    def __init__(self, net, bn, config):
        self.net = net
        self.bn = bn
        self.config = config
        self.opt = RmsPropState.for_network(net, config.initial_lr, bn=bn)

    def step(self, X, loss_fn, batch_size, lr, rng):
        """One RMSProp update; loss_fn(logits) -> (sum nll, dlogits)."""
        if X.shape[0] == 0:
            return 0.0
        cache = forward(
            self.net, X, bn=self.bn, mode="train",
            dropout_rate=self.config.dropout_rate, rng=rng,
        )
        nll, dlogits = loss_fn(cache.logits)
        grads = backward(
            self.net, cache, dlogits / batch_size, bn=self.bn,
            l2_lambda=self.config.l2_lambda,
        )
        self.opt.learning_rate = lr
        rmsprop_step(self.opt, self.net, grads, bn=self.bn)
        return float(nll)


def _run_epochs(model, tasks, batch_step, val_loss, n_train, config, rng):
    """The shared loop; batch_step(idx, lr, rng) returns the summed NLL."""
    lr = config.initial_lr
    history = []
    best_val = np.inf
    best_model = None
    best_epoch = -1
    prev_train = None
    last_finite = None
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n_train)
        total = 0.0
        for start in range(0, n_train, config.batch_size):
            idx = perm[start : start + config.batch_size]
            total += batch_step(idx, lr, rng)
        penalty = sum(l2_penalty(t.net, config.l2_lambda) for t in tasks)
        train_loss = total / n_train + penalty
        if not np.isfinite(train_loss):
            raise TrainingDivergedError(
                f"training loss became non-finite at epoch {epoch}",
                last_model=last_finite, history=history,
            )
        val = float(val_loss())
        history.append(EpochRecord(epoch, float(train_loss), val, lr))
        last_finite = copy.deepcopy(model)
        if val < best_val:
            best_val, best_model, best_epoch = val, last_finite, epoch
        if prev_train is not None and train_loss > prev_train:
            lr *= config.lr_decay_factor
        prev_train = train_loss
    return best_model, history, best_epoch


# ---------------------------------------------------------------------------
# family trainers
# ---------------------------------------------------------------------------


def _train_grid_softmax(family, train, val, config, case_mode, grid_n):
    rng = np.random.Generator(np.random.PCG64(config.seed))
    model = init_grid_softmax(
        family, rng, case_mode=case_mode, grid_n=grid_n,
        hidden_layers=config.hidden_layers, neurons=config.neurons_per_hidden_layer,
        activation=config.activation_kind(), use_batchnorm=config.use_batchnorm,
    )
    X1 = model.model_input(train.features, train.imbalances)
    y1 = train.labels[:, 0]
    t1 = model.grid.index(y1)
    t2 = model.grid.index(train.labels[:, 1])
    X2 = np.column_stack([X1, y1 / 50.0])
    zero_idx = model.grid.index(0)
    allowed = np.ones(model.grid.size, dtype=bool)
    allowed[zero_idx] = False
    cond_rows = y1 == 0 if case_mode == 2 else np.ones(len(train), dtype=bool)

    task1 = _NetTask(model.net1, model.bn1, config)
    task2 = _NetTask(model.net2, model.bn2, config)

    def batch_step(idx, lr, rng):
        B = idx.size
        nll = task1.step(X1[idx], lambda lg: softmax_nll(lg, t1[idx]), B, lr, rng)
        sub = idx[cond_rows[idx]]
        if case_mode == 2:
            loss2 = lambda lg: masked_softmax_nll(lg, t2[sub], allowed)
        else:
            loss2 = lambda lg: softmax_nll(lg, t2[sub])
        nll += task2.step(X2[sub], loss2, B, lr, rng)
        return nll

    def val_loss():
        return -model.loglik_batch(val.features, val.labels, imbalances=val.imbalances).mean()

    return _run_epochs(
        model, [task1, task2], batch_step, val_loss, len(train), config, rng
    )


def _csr_ranges(row_samples, n):
    """Start offsets per sample for rows sorted by sample index."""
    counts = np.bincount(row_samples, minlength=n)
    starts = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])
    return starts


def _gather_ranges(starts, ends):
    """Concatenation of arange(starts[i], ends[i]) without a Python loop."""
    counts = ends - starts
    nz = counts > 0
    s, c = starts[nz], counts[nz]
    total = int(c.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    out = np.ones(total, dtype=np.int64)
    out[0] = s[0]
    boundaries = np.cumsum(c)[:-1]
    out[boundaries] = s[1:] - (s[:-1] + c[:-1]) + 1
    return np.cumsum(out)


class _StepData:
    """Expansion rows for one step network over the training set."""

    def __init__(self, X, labels, component, grid_n):
        values = labels[:, component - 1]
        self.rows = {}
        for direction, mask in (("+", values > 0), ("-", values < 0)):
            idx = np.nonzero(mask)[0]
            s_idx, ys, stop = _expansion_rows(idx, np.abs(values[idx]), grid_n)
            order = np.argsort(s_idx, kind="stable")
            s_idx, ys, stop = s_idx[order], ys[order], stop[order]
            self.rows[direction] = {
                "sample": s_idx,
                "ys": ys,
                "stop": stop.astype(np.float64),
                "starts": _csr_ranges(s_idx, labels.shape[0]),
            }

    def batch(self, direction, idx):
        r = self.rows[direction]
        sel = _gather_ranges(r["starts"][idx], r["starts"][idx + 1])
        return r["sample"][sel], r["ys"][sel], r["stop"][sel]


def _train_spatial(train, val, config, case_mode, grid_n):
    rng = np.random.Generator(np.random.PCG64(config.seed))
    model = init_spatial(
        rng, case_mode=case_mode, grid_n=grid_n,
        hidden_layers=config.hidden_layers, neurons=config.neurons_per_hidden_layer,
        activation=config.activation_kind(), use_batchnorm=config.use_batchnorm,
    )
    X = train.features
    labels = train.labels
    c1 = _cls_array(labels[:, 0])
    c2 = _cls_array(labels[:, 1])
    X_h2 = np.column_stack([X, labels[:, 0] / 50.0])
    cond_rows = labels[:, 0] == 0 if case_mode == 2 else np.ones(len(train), dtype=bool)
    allowed2 = np.zeros(3, dtype=bool)
    allowed2[[CLS_UP, CLS_DOWN]] = True

    steps = {
        1: _StepData(X, labels, 1, grid_n),
        2: _StepData(X, labels, 2, grid_n),
    }
    tasks = {name: _NetTask(*model._net(name), config) for name in
             ("h1", "h2", "f1_plus", "f1_minus", "f2_plus", "f2_minus")}

    from .models import build_step_inputs  # local alias for clarity

    def batch_step(idx, lr, rng):
        B = idx.size
        nll = tasks["h1"].step(X[idx], lambda lg: softmax_nll(lg, c1[idx]), B, lr, rng)
        sub = idx[cond_rows[idx]]
        if case_mode == 2:
            loss_h2 = lambda lg: masked_softmax_nll(lg, c2[sub], allowed2)
        else:
            loss_h2 = lambda lg: softmax_nll(lg, c2[sub])
        nll += tasks["h2"].step(X_h2[sub], loss_h2, B, lr, rng)
        for component in (1, 2):
            for direction in ("+", "-"):
                s_idx, ys, stop = steps[component].batch(direction, idx)
                if s_idx.size == 0:
                    continue
                rows = build_step_inputs(
                    X, s_idx, ys, direction,
                    y1=None if component == 1 else labels[s_idx, 0],
                )
                name = f"f{component}_{'plus' if direction == '+' else 'minus'}"
                nll += tasks[name].step(
                    rows, lambda lg: bernoulli_nll(lg, stop), B, lr, rng
                )
        return nll

    def val_loss():
        return -model.loglik_batch(val.features, val.labels).mean()

    return _run_epochs(
        model, list(tasks.values()), batch_step, val_loss, len(train), config, rng
    )


def train_model(family, train, val, config, case_mode=1, grid_n=50):
    """Fit one family on the given Datasets.

    Returns (model, history, best_epoch); history rows carry the per-epoch
    train loss, validation loss, and learning rate.  The returned model is
    the epoch snapshot with the lowest validation loss.
    """
    if family == "naive":
        model = naive_fit(train.labels, grid_n=grid_n, case_mode=case_mode)
        val_nll = -model.loglik_batch(None, val.labels).mean()
        history = [EpochRecord(1, float(val_nll), float(val_nll), 0.0)]
        return model, history, 1
    if len(train) == 0 or len(val) == 0:
        raise TrainingError("train_model: empty train or validation split")
    if family in ("logistic", "standard"):
        return _train_grid_softmax(family, train, val, config, case_mode, grid_n)
    if family == "spatial":
        return _train_spatial(train, val, config, case_mode, grid_n)
    raise TrainingError(f"unknown family {family!r}")
