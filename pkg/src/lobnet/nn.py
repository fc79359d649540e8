"""Dense feedforward networks with exact analytic gradients.

Small, self-contained engine in float64 numpy: a stack of dense layers with
one of four hidden nonlinearities (tanh, sigmoid, relu, clipped relu),
optional batch normalization on each hidden pre-activation, inverted dropout
on hidden activations, a softmax or scalar-logit output head, RMSProp
updates, and a central-finite-difference gradient checker.

Layer l computes g(W_l a_{l-1} + b_l); the final layer is linear and its
output ("logits") is consumed by one of the heads.  All arrays are float64;
weights have shape (d_out, d_in) and batches are row-major (n, d).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

ACTIVATION_KINDS = ("tanh", "sigmoid", "relu", "clipped_relu")
OUTPUT_HEADS = ("softmax", "scalar_logit")


class NetworkError(Exception):
    """Base class for engine errors; `operation` names the failing step."""

    operation = "nn"


class DimensionMismatchError(NetworkError):
    operation = "nn.forward"

    def __init__(self, layer_index, expected, got):
        self.layer_index = layer_index
        super().__init__(
            f"layer {layer_index}: expected input dimension {expected}, got {got}"
        )


@dataclass(frozen=True)
class ActivationKind:
    """Hidden nonlinearity; `clip` is the ceiling for clipped_relu only."""

    kind: str
    clip: float = 0.0

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS:
            raise NetworkError(f"unknown activation kind {self.kind!r}")
        if self.kind == "clipped_relu" and not self.clip > 0:
            raise NetworkError("clipped_relu requires clip > 0")

    def apply(self, z):
        if self.kind == "tanh":
            return np.tanh(z)
        if self.kind == "sigmoid":
            return sigmoid(z)
        if self.kind == "relu":
            return np.maximum(z, 0.0)
        return np.minimum(np.maximum(z, 0.0), self.clip)

    def derivative(self, z, a):
        """da/dz given pre-activation z and activation a = apply(z)."""
        if self.kind == "tanh":
            return 1.0 - a * a
        if self.kind == "sigmoid":
            return a * (1.0 - a)
        if self.kind == "relu":
            return (z > 0).astype(np.float64)
        return ((z > 0) & (z < self.clip)).astype(np.float64)

    @property
    def output_bound(self):
        """Upper bound on |activation| (None when unbounded)."""
        if self.kind in ("tanh", "sigmoid"):
            return 1.0
        if self.kind == "clipped_relu":
            return self.clip
        return None


@dataclass
class DenseLayer:
    weights: np.ndarray  # (d_out, d_in)
    bias: np.ndarray  # (d_out,)

    @property
    def d_out(self):
        return self.weights.shape[0]

    @property
    def d_in(self):
        return self.weights.shape[1]


@dataclass
class NetworkParams:
    """Parameters of a dense network: hidden layers then one linear layer.

    `layers[:-1]` are hidden (activation applied, batch norm / dropout
    eligible); `layers[-1]` produces the logits fed to `output_head`.
    A single-layer network is an affine model (logistic regression when
    paired with a softmax or scalar-logit head).
    """

    layers: list[DenseLayer]
    hidden_activation: ActivationKind
    output_head: str = "softmax"

    def __post_init__(self):
        if self.output_head not in OUTPUT_HEADS:
            raise NetworkError(f"unknown output head {self.output_head!r}")
        for i in range(1, len(self.layers)):
            if self.layers[i].d_in != self.layers[i - 1].d_out:
                raise DimensionMismatchError(
                    i, self.layers[i].d_in, self.layers[i - 1].d_out
                )
        if self.output_head == "scalar_logit" and self.layers[-1].d_out != 1:
            raise NetworkError("scalar_logit head requires final dimension 1")

    @property
    def layer_count(self):
        return len(self.layers)

    @property
    def input_dim(self):
        return self.layers[0].d_in

    @property
    def output_dim(self):
        return self.layers[-1].d_out

    @property
    def n_hidden(self):
        return len(self.layers) - 1

    def n_parameters(self):
        return sum(l.weights.size + l.bias.size for l in self.layers)

    def copy(self):
        return copy.deepcopy(self)


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass
class BatchNormState:
    """Batch normalization applied to each hidden pre-activation.

    Train mode normalizes with batch statistics and updates the running
    moments as running = momentum * running + (1 - momentum) * batch;
    infer mode normalizes with the running moments.
    """

    layers: list[BatchNormLayer]
    momentum: float = 0.99
    epsilon: float = 1e-5

    def copy(self):
        return copy.deepcopy(self)

    @classmethod
    def for_network(cls, params, momentum=0.99, epsilon=1e-5):
        layers = [
            BatchNormLayer(
                gamma=np.ones(l.d_out),
                beta=np.zeros(l.d_out),
                running_mean=np.zeros(l.d_out),
                running_var=np.ones(l.d_out),
            )
            for l in params.layers[:-1]
        ]
        return cls(layers=layers, momentum=momentum, epsilon=epsilon)


def init_network(layer_dims, activation, output_head, rng):
    """Glorot-uniform weights in +-sqrt(6/(d_in+d_out)), zero biases."""
    layers = []
    for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = np.sqrt(6.0 / (d_in + d_out))
        w = rng.uniform(-bound, bound, size=(d_out, d_in))
        layers.append(DenseLayer(weights=w, bias=np.zeros(d_out)))
    return NetworkParams(
        layers=layers, hidden_activation=activation, output_head=output_head
    )


# ---------------------------------------------------------------------------
# elementary maps
# ---------------------------------------------------------------------------


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_sigmoid(z):
    """log(e^z / (1 + e^z)), stable for large |z|."""
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, -np.log1p(np.exp(-np.abs(z))), z - np.log1p(np.exp(z)))


def softplus(z):
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def softmax(z):
    """Probability vector e^{z_i} / sum_j e^{z_j}, with max subtraction."""
    z = np.asarray(z, dtype=np.float64)
    if np.isnan(z).any():
        raise NetworkError("softmax: NaN in input")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    if np.isnan(z).any():
        raise NetworkError("softmax: NaN in input")
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def step_probability(logit):
    """e^f / (1 + e^f): hazard of stopping at the current level.

    Strictly increasing; 0 maps to 0.5 exactly.  Beyond |logit| ~ 37 the
    result saturates to 0.0/1.0 in float64; log_sigmoid stays exact there
    and is what the likelihood code uses.
    """
    logit = np.asarray(logit, dtype=np.float64)
    if np.isnan(logit).any():
        raise NetworkError("step_probability: NaN in input")
    return sigmoid(logit)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    """Everything backward() needs: per-layer inputs and intermediates."""

    inputs: list  # a_{l-1} fed to each layer (post-dropout of previous)
    pre_acts: list  # z_l = W_l a_{l-1} + b_l for hidden layers
    bn_caches: list  # per hidden layer: (zhat, inv_std) or None
    activations: list  # hidden activations before dropout
    dropout_masks: list  # scaled masks (mask / keep) or None
    logits: np.ndarray
    mode: str
    single: bool  # input was 1-D

    @property
    def output(self):
        return self.logits[0] if self.single else self.logits


def forward(
    params,
    x,
    *,
    bn=None,
    mode="infer",
    dropout_rate=0.0,
    dropout_masks=None,
    rng=None,
):
    """Run the network; returns a ForwardCache whose .logits is the pre-head
    output.  In train mode batch-norm uses batch statistics (updating the
    running moments) and dropout masks are drawn from `rng` unless supplied.
    """
    if mode not in ("train", "infer"):
        raise NetworkError(f"unknown mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.shape[1] != params.input_dim:
        raise DimensionMismatchError(0, params.input_dim, a.shape[1])
    use_dropout = mode == "train" and dropout_rate > 0.0
    if use_dropout and dropout_masks is None and rng is None:
        raise NetworkError("train-mode dropout needs masks or an rng")

    inputs, pre_acts, bn_caches, activations, masks = [], [], [], [], []
    n_hidden = params.n_hidden
    for l in range(n_hidden):
        layer = params.layers[l]
        if a.shape[1] != layer.d_in:
            raise DimensionMismatchError(l, layer.d_in, a.shape[1])
        inputs.append(a)
        z = a @ layer.weights.T + layer.bias
        pre_acts.append(z)
        if bn is not None:
            bl = bn.layers[l]
            if mode == "train":
                mean = z.mean(axis=0)
                var = z.var(axis=0)
                bl.running_mean = bn.momentum * bl.running_mean + (1 - bn.momentum) * mean
                bl.running_var = bn.momentum * bl.running_var + (1 - bn.momentum) * var
            else:
                mean, var = bl.running_mean, bl.running_var
            inv_std = 1.0 / np.sqrt(var + bn.epsilon)
            zhat = (z - mean) * inv_std
            bn_caches.append((zhat, inv_std))
            z = bl.gamma * zhat + bl.beta
        else:
            bn_caches.append(None)
        h = params.hidden_activation.apply(z)
        activations.append(h)
        if use_dropout:
            keep = 1.0 - dropout_rate
            if dropout_masks is not None:
                mask = dropout_masks[l]
            else:
                mask = (rng.random(h.shape) < keep) / keep
            masks.append(mask)
            a = h * mask
        else:
            masks.append(None)
            a = h
    out_layer = params.layers[-1]
    if a.shape[1] != out_layer.d_in:
        raise DimensionMismatchError(n_hidden, out_layer.d_in, a.shape[1])
    inputs.append(a)
    logits = a @ out_layer.weights.T + out_layer.bias
    return ForwardCache(
        inputs=inputs,
        pre_acts=pre_acts,
        bn_caches=bn_caches,
        activations=activations,
        dropout_masks=masks,
        logits=logits,
        mode=mode,
        single=single,
    )


@dataclass
class Gradients:
    weights: list  # dL/dW per layer
    biases: list
    gammas: list = field(default_factory=list)  # per hidden layer when bn used
    betas: list = field(default_factory=list)

    def scale(self, factor):
        for arrs in (self.weights, self.biases, self.gammas, self.betas):
            for a in arrs:
                a *= factor
        return self


def backward(params, cache, dlogits, *, bn=None, l2_lambda=0.0):
    """Backpropagate dL/dlogits; returns gradients mirroring the parameter
    shapes.  When l2_lambda > 0 adds the gradient of l2_lambda * sum(W^2)
    over weight matrices (biases and batch-norm parameters excluded).
    """
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.ndim == 1:
        dlogits = dlogits[None, :]
    if dlogits.shape != cache.logits.shape:
        raise NetworkError(
            f"backward: upstream gradient shape {dlogits.shape} does not match "
            f"logits shape {cache.logits.shape}"
        )
    n_layers = params.layer_count
    d_weights = [None] * n_layers
    d_biases = [None] * n_layers
    use_bn = bn is not None
    d_gammas = [None] * params.n_hidden if use_bn else []
    d_betas = [None] * params.n_hidden if use_bn else []

    out_layer = params.layers[-1]
    d_weights[-1] = dlogits.T @ cache.inputs[-1]
    d_biases[-1] = dlogits.sum(axis=0)
    da = dlogits @ out_layer.weights

    for l in range(params.n_hidden - 1, -1, -1):
        mask = cache.dropout_masks[l]
        if mask is not None:
            da = da * mask
        z_for_act = cache.pre_acts[l]
        if use_bn:
            zhat, inv_std = cache.bn_caches[l]
            bl = bn.layers[l]
            z_bn = bl.gamma * zhat + bl.beta
            dz_bn = da * params.hidden_activation.derivative(z_bn, cache.activations[l])
            d_gammas[l] = (dz_bn * zhat).sum(axis=0)
            d_betas[l] = dz_bn.sum(axis=0)
            dzhat = dz_bn * bl.gamma
            if cache.mode == "train":
                m = zhat.shape[0]
                # backprop through the batch mean/variance
                dz = (
                    dzhat
                    - dzhat.mean(axis=0)
                    - zhat * (dzhat * zhat).mean(axis=0)
                ) * inv_std
            else:
                dz = dzhat * inv_std
        else:
            dz = da * params.hidden_activation.derivative(
                z_for_act, cache.activations[l]
            )
        layer = params.layers[l]
        d_weights[l] = dz.T @ cache.inputs[l]
        d_biases[l] = dz.sum(axis=0)
        da = dz @ layer.weights

    if l2_lambda > 0.0:
        for l, layer in enumerate(params.layers):
            d_weights[l] = d_weights[l] + 2.0 * l2_lambda * layer.weights
    return Gradients(weights=d_weights, biases=d_biases, gammas=d_gammas, betas=d_betas)


def l2_penalty(params, l2_lambda):
    """l2_lambda * sum of squared weight-matrix entries."""
    if l2_lambda == 0.0:
        return 0.0
    return l2_lambda * sum(float((l.weights**2).sum()) for l in params.layers)


# ---------------------------------------------------------------------------
# losses (sums over rows; callers divide by the batch size)
# ---------------------------------------------------------------------------


def softmax_nll(logits, targets):
    """(total negative log-likelihood, dL/dlogits) for integer class targets."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    logp = log_softmax(logits)
    rows = np.arange(logits.shape[0])
    nll = -logp[rows, targets].sum()
    dlogits = np.exp(logp)
    dlogits[rows, targets] -= 1.0
    return nll, dlogits


def masked_softmax_nll(logits, targets, allowed):
    """Softmax restricted to `allowed` (bool, shared across rows or per-row)."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), logits.shape)
    masked = np.where(allowed, logits, -np.inf)
    shifted = masked - masked.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    rows = np.arange(logits.shape[0])
    if not allowed[rows, targets].all():
        raise NetworkError("masked_softmax_nll: target outside allowed support")
    nll = -np.log(p[rows, targets]).sum()
    dlogits = p.copy()
    dlogits[rows, targets] -= 1.0
    dlogits[~allowed] = 0.0
    return nll, dlogits


def bernoulli_nll(logits, targets):
    """(total NLL, dL/dlogit) for scalar logits and 0/1 targets.

    NLL per row is softplus(z) - t*z, the negative log-likelihood of the
    e^z/(1+e^z) parameterization.
    """
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    nll = float((softplus(z) - t * z).sum())
    dz = sigmoid(z) - t
    return nll, dz.reshape(-1, 1)


# ---------------------------------------------------------------------------
# RMSProp
# ---------------------------------------------------------------------------


@dataclass
class RmsPropState:
    """Per-parameter running average of squared gradients.

    Update rule: v <- decay*v + (1-decay)*g^2; theta <- theta - lr*g/(sqrt(v)+eps).
    """

    v_weights: list
    v_biases: list
    v_gammas: list
    v_betas: list
    learning_rate: float
    decay: float = 0.9
    epsilon: float = 1e-8

    @classmethod
    def for_network(cls, params, learning_rate, bn=None, decay=0.9, epsilon=1e-8):
        return cls(
            v_weights=[np.zeros_like(l.weights) for l in params.layers],
            v_biases=[np.zeros_like(l.bias) for l in params.layers],
            v_gammas=[np.zeros_like(b.gamma) for b in bn.layers] if bn else [],
            v_betas=[np.zeros_like(b.beta) for b in bn.layers] if bn else [],
            learning_rate=learning_rate,
            decay=decay,
            epsilon=epsilon,
        )


def _rmsprop_update(v, param, grad, lr, decay, eps):
    v *= decay
    v += (1.0 - decay) * grad * grad
    param -= lr * grad / (np.sqrt(v) + eps)


def rmsprop_step(state, params, grads, *, bn=None):
    """Apply one RMSProp update in place; returns (params, state)."""
    lr, decay, eps = state.learning_rate, state.decay, state.epsilon
    for l, layer in enumerate(params.layers):
        _rmsprop_update(state.v_weights[l], layer.weights, grads.weights[l], lr, decay, eps)
        _rmsprop_update(state.v_biases[l], layer.bias, grads.biases[l], lr, decay, eps)
    if bn is not None:
        for l, bl in enumerate(bn.layers):
            _rmsprop_update(state.v_gammas[l], bl.gamma, grads.gammas[l], lr, decay, eps)
            _rmsprop_update(state.v_betas[l], bl.beta, grads.betas[l], lr, decay, eps)
    return params, state


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def _param_arrays(params, bn=None):
    arrays = []
    for l in params.layers:
        arrays.append(l.weights)
        arrays.append(l.bias)
    if bn is not None:
        for bl in bn.layers:
            arrays.append(bl.gamma)
            arrays.append(bl.beta)
    return arrays


def _grad_arrays(grads, with_bn):
    arrays = []
    for w, b in zip(grads.weights, grads.biases):
        arrays.append(w)
        arrays.append(b)
    if with_bn:
        for g, bt in zip(grads.gammas, grads.betas):
            arrays.append(g)
            arrays.append(bt)
    return arrays


def gradient_check(params, loss_fn, *, bn=None, h=1e-5):
    """Compare analytic gradients to central finite differences.

    `loss_fn(params, bn)` must be deterministic (dropout off or a fixed
    mask, batch norm in infer mode) and return (loss, Gradients).  Returns
    max over parameters of |analytic - numeric| / max(1, |analytic|).
    """
    _, grads = loss_fn(params, bn)
    p_arrays = _param_arrays(params, bn)
    g_arrays = _grad_arrays(grads, bn is not None)
    worst = 0.0
    for p, g in zip(p_arrays, g_arrays):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            lo_plus = loss_fn(params, bn)[0]
            flat_p[i] = orig - h
            lo_minus = loss_fn(params, bn)[0]
            flat_p[i] = orig
            numeric = (lo_plus - lo_minus) / (2.0 * h)
            err = abs(flat_g[i] - numeric) / max(1.0, abs(flat_g[i]))
            if err > worst:
                worst = err
    return worst


# ---------------------------------------------------------------------------
# serialization (format_version 1)
# ---------------------------------------------------------------------------


def network_to_dict(params, bn=None):
    d = {
        "format_version": 1,
        "activation": {
            "kind": params.hidden_activation.kind,
            "clip": params.hidden_activation.clip,
        },
        "output_head": params.output_head,
        "layers": [
            {
                "rows": l.d_out,
                "cols": l.d_in,
                "weights": [float(v) for v in l.weights.reshape(-1)],
                "bias": [float(v) for v in l.bias],
            }
            for l in params.layers
        ],
        "batchnorm": None,
    }
    if bn is not None:
        d["batchnorm"] = {
            "momentum": bn.momentum,
            "epsilon": bn.epsilon,
            "layers": [
                {
                    "gamma": [float(v) for v in bl.gamma],
                    "beta": [float(v) for v in bl.beta],
                    "running_mean": [float(v) for v in bl.running_mean],
                    "running_var": [float(v) for v in bl.running_var],
                }
                for bl in bn.layers
            ],
        }
    return d


def network_from_dict(d):
    if d.get("format_version") != 1:
        raise NetworkError(f"unsupported format_version {d.get('format_version')!r}")
    act = ActivationKind(kind=d["activation"]["kind"], clip=d["activation"].get("clip", 0.0))
    layers = []
    for ld in d["layers"]:
        w = np.array(ld["weights"], dtype=np.float64).reshape(ld["rows"], ld["cols"])
        b = np.array(ld["bias"], dtype=np.float64)
        layers.append(DenseLayer(weights=w, bias=b))
    params = NetworkParams(
        layers=layers, hidden_activation=act, output_head=d["output_head"]
    )
    bn = None
    if d.get("batchnorm") is not None:
        bd = d["batchnorm"]
        bn = BatchNormState(
            layers=[
                BatchNormLayer(
                    gamma=np.array(bl["gamma"], dtype=np.float64),
                    beta=np.array(bl["beta"], dtype=np.float64),
                    running_mean=np.array(bl["running_mean"], dtype=np.float64),
                    running_var=np.array(bl["running_var"], dtype=np.float64),
                )
                for bl in bd["layers"]
            ],
            momentum=bd["momentum"],
            epsilon=bd["epsilon"],
        )
    return params, bn


def network_to_json(params, bn=None):
    """Round-trips bit-exactly: floats are written with repr precision."""
    return json.dumps(network_to_dict(params, bn), sort_keys=True)


def network_from_json(text):
    return network_from_dict(json.loads(text))


def logit_bound(params, bn=None):
    """Worst-case |logit| for a scalar-logit net with bounded hidden units.

    The last hidden activation is bounded by the activation's output bound,
    so |W_L a + b_L| <= bound * sum|W_L| + |b_L| regardless of input or
    batch-norm scaling of earlier layers.  Raises for unbounded activations
    (relu) and for networks with no hidden layer.
    """
    amax = params.hidden_activation.output_bound
    if amax is None:
        raise NetworkError("logit_bound: hidden units are unbounded")
    if params.n_hidden == 0:
        raise NetworkError("logit_bound: network has no hidden layer")
    last = params.layers[-1]
    return float(amax * np.abs(last.weights).sum() + np.abs(last.bias).sum())
