"""Dense networks in numpy: softmax classifier and 3-component Weibull MDN heads.

Everything is float64. Weight matrices are stored ``(fan_in, fan_out)`` so a
batch ``x`` of shape ``(n, fan_in)`` maps to ``x @ W + b``.
"""

from __future__ import annotations

import base64
import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from poltwin.dataset import N_FEATURES, Scaler
from poltwin.vocab import N_TAGS

MODEL_SCHEMA_VERSION = 1
HIDDEN_SIZES = (55, 110, 55)
N_COMPONENTS = 3
POSITIVE_FLOOR = 1e-3

SOFTMAX_CLASSIFIER = "SOFTMAX_CLASSIFIER"
MDN_WEIBULL3 = "MDN_WEIBULL3"
RELU = "RELU"
TANH = "TANH"


class ModelFileError(ValueError):
    pass


class NetworkError(ValueError):
    pass


# -- elementwise helpers -----------------------------------------------------

def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def log_softmax(z):
    z = np.asarray(z, float)
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))


def logsumexp(z, axis=-1):
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))).squeeze(axis)


# -- network -----------------------------------------------------------------

@dataclass
class DenseNet:
    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str
    head: str
    dropout_p: float = 0.1
    train_seed: int | None = None
    scaler: Scaler | None = None

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.layer_dims)
        self.layer_dims = dims
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise NetworkError("layer count does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise NetworkError(f"layer {i} has shape {w.shape}/{b.shape}, expected "
                                   f"{(dims[i], dims[i + 1])}/{(dims[i + 1],)}")
        if self.hidden_activation not in (RELU, TANH):
            raise NetworkError(f"unknown activation {self.hidden_activation!r}")
        expected_out = {SOFTMAX_CLASSIFIER: N_TAGS, MDN_WEIBULL3: 3 * N_COMPONENTS}.get(self.head)
        if expected_out is None:
            raise NetworkError(f"unknown head {self.head!r}")
        if dims[-1] != expected_out:
            raise NetworkError(f"{self.head} head needs {expected_out} outputs, got {dims[-1]}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise NetworkError("dropout_p must lie in [0, 1)")

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "DenseNet":
        return copy.deepcopy(self)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())


def init_net(head: str, rng: np.random.Generator, hidden: tuple[int, ...] = HIDDEN_SIZES,
             dropout_p: float = 0.1, n_in: int = N_FEATURES,
             activation: str | None = None) -> DenseNet:
    """Glorot-uniform weights, zero biases.

    The classifier defaults to ReLU hidden units and the MDN to tanh.
    """
    n_out = N_TAGS if head == SOFTMAX_CLASSIFIER else 3 * N_COMPONENTS
    if activation is None:
        activation = RELU if head == SOFTMAX_CLASSIFIER else TANH
    dims = (n_in, *hidden, n_out)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return DenseNet(dims, weights, biases, activation, head, dropout_p)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)   # input to each layer
    pre: list[np.ndarray] = field(default_factory=list)      # pre-activations of hidden layers
    masks: list[np.ndarray | None] = field(default_factory=list)


def forward(net: DenseNet, x, train: bool = False, rng: np.random.Generator | None = None):
    """Raw network outputs; in train mode also the cache needed by :func:`backward`.

    Train mode applies inverted dropout after every hidden activation, so
    eval mode needs no rescaling.
    """
    a = np.asarray(x, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    if a.shape[1] != net.layer_dims[0]:
        raise NetworkError(f"input width {a.shape[1]} != {net.layer_dims[0]}")
    if train and net.dropout_p > 0 and rng is None:
        raise NetworkError("train-mode dropout needs an rng")
    cache = ForwardCache()
    n_layers = len(net.weights)
    keep = 1.0 - net.dropout_p
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        cache.inputs.append(a)
        z = a @ w + b
        if i == n_layers - 1:
            return z, cache
        cache.pre.append(z)
        a = np.maximum(z, 0.0) if net.hidden_activation == RELU else np.tanh(z)
        mask = None
        if train and net.dropout_p > 0:
            mask = (rng.random(a.shape) < keep) / keep
            a = a * mask
        cache.masks.append(mask)
    raise AssertionError("unreachable")


def backward(net: DenseNet, cache: ForwardCache, d_out) -> list[np.ndarray]:
    """Gradients ``[dW0, db0, dW1, db1, ...]`` given dLoss/dRawOutput."""
    if not cache.inputs:
        raise NetworkError("backward needs a forward cache")
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))
    delta = np.asarray(d_out, float)
    for i in range(len(net.weights) - 1, -1, -1):
        grads[2 * i] = cache.inputs[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i == 0:
            break
        da = delta @ net.weights[i].T
        mask = cache.masks[i - 1]
        if mask is not None:
            da = da * mask
        z = cache.pre[i - 1]
        if net.hidden_activation == RELU:
            delta = da * (z > 0)
        else:
            delta = da * (1.0 - np.tanh(z) ** 2)
    return grads


# -- classifier loss -----------------------------------------------------------

def cross_entropy(logits, labels):
    """Mean ``-log softmax(logits)[label]`` over the batch (log-sum-exp form)."""
    logits = np.asarray(logits, float)
    if logits.ndim == 1:
        logits = logits[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    lp = log_softmax(logits)
    return float(-lp[np.arange(len(labels)), labels].mean())


def cross_entropy_grad(logits, labels):
    logits = np.atleast_2d(np.asarray(logits, float))
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    p = softmax(logits)
    p[np.arange(len(labels)), labels] -= 1.0
    return p / len(labels)


# -- Weibull mixture head ---------------------------------------------------

@dataclass(frozen=True)
class MixtureParams:
    """Batched mixture parameters; each field has shape ``(n, 3)``."""

    weights: np.ndarray
    scales: np.ndarray
    concentrations: np.ndarray

    def __post_init__(self) -> None:
        for arr in (self.weights, self.scales, self.concentrations):
            if arr.ndim != 2 or arr.shape[1] != N_COMPONENTS:
                raise NetworkError("mixture parameters must have shape (n, 3)")

    def row(self, i: int) -> "MixtureParams":
        return MixtureParams(self.weights[i:i + 1], self.scales[i:i + 1],
                             self.concentrations[i:i + 1])


def mixture(weights, scales, concentrations) -> MixtureParams:
    return MixtureParams(np.atleast_2d(np.asarray(weights, float)),
                         np.atleast_2d(np.asarray(scales, float)),
                         np.atleast_2d(np.asarray(concentrations, float)))


def mdn_heads(raw) -> MixtureParams:
    raw = np.atleast_2d(np.asarray(raw, float))
    if raw.shape[1] != 3 * N_COMPONENTS:
        raise NetworkError("MDN head expects 9 raw outputs")
    return MixtureParams(
        softmax(raw[:, :3]),
        softplus(raw[:, 3:6]) + POSITIVE_FLOOR,
        softplus(raw[:, 6:9]) + POSITIVE_FLOOR,
    )


def weibull_logpdf(t, scale, conc):
    t = np.asarray(t, float)
    z = np.log(t) - np.log(scale)
    return np.log(conc) - np.log(scale) + (conc - 1.0) * z - np.exp(conc * z)


def _component_logs(params: MixtureParams, t):
    t = np.atleast_1d(np.asarray(t, float))[:, None]
    if np.any(t <= 0):
        raise NetworkError("mixture likelihood needs t > 0")
    with np.errstate(divide="ignore"):
        logw = np.log(params.weights)
    return logw + weibull_logpdf(t, params.scales, params.concentrations)


def mdn_nll(params: MixtureParams, t) -> float:
    """Mean negative log-likelihood of ``t`` under the Weibull mixtures."""
    return float(-logsumexp(_component_logs(params, t), axis=1).mean())


def mdn_nll_grad(raw, t):
    """dLoss/dRaw for the mean mixture NLL, through softmax and softplus maps."""
    raw = np.atleast_2d(np.asarray(raw, float))
    params = mdn_heads(raw)
    comp = _component_logs(params, t)
    resp = np.exp(comp - logsumexp(comp, axis=1)[:, None])
    lam, k = params.scales, params.concentrations
    tt = np.atleast_1d(np.asarray(t, float))[:, None]
    z = np.log(tt) - np.log(lam)
    u = np.exp(k * z)
    d_w = params.weights - resp
    d_lam = -resp * (k / lam) * (u - 1.0)
    d_k = -resp * (1.0 / k + z * (1.0 - u))
    grad = np.concatenate(
        [d_w, d_lam * sigmoid(raw[:, 3:6]), d_k * sigmoid(raw[:, 6:9])], axis=1
    )
    return grad / raw.shape[0]


PAPER_WEIGHTED_SUM = "PAPER_WEIGHTED_SUM"
COMPONENT = "COMPONENT"


def weibull_inverse_cdf(u, scale, conc):
    return scale * (-np.log1p(-np.asarray(u, float))) ** (1.0 / conc)


def mdn_sample(params: MixtureParams, rng: np.random.Generator | None = None,
               scheme: str = PAPER_WEIGHTED_SUM, u=None) -> np.ndarray:
    """One draw per row.

    ``PAPER_WEIGHTED_SUM`` draws every component by inverse CDF and returns
    the weight-averaged draw; ``COMPONENT`` picks one component by weight and
    returns its draw. ``u`` overrides the uniforms (shape ``(n, 3)``).
    """
    n = params.weights.shape[0]
    if u is None:
        u = rng.random((n, N_COMPONENTS))
    draws = weibull_inverse_cdf(u, params.scales, params.concentrations)
    if scheme == PAPER_WEIGHTED_SUM:
        return (params.weights * draws).sum(axis=1)
    if scheme == COMPONENT:
        if rng is None:
            raise NetworkError("component sampling needs an rng")
        cum = np.cumsum(params.weights, axis=1)
        pick = (rng.random((n, 1)) > cum).sum(axis=1)
        pick = np.minimum(pick, N_COMPONENTS - 1)
        return draws[np.arange(n), pick]
    raise NetworkError(f"unknown sampling scheme {scheme!r}")


# -- loss dispatch ------------------------------------------------------------

def loss_value(net: DenseNet, raw, y) -> float:
    if net.head == SOFTMAX_CLASSIFIER:
        return cross_entropy(raw, y)
    return mdn_nll(mdn_heads(raw), y)


def loss_grad_raw(net: DenseNet, raw, y):
    if net.head == SOFTMAX_CLASSIFIER:
        return cross_entropy_grad(raw, y)
    return mdn_nll_grad(raw, y)


def loss_and_grads(net: DenseNet, x, y, train: bool = False,
                   rng: np.random.Generator | None = None):
    raw, cache = forward(net, x, train=train, rng=rng)
    return loss_value(net, raw, y), backward(net, cache, loss_grad_raw(net, raw, y))


def evaluate_loss(net: DenseNet, x, y, batch_size: int = 4096) -> float:
    """Eval-mode mean loss over a whole set."""
    n = len(x)
    total = 0.0
    for s in range(0, n, batch_size):
        raw, _ = forward(net, x[s:s + batch_size])
        total += loss_value(net, raw, y[s:s + batch_size]) * len(raw)
    return total / n


# -- gradient check ------------------------------------------------------------

def _extended_forward(params: list[np.ndarray], net: DenseNet, x):
    """Eval-mode forward in extended precision; also returns ReLU on/off patterns."""
    a = np.asarray(x, dtype=np.longdouble)
    patterns = []
    n_layers = len(params) // 2
    for i in range(n_layers):
        z = a @ params[2 * i] + params[2 * i + 1]
        if i == n_layers - 1:
            return z, patterns
        if net.hidden_activation == RELU:
            patterns.append(z > 0)
            a = np.maximum(z, 0)
        else:
            a = np.tanh(z)


def _extended_loss(net: DenseNet, raw, y):
    if net.head == SOFTMAX_CLASSIFIER:
        m = raw.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(raw - m).sum(axis=1))
        return (lse - raw[np.arange(len(y)), np.asarray(y, int)]).mean()
    w_raw = raw[:, :3]
    logw = w_raw - w_raw.max(axis=1, keepdims=True)
    logw = logw - np.log(np.exp(logw).sum(axis=1, keepdims=True))
    lam = np.logaddexp(0, raw[:, 3:6]) + POSITIVE_FLOOR
    k = np.logaddexp(0, raw[:, 6:9]) + POSITIVE_FLOOR
    t = np.asarray(y, dtype=np.longdouble)[:, None]
    z = np.log(t) - np.log(lam)
    comp = logw + np.log(k) - np.log(lam) + (k - 1) * z - np.exp(k * z)
    m = comp.max(axis=1, keepdims=True)
    return -(m[:, 0] + np.log(np.exp(comp - m).sum(axis=1))).mean()


def grad_check(net: DenseNet, x, y, eps: float = 1e-5, max_params: int | None = 600,
               seed: int = 0,
               grad_fn: Callable[[DenseNet, np.ndarray, np.ndarray], list[np.ndarray]] | None = None,
               stats: dict | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in eval mode. Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    ``max_params`` limits the check to a seeded random subset of coordinates
    (``None`` checks all). ``grad_fn`` replaces the analytic gradient, e.g. to
    confirm that a corrupted gradient is caught.

    The difference quotients are evaluated in extended precision so that
    float64 rounding in the loss does not swamp gradients near 1e-8, and
    coordinates whose perturbation flips a ReLU on/off are skipped because
    the loss is not differentiable across that kink. Counts land in ``stats``.
    """
    if grad_fn is None:
        grads = loss_and_grads(net, x, y)[1]
    else:
        grads = grad_fn(net, x, y)
    x = np.atleast_2d(np.asarray(x, float))
    params = [p.astype(np.longdouble) for p in net.params()]
    coords = [(pi, j) for pi, p in enumerate(params) for j in range(p.size)]
    if max_params is not None and len(coords) > max_params:
        pick = np.random.default_rng(seed).choice(len(coords), size=max_params, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    _, base_pattern = _extended_forward(params, net, x)
    h = np.longdouble(eps)
    worst = 0.0
    skipped = 0
    for pi, j in coords:
        flat = params[pi].reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        raw_up, pat_up = _extended_forward(params, net, x)
        flat[j] = orig - h
        raw_dn, pat_dn = _extended_forward(params, net, x)
        flat[j] = orig
        if any((pu != pb).any() or (pd != pb).any()
               for pu, pd, pb in zip(pat_up, pat_dn, base_pattern)):
            skipped += 1
            continue
        numeric = float((_extended_loss(net, raw_up, y) - _extended_loss(net, raw_dn, y)) / (2 * h))
        analytic = float(grads[pi].reshape(-1)[j])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, rel)
    if stats is not None:
        stats.update(checked=len(coords) - skipped, skipped=skipped)
    return worst


# -- training ------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int
    batch_size: int
    learning_rate: float
    patience: int
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.max_epochs, self.batch_size, self.patience) < 1 or not self.learning_rate > 0:
            raise NetworkError("train config values must be positive")

    @classmethod
    def mlp_default(cls, seed: int = 0) -> "TrainConfig":
        return cls(100, 32, 1e-4, 3, seed)

    @classmethod
    def mdn_default(cls, seed: int = 0) -> "TrainConfig":
        return cls(50, 8, 1e-5, 1, seed)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0


class EarlyStopping:
    """Tracks the best validation loss; epochs are numbered from 1."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> tuple[bool, bool]:
        """Returns ``(improved, should_stop)``."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(net: DenseNet, train_set, val_set, config: TrainConfig,
          on_epoch: Callable[[int, float, float], None] | None = None
          ) -> tuple[DenseNet, TrainHistory]:
    """Mini-batch Adam with early stopping; returns the best-epoch network.

    ``train_set`` and ``val_set`` are ``(X, y)`` pairs. The input network is
    not modified.
    """
    x_tr, y_tr = (np.asarray(a) for a in train_set)
    x_va, y_va = (np.asarray(a) for a in val_set)
    if len(x_tr) == 0 or len(x_va) == 0:
        raise NetworkError("training and validation sets must be non-empty")
    net = net.copy()
    net.train_seed = config.seed
    rng = np.random.default_rng(config.seed)
    params = net.params()
    opt = Adam(params, config.learning_rate)
    stopper = EarlyStopping(config.patience)
    history = TrainHistory()
    best_params = [p.copy() for p in params]
    n = len(x_tr)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            loss, grads = loss_and_grads(net, x_tr[idx], y_tr[idx], train=True, rng=rng)
            opt.step(params, grads)
            total += loss * len(idx)
        val = evaluate_loss(net, x_va, y_va)
        history.train_loss.append(total / n)
        history.val_loss.append(val)
        history.stopped_epoch = epoch
        if on_epoch is not None:
            on_epoch(epoch, total / n, val)
        improved, stop = stopper.update(epoch, val)
        if improved:
            best_params = [p.copy() for p in params]
        if stop:
            break
    for p, best in zip(params, best_params):
        p[...] = best
    history.best_epoch = stopper.best_epoch
    return net, history


# -- persistence -----------------------------------------------------------------

def _encode_array(a: np.ndarray) -> dict:
    data = np.ascontiguousarray(a, dtype="<f8").tobytes()
    return {"shape": list(a.shape), "data": base64.b64encode(data).decode("ascii")}


def _decode_array(doc: dict) -> np.ndarray:
    raw = base64.b64decode(doc["data"], validate=True)
    return np.frombuffer(raw, dtype="<f8").astype(float).reshape(doc["shape"])


def model_to_dict(net: DenseNet) -> dict:
    return {
        "schema_version": MODEL_SCHEMA_VERSION,
        "layer_dims": list(net.layer_dims),
        "hidden_activation": net.hidden_activation,
        "head": net.head,
        "dropout_p": net.dropout_p,
        "train_seed": net.train_seed,
        "scaler": net.scaler.to_dict() if net.scaler is not None else None,
        "weights": [_encode_array(w) for w in net.weights],
        "biases": [_encode_array(b) for b in net.biases],
    }


def save_model(net: DenseNet, path, scaler: Scaler | None = None) -> None:
    """Write a versioned JSON model file; float64 weights are base64 little-endian."""
    if scaler is not None:
        net = copy.copy(net)
        net.scaler = scaler
    Path(path).write_text(json.dumps(model_to_dict(net), indent=1) + "\n")


def model_from_dict(doc: dict, expect_head: str | None = None) -> DenseNet:
    if not isinstance(doc, dict):
        raise ModelFileError("model file must hold a JSON object")
    version = doc.get("schema_version")
    if version != MODEL_SCHEMA_VERSION:
        raise ModelFileError(f"unsupported model schema_version {version!r}")
    if expect_head is not None and doc.get("head") != expect_head:
        raise ModelFileError(f"expected a {expect_head} model, file holds {doc.get('head')!r}")
    try:
        return DenseNet(
            layer_dims=tuple(doc["layer_dims"]),
            weights=[_decode_array(w) for w in doc["weights"]],
            biases=[_decode_array(b) for b in doc["biases"]],
            hidden_activation=doc["hidden_activation"],
            head=doc["head"],
            dropout_p=float(doc["dropout_p"]),
            train_seed=doc.get("train_seed"),
            scaler=Scaler.from_dict(doc["scaler"]) if doc.get("scaler") else None,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"corrupt model file: {exc}") from exc


def load_model(path, expect_head: str | None = None) -> DenseNet:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"corrupt model file: {exc}") from exc
    return model_from_dict(doc, expect_head)
