"""A small numpy neural engine with hand-written backward passes.

Layer functions follow the ``forward(...) -> (out, cache)`` /
``backward(dout, cache) -> grads`` convention; :class:`Network` stacks the
layer classes built on top of them.  Everything runs in float64.

Shapes: sequences are ``(batch, time, features)``; LSTM gate blocks are
packed ``[input, forget, cell, output]`` along the last axis of ``W``,
``U`` and ``b``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "LstmParams",
    "LayerSpec",
    "RmspropState",
    "sigmoid",
    "glorot_uniform",
    "lstm_step",
    "lstm_forward",
    "lstm_backward",
    "bilstm_forward",
    "bilstm_backward",
    "dropout",
    "dropout_backward",
    "batchnorm",
    "batchnorm_backward",
    "softmax",
    "dense_softmax_cross_entropy",
    "rmsprop_step",
    "clip_by_global_norm",
    "LSTM",
    "BiLSTM",
    "Dropout",
    "BatchNorm",
    "Dense",
    "Softmax",
    "Network",
    "gradient_check",
    "relative_error",
]

DTYPE = np.float64
BN_EPSILON = 1e-5


def sigmoid(x):
    # tanh form avoids overflow in exp for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {name}")


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

@dataclass
class LstmParams:
    """Weights of one LSTM cell.

    ``W`` is ``(input_dim, 4h)``, ``U`` is ``(h, 4h)``, ``b`` is ``(4h,)``.
    The per-gate properties (``W_i``, ``U_f``, ``b_o``, ...) are views.
    """

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        h = self.U.shape[0]
        if self.U.shape != (h, 4 * h) or self.W.ndim != 2 or self.W.shape[1] != 4 * h \
                or self.b.shape != (4 * h,):
            raise ValueError(
                f"inconsistent LSTM shapes W{self.W.shape} U{self.U.shape} b{self.b.shape}")

    @property
    def hidden_size(self) -> int:
        return self.U.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W.shape[0]

    @classmethod
    def initialize(cls, input_dim: int, hidden: int, rng: np.random.Generator,
                   forget_bias: float = 1.0) -> "LstmParams":
        W = np.concatenate([glorot_uniform(rng, input_dim, hidden) for _ in range(4)], axis=1)
        U = np.concatenate([glorot_uniform(rng, hidden, hidden) for _ in range(4)], axis=1)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = forget_bias
        return cls(W, U, b)

    @classmethod
    def zeros(cls, input_dim: int, hidden: int) -> "LstmParams":
        return cls(np.zeros((input_dim, 4 * hidden)), np.zeros((hidden, 4 * hidden)),
                   np.zeros(4 * hidden))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "U": self.U, "b": self.b}

    def _gate(self, arr, k):
        h = self.hidden_size
        return arr[..., k * h:(k + 1) * h]

    W_i = property(lambda self: self._gate(self.W, 0))
    W_f = property(lambda self: self._gate(self.W, 1))
    W_g = property(lambda self: self._gate(self.W, 2))
    W_o = property(lambda self: self._gate(self.W, 3))
    U_i = property(lambda self: self._gate(self.U, 0))
    U_f = property(lambda self: self._gate(self.U, 1))
    U_g = property(lambda self: self._gate(self.U, 2))
    U_o = property(lambda self: self._gate(self.U, 3))
    b_i = property(lambda self: self._gate(self.b, 0))
    b_f = property(lambda self: self._gate(self.b, 1))
    b_g = property(lambda self: self._gate(self.b, 2))
    b_o = property(lambda self: self._gate(self.b, 3))


def _gates(a, h):
    i = sigmoid(a[:, :h])
    f = sigmoid(a[:, h:2 * h])
    g = np.tanh(a[:, 2 * h:3 * h])
    o = sigmoid(a[:, 3 * h:])
    return i, f, g, o


def lstm_step(params: LstmParams, x_t, h_prev, c_prev):
    """One cell update; returns ``(h_t, c_t)``."""
    x_t, h_prev, c_prev = map(np.asarray, (x_t, h_prev, c_prev))
    h = params.hidden_size
    if x_t.shape[-1] != params.input_dim or h_prev.shape[-1] != h or c_prev.shape != h_prev.shape:
        raise ValueError(
            f"shape mismatch: x{x_t.shape} h{h_prev.shape} c{c_prev.shape} for "
            f"input_dim={params.input_dim}, hidden={h}")
    a = np.atleast_2d(x_t @ params.W + h_prev @ params.U + params.b)
    i, f, g, o = _gates(a, h)
    c_t = f * c_prev + i * g
    h_t = o * np.tanh(c_t)
    return h_t.reshape(h_prev.shape), c_t.reshape(c_prev.shape)


def lstm_forward(params: LstmParams, X, returns_sequence: bool = True):
    """Run the cell over ``X`` of shape ``(m, n, d)`` from zero state.

    Output is ``(m, n, h)`` with ``returns_sequence`` else ``(m, h)``.
    """
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim != 3 or X.shape[2] != params.input_dim:
        raise ValueError(f"expected (batch, time, {params.input_dim}) input, got {X.shape}")
    m, n, _ = X.shape
    h = params.hidden_size
    xw = (X.reshape(m * n, -1) @ params.W).reshape(m, n, 4 * h) + params.b
    hs = np.zeros((m, n + 1, h))
    cs = np.zeros((m, n + 1, h))
    gates = np.zeros((m, n, 4 * h))
    tanh_c = np.zeros((m, n, h))
    for t in range(n):
        a = xw[:, t] + hs[:, t] @ params.U
        i, f, g, o = _gates(a, h)
        cs[:, t + 1] = f * cs[:, t] + i * g
        tanh_c[:, t] = np.tanh(cs[:, t + 1])
        hs[:, t + 1] = o * tanh_c[:, t]
        gates[:, t] = np.concatenate([i, f, g, o], axis=1)
    out = hs[:, 1:].copy() if returns_sequence else hs[:, n].copy()
    cache = (params, X, hs, cs, gates, tanh_c, returns_sequence)
    return out, cache


def lstm_backward(dout, cache):
    """Backpropagation through time.

    Returns ``(dX, {"W": dW, "U": dU, "b": db})``.
    """
    params, X, hs, cs, gates, tanh_c, returns_sequence = cache
    m, n, d = X.shape
    h = params.hidden_size
    if returns_sequence:
        dh_out = dout
    else:
        dh_out = np.zeros((m, n, h))
        dh_out[:, -1] = dout
    da_all = np.zeros((m, n, 4 * h))
    dh_next = np.zeros((m, h))
    dc_next = np.zeros((m, h))
    dU = np.zeros_like(params.U)
    for t in reversed(range(n)):
        i, f, g, o = (gates[:, t, k * h:(k + 1) * h] for k in range(4))
        dh = dh_out[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tanh_c[:, t] ** 2)
        da = da_all[:, t]
        da[:, :h] = dc * g * i * (1.0 - i)
        da[:, h:2 * h] = dc * cs[:, t] * f * (1.0 - f)
        da[:, 2 * h:3 * h] = dc * i * (1.0 - g ** 2)
        da[:, 3 * h:] = dh * tanh_c[:, t] * o * (1.0 - o)
        dU += hs[:, t].T @ da
        dh_next = da @ params.U.T
        dc_next = dc * f
    flat = da_all.reshape(m * n, 4 * h)
    dW = X.reshape(m * n, d).T @ flat
    db = flat.sum(axis=0)
    dX = (flat @ params.W.T).reshape(m, n, d)
    return dX, {"W": dW, "U": dU, "b": db}


def bilstm_forward(fwd: LstmParams, bwd: LstmParams, X):
    """Forward and time-reversed passes; output concatenates final states."""
    if fwd.hidden_size != bwd.hidden_size:
        raise ValueError(
            f"direction hidden sizes differ: {fwd.hidden_size} != {bwd.hidden_size}")
    X = np.asarray(X, dtype=DTYPE)
    out_f, cache_f = lstm_forward(fwd, X, returns_sequence=False)
    out_b, cache_b = lstm_forward(bwd, X[:, ::-1], returns_sequence=False)
    return np.concatenate([out_f, out_b], axis=1), (cache_f, cache_b)


def bilstm_backward(dout, cache):
    """Returns ``(dX, grads_forward, grads_backward)``."""
    cache_f, cache_b = cache
    h = cache_f[0].hidden_size
    dX_f, g_f = lstm_backward(dout[:, :h], cache_f)
    dX_b, g_b = lstm_backward(dout[:, h:], cache_b)
    return dX_f + dX_b[:, ::-1], g_f, g_b


# ---------------------------------------------------------------------------
# Dropout, batch norm, softmax
# ---------------------------------------------------------------------------

def dropout(X, keep_prob: float, mode: str, rng: np.random.Generator | None = None, mask=None):
    """Inverted dropout; returns ``(out, mask)``.

    In ``"infer"`` mode the input is returned unchanged and the mask is
    ``None``.  A precomputed ``mask`` can be passed to replay a draw.
    """
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    X = np.asarray(X, dtype=DTYPE)
    if mode == "infer" or keep_prob == 1.0:
        return X, None
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if mask is None:
        mask = (rng.random(X.shape) < keep_prob) / keep_prob
    return X * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


def batchnorm(X, gamma, beta, mode: str, running_stats: dict, momentum: float = 0.99,
              eps: float = BN_EPSILON):
    """Per-feature normalization of ``X`` with shape ``(m, d)``.

    ``running_stats`` holds ``"mean"`` and ``"var"`` arrays and is updated
    in place in train mode as ``momentum * old + (1 - momentum) * batch``.
    Returns ``(out, cache)``.
    """
    X = np.asarray(X, dtype=DTYPE)
    if mode == "train":
        if X.shape[0] < 2:
            raise ValueError("batch norm in train mode needs at least 2 rows")
        mu = X.mean(axis=0)
        xc = X - mu
        var = (xc ** 2).mean(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        running_stats["mean"] = momentum * running_stats["mean"] + (1 - momentum) * mu
        running_stats["var"] = momentum * running_stats["var"] + (1 - momentum) * var
    elif mode == "infer":
        xc = X - running_stats["mean"]
        inv_std = 1.0 / np.sqrt(running_stats["var"] + eps)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    xhat = xc * inv_std
    return gamma * xhat + beta, (mode, xhat, inv_std, gamma)


def batchnorm_backward(dout, cache):
    """Returns ``(dX, dgamma, dbeta)``."""
    mode, xhat, inv_std, gamma = cache
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    if mode == "infer":
        return dxhat * inv_std, dgamma, dbeta
    m = dout.shape[0]
    dX = inv_std / m * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dX, dgamma, dbeta


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_one_hot(targets):
    if targets.ndim != 2 or not np.all((targets == 0) | (targets == 1)) \
            or not np.all(targets.sum(axis=1) == 1):
        raise ValueError("targets must be one-hot rows")


def cross_entropy(probs, targets):
    picked = (probs * targets).sum(axis=1)
    return float(-np.mean(np.log(np.maximum(picked, np.finfo(DTYPE).tiny))))


def dense_softmax_cross_entropy(X, W, b, targets):
    """Dense layer, softmax and mean cross-entropy in one step.

    Returns ``(loss, probs, {"X": dX, "W": dW, "b": db})``.
    """
    X = np.asarray(X, dtype=DTYPE)
    targets = np.asarray(targets, dtype=DTYPE)
    _check_one_hot(targets)
    if X.shape[1] != W.shape[0] or W.shape[1] != targets.shape[1] or b.shape != (W.shape[1],):
        raise ValueError(f"shape mismatch X{X.shape} W{W.shape} b{b.shape} y{targets.shape}")
    probs = softmax(X @ W + b)
    loss = cross_entropy(probs, targets)
    dlogits = (probs - targets) / X.shape[0]
    return loss, probs, {"X": dlogits @ W.T, "W": X.T @ dlogits, "b": dlogits.sum(axis=0)}


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class RmspropState:
    learning_rate: float = 0.001
    rho: float = 0.9
    epsilon: float = 1e-7
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0 or not 0 < self.rho < 1 or self.epsilon <= 0:
            raise ValueError("invalid RMSprop hyperparameters")

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **kw) -> "RmspropState":
        state = cls(**kw)
        state.accumulators = {k: np.zeros_like(v) for k, v in params.items()}
        return state


def rmsprop_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                 state: RmspropState):
    """Update ``params`` in place; returns ``(params, state)``."""
    if params.keys() != grads.keys():
        raise ValueError("parameter and gradient names differ")
    for name, p in params.items():
        g = grads[name]
        acc = state.accumulators.setdefault(name, np.zeros_like(p))
        if g.shape != p.shape or acc.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {p.shape} vs {g.shape}")
        acc *= state.rho
        acc += (1.0 - state.rho) * g * g
        p -= state.learning_rate * g / (np.sqrt(acc) + state.epsilon)
    return params, state


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    kind: str
    width: int | None = None
    keep_prob: float | None = None
    returns_sequence: bool = False

    KINDS = ("lstm", "bidirectional_lstm", "dropout", "batchnorm", "dense", "softmax")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if (self.keep_prob is not None) != (self.kind == "dropout"):
            raise ValueError("keep_prob is required for dropout layers only")
        if self.kind == "dropout" and not 0 < self.keep_prob <= 1:
            raise ValueError("keep_prob must be in (0, 1]")
        if self.kind in ("lstm", "bidirectional_lstm", "dense") and \
                (self.width is None or self.width < 1):
            raise ValueError(f"{self.kind} layer needs a positive width")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "width": self.width, "keep_prob": self.keep_prob,
                "returns_sequence": self.returns_sequence}


class Layer:
    """Base layer: ``params``/``grads`` are name->array dicts."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.state: dict[str, np.ndarray] = {}

    def output_dim(self, input_dim: int) -> int:
        return input_dim

    def forward(self, x, train: bool):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


class LSTM(Layer):
    def __init__(self, input_dim, hidden, returns_sequence, rng):
        super().__init__()
        p = LstmParams.initialize(input_dim, hidden, rng)
        self.params = p.as_dict()
        self.returns_sequence = returns_sequence

    @property
    def cell(self) -> LstmParams:
        return LstmParams(**self.params)

    def output_dim(self, input_dim):
        return self.params["U"].shape[0]

    def forward(self, x, train):
        out, self._cache = lstm_forward(self.cell, x, self.returns_sequence)
        return out

    def backward(self, dout):
        dx, self.grads = lstm_backward(dout, self._cache)
        return dx


class BiLSTM(Layer):
    """Returns the concatenated final states, width ``2 * hidden``."""

    def __init__(self, input_dim, hidden, rng):
        super().__init__()
        for prefix in ("fwd", "bwd"):
            for k, v in LstmParams.initialize(input_dim, hidden, rng).as_dict().items():
                self.params[f"{prefix}.{k}"] = v

    def _cell(self, prefix):
        return LstmParams(*(self.params[f"{prefix}.{k}"] for k in "WUb"))

    def output_dim(self, input_dim):
        return 2 * self.params["fwd.U"].shape[0]

    def forward(self, x, train):
        out, self._cache = bilstm_forward(self._cell("fwd"), self._cell("bwd"), x)
        return out

    def backward(self, dout):
        dx, g_f, g_b = bilstm_backward(dout, self._cache)
        self.grads = {**{f"fwd.{k}": v for k, v in g_f.items()},
                      **{f"bwd.{k}": v for k, v in g_b.items()}}
        return dx


class Dropout(Layer):
    """Inverted dropout.  ``frozen`` replays the last mask (for checks)."""

    def __init__(self, keep_prob, rng):
        super().__init__()
        self.keep_prob = keep_prob
        self.rng = rng
        self.enabled = True
        self.frozen = False
        self._mask = None

    def forward(self, x, train):
        mode = "train" if train and self.enabled else "infer"
        replay = self._mask if self.frozen and mode == "train" else None
        out, mask = dropout(x, self.keep_prob, mode, self.rng, mask=replay)
        self._mask = mask
        return out

    def backward(self, dout):
        return dropout_backward(dout, self._mask)


class BatchNorm(Layer):
    def __init__(self, dim, momentum=0.99, eps=BN_EPSILON):
        super().__init__()
        self.params = {"gamma": np.ones(dim), "beta": np.zeros(dim)}
        self.state = {"mean": np.zeros(dim), "var": np.ones(dim)}
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, train):
        out, self._cache = batchnorm(x, self.params["gamma"], self.params["beta"],
                                     "train" if train else "infer", self.state,
                                     self.momentum, self.eps)
        return out

    def backward(self, dout):
        dx, dgamma, dbeta = batchnorm_backward(dout, self._cache)
        self.grads = {"gamma": dgamma, "beta": dbeta}
        return dx


class Dense(Layer):
    def __init__(self, input_dim, width, rng):
        super().__init__()
        self.params = {"W": glorot_uniform(rng, input_dim, width), "b": np.zeros(width)}

    def output_dim(self, input_dim):
        return self.params["W"].shape[1]

    def forward(self, x, train):
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        self.grads = {"W": self._x.T @ dout, "b": dout.sum(axis=0)}
        return dout @ self.params["W"].T


class Softmax(Layer):
    """Output activation; its gradient is fused with the cross-entropy."""

    def forward(self, x, train):
        return softmax(x)

    def backward(self, dout):
        raise RuntimeError("softmax backward is fused into the loss")


class Network:
    """A stack of layers ending in Dense -> Softmax."""

    def __init__(self, layers: list[Layer]):
        if len(layers) < 2 or not isinstance(layers[-1], Softmax) \
                or not isinstance(layers[-2], Dense):
            raise ValueError("network must end with Dense then Softmax")
        self.layers = layers

    def _named(self, attr) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in getattr(layer, attr).items():
                out[f"{i}.{k}"] = v
        return out

    def parameters(self) -> dict[str, np.ndarray]:
        """Live parameter arrays keyed ``"<layer index>.<name>"``."""
        return self._named("params")

    def gradients(self) -> dict[str, np.ndarray]:
        return self._named("grads")

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trained state (batch-norm running statistics)."""
        return self._named("state")

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for name, value in buffers.items():
            i, k = name.split(".", 1)
            target = self.layers[int(i)].state
            if k not in target or target[k].shape != value.shape:
                raise KeyError(f"unexpected buffer {name}")
            target[k] = np.array(value, dtype=DTYPE)

    def dropout_layers(self) -> list[Dropout]:
        return [layer for layer in self.layers if isinstance(layer, Dropout)]

    def logits(self, x, train: bool = False):
        for layer in self.layers[:-1]:
            x = layer.forward(x, train)
        return x

    def predict(self, x) -> np.ndarray:
        """Output probabilities in inference mode."""
        return softmax(self.logits(np.asarray(x, dtype=DTYPE), train=False))

    def loss(self, x, y, train: bool = True, backward: bool = True):
        """Forward pass plus cross-entropy; fills ``layer.grads`` if ``backward``.

        Returns ``(loss, probs)``.
        """
        y = np.asarray(y, dtype=DTYPE)
        _check_one_hot(y)
        z = self.logits(np.asarray(x, dtype=DTYPE), train)
        probs = softmax(z)
        loss = cross_entropy(probs, y)
        if backward:
            d = (probs - y) / y.shape[0]
            for layer in reversed(self.layers[:-1]):
                d = layer.backward(d)
        return loss, probs


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def relative_error(analytic, numeric, floor: float = 1e-8):
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic),
                                                              np.abs(numeric)), floor)


@contextlib.contextmanager
def _check_mode(net: Network, dropout_mode: str):
    drops = net.dropout_layers()
    saved = [(d.enabled, d.frozen) for d in drops]
    buffers = {k: v.copy() for k, v in net.buffers().items()}
    try:
        for d in drops:
            d.enabled = dropout_mode == "fixed"
            d.frozen = False
        yield
    finally:
        for d, (enabled, frozen) in zip(drops, saved):
            d.enabled, d.frozen = enabled, frozen
        net.load_buffers(buffers)


def gradient_check(model: Network, batch, eps: float = 1e-5, samples: int | None = None,
                   seed: int = 0, dropout_mode: str = "infer",
                   report: Callable[[str, float], None] | None = None) -> float:
    """Max relative error between backprop and central differences.

    Batch norm runs in train mode.  Dropout is either disabled
    (``"infer"``) or run once and then replayed with the same mask
    (``"fixed"``) so that the loss is a deterministic function of the
    parameters.  With ``samples`` set, that many coordinates per tensor are
    checked (all of them if the tensor is smaller).
    """
    x, y = batch
    rng = np.random.default_rng(seed)
    worst = 0.0
    with _check_mode(model, dropout_mode):
        model.loss(x, y, train=True)
        for d in model.dropout_layers():
            d.frozen = True
        analytic = {k: v.copy() for k, v in model.gradients().items()}
        params = model.parameters()
        for name, p in params.items():
            a = analytic[name]
            if samples is None or p.size <= samples:
                coords = np.arange(p.size)
            else:
                coords = rng.choice(p.size, size=samples, replace=False)
            flat = p.reshape(-1)
            tensor_worst = 0.0
            for c in coords:
                orig = flat[c]
                flat[c] = orig + eps
                plus, _ = model.loss(x, y, train=True, backward=False)
                flat[c] = orig - eps
                minus, _ = model.loss(x, y, train=True, backward=False)
                flat[c] = orig
                numeric = (plus - minus) / (2 * eps)
                err = float(relative_error(a.reshape(-1)[c], numeric))
                tensor_worst = max(tensor_worst, err)
            if report is not None:
                report(name, tensor_worst)
            worst = max(worst, tensor_worst)
    return worst
