"""Feed-forward embedding networks, supervised losses and the Adam optimizer."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp, softmax

from .exceptions import DimensionError, DivergenceError

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")
LOSS_KINDS = ("sigmoid_cross_entropy", "softmax_cross_entropy", "squared_error")


def _activate(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return expit(z)
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad(name, z, a):
    if name == "relu":
        return (z > 0).astype(float)
    if name == "tanh":
        return 1.0 - a * a
    if name == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass(eq=False)
class Layer:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=float, ndmin=2)
        self.biases = np.array(self.biases, dtype=float).reshape(-1)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"weights {self.weights.shape} and biases {self.biases.shape} do not match"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise ValueError("layer parameters must be finite")


class EmbeddingNet:
    """Chain of affine maps and elementwise activations.

    An empty layer list is the identity embedding and requires ``input_dim``.
    """

    def __init__(self, layers=(), input_dim=None):
        self.layers = list(layers)
        if self.layers:
            first_in = self.layers[0].weights.shape[1]
            if input_dim is not None and input_dim != first_in:
                raise DimensionError(f"input_dim {input_dim} != first layer width {first_in}")
            for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
                if b.weights.shape[1] != a.weights.shape[0]:
                    raise DimensionError(
                        f"layer {i + 1} expects {b.weights.shape[1]} inputs, "
                        f"layer {i} produces {a.weights.shape[0]}"
                    )
            self.input_dim = first_in
        else:
            if input_dim is None:
                raise ValueError("identity embedding needs input_dim")
            self.input_dim = int(input_dim)

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weights.shape[0] if self.layers else self.input_dim

    @classmethod
    def identity(cls, dim):
        return cls([], input_dim=dim)

    @classmethod
    def mlp(cls, input_dim, sizes, hidden_activation="relu",
            output_activation="sigmoid", rng=None):
        """Glorot-uniform weights and zero biases."""
        rng = np.random.default_rng(rng)
        layers = []
        fan_in = input_dim
        for i, size in enumerate(sizes):
            limit = math.sqrt(6.0 / (fan_in + size))
            act = output_activation if i == len(sizes) - 1 else hidden_activation
            layers.append(Layer(rng.uniform(-limit, limit, size=(size, fan_in)),
                                np.zeros(size), act))
            fan_in = size
        return cls(layers, input_dim=input_dim)

    def params(self) -> list:
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.biases))
        return out

    def param_names(self) -> list:
        names = []
        for i in range(len(self.layers)):
            names.extend((f"layer{i}.weights", f"layer{i}.biases"))
        return names

    def set_params(self, params):
        params = list(params)
        if len(params) != 2 * len(self.layers):
            raise DimensionError("parameter list does not match the layer count")
        for layer, w, b in zip(self.layers, params[0::2], params[1::2]):
            if w.shape != layer.weights.shape or b.shape != layer.biases.shape:
                raise DimensionError("parameter shapes do not match the network")
            layer.weights = np.array(w, dtype=float)
            layer.biases = np.array(b, dtype=float)

    def copy(self):
        return copy.deepcopy(self)

    def __call__(self, X):
        return embed_forward(self, X)[0]

    def __repr__(self):
        widths = [self.input_dim] + [l.weights.shape[0] for l in self.layers]
        return f"EmbeddingNet({'-'.join(map(str, widths))})"


def embed_forward(net: EmbeddingNet, x):
    """Forward pass for a vector (m,) or a batch (n, m)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    a = np.atleast_2d(x)
    if a.ndim != 2 or a.shape[1] != net.input_dim:
        raise DimensionError(f"expected input of width {net.input_dim}, got shape {x.shape}")
    cache = {"single": single, "inputs": [], "pre": [], "post": [],
             "shapes": [l.weights.shape for l in net.layers]}
    for i, layer in enumerate(net.layers):
        with np.errstate(over="ignore", invalid="ignore"):
            z = a @ layer.weights.T + layer.biases
            out = _activate(layer.activation, z)
        if not np.all(np.isfinite(out)):
            raise DivergenceError(f"non-finite activation in layer {i}")
        cache["inputs"].append(a)
        cache["pre"].append(z)
        cache["post"].append(out)
        a = out
    return (a[0] if single else a), cache


def embed_backward(net: EmbeddingNet, cache, grad_output):
    """Reverse pass. Parameter gradients are summed over the batch.

    Returns ``(param_grads, grad_input)`` where ``param_grads`` follows the
    order of :meth:`EmbeddingNet.params`.
    """
    if cache["shapes"] != [l.weights.shape for l in net.layers]:
        raise DimensionError("cache was produced by a network with different shapes")
    g = np.atleast_2d(np.asarray(grad_output, dtype=float))
    if g.shape[1] != net.output_dim:
        raise DimensionError(f"expected gradient of width {net.output_dim}, got {g.shape}")
    grads = [None] * (2 * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        g = g * _activation_grad(layer.activation, cache["pre"][i], cache["post"][i])
        grads[2 * i] = g.T @ cache["inputs"][i]
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ layer.weights
    return grads, (g[0] if cache["single"] else g)


def loss_and_grad(kind: str, prediction, label):
    """Per-example loss and its derivative with respect to ``prediction``.

    ``prediction`` is a vector of length C or a batch (n, C); ``label`` is a
    scalar per example (a class index for softmax, 0/1 for sigmoid) or, for
    squared error, a value or vector matching C.
    """
    p = np.asarray(prediction, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    n, C = p.shape
    if not np.all(np.isfinite(p)):
        raise DivergenceError("non-finite prediction")
    y = np.asarray(label, dtype=float)
    if kind == "sigmoid_cross_entropy":
        if C != 1:
            raise DimensionError("sigmoid cross-entropy needs a single output")
        y = y.reshape(n)
        if np.any((y < 0) | (y > 1)) or not np.all(np.isfinite(y)):
            raise ValueError("sigmoid cross-entropy labels must lie in [0, 1]")
        z = p[:, 0]
        loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
        grad = (expit(z) - y)[:, None]
    elif kind == "softmax_cross_entropy":
        y = y.reshape(n)
        if np.any(y != np.round(y)) or np.any((y < 0) | (y >= C)):
            raise ValueError(f"softmax labels must be integers in [0, {C})")
        idx = y.astype(np.intp)
        loss = logsumexp(p, axis=1) - p[np.arange(n), idx]
        grad = softmax(p, axis=1)
        grad[np.arange(n), idx] -= 1.0
    elif kind == "squared_error":
        y = y.reshape(n, -1) if y.size == n * C else None
        if y is None:
            raise DimensionError("squared-error labels must match the prediction shape")
        with np.errstate(over="ignore", invalid="ignore"):
            diff = p - y
            loss = 0.5 * np.sum(diff * diff, axis=1)
        grad = diff
    else:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def predicted_labels(kind, prediction):
    """Hard class decisions from forest outputs (classification losses only)."""
    p = np.atleast_2d(prediction)
    if kind == "sigmoid_cross_entropy":
        return (p[:, 0] > 0).astype(int)
    if kind == "softmax_cross_entropy":
        return np.argmax(p, axis=1)
    raise ValueError(f"{kind} is not a classification loss")


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


def adam_update(state: AdamState, params, grads):
    """One bias-corrected Adam step, applied to ``params`` in place."""
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    if len(state.first_moment) != len(params):
        raise DimensionError("optimizer state does not match the parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or m.shape != p.shape:
            raise DimensionError(f"shape mismatch: param {p.shape}, grad {np.shape(g)}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state, params
