"""Joint training of an embedding network and the leaves of a forest on top of it.

The forest sees ``concat(x[:, passthrough], E(x))``. During training its
output is replaced by the Gaussian-smoothed forest so that the loss is
differentiable in both the embedding parameters and the leaf values; at
deployment the plain forest is used.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .datasets import Dataset, batches
from .exceptions import DimensionError, DivergenceError
from .forest import Forest, evaluate_forest_batch
from .neural import (
    AdamState,
    EmbeddingNet,
    LOSS_KINDS,
    adam_update,
    embed_backward,
    embed_forward,
    loss_and_grad,
    predicted_labels,
)
from .smoothing import PerturbationSpec, SmoothedForest

SIGMA_FLOOR = 1e-6
SCHEDULES = ("fixed", "linear", "exponential")


class Model:
    """Embedding network composed with a forest."""

    def __init__(self, embed: EmbeddingNet, forest: Forest, sigma=0.015,
                 loss="sigmoid_cross_entropy", leaf_trainable=True, passthrough=()):
        if loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss {loss!r}; expected one of {LOSS_KINDS}")
        self.embed = embed
        self._forest = forest
        self._dirty = False
        self.perturb = sigma if isinstance(sigma, PerturbationSpec) else PerturbationSpec(sigma)
        self.loss = loss
        self.leaf_trainable = bool(leaf_trainable)
        self.passthrough = tuple(int(i) for i in passthrough)
        width = len(self.passthrough) + embed.output_dim
        if width != forest.input_dim:
            raise DimensionError(
                f"forest expects {forest.input_dim} inputs, model provides {width} "
                f"({len(self.passthrough)} passthrough + {embed.output_dim} embedded)"
            )
        if loss == "sigmoid_cross_entropy" and forest.output_dim != 1:
            raise DimensionError("sigmoid cross-entropy needs a forest with output_dim 1")
        self._smoothed = None
        self._mask = None

    @property
    def forest(self) -> Forest:
        """The forest, with any leaf updates made during training written back."""
        if self._dirty:
            self._forest.set_leaf_values(self._smoothed.leaf_values)
            self._dirty = False
        return self._forest

    @property
    def input_dim(self):
        return self.embed.input_dim

    @property
    def sigma(self):
        return self.perturb.sigma

    @property
    def smoothed(self) -> SmoothedForest:
        if self._smoothed is None:
            self._smoothed = SmoothedForest(self._forest)
        return self._smoothed

    def forest_input(self, X):
        Z, cache = embed_forward(self.embed, X)
        Z = np.atleast_2d(Z)
        if self.passthrough:
            raw = np.atleast_2d(np.asarray(X, dtype=float))[:, self.passthrough]
            Z = np.hstack([raw, Z])
        return Z, cache

    def leaf_mask(self):
        if self._mask is None:
            self._mask = np.array([leaf.trainable for leaf in self._forest.leaves()], dtype=bool)
        return self._mask

    def trainable_params(self):
        """Arrays updated by the optimizer, in a fixed order."""
        params = list(self.embed.params())
        if self.leaf_trainable:
            params.append(self.smoothed.leaf_values)
        return params

    def mark_leaves_updated(self):
        self._dirty = True

    def snapshot(self):
        return ([p.copy() for p in self.embed.params()],
                self.smoothed.leaf_values.copy())

    def restore(self, snap):
        params, leaves = snap
        self.embed.set_params(params)
        if self.leaf_trainable:
            self.smoothed.leaf_values[...] = leaves
            self.mark_leaves_updated()

    def get_config(self):
        return {"sigma": self.sigma, "loss": self.loss,
                "leaf_trainable": self.leaf_trainable,
                "passthrough": list(self.passthrough)}


def predict(model: Model, x, hard=True) -> np.ndarray:
    """Forest output for a vector or batch of raw inputs.

    ``hard=True`` evaluates the forest with plain threshold comparisons;
    ``hard=False`` gives the smoothed output used during training.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if np.atleast_2d(x).shape[1] != model.input_dim:
        raise DimensionError(f"expected input of width {model.input_dim}, got shape {x.shape}")
    Z, _ = model.forest_input(x)
    if hard:
        out = evaluate_forest_batch(model.forest, Z)
    else:
        out = model.smoothed.predict(Z, model.perturb)
    return out[0] if single else out


def objective(model: Model, X, y, sigma=None) -> float:
    """Mean per-example loss of the smoothed model."""
    sigma = model.perturb if sigma is None else sigma
    Z, _ = model.forest_input(X)
    pred = model.smoothed.predict(Z, sigma)
    losses, _ = loss_and_grad(model.loss, pred, y)
    return float(np.mean(losses))


def train_step(model: Model, batch, optimizer_state: AdamState, sigma=None):
    """One Adam step on the batch-mean smoothed loss.

    ``batch`` is ``(X, y)``. Returns ``(model, optimizer_state, batch_loss)``.
    """
    X, y = batch
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    sigma = model.perturb if sigma is None else sigma
    smoothed = model.smoothed
    Z, embed_cache = model.forest_input(X)
    masses, cache = smoothed.forward(Z, sigma, need_grad=True)
    pred = masses @ smoothed.leaf_values
    losses, grad = loss_and_grad(model.loss, pred, y)
    batch_loss = float(np.mean(losses))
    if not math.isfinite(batch_loss):
        raise DivergenceError(f"non-finite batch loss {batch_loss}")
    grad = grad / n
    grad_z, grad_leaves = smoothed.backward(cache, grad)
    k = len(model.passthrough)
    grads, _ = embed_backward(model.embed, embed_cache, grad_z[:, k:])
    if model.leaf_trainable:
        grad_leaves = grad_leaves * model.leaf_mask()[:, None]
        grads.append(grad_leaves)
    adam_update(optimizer_state, model.trainable_params(), grads)
    if model.leaf_trainable:
        model.mark_leaves_updated()
    return model, optimizer_state, batch_loss


@dataclass
class TrainConfig:
    batch_size: int = 512
    epochs: int = 200
    patience: int = 20
    schedule: str = "fixed"
    sigma: float = 0.015  # fixed value, or start value of an annealing schedule
    sigma_end: float = 0.001  # linear schedule
    decay: float = 0.95  # exponential schedule
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}; expected one of {SCHEDULES}")
        if not (self.sigma > 0 and self.sigma_end > 0 and self.decay > 0):
            raise ValueError("sigma values and decay must be positive")


def sigma_for_epoch(config: TrainConfig, epoch: int) -> float:
    if config.schedule == "fixed":
        return config.sigma
    if config.schedule == "linear":
        if config.epochs == 1:
            return config.sigma
        frac = epoch / (config.epochs - 1)
        return config.sigma + frac * (config.sigma_end - config.sigma)
    return max(config.sigma * config.decay ** epoch, SIGMA_FLOOR)


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    initial: dict = None
    best_epoch: int = 0

    def __len__(self):
        return len(self.records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())


def evaluate(model: Model, dataset: Dataset, sigma=None):
    """Smoothed loss and hard-mode accuracy (``None`` for regression)."""
    Z, _ = model.forest_input(dataset.features)
    sigma = model.perturb if sigma is None else sigma
    soft = model.smoothed.predict(Z, sigma)
    losses, _ = loss_and_grad(model.loss, soft, dataset.labels)
    accuracy = None
    if model.loss != "squared_error":
        hard = evaluate_forest_batch(model.forest, Z)
        accuracy = float(np.mean(predicted_labels(model.loss, hard) == dataset.labels))
    return float(np.mean(losses)), accuracy


def fit(model: Model, train_set: Dataset, valid_set: Dataset, config: TrainConfig = None,
        callback=None):
    """Minibatch Adam with early stopping on validation loss.

    The returned model holds the parameters of the epoch with the lowest
    validation loss (possibly the initial parameters).
    """
    config = config or TrainConfig()
    if len(train_set) == 0 or len(valid_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    state = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    history = TrainHistory()
    sigma0 = sigma_for_epoch(config, 0)
    valid_loss, valid_acc = evaluate(model, valid_set, sigma0)
    history.initial = {"epoch": 0, "sigma": sigma0, "valid_loss": valid_loss,
                       "valid_accuracy": valid_acc}
    best_loss, best = valid_loss, model.snapshot()
    bad_epochs = 0
    for epoch in range(config.epochs):
        sigma = sigma_for_epoch(config, epoch)
        total = 0.0
        for idx in batches(len(train_set), config.batch_size, config.seed, epoch):
            try:
                _, _, loss = train_step(
                    model, (train_set.features[idx], train_set.labels[idx]), state, sigma
                )
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch + 1}: {exc}") from exc
            total += loss * len(idx)
        valid_loss, valid_acc = evaluate(model, valid_set, sigma)
        record = {"epoch": epoch + 1, "sigma": sigma, "train_loss": total / len(train_set),
                  "valid_loss": valid_loss, "valid_accuracy": valid_acc}
        history.records.append(record)
        if callback is not None:
            callback(record)
        if valid_loss < best_loss:
            best_loss, best = valid_loss, model.snapshot()
            history.best_epoch = epoch + 1
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > config.patience:
                break
    model.restore(best)
    return model, history


def accuracy(model: Model, dataset: Dataset, hard=True) -> float:
    out = predict(model, dataset.features, hard=hard)
    return float(np.mean(predicted_labels(model.loss, out) == dataset.labels))


def mean_squared_error(model: Model, dataset: Dataset, hard=True) -> float:
    out = predict(model, dataset.features, hard=hard)
    y = np.asarray(dataset.labels, dtype=float).reshape(out.shape)
    return float(np.mean((out - y) ** 2))
