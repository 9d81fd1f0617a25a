"""Minimal gradient boosting with greedy CART regression trees.

Each round fits one tree to the negative gradient of the loss at the current
raw scores; a leaf's value is the mean residual of its samples times the
learning rate. The first tree of the returned forest is a single leaf holding
the prior score, so the forest's raw output is directly the model's score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp, softmax

from .datasets import Dataset
from .forest import Forest, Leaf, SplitNode, Tree, evaluate_tree_batch

BOOSTING_LOSSES = ("squared", "logistic", "softmax")
_PROB_CLIP = 1e-6


@dataclass
class BoostingConfig:
    num_trees: int = 50  # boosting rounds, not counting the prior tree
    max_depth: int = 3
    learning_rate: float = 0.1
    loss: str = "logistic"
    min_samples_leaf: int = 1
    n_classes: int = None  # softmax only; inferred from labels when None

    def __post_init__(self):
        if self.loss not in BOOSTING_LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {BOOSTING_LOSSES}")
        if self.num_trees < 0 or self.max_depth < 0:
            raise ValueError("num_trees and max_depth must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")


def _targets(loss, labels, n_classes):
    if loss == "squared":
        y = np.asarray(labels, dtype=float)
        return y.reshape(len(y), -1)
    if loss == "logistic":
        y = np.asarray(labels, dtype=float).reshape(-1, 1)
        if np.any((y != 0) & (y != 1)):
            raise ValueError("logistic boosting needs 0/1 labels")
        return y
    y = np.asarray(labels)
    if np.any(y != np.round(y)) or np.any((y < 0) | (y >= n_classes)):
        raise ValueError(f"softmax boosting needs integer labels in [0, {n_classes})")
    onehot = np.zeros((len(y), n_classes))
    onehot[np.arange(len(y)), y.astype(int)] = 1.0
    return onehot


def _prior(loss, Y):
    if loss == "squared":
        return Y.mean(axis=0)
    if loss == "logistic":
        p = np.clip(Y.mean(), _PROB_CLIP, 1 - _PROB_CLIP)
        return np.array([math.log(p / (1 - p))])
    freq = np.clip(Y.mean(axis=0), _PROB_CLIP, None)
    logits = np.log(freq)
    return logits - logits.mean()


def boosting_loss(loss, scores, Y) -> float:
    """Mean training loss of raw ``scores`` against encoded targets ``Y``."""
    if loss == "squared":
        return float(np.mean(0.5 * np.sum((scores - Y) ** 2, axis=1)))
    if loss == "logistic":
        z, y = scores[:, 0], Y[:, 0]
        return float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))
    return float(np.mean(logsumexp(scores, axis=1) - np.sum(scores * Y, axis=1)))


def _negative_gradient(loss, scores, Y):
    if loss == "squared":
        return Y - scores
    if loss == "logistic":
        return Y - expit(scores)
    return Y - softmax(scores, axis=1)


def _best_split(X, R, min_leaf):
    """Feature, threshold and gain of the best SSE-reducing split, or None."""
    m = X.shape[0]
    if m < 2 * min_leaf:
        return None
    total = R.sum(axis=0)
    base = float(total @ total) / m
    best = None
    counts = np.arange(1, m)
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        left = np.cumsum(R[order], axis=0)[:-1]
        right = total - left
        gain = (np.einsum("ij,ij->i", left, left) / counts
                + np.einsum("ij,ij->i", right, right) / (m - counts) - base)
        valid = xs[1:] > xs[:-1]
        valid &= (counts >= min_leaf) & (m - counts >= min_leaf)
        if not valid.any():
            continue
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        if best is None or gain[i] > best[2]:
            threshold = 0.5 * (xs[i] + xs[i + 1])
            if threshold <= xs[i]:
                threshold = xs[i + 1]
            best = (f, float(threshold), float(gain[i]))
    if best is None or best[2] <= 1e-12 * max(base, 1e-300):
        return None
    return best


def _fit_tree(X, R, depth, min_leaf, lr):
    def build(idx, level):
        r = R[idx]
        split = _best_split(X[idx], r, min_leaf) if level < depth else None
        if split is None:
            return Leaf(lr * r.mean(axis=0))
        f, threshold, _ = split
        go_right = X[idx, f] >= threshold
        return SplitNode(f, threshold, build(idx[~go_right], level + 1),
                         build(idx[go_right], level + 1))

    return Tree(build(np.arange(X.shape[0]), 0))


def train_boosted_forest(dataset: Dataset, config: BoostingConfig = None, trace=None) -> Forest:
    """Gradient-boosted forest over ``dataset.features``.

    If ``trace`` is a list, the mean training loss after the prior tree and
    after each boosting round is appended to it.
    """
    config = config or BoostingConfig()
    X = np.asarray(dataset.features, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("boosting needs at least 2 examples")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    n_classes = None
    if config.loss == "softmax":
        n_classes = config.n_classes or int(np.max(dataset.labels)) + 1
    Y = _targets(config.loss, dataset.labels, n_classes)
    prior = _prior(config.loss, Y)
    trees = [Tree(Leaf(prior))]
    scores = np.tile(prior, (X.shape[0], 1))
    if trace is not None:
        trace.append(boosting_loss(config.loss, scores, Y))
    for _ in range(config.num_trees):
        R = _negative_gradient(config.loss, scores, Y)
        tree = _fit_tree(X, R, config.max_depth, config.min_samples_leaf, config.learning_rate)
        trees.append(tree)
        scores = scores + evaluate_tree_batch(tree, X)
        if trace is not None:
            trace.append(boosting_loss(config.loss, scores, Y))
    return Forest(trees, X.shape[1], Y.shape[1])
