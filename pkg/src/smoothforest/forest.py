"""Axis-aligned decision trees and forests with vector-valued leaves.

A split node routes ``x`` to its right child when ``x[feature] >= threshold``
and to its left child otherwise. A forest's output is the unweighted sum of
its trees' outputs.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Iterator, Union

import numpy as np

from .exceptions import DimensionError, MalformedTreeError

LEAF_INITS = ("binary01", "uniform01", "zero")


@dataclass(frozen=True)
class Interval:
    """Half-open interval ``[lower, upper)``; either end may be infinite."""

    lower: float = -math.inf
    upper: float = math.inf

    def __post_init__(self):
        if math.isnan(self.lower) or math.isnan(self.upper):
            raise MalformedTreeError("interval bounds must not be NaN")
        if not self.lower < self.upper:
            raise MalformedTreeError(
                f"empty interval [{self.lower}, {self.upper})"
            )

    def contains(self, value: float) -> bool:
        return self.lower <= value < self.upper

    def intersect(self, other: "Interval") -> "Interval":
        return Interval(max(self.lower, other.lower), min(self.upper, other.upper))

    @property
    def unbounded(self) -> bool:
        return self.lower == -math.inf and self.upper == math.inf


@dataclass(eq=False)
class Leaf:
    value: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        value = np.array(self.value, dtype=float)
        if value.ndim == 0:
            value = value.reshape(1)
        if value.ndim != 1 or value.size == 0:
            raise MalformedTreeError("leaf value must be a non-empty vector")
        if not np.all(np.isfinite(value)):
            raise MalformedTreeError("leaf value must be finite")
        self.value = value

    def __repr__(self):
        return f"Leaf({self.value.tolist()})"


@dataclass(eq=False)
class SplitNode:
    feature: int
    threshold: float
    left: "Node"
    right: "Node"

    def __post_init__(self):
        if isinstance(self.feature, bool) or int(self.feature) != self.feature:
            raise MalformedTreeError(f"feature index must be an integer, got {self.feature!r}")
        self.feature = int(self.feature)
        if self.feature < 0:
            raise MalformedTreeError(f"negative feature index {self.feature}")
        self.threshold = float(self.threshold)
        if not math.isfinite(self.threshold):
            raise MalformedTreeError("split threshold must be finite")
        if self.left is None or self.right is None:
            raise MalformedTreeError("split node needs both children")

    def __repr__(self):
        return f"SplitNode(x[{self.feature}] >= {self.threshold!r})"


Node = Union[SplitNode, Leaf]


class Tree:
    """A binary tree of :class:`SplitNode` and :class:`Leaf` nodes."""

    def __init__(self, root: Node):
        self.root = root
        self._check_acyclic()

    def _check_acyclic(self):
        seen = set()
        stack = [self.root]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                raise MalformedTreeError("node reachable twice; tree must be acyclic")
            seen.add(id(node))
            if isinstance(node, SplitNode):
                stack.extend((node.right, node.left))
            elif not isinstance(node, Leaf):
                raise MalformedTreeError(f"unexpected node type {type(node).__name__}")

    def nodes(self) -> Iterator[Node]:
        """Pre-order traversal, left subtree before right."""
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            if isinstance(node, SplitNode):
                stack.append(node.right)
                stack.append(node.left)

    def leaves(self) -> list:
        return [n for n in self.nodes() if isinstance(n, Leaf)]

    def splits(self) -> list:
        return [n for n in self.nodes() if isinstance(n, SplitNode)]

    @property
    def depth(self) -> int:
        best = 0
        stack = [(self.root, 0)]
        while stack:
            node, d = stack.pop()
            if isinstance(node, SplitNode):
                stack.append((node.left, d + 1))
                stack.append((node.right, d + 1))
            else:
                best = max(best, d)
        return best

    @property
    def output_dim(self) -> int:
        return self.leaves()[0].value.size

    def max_feature(self) -> int:
        return max((s.feature for s in self.splits()), default=-1)

    def __repr__(self):
        return f"Tree(depth={self.depth}, leaves={len(self.leaves())})"


class Forest:
    """Ordered collection of trees sharing input and output dimensionality."""

    def __init__(self, trees, input_dim: int, output_dim: int):
        self.trees = list(trees)
        self.input_dim = int(input_dim)
        self.output_dim = int(output_dim)
        if self.input_dim < 1 or self.output_dim < 1:
            raise MalformedTreeError("input_dim and output_dim must be positive")
        for t, tree in enumerate(self.trees):
            if tree.max_feature() >= self.input_dim:
                raise MalformedTreeError(
                    f"tree {t} splits on feature {tree.max_feature()} "
                    f"but input_dim is {self.input_dim}"
                )
            for leaf in tree.leaves():
                if leaf.value.size != self.output_dim:
                    raise MalformedTreeError(
                        f"tree {t} has a leaf of length {leaf.value.size}, "
                        f"expected output_dim {self.output_dim}"
                    )

    def __len__(self):
        return len(self.trees)

    def __repr__(self):
        return (
            f"Forest(n_trees={len(self.trees)}, input_dim={self.input_dim}, "
            f"output_dim={self.output_dim})"
        )

    def leaves(self) -> list:
        """All leaves, tree by tree, each tree in left-to-right order."""
        return [leaf for tree in self.trees for leaf in tree.leaves()]

    def leaf_values(self) -> np.ndarray:
        leaves = self.leaves()
        if not leaves:
            return np.zeros((0, self.output_dim))
        return np.stack([leaf.value for leaf in leaves])

    def set_leaf_values(self, values):
        values = np.asarray(values, dtype=float)
        leaves = self.leaves()
        if values.shape != (len(leaves), self.output_dim):
            raise DimensionError(
                f"expected leaf value matrix of shape {(len(leaves), self.output_dim)}, "
                f"got {values.shape}"
            )
        for leaf, row in zip(leaves, values):
            leaf.value = row.copy()

    def set_trainable(self, flag: bool):
        for leaf in self.leaves():
            leaf.trainable = bool(flag)

    def copy(self) -> "Forest":
        return copy.deepcopy(self)

    def predict(self, X) -> np.ndarray:
        """Exact forest output for each row of ``X``."""
        return evaluate_forest_batch(self, X)


@dataclass
class LeafRegion:
    """Hyperrectangle routed to ``leaf``; features not in ``constraints`` are free."""

    constraints: dict = field(default_factory=dict)
    leaf: Leaf = None

    def interval(self, feature: int) -> Interval:
        return self.constraints.get(feature, Interval())

    def contains(self, x) -> bool:
        return all(iv.contains(x[i]) for i, iv in self.constraints.items())


def _check_point(x, dim=None):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DimensionError(f"expected a vector, got array of shape {x.shape}")
    if dim is not None and x.size != dim:
        raise DimensionError(f"expected input of length {dim}, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    return x


def evaluate_tree(tree: Tree, x) -> np.ndarray:
    """Value of the leaf whose region contains ``x``."""
    x = _check_point(x)
    if tree.max_feature() >= x.size:
        raise DimensionError(
            f"tree splits on feature {tree.max_feature()}, input has length {x.size}"
        )
    node = tree.root
    while isinstance(node, SplitNode):
        node = node.right if x[node.feature] >= node.threshold else node.left
    return node.value.copy()


def evaluate_forest(forest: Forest, x) -> np.ndarray:
    x = _check_point(x, forest.input_dim)
    out = np.zeros(forest.output_dim)
    for tree in forest.trees:
        out += evaluate_tree(tree, x)
    return out


class _FlatTree:
    """Array form of a tree for batched routing."""

    def __init__(self, tree: Tree):
        nodes = list(tree.nodes())
        index = {id(n): i for i, n in enumerate(nodes)}
        n = len(nodes)
        self.feature = np.full(n, -1, dtype=np.intp)
        self.threshold = np.zeros(n)
        self.left = np.arange(n)
        self.right = np.arange(n)
        self.values = np.zeros((n, tree.output_dim))
        for i, node in enumerate(nodes):
            if isinstance(node, SplitNode):
                self.feature[i] = node.feature
                self.threshold[i] = node.threshold
                self.left[i] = index[id(node.left)]
                self.right[i] = index[id(node.right)]
            else:
                self.values[i] = node.value
        self.depth = tree.depth

    def route(self, X: np.ndarray) -> np.ndarray:
        idx = np.zeros(X.shape[0], dtype=np.intp)
        rows = np.arange(X.shape[0])
        for _ in range(self.depth):
            feat = self.feature[idx]
            is_split = feat >= 0
            go_right = X[rows, np.where(is_split, feat, 0)] >= self.threshold[idx]
            nxt = np.where(go_right, self.right[idx], self.left[idx])
            idx = np.where(is_split, nxt, idx)
        return idx


def evaluate_tree_batch(tree: Tree, X) -> np.ndarray:
    """Exact tree output for each row of ``X``, shape (n, C)."""
    flat = _FlatTree(tree)
    return flat.values[flat.route(np.asarray(X, dtype=float))]


def evaluate_forest_batch(forest: Forest, X) -> np.ndarray:
    """Exact forest output for each row of ``X`` (shape ``(n, input_dim)``)."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != forest.input_dim:
        raise DimensionError(
            f"expected array of shape (n, {forest.input_dim}), got {X.shape}"
        )
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains non-finite values")
    out = np.zeros((X.shape[0], forest.output_dim))
    for tree in forest.trees:
        flat = _FlatTree(tree)
        out += flat.values[flat.route(X)]
    return out


def extract_leaf_regions(tree: Tree) -> list:
    """One :class:`LeafRegion` per leaf, in left-to-right leaf order.

    Raises :class:`MalformedTreeError` if a root-to-leaf path has
    contradictory conditions on some feature.
    """
    regions = []

    def walk(node, constraints):
        if isinstance(node, Leaf):
            regions.append(LeafRegion(dict(constraints), node))
            return
        current = constraints.get(node.feature, Interval())
        for child, bound in (
            (node.left, Interval(upper=node.threshold)),
            (node.right, Interval(lower=node.threshold)),
        ):
            try:
                narrowed = current.intersect(bound)
            except MalformedTreeError:
                raise MalformedTreeError(
                    f"contradictory conditions on feature {node.feature} "
                    f"at split x[{node.feature}] >= {node.threshold}"
                ) from None
            walk(child, {**constraints, node.feature: narrowed})

    walk(tree.root, {})
    return regions


def _make_leaf(leaf_init, output_dim, rng):
    if leaf_init == "binary01":
        value = rng.integers(0, 2, size=output_dim).astype(float)
    elif leaf_init == "uniform01":
        value = rng.random(output_dim)
    elif leaf_init == "zero":
        value = np.zeros(output_dim)
    else:
        raise ValueError(f"unknown leaf_init {leaf_init!r}; expected one of {LEAF_INITS}")
    return Leaf(value)


def generate_random_tree(
    input_dim: int,
    depth: int,
    leaf_init: str = "binary01",
    output_dim: int = 1,
    rng=None,
) -> Tree:
    """Complete random tree with exactly ``depth`` levels of splits.

    Each split draws a feature uniformly and a threshold uniformly from
    ``[0, 1]`` restricted to the interval still reachable on that feature,
    so no leaf region is empty.
    """
    if depth < 0:
        raise ValueError("depth must be >= 0")
    if input_dim < 1:
        raise ValueError("input_dim must be >= 1")
    if output_dim < 1:
        raise ValueError("output_dim must be >= 1")
    if leaf_init not in LEAF_INITS:
        raise ValueError(f"unknown leaf_init {leaf_init!r}; expected one of {LEAF_INITS}")
    rng = np.random.default_rng(rng)

    def build(level, bounds):
        if level == depth:
            return _make_leaf(leaf_init, output_dim, rng)
        feature = int(rng.integers(input_dim))
        lo, hi = bounds.get(feature, (0.0, 1.0))
        threshold = lo
        while threshold <= lo:
            threshold = lo + (hi - lo) * rng.random()
        left = build(level + 1, {**bounds, feature: (lo, threshold)})
        right = build(level + 1, {**bounds, feature: (threshold, hi)})
        return SplitNode(feature, threshold, left, right)

    return Tree(build(0, {}))


def generate_random_forest(
    num_trees: int = 32,
    input_dim: int = 1,
    depth: int = 4,
    leaf_init: str = "binary01",
    output_dim: int = 1,
    rng=None,
) -> Forest:
    if num_trees < 0:
        raise ValueError("num_trees must be >= 0")
    rng = np.random.default_rng(rng)
    trees = [
        generate_random_tree(input_dim, depth, leaf_init, output_dim, rng)
        for _ in range(num_trees)
    ]
    return Forest(trees, input_dim, output_dim)
