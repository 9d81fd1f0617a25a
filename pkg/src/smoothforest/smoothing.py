"""Forest output under isotropic Gaussian input perturbation.

For an input mean ``mu`` and noise scale ``sigma`` the smoothed forest is
``E[F(mu + sigma * eps)]`` with ``eps ~ N(0, I)``. Since every leaf region is
an axis-aligned box, its probability mass factorizes into one CDF difference
per constrained feature, and the smoothed value is the mass-weighted sum of
leaf values. Both the value and its derivatives with respect to ``mu`` and to
the leaf values are closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc, ndtr

from .exceptions import DimensionError
from .forest import Forest, LeafRegion, extract_leaf_regions

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_INV_SQRT_2 = 1.0 / math.sqrt(2.0)
_BLOCK = 64


@dataclass(frozen=True)
class PerturbationSpec:
    """Isotropic Gaussian noise with standard deviation ``sigma``."""

    sigma: float

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be a positive finite number, got {self.sigma!r}")


def _as_spec(spec):
    return spec if isinstance(spec, PerturbationSpec) else PerturbationSpec(float(spec))


def gaussian_cdf(t):
    """Standard normal CDF; accepts scalars, arrays and +-inf."""
    out = ndtr(np.asarray(t, dtype=float))
    return float(out) if out.ndim == 0 else out


def gaussian_pdf(t):
    t = np.asarray(t, dtype=float)
    out = _INV_SQRT_2PI * np.exp(-0.5 * t * t)
    return float(out) if out.ndim == 0 else out


def _box_mass(z_lo, z_hi):
    """P(z_lo <= Z < z_hi) for standard normal Z.

    Differences are taken on the survival side when the whole interval lies
    above the mean so upper-tail masses do not cancel to zero.
    """
    upper_tail = z_lo > 0
    return np.where(
        upper_tail,
        ndtr(-z_lo) - ndtr(-z_hi),
        ndtr(z_hi) - ndtr(z_lo),
    )


def region_mass(region: LeafRegion, mu, spec) -> float:
    """Probability that ``mu + sigma * eps`` falls inside ``region``.

    Only the constrained features are visited; every other feature
    contributes a factor of exactly one.
    """
    sigma = _as_spec(spec).sigma
    mu = np.asarray(mu, dtype=float)
    mass = 1.0
    for feature in sorted(region.constraints):
        if feature >= mu.size:
            raise DimensionError(f"region constrains feature {feature}, mu has length {mu.size}")
        iv = region.constraints[feature]
        z_lo = (iv.lower - mu[feature]) / sigma
        z_hi = (iv.upper - mu[feature]) / sigma
        mass *= float(_box_mass(z_lo, z_hi))
    return mass


@dataclass
class SmoothedValue:
    value: np.ndarray
    per_leaf_mass: dict = field(default_factory=dict)
    tree_index: dict = field(default_factory=dict)

    def tree_totals(self) -> np.ndarray:
        """Sum of leaf masses for each tree (each should be 1)."""
        n_trees = max(self.tree_index.values(), default=-1) + 1
        totals = np.zeros(n_trees)
        for leaf, mass in self.per_leaf_mass.items():
            totals[self.tree_index[leaf]] += mass
        return totals


class SmoothedForest:
    """Batched evaluator for a fixed forest structure.

    Leaf regions are flattened into index arrays once, padded to the
    deepest path with unconstrained ``(-inf, inf)`` slots whose mass factor is
    exactly one and whose derivative is exactly zero. Leaf values are copied
    into :attr:`leaf_values` and may be replaced between calls.
    """

    def __init__(self, forest: Forest):
        self.forest = forest
        self.input_dim = forest.input_dim
        self.output_dim = forest.output_dim
        self.leaves = forest.leaves()
        self.leaf_values = forest.leaf_values()

        cut_feature, cut_threshold = [], []
        cut_index = {}
        regions, tree_of_leaf = [], []
        for t, tree in enumerate(forest.trees):
            for region in extract_leaf_regions(tree):
                regions.append(region)
                tree_of_leaf.append(t)
            for split in tree.splits():
                key = (split.feature, split.threshold)
                if key not in cut_index:
                    cut_index[key] = len(cut_feature)
                    cut_feature.append(split.feature)
                    cut_threshold.append(split.threshold)
        n_cuts = len(cut_feature)
        neg, pos = n_cuts, n_cuts + 1  # sentinel columns for -inf / +inf
        width = max((len(r.constraints) for r in regions), default=0)
        width = max(width, 1)
        n_leaves = len(regions)
        self.feature = np.zeros((n_leaves, width), dtype=np.intp)
        self.lo_idx = np.full((n_leaves, width), neg, dtype=np.intp)
        self.hi_idx = np.full((n_leaves, width), pos, dtype=np.intp)
        for l, region in enumerate(regions):
            for k, f in enumerate(sorted(region.constraints)):
                iv = region.constraints[f]
                self.feature[l, k] = f
                if iv.lower != -math.inf:
                    self.lo_idx[l, k] = cut_index[(f, iv.lower)]
                if iv.upper != math.inf:
                    self.hi_idx[l, k] = cut_index[(f, iv.upper)]
        self.cut_feature = np.array(cut_feature, dtype=np.intp)
        self.cut_threshold = np.array(cut_threshold, dtype=float)
        self.tree_of_leaf = np.array(tree_of_leaf, dtype=np.intp)
        # slot-major copies for fast row gathers
        self._lo = np.ascontiguousarray(self.lo_idx.T)
        self._hi = np.ascontiguousarray(self.hi_idx.T)
        self.n_leaves = n_leaves
        self._scatter = None

    def _check_mu(self, mu):
        mu = np.asarray(mu, dtype=float)
        single = mu.ndim == 1
        mu = np.atleast_2d(mu)
        if mu.ndim != 2 or mu.shape[1] != self.input_dim:
            raise DimensionError(
                f"expected mean of length {self.input_dim}, got shape {np.shape(mu)}"
            )
        if not np.all(np.isfinite(mu)):
            raise ValueError("mean contains non-finite values")
        return mu, single

    def _standardized_cuts(self, mu, sigma):
        """Standardized thresholds, shape (n_cuts + 2, n); last rows are -inf, +inf."""
        n = mu.shape[0]
        z = np.empty((self.cut_feature.size + 2, n))
        z[:-2] = (self.cut_threshold[:, None] - mu[:, self.cut_feature].T) / sigma
        z[-2] = -np.inf
        z[-1] = np.inf
        return z

    def forward(self, mu, sigma, need_grad=False):
        """Masses (n, L) and, if ``need_grad``, a cache for :meth:`backward`."""
        sigma = _as_spec(sigma).sigma
        mu, _ = self._check_mu(mu)
        n = mu.shape[0]
        # blocks of points keep the (K, L, block) temporaries cache-resident
        blocks = [self._forward_block(mu[s:s + _BLOCK], sigma, need_grad)
                  for s in range(0, n, _BLOCK)]
        masses = np.concatenate([b[0] for b in blocks], axis=1) if blocks \
            else np.zeros((self.n_leaves, 0))
        if not need_grad:
            return masses.T, None
        return masses.T, {"blocks": blocks, "n": n}

    def _forward_block(self, mu, sigma, need_grad):
        z = self._standardized_cuts(mu, sigma)
        # Phi(b) - Phi(a) == (A(b) - A(a)) + (P(b) - P(a)) with A = Phi on the
        # lower half-line, -(1 - Phi) on the upper, and P = [z > 0]. Only tail
        # probabilities are ever subtracted, so small masses keep their digits.
        tail = 0.5 * erfc(np.abs(z) * _INV_SQRT_2)
        upper = z > 0
        A = np.where(upper, -tail, tail)
        P = upper.astype(float)
        lo, hi = self._lo, self._hi  # (K, L)
        factors = A[hi] - A[lo]
        factors += P[hi] - P[lo]  # (K, L, block)
        width = factors.shape[0]
        masses = factors[0].copy()
        for k in range(1, width):
            masses *= factors[k]
        if not need_grad:
            return masses, None
        zz = z * z
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * np.minimum(zz, 1400.0))
        pdf[zz > 1400.0] = 0.0  # avoids the slow subnormal path of exp
        dmass = pdf[lo] - pdf[hi]
        dmass /= sigma
        # times the product of the region's other factors, without division
        if width > 1:
            run = factors[0].copy()
            for k in range(1, width):
                dmass[k] *= run
                run *= factors[k]
            run = factors[-1].copy()
            for k in range(width - 2, -1, -1):
                dmass[k] *= run
                run *= factors[k]
        return masses, dmass

    def predict(self, mu, sigma, leaf_values=None):
        mu_arr = np.asarray(mu, dtype=float)
        masses, _ = self.forward(mu_arr, sigma)
        values = self.leaf_values if leaf_values is None else leaf_values
        out = masses @ values if self.n_leaves else np.zeros((masses.shape[0], self.output_dim))
        return out[0] if mu_arr.ndim == 1 else out

    def _scatter_matrix(self):
        if self._scatter is None:
            K, L = self.feature.T.shape
            S = np.zeros((self.input_dim, K * L))
            S[self.feature.T.ravel(), np.arange(K * L)] = 1.0
            self._scatter = S
        return self._scatter

    def backward(self, cache, grad_output, leaf_values=None):
        """Vector-Jacobian product.

        ``grad_output`` has shape (n, C). Returns ``(grad_mu, grad_leaves)``
        with shapes (n, input_dim) and (L, C).
        """
        values = self.leaf_values if leaf_values is None else leaf_values
        g = np.atleast_2d(np.asarray(grad_output, dtype=float))
        S = self._scatter_matrix()
        grad_leaves = np.zeros((self.n_leaves, g.shape[1]))
        grad_mu = np.empty((cache["n"], self.input_dim))
        start = 0
        for masses, dmass in cache["blocks"]:
            stop = start + masses.shape[1]
            gb = g[start:stop]
            grad_leaves += masses @ gb
            weight = dmass * (values @ gb.T)[None]  # (K, L, block)
            grad_mu[start:stop] = (S @ weight.reshape(-1, stop - start)).T
            start = stop
        return grad_mu, grad_leaves

    def jacobian(self, mu, sigma, leaf_values=None) -> np.ndarray:
        """d value / d mu for a single mean, shape (C, input_dim)."""
        values = self.leaf_values if leaf_values is None else leaf_values
        mu, _ = self._check_mu(mu)
        if mu.shape[0] != 1:
            raise DimensionError("jacobian takes a single mean vector")
        _, cache = self.forward(mu, sigma, need_grad=True)
        dmass = cache["blocks"][0][1][:, :, 0]  # (K, L)
        S = self._scatter_matrix()
        return (S @ (dmass[:, :, None] * values[None]).reshape(-1, self.output_dim)).T


def smoothed_evaluate(forest: Forest, mu, spec) -> SmoothedValue:
    """Expected forest output at ``mu`` under Gaussian perturbation."""
    spec = _as_spec(spec)
    mu = np.asarray(mu, dtype=float)
    if mu.ndim != 1 or mu.size != forest.input_dim:
        raise DimensionError(f"expected mean of length {forest.input_dim}, got shape {mu.shape}")
    value = np.zeros(forest.output_dim)
    per_leaf, tree_index = {}, {}
    for t, tree in enumerate(forest.trees):
        for region in extract_leaf_regions(tree):
            mass = region_mass(region, mu, spec)
            per_leaf[region.leaf] = mass
            tree_index[region.leaf] = t
            value += mass * region.leaf.value
    return SmoothedValue(value, per_leaf, tree_index)


def smoothed_gradient_input(forest: Forest, mu, spec) -> np.ndarray:
    """Jacobian of the smoothed forest with respect to ``mu``, shape (C, input_dim)."""
    mu = np.asarray(mu, dtype=float)
    if mu.ndim != 1 or mu.size != forest.input_dim:
        raise DimensionError(f"expected mean of length {forest.input_dim}, got shape {mu.shape}")
    return SmoothedForest(forest).jacobian(mu, spec)


def smoothed_gradient_leaves(forest: Forest, mu, spec) -> dict:
    """Derivative of output component c with respect to component c of each leaf.

    This is the leaf's region mass; cross-component derivatives are zero.
    """
    return smoothed_evaluate(forest, mu, spec).per_leaf_mass
