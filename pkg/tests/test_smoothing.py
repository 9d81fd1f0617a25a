import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from smoothforest.exceptions import DimensionError
from smoothforest.forest import (
    Forest,
    Interval,
    Leaf,
    LeafRegion,
    Tree,
    evaluate_forest_batch,
    extract_leaf_regions,
    generate_random_forest,
)
from smoothforest.oracle import finite_diff_gradient
from smoothforest.smoothing import (
    PerturbationSpec,
    SmoothedForest,
    gaussian_cdf,
    gaussian_pdf,
    region_mass,
    smoothed_evaluate,
    smoothed_gradient_input,
    smoothed_gradient_leaves,
)

from conftest import stump

mpmath.mp.dps = 40


def phi_oracle(t):
    return float(mpmath.ncdf(t))


# values computed with mpmath at 40 digits and frozen here
PHI_1_96 = 0.9750021048517795
PHI_1 = 0.8413447460685429
MASS_PM2 = 0.9544997361036416
PDF0_OVER_01 = 3.989422804014327


def test_frozen_values_match_oracle():
    assert PHI_1_96 == pytest.approx(phi_oracle(1.96), abs=1e-16)
    assert PHI_1 == pytest.approx(phi_oracle(1), abs=1e-16)
    assert MASS_PM2 == pytest.approx(phi_oracle(2) - phi_oracle(-2), abs=1e-16)
    assert PDF0_OVER_01 == pytest.approx(float(mpmath.npdf(0)) / 0.1, abs=1e-14)


class TestGaussianCdf:
    def test_zero(self):
        assert gaussian_cdf(0.0) == 0.5

    def test_1_96(self):
        assert gaussian_cdf(1.96) == pytest.approx(0.97500, abs=1e-5)
        assert gaussian_cdf(1.96) == pytest.approx(PHI_1_96, abs=1e-12)

    def test_infinities(self):
        assert gaussian_cdf(-math.inf) == 0.0 and gaussian_cdf(math.inf) == 1.0
        assert gaussian_pdf(math.inf) == 0.0

    def test_accuracy_grid(self):
        for t in np.linspace(-8, 8, 161):
            assert abs(gaussian_cdf(t) - phi_oracle(t)) <= 1e-12

    @given(st.floats(-30, 30))
    def test_symmetry(self, t):
        assert gaussian_cdf(-t) == pytest.approx(1 - gaussian_cdf(t), abs=1e-15)

    @given(st.floats(-10, 10), st.floats(0, 5))
    def test_monotone(self, t, dt):
        assert gaussian_cdf(t + dt) >= gaussian_cdf(t)


class TestRegionMass:
    def test_unconstrained(self):
        assert region_mass(LeafRegion({}, Leaf([1.0])), [0.3], 0.1) == 1.0

    def test_half_line(self):
        region = LeafRegion({0: Interval(upper=0.0)}, Leaf([1.0]))
        assert region_mass(region, [0.0], 1.0) == 0.5

    def test_box(self):
        region = LeafRegion({0: Interval(0.0, 1.0)}, Leaf([1.0]))
        mass = region_mass(region, [0.5], 0.25)
        assert mass == pytest.approx(0.95450, abs=1e-4)
        assert mass == pytest.approx(MASS_PM2, abs=1e-13)

    def test_far_upper_tail_keeps_precision(self):
        region = LeafRegion({0: Interval(10.0, 11.0)}, Leaf([1.0]))
        expected = phi_oracle(-10) - phi_oracle(-11)
        assert region_mass(region, [0.0], 1.0) == pytest.approx(expected, rel=1e-10)

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError):
            PerturbationSpec(0.0)


class TestSmoothedEvaluate:
    def test_constant_forest(self, rng):
        forest = generate_random_forest(3, 2, 3, "zero", rng=rng)
        for leaf in forest.leaves():
            leaf.value[:] = 2.5
        out = smoothed_evaluate(forest, rng.random(2), 0.3)
        assert out.value[0] == pytest.approx(3 * 2.5, abs=1e-12)

    def test_stump(self, stump_forest):
        assert smoothed_evaluate(stump_forest, [0.0], 0.2).value[0] == 0.5
        out = smoothed_evaluate(stump_forest, [0.1], 0.1).value[0]
        assert out == pytest.approx(0.84134, abs=1e-5)
        assert out == pytest.approx(PHI_1, abs=1e-14)

    def test_dimension_mismatch(self, stump_forest):
        with pytest.raises(DimensionError):
            smoothed_evaluate(stump_forest, [0.0, 1.0], 0.1)

    def test_batched_matches_region_sum(self, rng):
        forest = generate_random_forest(6, 3, 4, "uniform01", 2, rng)
        sf = SmoothedForest(forest)
        for _ in range(10):
            mu, sigma = rng.random(3), rng.uniform(0.01, 0.5)
            ref = smoothed_evaluate(forest, mu, sigma).value
            assert np.allclose(sf.predict(mu, sigma), ref, rtol=0, atol=1e-13)

    def test_many_points_batch(self, rng):
        forest = generate_random_forest(4, 2, 3, "uniform01", 1, rng)
        sf = SmoothedForest(forest)
        X = rng.random((300, 2))
        batch = sf.predict(X, 0.05)
        single = np.array([sf.predict(x, 0.05) for x in X])
        assert np.allclose(batch, single, atol=1e-14, rtol=0)


class TestGradients:
    def test_constant_forest_zero(self):
        forest = Forest([Tree(Leaf([1.0]))], 2, 1)
        assert np.array_equal(smoothed_gradient_input(forest, [0.3, 0.4], 0.1), np.zeros((1, 2)))

    def test_stump_gradient(self, stump_forest):
        grad = smoothed_gradient_input(stump_forest, [0.0], 0.1)
        assert grad[0, 0] == pytest.approx(3.98942, abs=1e-5)
        assert grad[0, 0] == pytest.approx(PDF0_OVER_01, rel=1e-14)

    def test_flat_region(self, rng):
        forest = generate_random_forest(5, 2, 3, "uniform01", 1, rng)
        sigma = 0.01
        thresholds = np.array([[s.feature, s.threshold] for t in forest.trees for s in t.splits()])
        mu = np.array([-0.2, 1.2])  # all thresholds are in [0, 1]
        assert np.all(np.abs(mu[thresholds[:, 0].astype(int)] - thresholds[:, 1]) >= 10 * sigma)
        assert np.max(np.abs(smoothed_gradient_input(forest, mu, sigma))) <= 1e-8

    def test_leaf_masses_on_threshold(self, stump_forest):
        masses = list(smoothed_gradient_leaves(stump_forest, [0.0], 0.3).values())
        assert masses == [0.5, 0.5]

    def test_leaf_masses_sum_to_one(self, rng):
        forest = generate_random_forest(8, 3, 5, rng=rng)
        out = smoothed_evaluate(forest, rng.random(3), 0.07)
        assert np.allclose(out.tree_totals(), 1.0, atol=1e-9, rtol=0)

    def test_leaf_gradient_finite_difference(self, rng):
        forest = generate_random_forest(3, 2, 3, "uniform01", 1, rng)
        mu, sigma = rng.random(2), 0.1
        masses = smoothed_gradient_leaves(forest, mu, sigma)
        base = smoothed_evaluate(forest, mu, sigma).value[0]
        h = 1e-6
        for leaf, mass in masses.items():
            leaf.value[0] += h
            bumped = smoothed_evaluate(forest, mu, sigma).value[0]
            leaf.value[0] -= h
            assert (bumped - base) / h == pytest.approx(mass, abs=1e-6)

    def test_backward_leaf_gradient_batched(self, rng):
        forest = generate_random_forest(4, 2, 3, "uniform01", 2, rng)
        sf = SmoothedForest(forest)
        X = rng.random((5, 2))
        G = rng.standard_normal((5, 2))
        masses, cache = sf.forward(X, 0.1, need_grad=True)
        _, grad_leaves = sf.backward(cache, G)
        assert np.allclose(grad_leaves, masses.T @ G, atol=1e-14)

    def test_input_gradient_fd_stated_step(self, rng):
        # plain central differences with h = 1e-4 * max(1, |mu|); truncation error
        # grows like (h / sigma)^2, so this step resolves 1e-5 only for sigma >= 0.1
        for _ in range(30):
            d = int(rng.choice([1, 2, 5, 10]))
            forest = generate_random_forest(int(rng.integers(1, 17)), d,
                                            int(rng.integers(1, 7)), "uniform01", rng=rng)
            sf = SmoothedForest(forest)
            mu, sigma = rng.random(d), rng.uniform(0.1, 0.5)
            analytic = sf.jacobian(mu, sigma)
            numeric = finite_diff_gradient(lambda v: sf.predict(v, sigma), mu,
                                           1e-4 * np.maximum(1, np.abs(mu)))
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
            assert np.max(np.abs(analytic - numeric) / denom) <= 1e-5

    def test_jacobian_matches_backward(self, rng):
        forest = generate_random_forest(5, 3, 4, "uniform01", 2, rng)
        sf = SmoothedForest(forest)
        mu = rng.random(3)
        J = sf.jacobian(mu, 0.05)
        _, cache = sf.forward(mu[None], 0.05, need_grad=True)
        for c in range(2):
            g = np.zeros((1, 2))
            g[0, c] = 1.0
            grad_mu, _ = sf.backward(cache, g)
            assert np.allclose(grad_mu[0], J[c], atol=1e-13, rtol=0)


# properties ------------------------------------------------------------------

def random_forest(seed, max_trees=6, max_depth=5, dims=(1, 2, 5, 10)):
    rng = np.random.default_rng(seed)
    d = int(rng.choice(dims))
    forest = generate_random_forest(int(rng.integers(1, max_trees + 1)), d,
                                    int(rng.integers(1, max_depth + 1)), "uniform01", 2, rng)
    return forest, rng.uniform(-0.2, 1.2, d), rng


@given(seed=st.integers(0, 2**32 - 1), sigma=st.floats(1e-3, 1.0))
def test_mass_normalization(seed, sigma):
    forest, mu, _ = random_forest(seed)
    out = smoothed_evaluate(forest, mu, sigma)
    assert np.allclose(out.tree_totals(), 1.0, atol=1e-9, rtol=0)
    assert all(0.0 <= m <= 1.0 for m in out.per_leaf_mass.values())


@given(seed=st.integers(0, 2**32 - 1), sigma=st.floats(1e-3, 1.0))
def test_bounding(seed, sigma):
    forest, mu, _ = random_forest(seed)
    for tree in forest.trees:
        single = Forest([tree], forest.input_dim, forest.output_dim)
        value = smoothed_evaluate(single, mu, sigma).value
        leaves = np.array([l.value for l in tree.leaves()])
        assert np.all(value >= leaves.min(axis=0) - 1e-12)
        assert np.all(value <= leaves.max(axis=0) + 1e-12)


@given(seed=st.integers(0, 2**32 - 1), sigma=st.floats(1e-3, 1.0))
def test_sparsity_equivalence(seed, sigma):
    forest, mu, _ = random_forest(seed)
    for tree in forest.trees:
        for region in extract_leaf_regions(tree):
            dense = dict(region.constraints)
            for f in range(forest.input_dim):
                dense.setdefault(f, Interval())
            assert region_mass(LeafRegion(dense, region.leaf), mu, sigma) == \
                region_mass(region, mu, sigma)


@given(a=st.floats(-1, 1), b=st.floats(-1, 1), sigma=st.floats(0.01, 1.0))
def test_monotone_smoothing(a, b, sigma):
    forest = Forest([stump(0, 0.0, 0.0, 1.0)], 1, 1)
    lo, hi = sorted((a, b))
    if hi - lo < 1e-6:
        return
    f_lo = smoothed_evaluate(forest, [lo], sigma).value[0]
    f_hi = smoothed_evaluate(forest, [hi], sigma).value[0]
    assert f_hi >= f_lo
    # strict only where doubles can still resolve the CDF (deep tails round to 0 or 1)
    if lo / sigma > -30 and hi / sigma < 5:
        assert f_hi > f_lo


def test_hard_limit(rng):
    forest = generate_random_forest(8, 3, 4, "uniform01", 1, rng)
    sf = SmoothedForest(forest)
    splits = [(s.feature, s.threshold) for t in forest.trees for s in t.splits()]
    X = rng.random((2000, 3))
    keep = np.ones(len(X), dtype=bool)
    for f, t in splits:
        keep &= np.abs(X[:, f] - t) >= 1e-3
    X = X[keep]
    assert np.max(np.abs(sf.predict(X, 1e-6) - evaluate_forest_batch(forest, X))) <= 1e-9


def test_determinism(rng):
    forest = generate_random_forest(5, 2, 4, "uniform01", 1, rng)
    mu = rng.random((20, 2))
    a = SmoothedForest(forest).predict(mu, 0.1)
    b = SmoothedForest(forest).predict(mu, 0.1)
    assert np.array_equal(a, b)
