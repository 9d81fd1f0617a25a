import json

import numpy as np
import pytest

from smoothforest.datasets import Dataset, SyntheticSpec, generate, split
from smoothforest.exceptions import DimensionError, DivergenceError
from smoothforest.forest import Forest, Leaf, Tree, evaluate_forest_batch, generate_random_forest
from smoothforest.neural import AdamState, EmbeddingNet, Layer
from smoothforest.serialization import export_forest
from smoothforest.training import (
    Model,
    TrainConfig,
    accuracy,
    evaluate,
    fit,
    objective,
    predict,
    sigma_for_epoch,
    train_step,
)


def constant_model():
    forest = Forest([Tree(Leaf([0.3]))], 2, 1)
    return Model(EmbeddingNet.mlp(2, [2], rng=0), forest, sigma=0.1)


def small_task(n=600, seed=0, kind="identity_line"):
    data = generate(SyntheticSpec(kind, n=n, seed=seed))
    return split(data, (0.8, 0.1, 0.1), seed=seed)


class TestModel:
    def test_dimension_check(self):
        with pytest.raises(DimensionError):
            Model(EmbeddingNet.identity(2), generate_random_forest(2, 3, 2, rng=0))

    def test_passthrough_width(self):
        forest = generate_random_forest(2, 3, 2, rng=0)
        model = Model(EmbeddingNet.mlp(2, [1], rng=0), forest, passthrough=(0, 1))
        Z, _ = model.forest_input(np.array([[0.2, 0.9]]))
        assert Z.shape == (1, 3) and Z[0, :2].tolist() == [0.2, 0.9]

    def test_sigmoid_needs_single_output(self):
        with pytest.raises(DimensionError):
            Model(EmbeddingNet.identity(1), generate_random_forest(1, 1, 1, output_dim=2, rng=0))


class TestPredict:
    def test_constant_forest_modes_agree(self):
        model = constant_model()
        x = np.array([0.4, 0.6])
        assert predict(model, x, hard=True)[0] == pytest.approx(predict(model, x, hard=False)[0])

    def test_limit_agreement(self, rng):
        forest = generate_random_forest(5, 2, 3, "uniform01", rng=rng)
        model = Model(EmbeddingNet.identity(2), forest, sigma=1e-6)
        splits = [(s.feature, s.threshold) for t in forest.trees for s in t.splits()]
        X = rng.random((500, 2))
        X = X[np.all([np.abs(X[:, f] - t) >= 1e-3 for f, t in splits], axis=0)]
        assert np.max(np.abs(predict(model, X) - predict(model, X, hard=False))) <= 1e-9

    def test_hard_is_plain_forest(self, rng):
        net = EmbeddingNet.mlp(3, [4, 2], rng=rng)
        forest = generate_random_forest(4, 2, 3, "uniform01", rng=rng)
        model = Model(net, forest)
        X = rng.random((50, 3))
        assert np.array_equal(predict(model, X), evaluate_forest_batch(forest, net(X)))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            predict(constant_model(), [0.1, 0.2, 0.3])


class TestTrainStep:
    def test_constant_forest_no_update(self):
        model = constant_model()
        model.leaf_trainable = False
        before = [p.copy() for p in model.embed.params()]
        train_step(model, (np.array([[0.1, 0.2]]), np.array([1])), AdamState())
        assert all(np.array_equal(a, b) for a, b in zip(before, model.embed.params()))

    def test_leaf_moves_toward_label(self):
        forest = Forest([Tree(Leaf([0.0]))], 1, 1)
        model = Model(EmbeddingNet.identity(1), forest, loss="squared_error")
        train_step(model, (np.array([[0.5]]), np.array([[2.0]])), AdamState(lr=0.1))
        assert model.forest.leaves()[0].value[0] == pytest.approx(0.1)
        train_step(model, (np.array([[0.5]]), np.array([[-2.0]])), AdamState(lr=0.1))
        assert model.forest.leaves()[0].value[0] < 0.1

    def test_frozen_leaf_flag_respected(self):
        forest = Forest([Tree(Leaf([0.0])), Tree(Leaf([0.0], trainable=False))], 1, 1)
        model = Model(EmbeddingNet.identity(1), forest, loss="squared_error")
        train_step(model, (np.array([[0.5]]), np.array([[2.0]])), AdamState(lr=0.1))
        assert [l.value[0] for l in model.forest.leaves()] == pytest.approx([0.1, 0.0])

    def test_mean_gradient(self, rng):
        # duplicating every example leaves the batch-mean gradient unchanged
        forest = generate_random_forest(3, 1, 2, "uniform01", rng=rng)
        X, y = rng.random((8, 2)), rng.integers(0, 2, 8)
        results = []
        for reps in (1, 2):
            model = Model(EmbeddingNet.mlp(2, [1], rng=1), forest.copy(), sigma=0.1)
            state = AdamState(lr=1e-3)
            train_step(model, (np.tile(X, (reps, 1)), np.tile(y, reps)), state)
            results.append(state.first_moment[0].copy())
        assert np.allclose(*results, rtol=1e-12, atol=1e-15)

    def test_held_out_loss_decreases(self):
        train, valid, _ = small_task(n=2000)
        rng = np.random.default_rng(0)
        model = Model(EmbeddingNet.mlp(2, [1], rng=rng),
                      generate_random_forest(32, 1, 4, rng=rng), sigma=0.015)
        state = AdamState(lr=1e-2)
        before = objective(model, valid.features, valid.labels)
        for step in range(100):
            idx = np.arange(step * 16, step * 16 + 16) % len(train)
            train_step(model, (train.features[idx], train.labels[idx]), state)
        assert objective(model, valid.features, valid.labels) < before

    def test_divergence_reported(self):
        forest = Forest([Tree(Leaf([1e308]))], 1, 1)
        model = Model(EmbeddingNet.identity(1), forest, loss="squared_error")
        with pytest.raises(DivergenceError):
            train_step(model, (np.array([[0.5], [0.5]]), np.array([[-1e308], [-1e308]])),
                       AdamState())

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            train_step(constant_model(), (np.zeros((0, 2)), np.zeros(0)), AdamState())


class TestSigmaSchedule:
    def test_fixed(self):
        config = TrainConfig(sigma=0.015)
        assert {sigma_for_epoch(config, e) for e in (0, 7, 199)} == {0.015}

    def test_linear_endpoints(self):
        config = TrainConfig(schedule="linear", sigma=0.1, sigma_end=0.01, epochs=50)
        assert sigma_for_epoch(config, 0) == 0.1
        assert sigma_for_epoch(config, 49) == pytest.approx(0.01, abs=1e-15)

    def test_exponential(self):
        config = TrainConfig(schedule="exponential", sigma=0.1, decay=0.5)
        assert sigma_for_epoch(config, 3) == pytest.approx(0.0125, abs=1e-15)
        assert sigma_for_epoch(config, 100) == 1e-6

    def test_invalid(self):
        with pytest.raises(ValueError):
            TrainConfig(schedule="cosine")
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)


class TestFit:
    def test_patience_zero_stops_after_first_bad_epoch(self):
        train, valid, _ = small_task(n=300)
        model = Model(EmbeddingNet.mlp(2, [1], rng=0), generate_random_forest(4, 1, 2, rng=0))
        # a huge learning rate makes the second epoch worse than the first
        _, history = fit(model, train, valid, TrainConfig(epochs=50, patience=0, lr=5.0,
                                                          batch_size=16))
        losses = [history.initial["valid_loss"]] + [r["valid_loss"] for r in history.records]
        best = np.minimum.accumulate(losses)
        first_bad = next(i for i in range(1, len(losses)) if losses[i] >= best[i - 1])
        assert len(history) == first_bad

    def test_restores_best_snapshot(self):
        train, valid, _ = small_task(n=400)
        model = Model(EmbeddingNet.mlp(2, [1], rng=0), generate_random_forest(8, 1, 3, rng=0))
        model, history = fit(model, train, valid, TrainConfig(epochs=6, lr=0.05, batch_size=64))
        loss, _ = evaluate(model, valid)
        losses = [history.initial["valid_loss"]] + [r["valid_loss"] for r in history.records]
        assert loss == pytest.approx(min(losses), rel=1e-12)
        assert loss == pytest.approx(losses[history.best_epoch], rel=1e-12)

    def test_history_records_and_jsonl(self, tmp_path):
        train, valid, _ = small_task(n=300)
        model = Model(EmbeddingNet.mlp(2, [1], rng=0), generate_random_forest(4, 1, 2, rng=0))
        _, history = fit(model, train, valid, TrainConfig(epochs=3, batch_size=64))
        history.write(tmp_path / "m.jsonl")
        lines = (tmp_path / "m.jsonl").read_text().splitlines()
        assert len(lines) == len(history) <= 3
        assert set(json.loads(lines[0])) == {"epoch", "sigma", "train_loss", "valid_loss",
                                             "valid_accuracy"}

    def test_reproducible(self):
        train, valid, _ = small_task(n=300)
        logs = []
        for _ in range(2):
            model = Model(EmbeddingNet.mlp(2, [3, 1], rng=4),
                          generate_random_forest(4, 1, 3, rng=4))
            _, history = fit(model, train, valid, TrainConfig(epochs=3, batch_size=32, seed=2))
            logs.append((history.to_jsonl(), export_forest(model.forest)))
        assert logs[0] == logs[1]

    def test_frozen_forest_bit_identical(self):
        train, valid, _ = small_task(n=300)
        forest = generate_random_forest(4, 2, 3, "uniform01", rng=0)
        forest.set_trainable(False)
        before = export_forest(forest)
        model = Model(EmbeddingNet([Layer(np.eye(2), np.zeros(2), "identity")]), forest,
                      leaf_trainable=False)
        fit(model, train, valid, TrainConfig(epochs=3, lr=0.05, batch_size=32))
        assert export_forest(model.forest) == before

    def test_finetune_improves_over_epoch0(self):
        from smoothforest.boosting import BoostingConfig, train_boosted_forest
        data = generate(SyntheticSpec("rotated_embeddings", n=3000, seed=0))
        train, valid, _ = split(data, (0.7, 0.15, 0.15), seed=0)
        forest = train_boosted_forest(train, BoostingConfig(6, 2, 0.3))
        forest.set_trainable(False)
        model = Model(EmbeddingNet([Layer(np.eye(4), np.zeros(4), "identity")]), forest,
                      leaf_trainable=False)
        model, history = fit(model, train, valid, TrainConfig(epochs=40, lr=1e-3))
        _, acc = evaluate(model, valid)
        assert acc > history.initial["valid_accuracy"]

    def test_empty_sets(self):
        empty = Dataset(np.zeros((0, 2)), np.zeros(0))
        train, _, _ = small_task(n=100)
        with pytest.raises(ValueError):
            fit(constant_model(), train, empty)

    def test_objective_is_mean(self, rng):
        model = Model(EmbeddingNet.mlp(2, [1], rng=rng), generate_random_forest(3, 1, 2, rng=rng))
        X, y = rng.random((10, 2)), rng.integers(0, 2, 10)
        total = np.mean([objective(model, X[i:i + 1], y[i:i + 1]) for i in range(10)])
        assert objective(model, X, y) == pytest.approx(total, rel=1e-12)


def test_identity_line_model_classifies():
    train, valid, test = small_task(n=3000, seed=1)
    rng = np.random.default_rng(0)
    model = Model(EmbeddingNet.mlp(2, [1], rng=rng), generate_random_forest(32, 1, 4, rng=rng))
    model, _ = fit(model, train, valid, TrainConfig(epochs=25, lr=1e-2))
    assert accuracy(model, test) >= 0.95
    assert predict(model, [0.7, 0.2])[0] > 0
