"""scikit-learn style estimators around the training and boosting code."""

from __future__ import annotations

import numpy as np
from scipy.special import expit, softmax
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .boosting import BoostingConfig, train_boosted_forest
from .datasets import Dataset, split
from .exceptions import DimensionError
from .forest import evaluate_forest_batch, generate_random_forest
from .neural import EmbeddingNet, predicted_labels
from .training import Model, TrainConfig, fit, predict


def _layer_sizes(hidden_layers, embedding_dim):
    sizes = [int(s) for s in hidden_layers]
    return sizes + [int(embedding_dim)]


class _SmoothForestBase(BaseEstimator, TransformerMixin):
    """Shared fitting logic; subclasses choose the loss and label encoding."""

    def __init__(self, hidden_layers=(), embedding_dim=1, n_trees=32, max_depth=4,
                 leaf_init="binary01", sigma=0.015, schedule="fixed", sigma_end=0.001,
                 decay=0.95, batch_size=512, learning_rate=1e-3, max_epochs=200,
                 patience=20, validation_fraction=0.1, hidden_activation="relu",
                 output_activation="sigmoid", forest=None, embedding=None,
                 random_state=0):
        self.hidden_layers = hidden_layers
        self.embedding_dim = embedding_dim
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.leaf_init = leaf_init
        self.sigma = sigma
        self.schedule = schedule
        self.sigma_end = sigma_end
        self.decay = decay
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        self.forest = forest
        self.embedding = embedding
        self.random_state = random_state

    def _build_model(self, n_features, output_dim, loss):
        rng = np.random.default_rng(self.random_state)
        if self.embedding is not None:
            embed = self.embedding.copy()
            if embed.input_dim != n_features:
                raise DimensionError(
                    f"embedding expects {embed.input_dim} features, X has {n_features}"
                )
        else:
            embed = EmbeddingNet.mlp(
                n_features, _layer_sizes(self.hidden_layers, self.embedding_dim),
                self.hidden_activation, self.output_activation, rng,
            )
        if self.forest is not None:
            forest = self.forest.copy()
            forest.set_trainable(False)
            leaf_trainable = False
        else:
            forest = generate_random_forest(self.n_trees, embed.output_dim, self.max_depth,
                                            self.leaf_init, output_dim, rng)
            leaf_trainable = True
        return Model(embed, forest, self.sigma, loss, leaf_trainable)

    def _fit(self, X, y, output_dim, loss):
        data = Dataset(X, y)
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        train, valid = split(data, (1 - self.validation_fraction, self.validation_fraction),
                             seed=self.random_state)
        config = TrainConfig(
            batch_size=self.batch_size, epochs=self.max_epochs, patience=self.patience,
            schedule=self.schedule, sigma=self.sigma, sigma_end=self.sigma_end,
            decay=self.decay, lr=self.learning_rate, seed=self.random_state,
        )
        model = self._build_model(X.shape[1], output_dim, loss)
        self.model_, self.history_ = fit(model, train, valid, config)
        self.n_features_in_ = X.shape[1]
        return self

    def _check(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise DimensionError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X

    def decision_function(self, X, hard=True):
        """Raw forest output on the embedded inputs."""
        X = self._check(X)
        out = predict(self.model_, X, hard=hard)
        return out[:, 0] if out.shape[1] == 1 else out

    def transform(self, X):
        """The learned embedding ``E(X)``."""
        X = self._check(X)
        return self.model_.embed(X)


class SmoothForestClassifier(ClassifierMixin, _SmoothForestBase):
    """Embedding network trained through a random (or given, frozen) forest.

    Two classes use a single forest output and sigmoid cross-entropy; more
    classes use one output per class and softmax cross-entropy.
    """

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        codes = np.searchsorted(self.classes_, y)
        if len(self.classes_) == 2:
            return self._fit(X, codes, 1, "sigmoid_cross_entropy")
        return self._fit(X, codes, len(self.classes_), "softmax_cross_entropy")

    def predict(self, X):
        X = self._check(X)
        out = predict(self.model_, X, hard=True)
        return self.classes_[predicted_labels(self.model_.loss, out)]

    def predict_proba(self, X, hard=True):
        X = self._check(X)
        out = predict(self.model_, X, hard=hard)
        if out.shape[1] == 1:
            p = expit(out[:, 0])
            return np.column_stack([1 - p, p])
        return softmax(out, axis=1)


class SmoothForestRegressor(RegressorMixin, _SmoothForestBase):
    """Same model with squared-error loss; ``y`` may be 1D or 2D."""

    def __init__(self, hidden_layers=(), embedding_dim=1, n_trees=32, max_depth=4,
                 leaf_init="zero", sigma=0.015, schedule="fixed", sigma_end=0.001,
                 decay=0.95, batch_size=512, learning_rate=1e-3, max_epochs=200,
                 patience=20, validation_fraction=0.1, hidden_activation="relu",
                 output_activation="sigmoid", forest=None, embedding=None,
                 random_state=0):
        super().__init__(hidden_layers, embedding_dim, n_trees, max_depth, leaf_init, sigma,
                         schedule, sigma_end, decay, batch_size, learning_rate, max_epochs,
                         patience, validation_fraction, hidden_activation,
                         output_activation, forest, embedding, random_state)

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        y = np.asarray(y, dtype=float)
        self._single_output = y.ndim == 1
        Y = y.reshape(len(y), -1)
        return self._fit(X, Y, Y.shape[1], "squared_error")

    def predict(self, X):
        X = self._check(X)
        out = predict(self.model_, X, hard=True)
        return out[:, 0] if self._single_output else out


class _BoostedBase(BaseEstimator):
    def __init__(self, n_estimators=50, max_depth=3, learning_rate=0.1, min_samples_leaf=1):
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.learning_rate = learning_rate
        self.min_samples_leaf = min_samples_leaf

    def _train(self, X, y, loss, n_classes=None):
        config = BoostingConfig(self.n_estimators, self.max_depth, self.learning_rate, loss,
                                self.min_samples_leaf, n_classes)
        self.train_loss_ = []
        self.forest_ = train_boosted_forest(Dataset(X, y), config, self.train_loss_)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "forest_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise DimensionError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        out = evaluate_forest_batch(self.forest_, X)
        return out[:, 0] if out.shape[1] == 1 else out


class BoostedForestClassifier(ClassifierMixin, _BoostedBase):
    """Gradient-boosted trees; the fitted ``forest_`` is a plain :class:`Forest`."""

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        codes = np.searchsorted(self.classes_, y)
        if len(self.classes_) == 2:
            return self._train(X, codes, "logistic")
        return self._train(X, codes, "softmax", len(self.classes_))

    def predict(self, X):
        scores = self.decision_function(X)
        if scores.ndim == 1:
            return self.classes_[(scores > 0).astype(int)]
        return self.classes_[np.argmax(scores, axis=1)]


class BoostedForestRegressor(RegressorMixin, _BoostedBase):
    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        return self._train(X, np.asarray(y, dtype=float), "squared")

    def predict(self, X):
        return self.decision_function(X)
