"""Learning algorithms and the accuracy utility.

``train_logreg`` is a from-scratch multinomial logistic regression fitted by
full-batch gradient descent on standardized features. ``sgd_step`` performs a
single-example update (used by G-Shapley). ``knn_predict`` backs the FairShap
family.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from ._kernels import softmax_gd
from .data import TabularDataset
from .errors import DimensionMismatch, EmptyTest, EmptyTrain


@dataclass(frozen=True)
class TrainConfig:
    """Gradient-descent settings.

    ``learning_rate=None`` selects the stability step ``1 / L`` where ``L``
    bounds the curvature of the regularized loss; any rate at or below it
    gives a non-increasing training loss.
    """

    max_iter: int = 5000
    learning_rate: float | None = None
    tolerance: float = 1e-6
    l2: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.tolerance <= 0 or self.l2 < 0:
            raise ValueError("tolerance must be > 0 and l2 >= 0")

    def to_dict(self) -> dict:
        return {
            "max_iter": self.max_iter,
            "learning_rate": self.learning_rate,
            "tolerance": self.tolerance,
            "l2": self.l2,
            "seed": self.seed,
        }


@dataclass(frozen=True, eq=False)
class LogisticModel:
    """Softmax classifier over the classes seen in training.

    ``weights`` has one row per entry of ``classes`` and ``d + 1`` columns
    (bias last). A model trained on a single class has ``constant=True`` and
    always predicts that class.
    """

    weights: np.ndarray
    classes: np.ndarray
    n_classes: int
    feature_means: np.ndarray
    feature_stds: np.ndarray
    constant: bool = False
    n_iter: int = 0

    @property
    def n_features(self) -> int:
        return self.weights.shape[1] - 1

    def standardize(self, x: np.ndarray) -> np.ndarray:
        z = (np.asarray(x, dtype=float) - self.feature_means) / self.feature_stds
        return np.concatenate([z, np.ones(z.shape[:-1] + (1,))], axis=-1)

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.n_features:
            raise DimensionMismatch(f"model has {self.n_features} features, input has {x.shape[1]}")
        if self.constant:
            return np.full(x.shape[0], self.classes[0], dtype=np.int64)
        logits = self.standardize(x) @ self.weights.T
        return self.classes[np.argmax(logits, axis=1)]

    def to_json(self) -> str:
        return json.dumps(
            {
                "weights": self.weights.tolist(),
                "feature_means": self.feature_means.tolist(),
                "feature_stds": self.feature_stds.tolist(),
                "classes": self.classes.tolist(),
                "n_classes": self.n_classes,
                "constant": self.constant,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "LogisticModel":
        d = json.loads(text)
        return cls(
            weights=np.asarray(d["weights"], dtype=float),
            classes=np.asarray(d["classes"], dtype=np.int64),
            n_classes=int(d["n_classes"]),
            feature_means=np.asarray(d["feature_means"], dtype=float),
            feature_stds=np.asarray(d["feature_stds"], dtype=float),
            constant=bool(d.get("constant", False)),
        )


@dataclass(frozen=True)
class UtilityValue:
    accuracy: float
    evaluated_on: str = "test"
    trained_on: str = ""


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grad(weights: np.ndarray, zb: np.ndarray, onehot: np.ndarray, l2: float):
    """Mean softmax cross-entropy plus ``l2/2 * ||W||^2`` and its gradient.

    ``zb`` is the standardized design matrix with a trailing ones column.
    """
    logits = zb @ weights.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    n = zb.shape[0]
    loss = -(onehot * log_p).sum() / n + 0.5 * l2 * (weights * weights).sum()
    grad = (np.exp(log_p) - onehot).T @ zb / n + l2 * weights
    return loss, grad


def stability_step(zb: np.ndarray, l2: float) -> float:
    """``1 / L`` with L = 0.5 * lambda_max(Z^T Z / n) + l2."""
    gram = zb.T @ zb / zb.shape[0]
    lam = float(np.linalg.eigvalsh(gram)[-1])
    return 1.0 / (0.5 * lam + l2)


def _standardization(x: np.ndarray):
    means = x.mean(axis=0)
    stds = x.std(axis=0)
    stds = np.where(stds > 0, stds, 1.0)
    return means, stds


def init_weights(n_rows: int, d: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).normal(0.0, 0.01, size=(n_rows, d + 1))


def fit_arrays(x: np.ndarray, y: np.ndarray, n_classes: int, config: TrainConfig) -> LogisticModel:
    """Array-level training used by the valuation hot loops."""
    if x.shape[0] == 0:
        raise EmptyTrain("cannot train on an empty set")
    means, stds = _standardization(x)
    classes = np.unique(y)
    d = x.shape[1]
    if len(classes) == 1:
        return LogisticModel(
            weights=np.zeros((1, d + 1)), classes=classes, n_classes=n_classes,
            feature_means=means, feature_stds=stds, constant=True,
        )
    zb = np.empty((x.shape[0], d + 1))
    zb[:, :d] = (x - means) / stds
    zb[:, d] = 1.0
    yidx = np.searchsorted(classes, y).astype(np.int64)
    lr = config.learning_rate or stability_step(zb, config.l2)
    w = init_weights(len(classes), d, config.seed)
    it = softmax_gd(zb, yidx, w, float(lr), float(config.l2), int(config.max_iter), float(config.tolerance))
    return LogisticModel(
        weights=w, classes=classes, n_classes=n_classes,
        feature_means=means, feature_stds=stds, n_iter=it,
    )


def train_logreg(train: TabularDataset, config: TrainConfig = TrainConfig()) -> LogisticModel:
    """Fit softmax regression on ``train`` by full-batch gradient descent.

    Classes absent from ``train`` get no weight row and are never predicted.
    A single-class training set yields a constant model (``constant=True``).
    """
    if train.has_missing:
        raise ValueError("training data still contains missing cells; impute first")
    return fit_arrays(train.features, train.labels, train.n_classes, config)


def fresh_model(train: TabularDataset, seed: int) -> LogisticModel:
    """Untrained model over all classes, standardized by ``train`` statistics."""
    means, stds = _standardization(np.asarray(train.features, dtype=float))
    return LogisticModel(
        weights=init_weights(train.n_classes, train.d, seed),
        classes=np.arange(train.n_classes),
        n_classes=train.n_classes,
        feature_means=means,
        feature_stds=stds,
    )


def sgd_step(model: LogisticModel, x: np.ndarray, y: int, learning_rate: float) -> LogisticModel:
    """One cross-entropy gradient step on a single example; returns a new model."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.n_features,):
        raise DimensionMismatch(f"datum has shape {x.shape}, model expects ({model.n_features},)")
    if model.constant:
        return model
    hits = np.nonzero(model.classes == y)[0]
    if len(hits) == 0:
        raise DimensionMismatch(f"label {y} is not among the model's classes")
    zb = model.standardize(x)
    p = softmax(model.weights @ zb)
    p[hits[0]] -= 1.0
    grad = np.outer(p, zb)
    return replace(model, weights=model.weights - learning_rate * grad)


def correct_vector(model: LogisticModel, test: TabularDataset) -> np.ndarray:
    return model.predict(test.features) == test.labels


def accuracy(model: LogisticModel, test: TabularDataset, trained_on: str = "") -> UtilityValue:
    """Fraction of argmax predictions equal to the labels."""
    if test.n == 0:
        raise EmptyTest("accuracy needs a non-empty test set")
    return UtilityValue(float(np.mean(correct_vector(model, test))), "test", trained_on)


def empty_utility(n_classes: int) -> float:
    """Utility of the empty coalition: accuracy of a uniform random guess."""
    return 1.0 / n_classes


def knn_order(train_x: np.ndarray, train_ids: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Train rows sorted by squared distance to ``query``, ties by datum_id."""
    diff = train_x - query
    dist = (diff * diff).sum(axis=1)
    return np.lexsort((train_ids, dist))


def knn_predict(train: TabularDataset, query: np.ndarray, k: int) -> int:
    """Majority label of the k nearest rows; vote ties go to the lowest class."""
    if train.n == 0:
        raise EmptyTrain("kNN needs at least one training row")
    if not 1 <= k <= train.n:
        raise ValueError(f"k must lie in [1, {train.n}], got {k}")
    order = knn_order(train.features, train.datum_ids, np.asarray(query, dtype=float))
    votes = np.bincount(train.labels[order[:k]], minlength=train.n_classes)
    return int(np.argmax(votes))
