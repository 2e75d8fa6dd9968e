"""One-vs-rest linear SVM trained with Pegasos-style stochastic subgradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ShapeError, load_tensors, save_tensors, seeded_rng


@dataclass
class LinearModel:
    weights: np.ndarray        # (n_classes, dim)
    biases: np.ndarray         # (n_classes,)
    mean: np.ndarray           # (dim,)
    scale: np.ndarray          # (dim,), strictly positive
    lam: float = 1e-4
    epochs: int = 20
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.weights.shape[1] != self.mean.shape[0]:
            raise ShapeError(f"weights {self.weights.shape} vs feature dim {self.mean.shape[0]}")
        if np.any(self.scale <= 0):
            raise ValueError("standardization scale must be positive")

    @property
    def n_classes(self):
        return len(self.biases)

    def scores(self, features):
        F = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if F.shape[1] != len(self.mean):
            raise ShapeError(f"feature dim {F.shape[1]} does not match model dim {len(self.mean)}")
        Z = (F - self.mean) / self.scale
        return Z @ self.weights.T + self.biases

    def save(self, path):
        params = np.array([self.lam, self.epochs, self.seed], dtype=np.float64)
        save_tensors(path, self.weights, self.biases, self.mean, self.scale, params)

    @classmethod
    def load(cls, path):
        W, b, mean, scale, params = load_tensors(path)
        return cls(W, b, mean, scale, float(params[0]), int(params[1]), int(params[2]))


def _objective(Z, T, W, b, lam):
    margins = T * (Z @ W.T + b)
    hinge = np.maximum(0.0, 1.0 - margins).mean(axis=0)
    # the bias is an extra coordinate with constant input 1, regularized like W
    return float(np.sum(0.5 * lam * (np.sum(W * W, axis=1) + b * b) + hinge))


def svm_fit(features, labels, lam=1e-4, epochs=20, seed=0, n_classes=None):
    """Fit one binary hinge-loss model per class on standardized features.

    Every epoch visits the samples in a fresh seeded permutation with step
    ``1 / (lam * (t + t0))``, ``t0 = max(n, R^2 / lam)`` where ``R^2`` is the
    mean squared norm of the augmented standardized inputs, followed by
    projection onto the ``1/sqrt(lam)`` ball.
    The average of the iterates within each epoch is evaluated on the full
    training set at the epoch boundary; the best of these is kept, so the
    reported objective trace never increases.
    """
    F = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if F.ndim != 2 or len(F) != len(y):
        raise ShapeError(f"features {F.shape} vs labels {y.shape}")
    if not np.all(np.isfinite(F)):
        raise ValueError("features contain NaN or Inf")
    C = int(n_classes or (y.max() + 1))
    if len(np.unique(y)) < 2:
        raise ValueError("need at least two classes to train a classifier")
    mean = F.mean(axis=0)
    std = F.std(axis=0)
    scale = np.where(std > 0, std, 1.0)
    Z = (F - mean) / scale
    T = np.where(y[:, None] == np.arange(C)[None, :], 1.0, -1.0)   # (n, C)

    rng = seeded_rng(seed)
    n, d = Z.shape
    W = np.zeros((C, d))
    b = np.zeros(C)
    radius = 1.0 / np.sqrt(lam)
    best = (_objective(Z, T, W, b, lam), W.copy(), b.copy())
    trace = [best[0]]
    t = 0
    # start the step counter late enough that one update moves a margin by
    # about 1 (eta * |z|^2 ~ 1), and never earlier than one epoch in
    r2 = float(np.mean(np.sum(Z * Z, axis=1))) + 1.0
    t0 = max(n, r2 / lam)
    for _ in range(epochs):
        W_avg = np.zeros_like(W)
        b_avg = np.zeros_like(b)
        for j, i in enumerate(rng.permutation(n), start=1):
            t += 1
            eta = 1.0 / (lam * (t + t0))
            z = Z[i]
            active = T[i] * (W @ z + b) < 1.0
            W *= 1.0 - eta * lam
            b *= 1.0 - eta * lam
            if np.any(active):
                W[active] += eta * np.outer(T[i, active], z)
                b[active] += eta * T[i, active]
            norms = np.sqrt(np.sum(W * W, axis=1) + b * b)
            shrink = np.minimum(1.0, radius / np.maximum(norms, 1e-300))
            W *= shrink[:, None]
            b *= shrink
            W_avg += (W - W_avg) / j
            b_avg += (b - b_avg) / j
        value = _objective(Z, T, W_avg, b_avg, lam)
        if value <= best[0]:
            best = (value, W_avg.copy(), b_avg.copy())
        trace.append(best[0])
    model = LinearModel(best[1], best[2], mean, scale, lam, epochs, seed)
    model.meta["objective_trace"] = trace
    model.meta["train_accuracy"] = float(np.mean(svm_predict(model, F) == y))
    return model


def svm_predict(model, features):
    """Class with the highest score; ties go to the lower class index."""
    return np.argmax(model.scores(features), axis=1)


def accuracy(model, features, labels):
    return float(np.mean(svm_predict(model, features) == np.asarray(labels)))
