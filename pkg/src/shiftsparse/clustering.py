"""Classical and shift-invariant k-means, and clustering accuracy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import ShapeError
from .datasets import LabeledDataset
from .dictionary import Dictionary, init_from_samples, mosa_update
from .sparse_coding import best_atom_match_batch


@dataclass
class ClusteringResult:
    assignments: np.ndarray
    centroids: Dictionary
    objective_trace: list
    iterations_run: int
    meta: dict = field(default_factory=dict)


def _samples(data):
    if isinstance(data, LabeledDataset):
        return data.samples
    return np.asarray(data, dtype=np.float64)


def _plus_plus(X, k, rng):
    """k-means++ seeding: distinct samples drawn with D^2 weights."""
    n = len(X)
    chosen = [int(rng.integers(n))]
    d2 = np.sum((X - X[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # every point coincides with a centre; fall back to any unused index
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((X - X[nxt]) ** 2, axis=1))
    return X[chosen].copy()


def _sq_dists(X, C):
    d = np.sum(X * X, axis=1)[:, None] - 2.0 * X @ C.T + np.sum(C * C, axis=1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(data, k, max_iters=100, rng=None):
    """Lloyd's algorithm on vectorized samples.

    Seeding is k-means++ over distinct samples. Empty clusters are re-seeded
    with the samples currently worst served by their centroid. Stops when
    assignments repeat or after ``max_iters`` assignment steps.
    """
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    samples = _samples(data)
    X = samples.reshape(len(samples), -1)
    if k > len(X):
        raise ValueError(f"k={k} exceeds sample count {len(X)}")
    rng = rng if rng is not None else np.random.default_rng(0)
    C = _plus_plus(X, k, rng)
    assign = None
    trace = []
    it = 0
    for it in range(1, max_iters + 1):
        new = np.argmin(_sq_dists(X, C), axis=1)
        trace.append(float(np.sum((X - C[new]) ** 2)))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(C)
        np.add.at(sums, assign, X)
        filled = counts > 0
        C[filled] = sums[filled] / counts[filled, None]
        if not np.all(filled):
            err = np.sum((X - C[assign]) ** 2, axis=1)
            worst = np.argsort(-err, kind="stable")
            for j, i in zip(np.flatnonzero(~filled), worst):
                C[j] = X[i]
    centroids = Dictionary(C.reshape((k,) + samples.shape[1:]), normalized=False)
    return ClusteringResult(assign, centroids, trace, it)


def kmeans_shift_invariant(data, k, atom_shape=None, max_iters=50, rng=None, weighting="uniform"):
    """Shift- and magnitude-invariant k-means with convolutional centroids.

    Each sample is assigned to the unit-norm centroid that, shifted to its
    best position and scaled freely, leaves the least residual energy; the
    centroids are then re-estimated with :func:`mosa_update`. Iteration
    stops once the (centroid, offset) assignments repeat or ``max_iters`` is
    reached; the iterate with the lowest objective is returned.
    """
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    samples = _samples(data)
    shape = samples.shape[1:]
    atom_shape = tuple(shape) if atom_shape is None else tuple(atom_shape)
    if len(atom_shape) != len(shape) or any(m > n for m, n in zip(atom_shape, shape)):
        raise ShapeError(f"atom shape {atom_shape} exceeds sample shape {shape}")
    if k > len(samples):
        raise ValueError(f"k={k} exceeds sample count {len(samples)}")
    rng = rng if rng is not None else np.random.default_rng(0)
    centroids = init_from_samples(samples, k, atom_shape, rng)
    trace = []
    best = None
    previous = None
    it = 0
    for it in range(1, max_iters + 1):
        matches = best_atom_match_batch(samples, centroids.atoms)
        objective = float(np.sum(matches[3]))
        trace.append(objective)
        if best is None or objective < best[0]:
            best = (objective, matches[0].copy(), centroids)
        state = np.column_stack([matches[0], matches[1]])
        if previous is not None and np.array_equal(state, previous):
            break
        previous = state
        centroids = mosa_update(samples, matches, centroids, weighting=weighting)
    _, assign, cents = best
    return ClusteringResult(assign, cents, trace, it, {"best_objective": best[0]})


def contingency(assignments, labels):
    a = np.asarray(assignments, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if a.shape != y.shape:
        raise ShapeError(f"{a.shape[0] if a.ndim else 0} assignments vs {y.shape[0] if y.ndim else 0} labels")
    table = np.zeros((a.max() + 1 if a.size else 0, y.max() + 1 if y.size else 0), dtype=np.int64)
    np.add.at(table, (a, y), 1)
    return table


def matching_accuracy(table):
    """Best one-to-one cluster/class matching mass of a contingency table, as a fraction."""
    table = np.asarray(table)
    n = table.sum()
    if table.size == 0 or n == 0:
        return 0.0
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum()) / float(n)


def clustering_accuracy(assignments, labels):
    """Share of samples on the diagonal of the best cluster-to-class matching."""
    return matching_accuracy(contingency(assignments, labels))


def random_assignments(n, k, rng):
    return rng.integers(0, k, size=n)
