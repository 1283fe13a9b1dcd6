"""Discretisation and plug-in mutual information."""

from __future__ import annotations

import math

import numpy as np

AUTO = "AUTO"


def auto_bins(n_train: int) -> int:
    return max(2, min(16, int(math.floor(math.sqrt(n_train / 5.0)))))


def bin_edges(train_values, n_bins) -> np.ndarray:
    """Interior edges of equal-frequency bins fitted on training values.

    Duplicate quantiles collapse, so tied values always share a bin.
    """
    v = np.asarray(train_values, dtype=float)
    if n_bins == AUTO:
        n_bins = auto_bins(v.size)
    if n_bins < 2:
        raise ValueError("need at least 2 bins")
    ordered = np.sort(v)
    n = ordered.size
    edges = []
    for j in range(1, n_bins):
        # first value of the j-th equal-count share; bins are [edge, next_edge)
        cut = ordered[min(n - 1, int(math.ceil(j * n / n_bins)))]
        if cut > ordered[0] and (not edges or cut > edges[-1]):
            edges.append(cut)
    return np.array(edges, dtype=float)


def apply_edges(values, edges) -> np.ndarray:
    return np.searchsorted(edges, np.asarray(values, dtype=float), side="right").astype(np.int64)


def discretize(column, n_bins=AUTO, train_mask=None) -> np.ndarray:
    """Equal-frequency codes; edges come from ``column[train_mask]`` when given."""
    column = np.asarray(column, dtype=float)
    train = column if train_mask is None else column[train_mask]
    return apply_edges(column, bin_edges(train, n_bins))


def discretize_matrix(X, n_bins=AUTO, train_mask=None) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return np.column_stack([discretize(X[:, j], n_bins, train_mask) for j in range(X.shape[1])]) if X.shape[1] else np.zeros((X.shape[0], 0), dtype=np.int64)


def _codes(v: np.ndarray) -> tuple[np.ndarray, int]:
    _, inverse = np.unique(v, return_inverse=True)
    return inverse.ravel(), int(inverse.max()) + 1 if inverse.size else 0


def mutual_information(x, y) -> float:
    """Plug-in MI in nats between two discrete vectors."""
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape:
        raise ValueError("mutual_information needs equal-length inputs")
    n = x.size
    if n == 0:
        return 0.0
    cx, kx = _codes(x)
    cy, ky = _codes(y)
    joint = np.bincount(cx * ky + cy, minlength=kx * ky).reshape(kx, ky).astype(float)
    px = joint.sum(axis=1)
    py = joint.sum(axis=0)
    nz = joint > 0
    outer = np.outer(px, py)
    mi = float(np.sum(joint[nz] / n * np.log(joint[nz] * n / outer[nz])))
    # rounding can push an independent table a hair below zero
    return max(mi, 0.0)


def entropy(x) -> float:
    _, counts = np.unique(np.asarray(x), return_counts=True)
    n = counts.sum()
    return float(np.sum(counts / n * np.log(n / counts)))


def relevance(X_discrete, y) -> np.ndarray:
    return np.array([mutual_information(X_discrete[:, j], y) for j in range(X_discrete.shape[1])])
