"""Cluster-stratified Train/Eval/Test fold construction.

Instances are summarised into short descriptor vectors, clustered with k-means
(k picked by silhouette), and each (cluster, class) cell is dealt across folds
so that every fold keeps the cluster make-up of the whole dataset.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .dataset_io import SignalDataset

logger = logging.getLogger(__name__)

TRAIN, EVAL, TEST = "Train", "Eval", "Test"
ROLES = (TRAIN, EVAL, TEST)
SCHEMA_VERSION = 1


class PartitionError(ValueError):
    pass


@dataclass
class ClusteringResult:
    k_clusters: int
    assignment: dict[int, int]
    silhouette: float


@dataclass
class FoldPlan:
    n_folds: int
    seed: int
    # fold -> instance_id -> role
    assignment: dict[int, dict[int, str]]

    def ids(self, fold: int, role: str) -> list[int]:
        return sorted(i for i, r in self.assignment[fold].items() if r == role)

    def to_dict(self) -> dict:
        rows = [
            {"instance_id": int(iid), "fold": int(fold), "role": role}
            for fold in range(self.n_folds)
            for iid, role in sorted(self.assignment[fold].items())
        ]
        return {
            "schema_version": SCHEMA_VERSION,
            "n_folds": self.n_folds,
            "seed": self.seed,
            "assignments": rows,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "FoldPlan":
        assignment: dict[int, dict[int, str]] = {f: {} for f in range(payload["n_folds"])}
        for row in payload["assignments"]:
            assignment[int(row["fold"])][int(row["instance_id"])] = row["role"]
        return cls(int(payload["n_folds"]), int(payload["seed"]), assignment)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def choose_fold_count(dataset: SignalDataset) -> int:
    smallest = min(dataset.class_counts().values())
    if smallest >= 25:
        return 5
    if smallest >= 9:
        return 3
    return 2


def summary_vector(samples: np.ndarray, n_bands: int = 8) -> np.ndarray:
    """16-d descriptor: 8 time-domain moments/rates plus 8 octave band energies."""
    x = np.asarray(samples, dtype=float)
    std = x.std()
    if std > 0:
        skew = float(stats.skew(x))
        kurt = float(stats.kurtosis(x))
    else:
        skew = kurt = 0.0
    signs = np.signbit(x)
    zcr = np.count_nonzero(signs[1:] != signs[:-1]) / (x.size - 1)
    power = np.abs(np.fft.rfft(x)) ** 2
    m = power.size
    edges = [0] + [max(1, m >> (n_bands - j)) for j in range(1, n_bands)] + [m]
    bands = [power[lo:hi].sum() if hi > lo else 0.0 for lo, hi in zip(edges[:-1], edges[1:])]
    return np.array(
        [x.mean(), std, np.sqrt(np.mean(x**2)), x.min(), x.max(), skew, kurt, zcr, *bands]
    )


def summary_vectors(dataset: SignalDataset) -> np.ndarray:
    """Z-scored descriptors, one row per instance in dataset order."""
    raw = np.vstack([summary_vector(inst.samples) for inst in dataset.instances])
    mu = raw.mean(axis=0)
    sd = raw.std(axis=0)
    sd[sd == 0] = 1.0
    return (raw - mu) / sd


def silhouette_score(vectors, assignment) -> float:
    """Mean silhouette with Euclidean distance; members of singleton clusters score 0."""
    X = np.asarray(vectors, dtype=float)
    labels = np.asarray(assignment)
    clusters = np.unique(labels)
    if clusters.size < 2:
        raise PartitionError("silhouette needs at least two clusters")
    # direct differences rather than the Gram trick: exact for duplicated points
    D = np.sqrt(((X[:, None, :] - X[None, :, :]) ** 2).sum(axis=-1))
    members = [labels == c for c in clusters]
    sizes = np.array([m.sum() for m in members])
    # mean distance of every point to every cluster, self included in the sums
    sums = np.column_stack([D[:, m].sum(axis=1) for m in members])
    own = np.searchsorted(clusters, labels)
    n = X.shape[0]
    scores = np.zeros(n)
    for i in range(n):
        c = own[i]
        if sizes[c] == 1:
            continue
        a = sums[i, c] / (sizes[c] - 1)
        b = min(sums[i, j] / sizes[j] for j in range(clusters.size) if j != c)
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


def _kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total == 0 else rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def kmeans(X: np.ndarray, k: int, seed: int, n_init: int = 10, max_iter: int = 100):
    """Lloyd's algorithm with ++ seeding. Returns (labels, objective).

    Restarts are ranked by objective, then by restart order.
    """
    best = None
    for restart in range(n_init):
        rng = np.random.default_rng([seed, k, restart])
        centers = _kmeans_pp_init(X, k, rng)
        labels = None
        for _ in range(max_iter):
            d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
            new = np.argmin(d2, axis=1)
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            for j in range(k):
                members = X[labels == j]
                if len(members):
                    centers[j] = members.mean(axis=0)
        objective = float(((X - centers[labels]) ** 2).sum())
        if best is None or objective < best[1] - 1e-12:
            best = (labels.copy(), objective)
    labels, objective = best
    # relabel so cluster ids are dense and ordered by first appearance
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = {labels[first[o]]: new for new, o in enumerate(order)}
    return np.array([remap[v] for v in labels]), objective


def cluster_instances(vectors, ids, k_range=None, seed: int = 0, sample_cap: int = 500) -> ClusteringResult:
    X = np.asarray(vectors, dtype=float)
    n = X.shape[0]
    if n < 3:
        raise PartitionError("clustering needs at least 3 instances")
    lo, hi = k_range if k_range is not None else (2, min(8, n - 1))
    lo, hi = max(2, lo), min(hi, n - 1)
    if lo > hi:
        raise PartitionError(f"empty k range for {n} instances")
    if np.all(X == X[0]):
        # identical points: any split is as good as another and scores 0
        labels = (np.arange(n) >= n // 2).astype(int)
        return ClusteringResult(2, {int(i): int(c) for i, c in zip(ids, labels)}, 0.0)
    sample = np.arange(n)
    if n > sample_cap:
        sample = np.sort(np.random.default_rng([seed, 7]).choice(n, sample_cap, replace=False))

    best = None
    for k in range(lo, hi + 1):
        labels, _ = kmeans(X, k, seed)
        if np.unique(labels).size < 2:
            score = 0.0
        elif np.unique(labels[sample]).size < 2:
            score = 0.0
        else:
            score = silhouette_score(X[sample], labels[sample])
        logger.debug("k=%d silhouette=%.4f", k, score)
        if best is None or score > best[2]:
            best = (k, labels, score)
    k, labels, score = best
    return ClusteringResult(
        k_clusters=int(np.unique(labels).size),
        assignment={int(i): int(c) for i, c in zip(ids, labels)},
        silhouette=float(score),
    )


def build_fold_plan(dataset: SignalDataset, clustering: ClusteringResult, n_folds: int, seed: int) -> FoldPlan:
    if n_folds < 2:
        raise PartitionError("n_folds must be at least 2")
    labels = {inst.instance_id: inst.label for inst in dataset.instances}
    for label, count in sorted(dataset.class_counts().items()):
        if count < max(n_folds, 3):
            raise PartitionError(
                f"class {label} has {count} instance(s); need at least {max(n_folds, 3)} "
                f"to appear in every role of {n_folds} folds"
            )

    cells: dict[tuple[int, int], list[int]] = {}
    for iid in sorted(labels):
        cells.setdefault((clustering.assignment[iid], labels[iid]), []).append(iid)
    rng = np.random.default_rng(seed)
    for key in sorted(cells):
        members = cells[key]
        cells[key] = [members[i] for i in rng.permutation(len(members))]

    test_fold: dict[int, int] = {}
    counter = 0
    for key in sorted(cells):
        for iid in cells[key]:
            test_fold[iid] = counter % n_folds
            counter += 1
    _ensure_test_coverage(test_fold, labels, cells, n_folds)

    assignment: dict[int, dict[int, str]] = {}
    for fold in range(n_folds):
        roles: dict[int, str] = {}
        for key in sorted(cells):
            rest = [iid for iid in cells[key] if test_fold[iid] != fold]
            for pos, iid in enumerate(rest):
                roles[iid] = EVAL if pos % 4 == 3 else TRAIN
            for iid in cells[key]:
                if test_fold[iid] == fold:
                    roles[iid] = TEST
        _ensure_role_presence(roles, labels, cells)
        assignment[fold] = roles
    return FoldPlan(n_folds, seed, assignment)


def _largest_cell(cells, label, eligible) -> list[int]:
    candidates = [(len([i for i in m if eligible(i)]), key) for key, m in cells.items() if key[1] == label]
    candidates = [c for c in candidates if c[0] > 0]
    if not candidates:
        return []
    _, key = max(candidates, key=lambda c: (c[0], -c[1][0]))
    return [i for i in cells[key] if eligible(i)]


def _ensure_test_coverage(test_fold, labels, cells, n_folds) -> None:
    for label in (0, 1):
        for fold in range(n_folds):
            if any(test_fold[i] == fold and labels[i] == label for i in test_fold):
                continue
            counts = np.bincount(
                [test_fold[i] for i in test_fold if labels[i] == label], minlength=n_folds
            )
            donor = int(np.argmax(counts))
            pool = _largest_cell(cells, label, lambda i: test_fold[i] == donor)
            test_fold[pool[-1]] = fold
            logger.debug("moved instance %d into Test of fold %d for class %d", pool[-1], fold, label)


def _ensure_role_presence(roles, labels, cells) -> None:
    for label in (0, 1):
        for needed, donor in ((EVAL, TRAIN), (TRAIN, EVAL)):
            if any(r == needed and labels[i] == label for i, r in roles.items()):
                continue
            pool = _largest_cell(cells, label, lambda i: roles[i] == donor)
            donors = sum(1 for i, r in roles.items() if r == donor and labels[i] == label)
            if donors < 2:
                raise PartitionError(f"class {label} cannot populate both Train and Eval")
            roles[pool[-1]] = needed


def plan_folds(dataset: SignalDataset, seed: int, n_folds: int | None = None) -> tuple[FoldPlan, ClusteringResult]:
    """Fold count, clustering and dealing in one call."""
    if n_folds is None:
        n_folds = choose_fold_count(dataset)
    vectors = summary_vectors(dataset)
    clustering = cluster_instances(vectors, dataset.ids, seed=seed)
    logger.info(
        "clustering: k=%d silhouette=%.4f, %d folds",
        clustering.k_clusters, clustering.silhouette, n_folds,
    )
    return build_fold_plan(dataset, clustering, n_folds, seed), clustering
