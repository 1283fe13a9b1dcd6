"""Classifiers used in the wrapper loop and for final Test-set modelling.

Random forests (bagged CART, Gini, sqrt(d) features per split) and SVMs
(libsvm's SMO solver, linear and RBF kernels) come from scikit-learn; this
module fixes their configuration, standardisation and metric conventions.
Class 0 is the positive class throughout.
"""

from __future__ import annotations

import logging
import pickle
import time
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path

import numpy as np
from sklearn.ensemble import RandomForestClassifier
from sklearn.svm import SVC

logger = logging.getLogger(__name__)

KINDS = ("random_forest", "svm_linear", "svm_rbf")
METRICS = ("accuracy", "sensitivity", "specificity")
POSITIVE = 0
MODEL_FORMAT_VERSION = 1

DEFAULT_GRIDS = {
    "random_forest": {"n_trees": [50, 200], "max_depth": [8, None]},
    "svm_linear": {"C": [0.1, 1.0, 10.0]},
    "svm_rbf": {"C": [0.1, 1.0, 10.0], "gamma": [0.01, 0.1, 1.0]},
}


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ClassifierSpec:
    kind: str
    C: float = 1.0
    gamma: float | None = None
    n_trees: int = 50
    max_depth: int | None = 8
    min_leaf: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown classifier kind {self.kind!r}")
        if self.C <= 0 or (self.gamma is not None and self.gamma <= 0):
            raise ModelError("C and gamma must be positive")
        if self.n_trees < 1 or self.min_leaf < 1 or (self.max_depth is not None and self.max_depth < 1):
            raise ModelError("forest hyperparameters must be positive")
        if self.kind == "svm_rbf" and self.gamma is None:
            raise ModelError("svm_rbf needs gamma")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "seed": self.seed}
        if self.kind == "random_forest":
            d.update(n_trees=self.n_trees, max_depth=self.max_depth, min_leaf=self.min_leaf)
        else:
            d["C"] = self.C
            if self.kind == "svm_rbf":
                d["gamma"] = self.gamma
        return d

    @classmethod
    def from_dict(cls, payload: dict) -> "ClassifierSpec":
        return cls(**payload)


@dataclass
class TuningBudget:
    """Wall-clock cap (``None`` = unbounded) and an optional evaluation cap.

    The first grid point is always evaluated.
    """

    wall_clock_s: float | None = None
    max_evals: int | None = None
    grid: dict = field(default_factory=dict)

    def grid_for(self, kind: str) -> dict:
        return self.grid.get(kind, DEFAULT_GRIDS[kind])


@dataclass
class MetricReport:
    metric: str
    value: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return asdict(self)


class Model:
    """A fitted classifier plus the standardisation fitted on its training rows."""

    def __init__(self, spec: ClassifierSpec, estimator, mean: np.ndarray, scale: np.ndarray, n_features: int):
        self.spec = spec
        self.estimator = estimator
        self.mean = mean
        self.scale = scale
        self.n_features = n_features

    def _prepare(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ModelError(
                f"column mismatch: model trained on {self.n_features} features, got {X.shape[-1]}"
            )
        return (X - self.mean) / self.scale

    def predict(self, X) -> np.ndarray:
        return self.estimator.predict(self._prepare(X)).astype(int)

    def dual_coefficients(self) -> np.ndarray:
        """alpha_i * y_i (y in {-1, +1}) for the support vectors of an SVM."""
        if self.spec.kind == "random_forest":
            raise ModelError("forests have no dual coefficients")
        return self.estimator.dual_coef_.ravel().copy()


def _build_estimator(spec: ClassifierSpec, n_samples: int):
    if spec.kind == "random_forest":
        return RandomForestClassifier(
            n_estimators=spec.n_trees,
            criterion="gini",
            max_depth=spec.max_depth,
            min_samples_leaf=spec.min_leaf,
            max_features="sqrt",
            bootstrap=True,
            random_state=spec.seed,
            n_jobs=1,
        )
    kernel = "linear" if spec.kind == "svm_linear" else "rbf"
    return SVC(
        kernel=kernel,
        C=spec.C,
        gamma=spec.gamma if spec.gamma is not None else "scale",
        tol=1e-3,
        max_iter=10_000 * max(n_samples, 1),
        random_state=spec.seed,
    )


def train(spec: ClassifierSpec, X, y, standardize: bool | None = None) -> Model:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ModelError("X must be 2-D with one row per label")
    if not np.all(np.isfinite(X)):
        raise ModelError("non-finite training values")
    if np.unique(y).size < 2:
        raise ModelError("training labels contain a single class")
    if standardize is None:
        standardize = spec.kind != "random_forest"
    if standardize:
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
    else:
        mean = np.zeros(X.shape[1])
        scale = np.ones(X.shape[1])
    est = _build_estimator(spec, X.shape[0])
    est.fit((X - mean) / scale, y)
    return Model(spec, est, mean, scale, X.shape[1])


def confusion(y_true, y_pred) -> tuple[int, int, int, int]:
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    pos_t = y_true == POSITIVE
    pos_p = y_pred == POSITIVE
    tp = int(np.sum(pos_t & pos_p))
    fn = int(np.sum(pos_t & ~pos_p))
    fp = int(np.sum(~pos_t & pos_p))
    tn = int(np.sum(~pos_t & ~pos_p))
    return tp, fp, tn, fn


def metric_from_counts(metric: str, tp: int, fp: int, tn: int, fn: int) -> float:
    if metric == "accuracy":
        n = tp + fp + tn + fn
        return (tp + tn) / n if n else 0.0
    if metric == "sensitivity":
        return tp / (tp + fn) if tp + fn else 0.0
    if metric == "specificity":
        return tn / (tn + fp) if tn + fp else 0.0
    raise ModelError(f"unknown metric {metric!r}")


def report(y_true, y_pred, metric: str = "accuracy") -> MetricReport:
    tp, fp, tn, fn = confusion(y_true, y_pred)
    return MetricReport(metric, metric_from_counts(metric, tp, fp, tn, fn), tp, fp, tn, fn)


def evaluate(model: Model, X, y, metric: str = "accuracy") -> MetricReport:
    return report(y, model.predict(X), metric)


def grid_specs(kind: str, grid: dict, seed: int = 0) -> list[ClassifierSpec]:
    names = sorted(grid)
    return [ClassifierSpec(kind=kind, seed=seed, **dict(zip(names, values)))
            for values in product(*(grid[n] for n in names))]


def default_spec(kind: str, seed: int = 0) -> ClassifierSpec:
    """Untuned spec used while ranking features in the wrapper loop."""
    if kind == "random_forest":
        return ClassifierSpec(kind, n_trees=50, max_depth=8, seed=seed)
    if kind == "svm_linear":
        return ClassifierSpec(kind, C=1.0, seed=seed)
    return ClassifierSpec(kind, C=1.0, gamma=0.1, seed=seed)


def tune(kind: str, X_train, y_train, X_eval, y_eval, budget: TuningBudget | None = None,
         metric: str = "accuracy", seed: int = 0) -> tuple[ClassifierSpec, MetricReport]:
    """Evaluate grid points in order until the budget runs out; best on Eval wins."""
    budget = budget or TuningBudget()
    specs = grid_specs(kind, budget.grid_for(kind), seed)
    start = time.perf_counter()
    best = None
    for i, spec in enumerate(specs):
        if i > 0:
            if budget.max_evals is not None and i >= budget.max_evals:
                break
            if budget.wall_clock_s is not None and time.perf_counter() - start >= budget.wall_clock_s:
                logger.debug("tuning %s stopped by wall clock after %d point(s)", kind, i)
                break
        rep = evaluate(train(spec, X_train, y_train), X_eval, y_eval, metric)
        if best is None or rep.value > best[1].value:
            best = (spec, rep)
    return best


@dataclass
class PCAResult:
    best: MetricReport
    rows: list[dict]
    explained_variance: np.ndarray


def principal_directions(X_train) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mean, eigenvalues descending, eigenvectors as columns) of the training covariance."""
    X = np.asarray(X_train, dtype=float)
    mean = X.mean(axis=0)
    cov = np.cov(X - mean, rowvar=False, bias=True)
    cov = np.atleast_2d(cov)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    return mean, np.clip(vals[order], 0.0, None), vecs[:, order]


def numerical_rank(eigenvalues: np.ndarray) -> int:
    if eigenvalues.size == 0 or eigenvalues[0] <= 0:
        return 0
    return int(np.sum(eigenvalues > eigenvalues[0] * 1e-10))


def pca_baseline(X_train, y_train, X_eval, y_eval, n_components_list, metric: str = "accuracy",
                 budget: TuningBudget | None = None, seed: int = 0) -> PCAResult:
    """Linear and RBF SVMs on the leading principal components of standardised data."""
    X_train = np.asarray(X_train, dtype=float)
    X_eval = np.asarray(X_eval, dtype=float)
    mu = X_train.mean(axis=0)
    sd = X_train.std(axis=0)
    sd[sd == 0] = 1.0
    Z_train = (X_train - mu) / sd
    Z_eval = (X_eval - mu) / sd
    center, eigvals, eigvecs = principal_directions(Z_train)
    rank = numerical_rank(eigvals)
    rows = []
    best = None
    for requested in n_components_list:
        if requested > min(X_train.shape):
            raise ModelError(f"{requested} components exceed min(n, d) = {min(X_train.shape)}")
        n_comp = min(requested, max(rank, 1))
        if n_comp < requested:
            logger.warning("covariance rank %d: %d components requested, using %d", rank, requested, n_comp)
        W = eigvecs[:, :n_comp]
        P_train = (Z_train - center) @ W
        P_eval = (Z_eval - center) @ W
        for kind in ("svm_linear", "svm_rbf"):
            specs = grid_specs(kind, (budget or TuningBudget()).grid_for(kind), seed)
            best_kind = None
            for spec in specs:
                model = train(spec, P_train, y_train, standardize=False)
                rep = evaluate(model, P_eval, y_eval, metric)
                if best_kind is None or rep.value > best_kind[1].value:
                    best_kind = (spec, rep)
            spec, rep = best_kind
            rows.append({"n_components": int(requested), "used_components": int(n_comp),
                         "classifier": spec.to_dict(), "report": rep.to_dict()})
            if best is None or rep.value > best.value:
                best = rep
    return PCAResult(best, rows, eigvals)


def save_model(model: Model, path) -> None:
    with open(path, "wb") as fh:
        pickle.dump({"format_version": MODEL_FORMAT_VERSION, "model": model}, fh)


def load_model(path) -> Model:
    with open(Path(path), "rb") as fh:
        payload = pickle.load(fh)
    if payload.get("format_version") != MODEL_FORMAT_VERSION:
        raise ModelError("unsupported model file version")
    return payload["model"]
