"""Feature recommendation: filter ranking, wrapper refinement, exhaustive subset
search and hierarchical level escalation.

Per fold and level the pipeline is

1. drop Train-constant columns, keep the top-P columns by univariate MI;
2. rank with mRMR and MRMS (top 2k each) and take the union;
3. grow a k-feature list greedily, scoring each candidate set with the
   wrapper (best Eval metric over a forest, a linear SVM and an RBF SVM);
4. tune each classifier once on that list, then score all 2^k - 1 subsets.

Subsets that do well on their own fold are then scored on every fold, and
Fe1 (best single fold) and Fe2 (best worst fold) are read off that table.
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import models
from .dataset_io import SignalDataset
from .features import FeatureConfig, FeatureFactory, FeatureMatrix, MappingTable, record_matches
from .information import AUTO, auto_bins, discretize, mutual_information
from .partitioning import EVAL, TEST, TRAIN, FoldPlan

logger = logging.getLogger(__name__)

K_HARD_CAP = 20
SCHEMA_VERSION = 1


class SelectionError(ValueError):
    pass


@dataclass
class SelectionConfig:
    k: int = 10
    c: int = 2**20
    tau: float = 0.98
    metric: str = "accuracy"
    prefilter_P: int = 2000
    bins_B: int | str = AUTO
    expert_weights: list[dict] = field(default_factory=list)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    tuning: models.TuningBudget = field(default_factory=models.TuningBudget)
    cross_fold_candidates: int = 32
    max_level: int = 3
    threads: int = 1

    def __post_init__(self):
        if self.k < 2:
            raise SelectionError("k must be at least 2")
        if self.k > K_HARD_CAP:
            logger.warning("k=%d capped at %d", self.k, K_HARD_CAP)
            self.k = K_HARD_CAP
        if not 0 < self.tau <= 1:
            raise SelectionError("tau must lie in (0, 1]")
        if self.metric not in models.METRICS:
            raise SelectionError(f"unknown metric {self.metric!r}")
        if self.c < 1:
            raise SelectionError("c must be positive")

    @property
    def exhaustive(self) -> bool:
        return 2**self.k - 1 <= self.c

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "c": self.c,
            "tau": self.tau,
            "metric": self.metric,
            "prefilter_P": self.prefilter_P,
            "bins_B": self.bins_B,
            "expert_weights": self.expert_weights,
            "features": self.features.to_dict(),
            "tuning": {
                "wall_clock_s": self.tuning.wall_clock_s,
                "max_evals": self.tuning.max_evals,
                "grid": self.tuning.grid,
            },
            "cross_fold_candidates": self.cross_fold_candidates,
            "max_level": self.max_level,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SelectionConfig":
        payload = dict(payload)
        features = FeatureConfig.from_dict(payload.pop("features", {}) or {})
        tuning = payload.pop("tuning", None) or {}
        budget = models.TuningBudget(tuning.get("wall_clock_s"), tuning.get("max_evals"), tuning.get("grid") or {})
        payload.pop("threads", None)
        return cls(features=features, tuning=budget, **payload)


# --------------------------------------------------------------------------
# filter rankers


def _greedy_pick(scores: np.ndarray, available: np.ndarray) -> int:
    masked = np.where(available, scores, -np.inf)
    return int(np.argmax(masked))


def mrmr_rank(X_discrete, y, m: int, relevance_weights=None, trace: list | None = None) -> list[int]:
    """Greedy max-relevance min-redundancy order of column indices.

    Criterion: w_f I(f;y) - mean_{s in S} I(f;s); ties go to the lower index.
    ``trace`` collects the winning criterion value of each step.
    """
    X = np.asarray(X_discrete)
    n_feat = X.shape[1]
    m = min(m, n_feat)
    w = np.ones(n_feat) if relevance_weights is None else np.asarray(relevance_weights, dtype=float)
    relevance = np.array([mutual_information(X[:, j], y) for j in range(n_feat)])
    weighted = w * relevance
    redundancy = np.zeros(n_feat)
    available = np.ones(n_feat, dtype=bool)
    order: list[int] = []
    for step in range(m):
        crit = weighted if step == 0 else weighted - redundancy / step
        best = _greedy_pick(crit, available)
        if trace is not None:
            trace.append(float(crit[best]))
        order.append(best)
        available[best] = False
        for j in np.flatnonzero(available):
            redundancy[j] += mutual_information(X[:, j], X[:, best])
    return order


def _combine_codes(*columns: np.ndarray) -> np.ndarray:
    if len(columns) == 1:
        return np.asarray(columns[0])
    stacked = np.column_stack(columns)
    _, inverse = np.unique(stacked, axis=0, return_inverse=True)
    return inverse.ravel()


def dependency(columns: Sequence[np.ndarray], y) -> float:
    """Rough-set dependency: share of instances whose value tuple has one class."""
    y = np.asarray(y)
    n = y.size
    if n == 0:
        return 0.0
    groups = _combine_codes(*columns)
    _, g = np.unique(groups, return_inverse=True)
    g = g.ravel()
    classes = np.unique(y, return_inverse=True)[1].ravel()
    n_groups = int(g.max()) + 1
    table = np.zeros((n_groups, int(classes.max()) + 1), dtype=np.int64)
    np.add.at(table, (g, classes), 1)
    pure = (table > 0).sum(axis=1) == 1
    return float(table[pure].sum() / n)


def mrms_rank(X_discrete, y, m: int, relevance_weights=None, trace: list | None = None) -> list[int]:
    """Greedy max-relevance max-significance order using rough-set dependency.

    Criterion: w_f gamma_f + mean_{s in S} (gamma_{f,s} - gamma_s).
    """
    X = np.asarray(X_discrete)
    n_feat = X.shape[1]
    m = min(m, n_feat)
    w = np.ones(n_feat) if relevance_weights is None else np.asarray(relevance_weights, dtype=float)
    gamma = np.array([dependency([X[:, j]], y) for j in range(n_feat)])
    weighted = w * gamma
    significance = np.zeros(n_feat)
    available = np.ones(n_feat, dtype=bool)
    order: list[int] = []
    for step in range(m):
        crit = weighted if step == 0 else weighted + significance / step
        best = _greedy_pick(crit, available)
        if trace is not None:
            trace.append(float(crit[best]))
        order.append(best)
        available[best] = False
        for j in np.flatnonzero(available):
            significance[j] += dependency([X[:, j], X[:, best]], y) - gamma[best]
    return order


# --------------------------------------------------------------------------
# wrapper


@dataclass
class FoldData:
    fold: int
    X_train: np.ndarray
    y_train: np.ndarray
    X_eval: np.ndarray
    y_eval: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    column_of: dict[int, int]


class Wrapper:
    """Memoised classifier-in-the-loop scoring for one fold.

    Scores are keyed by (spec set, feature set); the score of a set is the
    best Eval metric among the configured classifiers.
    """

    def __init__(self, data: FoldData, metric: str, seed: int = 0):
        self.data = data
        self.metric = metric
        self.seed = seed
        self.memo: dict[tuple, dict[str, float]] = {}
        self.evaluations = 0

    def _columns(self, subset) -> list[int]:
        return [self.data.column_of[f] for f in sorted(subset)]

    def per_kind(self, subset, specs: dict[str, models.ClassifierSpec], tag: str) -> dict[str, float]:
        key = (tag, tuple(sorted(int(f) for f in subset)))
        if key not in self.memo:
            cols = self._columns(subset)
            scores = {}
            for kind, spec in specs.items():
                model = models.train(spec, self.data.X_train[:, cols], self.data.y_train)
                scores[kind] = models.evaluate(model, self.data.X_eval[:, cols], self.data.y_eval, self.metric).value
            self.memo[key] = scores
            self.evaluations += 1
        return self.memo[key]

    def score(self, subset, specs, tag) -> float:
        if not subset:
            raise SelectionError("wrapper needs a non-empty feature set")
        return max(self.per_kind(subset, specs, tag).values())


def wrapper_score(subset, fold_data: FoldData, metric: str = "accuracy", specs=None, wrapper: Wrapper | None = None) -> float:
    wrapper = wrapper or Wrapper(fold_data, metric)
    specs = specs or {kind: models.default_spec(kind) for kind in models.KINDS}
    return wrapper.score(subset, specs, "adhoc")


def _subset_key(ids) -> tuple:
    return tuple(sorted(int(i) for i in ids))


def exhaustive_search(ranked: Sequence[int], score_fn: Callable[[tuple], float], budget_c: int):
    """Score every non-empty subset of ``ranked`` (or its prefixes if 2^k-1 > c).

    Returns (scores by sorted-id tuple, used_fallback).
    """
    k = len(ranked)
    scores: dict[tuple, float] = {}
    if 2**k - 1 <= budget_c:
        for size in range(1, k + 1):
            for combo in itertools.combinations(ranked, size):
                key = _subset_key(combo)
                scores[key] = score_fn(key)
        return scores, False
    logger.info("2^%d - 1 subsets exceed budget c=%d; scoring greedy prefixes only", k, budget_c)
    for size in range(1, k + 1):
        key = _subset_key(ranked[:size])
        scores[key] = score_fn(key)
    return scores, True


def best_subset(scores: dict[tuple, float]) -> tuple:
    """Highest score, then fewer features, then lexicographically smaller ids."""
    return min(scores, key=lambda s: (-scores[s], len(s), s))


@dataclass
class FoldLevelResult:
    fold: int
    level: int
    dropped_constant: int
    prefiltered: list[int]
    mrmr_order: list[int]
    mrms_order: list[int]
    union: list[int]
    ranked: list[int]
    greedy_scores: list[float]
    tuned_specs: dict[str, models.ClassifierSpec]
    subset_scores: dict[tuple, float]
    used_fallback: bool
    mrmr_trace: list[float] = field(default_factory=list)
    mrms_trace: list[float] = field(default_factory=list)

    @property
    def best_greedy_set(self) -> tuple:
        i = int(np.argmax(self.greedy_scores))
        return _subset_key(self.ranked[: i + 1])

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "level": self.level,
            "dropped_constant": self.dropped_constant,
            "prefiltered_count": len(self.prefiltered),
            "mrmr_order": self.mrmr_order,
            "mrms_order": self.mrms_order,
            "union": self.union,
            "wrapper_ranked": self.ranked,
            "greedy_scores": self.greedy_scores,
            "tuned_specs": {k: v.to_dict() for k, v in self.tuned_specs.items()},
            "subsets_scored": len(self.subset_scores),
            "used_fallback": self.used_fallback,
        }


def relevance_weights(table: MappingTable, feature_ids: Sequence[int], expert_weights: Sequence[dict]) -> np.ndarray:
    w = np.ones(len(feature_ids))
    for entry in expert_weights:
        for j, fid in enumerate(feature_ids):
            if record_matches(entry["selector"], table.record(fid)):
                w[j] *= float(entry["weight"])
    return w


def select_for_level(pool: FeatureMatrix, table: MappingTable, level: int, data: FoldData,
                     config: SelectionConfig, wrapper: Wrapper, seed: int = 0) -> FoldLevelResult:
    k = config.k
    ids = [int(f) for f in pool.feature_ids]
    X_train = data.X_train
    constant = np.all(X_train == X_train[:1], axis=0)
    kept = [f for f in ids if not constant[data.column_of[f]]]
    if constant.any():
        logger.debug("fold %d level %d: dropped %d Train-constant column(s)", data.fold, level, int(constant.sum()))
    if not kept:
        raise SelectionError(f"fold {data.fold}: every feature is constant on Train")

    n_bins = config.bins_B if config.bins_B != AUTO else auto_bins(X_train.shape[0])
    codes = {f: discretize(X_train[:, data.column_of[f]], n_bins) for f in kept}
    mi = {f: mutual_information(codes[f], data.y_train) for f in kept}
    prefiltered = sorted(sorted(kept, key=lambda f: (-mi[f], f))[: config.prefilter_P])

    Xd = np.column_stack([codes[f] for f in prefiltered])
    weights = relevance_weights(table, prefiltered, config.expert_weights)
    mrmr_trace: list[float] = []
    mrms_trace: list[float] = []
    mrmr_order = [prefiltered[j] for j in mrmr_rank(Xd, data.y_train, 2 * k, weights, mrmr_trace)]
    mrms_order = [prefiltered[j] for j in mrms_rank(Xd, data.y_train, 2 * k, weights, mrms_trace)]
    union = sorted(set(mrmr_order) | set(mrms_order))

    default_specs = {kind: models.default_spec(kind, seed) for kind in models.KINDS}
    ranked: list[int] = []
    greedy_scores: list[float] = []
    remaining = list(union)
    while remaining and len(ranked) < k:
        best = None
        for f in remaining:
            s = wrapper.score(ranked + [f], default_specs, "default")
            if best is None or s > best[1]:
                best = (f, s)
        ranked.append(best[0])
        greedy_scores.append(best[1])
        remaining.remove(best[0])

    cols = [data.column_of[f] for f in sorted(ranked)]
    tuned = {}
    for kind in models.KINDS:
        spec, _ = models.tune(kind, data.X_train[:, cols], data.y_train, data.X_eval[:, cols], data.y_eval,
                              config.tuning, config.metric, seed)
        tuned[kind] = spec
    tag = tuned_tag(level)
    scores, fallback = exhaustive_search(ranked, lambda s: wrapper.score(s, tuned, tag), config.c)
    return FoldLevelResult(
        fold=data.fold, level=level, dropped_constant=int(constant.sum()), prefiltered=prefiltered,
        mrmr_order=mrmr_order, mrms_order=mrms_order, union=union, ranked=ranked,
        greedy_scores=greedy_scores, tuned_specs=tuned, subset_scores=scores, used_fallback=fallback,
        mrmr_trace=mrmr_trace, mrms_trace=mrms_trace,
    )


def tuned_tag(level: int) -> str:
    return f"tuned-L{level}"


# --------------------------------------------------------------------------
# recommendation


@dataclass
class SubsetOutcome:
    feature_ids: list[int]
    eval_scores: list[float]  # per fold
    test_reports: list[models.MetricReport] = field(default_factory=list)
    test_classifiers: list[dict] = field(default_factory=list)

    @property
    def best_fold_metric(self) -> float:
        return max(self.eval_scores)

    @property
    def min_fold_metric(self) -> float:
        return min(self.eval_scores)

    @property
    def mean_metric(self) -> float:
        return float(np.mean(self.eval_scores))

    def to_dict(self) -> dict:
        return {
            "feature_ids": self.feature_ids,
            "cardinality": len(self.feature_ids),
            "eval_scores": self.eval_scores,
            "best_fold_metric": self.best_fold_metric,
            "min_fold_metric": self.min_fold_metric,
            "mean_metric": self.mean_metric,
            "test_reports": [r.to_dict() for r in self.test_reports],
            "test_classifiers": self.test_classifiers,
        }


@dataclass
class LevelOutcome:
    level: int
    folds: list[FoldLevelResult]
    candidates: dict[tuple, list[float]]
    fe1: SubsetOutcome
    fe2: SubsetOutcome

    @property
    def quality(self) -> float:
        return self.fe2.min_fold_metric


@dataclass
class RecommendationResult:
    fe1: SubsetOutcome
    fe2: SubsetOutcome
    level_reached: int
    levels: list[LevelOutcome]
    config: SelectionConfig
    seed: int
    fold_wavelets: dict[int, str | None]
    counters: dict[str, int]
    tables: dict[int, MappingTable]

    def table_for_fold(self, fold: int) -> MappingTable:
        return self.tables[fold]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "level_reached": self.level_reached,
            "metric": self.config.metric,
            "fe1": self.fe1.to_dict(),
            "fe2": self.fe2.to_dict(),
            "levels": [
                {
                    "level": lv.level,
                    "quality": lv.quality,
                    "fe1_best_fold_metric": lv.fe1.best_fold_metric,
                    "fe2_min_fold_metric": lv.fe2.min_fold_metric,
                    "candidates_cross_scored": len(lv.candidates),
                    "stages": [f.to_dict() for f in lv.folds],
                }
                for lv in self.levels
            ],
            "fold_wavelets": {str(k): v for k, v in sorted(self.fold_wavelets.items())},
            "feature_counters": dict(sorted(self.counters.items())),
            "config": self.config.to_dict(),
        }


def fold_data(pool: FeatureMatrix, plan: FoldPlan, fold: int, labels: dict[int, int]) -> FoldData:
    def take(role):
        ids = plan.ids(fold, role)
        rows = pool.row_index(ids)
        return pool.values[rows], np.array([labels[i] for i in ids], dtype=int)

    X_tr, y_tr = take(TRAIN)
    X_ev, y_ev = take(EVAL)
    X_te, y_te = take(TEST)
    column_of = {int(f): j for j, f in enumerate(pool.feature_ids)}
    return FoldData(fold, X_tr, y_tr, X_ev, y_ev, X_te, y_te, column_of)


def _own_fold_top(scores: dict[tuple, float], m: int) -> list[tuple]:
    return sorted(scores, key=lambda s: (-scores[s], len(s), s))[:m]


def pick_fe1(candidates: dict[tuple, list[float]]) -> tuple:
    return min(candidates, key=lambda s: (-max(candidates[s]), -float(np.mean(candidates[s])), len(s), s))


def pick_fe2(candidates: dict[tuple, list[float]]) -> tuple:
    return min(candidates, key=lambda s: (-min(candidates[s]), -float(np.mean(candidates[s])), len(s), s))


def _run_level(level, factory, plan, labels, config, wrappers, seed):
    pools = {}
    for fold in range(plan.n_folds):
        pools[fold] = factory.build(plan, fold, level)
    datas = {f: fold_data(pools[f][0], plan, f, labels) for f in pools}
    for f, d in datas.items():
        w = wrappers.get(f)
        if w is None or w.data.X_train.shape[1] != d.X_train.shape[1]:
            # pool grew: reuse memo entries since feature ids are stable across levels
            memo = w.memo if w is not None else {}
            wrappers[f] = Wrapper(d, config.metric, seed)
            wrappers[f].memo = memo

    def run_fold(fold):
        matrix, table = pools[fold]
        return select_for_level(matrix, table, level, datas[fold], config, wrappers[fold], seed)

    with ThreadPoolExecutor(max_workers=max(1, config.threads)) as pool:
        fold_results = list(pool.map(run_fold, range(plan.n_folds)))

    candidate_keys: list[tuple] = []
    for res in fold_results:
        for key in _own_fold_top(res.subset_scores, config.cross_fold_candidates):
            if key not in candidate_keys:
                candidate_keys.append(key)
    candidate_keys.sort()

    def cross_score(fold):
        res = fold_results[fold]
        return [wrappers[fold].score(key, res.tuned_specs, tuned_tag(level)) for key in candidate_keys]

    with ThreadPoolExecutor(max_workers=max(1, config.threads)) as pool:
        per_fold = list(pool.map(cross_score, range(plan.n_folds)))
    candidates = {key: [per_fold[f][i] for f in range(plan.n_folds)] for i, key in enumerate(candidate_keys)}
    fe1 = pick_fe1(candidates)
    fe2 = pick_fe2(candidates)
    outcome = LevelOutcome(
        level, fold_results, candidates,
        SubsetOutcome(list(fe1), candidates[fe1]),
        SubsetOutcome(list(fe2), candidates[fe2]),
    )
    return outcome, {f: pools[f][1] for f in pools}, datas


def _test_reports(outcome: SubsetOutcome, level_outcome: LevelOutcome, datas, wrappers, metric, level):
    for res in level_outcome.folds:
        data = datas[res.fold]
        per_kind = wrappers[res.fold].per_kind(tuple(outcome.feature_ids), res.tuned_specs, tuned_tag(level))
        kind = max(models.KINDS, key=lambda k: (per_kind[k], -models.KINDS.index(k)))
        spec = res.tuned_specs[kind]
        cols = [data.column_of[f] for f in sorted(outcome.feature_ids)]
        X = np.vstack([data.X_train[:, cols], data.X_eval[:, cols]])
        y = np.concatenate([data.y_train, data.y_eval])
        model = models.train(spec, X, y)
        outcome.test_reports.append(models.evaluate(model, data.X_test[:, cols], data.y_test, metric))
        outcome.test_classifiers.append(spec.to_dict())


def recommend(dataset: SignalDataset, fold_plan: FoldPlan, config: SelectionConfig | None = None,
              seed: int = 0, factory: FeatureFactory | None = None) -> RecommendationResult:
    config = config or SelectionConfig()
    factory = factory or FeatureFactory(dataset, config.features)
    labels = {inst.instance_id: inst.label for inst in dataset.instances}
    wrappers: dict[int, Wrapper] = {}
    levels: list[LevelOutcome] = []
    for level in range(1, config.max_level + 1):
        outcome, tables, datas = _run_level(level, factory, fold_plan, labels, config, wrappers, seed)
        levels.append(outcome)
        logger.info(
            "level %d: Fe1 best fold %.4f, Fe2 worst fold %.4f (tau %.4f)",
            level, outcome.fe1.best_fold_metric, outcome.fe2.min_fold_metric, config.tau,
        )
        if outcome.quality >= config.tau:
            break
        if level < config.max_level:
            logger.info("level %d below tau; escalating", level)

    final = levels[-1]
    for subset in (final.fe1, final.fe2):
        _test_reports(subset, final, datas, wrappers, config.metric, final.level)
    fold_wavelets = {f: factory.fold_wavelet(fold_plan, f) for f in range(fold_plan.n_folds)}
    counters = {key: int(factory.counters.get(key, 0)) for key in ("level1", "level2", "level3")}
    return RecommendationResult(
        fe1=final.fe1, fe2=final.fe2, level_reached=final.level, levels=levels, config=config,
        seed=seed, fold_wavelets=fold_wavelets, counters=counters, tables=tables,
    )
