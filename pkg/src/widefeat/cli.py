"""Command-line entry point: ``widefeat synth|recommend|interpret|baseline-pca``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import models
from .dataset_io import DatasetError, SynthesisSpec, WindowPlan, load_dataset, synthesize_dataset, write_dataset
from .features import FeatureConfig, FeatureFactory, read_mapping_tables, replay_feature, write_mapping_tables
from .interpretation import (
    DEFAULT_MAX_N,
    DEFAULT_TOLERANCE,
    ExpertWeights,
    InterpretationError,
    apply_expert_weights,
    build_report,
    load_fundamentals,
    write_report,
)
from .partitioning import EVAL, TRAIN, FoldPlan, PartitionError, plan_folds
from .selection import SelectionConfig, SelectionError, recommend

logger = logging.getLogger("widefeat")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4


class StageError(Exception):
    def __init__(self, stage: str, message: str, code: int):
        super().__init__(message)
        self.stage = stage
        self.code = code


@dataclass
class RunConfig:
    dataset: str
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    dataset_format: str | None = None
    fundamentals: str | None = None
    weights: str | None = None
    seed: int = 0
    out: str = "run"
    threads: int = 1
    n_folds: int | None = None
    pca_components: list[int] = field(default_factory=lambda: [1, 2, 4])

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "dataset": self.dataset,
            "dataset_format": self.dataset_format,
            "fundamentals": self.fundamentals,
            "weights": self.weights,
            "seed": self.seed,
            "out": self.out,
            "threads": self.threads,
            "n_folds": self.n_folds,
            "pca_components": self.pca_components,
            "selection": self.selection.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: dict, base_dir: Path | None = None) -> "RunConfig":
        payload = dict(payload)
        payload.pop("schema_version", None)
        if "dataset" not in payload:
            raise ValueError("run config needs a 'dataset' path")
        selection = dict(payload.pop("selection", {}) or {})
        if "window" in payload:
            features = dict(selection.get("features", {}) or {})
            features["window"] = payload.pop("window")
            selection["features"] = features
        base_dir = base_dir or Path.cwd()
        for key in ("dataset", "fundamentals", "weights"):
            if payload.get(key) is not None:
                payload[key] = str((base_dir / payload[key]).resolve())
        unknown = set(payload) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown run config field(s): {', '.join(sorted(unknown))}")
        return cls(selection=SelectionConfig.from_dict(selection), **payload)


def _config_stage(fn, *args):
    try:
        return fn(*args)
    except (ValueError, TypeError, KeyError, json.JSONDecodeError) as exc:
        raise StageError("config", str(exc), EXIT_CONFIG) from None


def load_run_config(path, args=None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise StageError("config", f"config file {path} not found", EXIT_CONFIG)
    payload = _config_stage(lambda: json.loads(path.read_text()))
    cfg = _config_stage(RunConfig.from_dict, payload, path.parent)
    if args is not None:
        cfg = _config_stage(apply_overrides, cfg, args)
    cfg.selection.threads = cfg.threads
    for key in ("dataset", "fundamentals", "weights"):
        value = getattr(cfg, key)
        if value is not None and not Path(value).exists():
            raise StageError("config", f"{key} path {value} does not exist", EXIT_CONFIG)
    return cfg


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    sel = cfg.selection
    sel_updates = {}
    if getattr(args, "tau", None) is not None:
        sel_updates["tau"] = args.tau
    if getattr(args, "k", None) is not None:
        sel_updates["k"] = args.k
    if getattr(args, "metric", None) is not None:
        sel_updates["metric"] = args.metric
    if getattr(args, "window_size_s", None) is not None:
        window = replace(sel.features.window, window_size_s=args.window_size_s)
        sel_updates["features"] = replace(sel.features, window=window)
    if sel_updates:
        sel = SelectionConfig.from_dict({**sel.to_dict(), **{k: v for k, v in sel_updates.items() if k != "features"},
                                         "features": sel_updates.get("features", sel.features).to_dict()})
    updates = {"selection": sel}
    for name in ("seed", "out", "threads"):
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    return replace(cfg, **updates)


# --------------------------------------------------------------------------
# commands


def _dump(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def _setup_log(out: Path) -> logging.Handler:
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("widefeat").addHandler(handler)
    logging.getLogger("widefeat").setLevel(logging.INFO)
    return handler


def _load_data(cfg: RunConfig):
    try:
        return load_dataset(cfg.dataset, cfg.dataset_format)
    except (DatasetError, OSError, ValueError) as exc:
        raise StageError("dataset_io", str(exc), EXIT_DATA) from None


def _folds(dataset, cfg: RunConfig):
    try:
        return plan_folds(dataset, cfg.seed, cfg.n_folds)
    except PartitionError as exc:
        raise StageError("partitioning", str(exc), EXIT_DATA) from None


def cmd_synth(args) -> int:
    try:
        payload = json.loads(Path(args.spec).read_text()) if args.spec else {"tones": {"0": [[50, 1.0]], "1": [[80, 1.0]]}}
        spec = SynthesisSpec.from_dict(payload)
    except (OSError, ValueError, TypeError, KeyError) as exc:
        raise StageError("synth", f"invalid synthesis spec: {exc}", EXIT_CONFIG) from None
    try:
        dataset = synthesize_dataset(spec, args.seed)
    except (DatasetError, ValueError) as exc:
        raise StageError("synth", str(exc), EXIT_CONFIG) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = write_dataset(dataset, out / f"{spec.name}.csv")
    print(path)
    return EXIT_OK


def run_recommend(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = _setup_log(out)
    try:
        t0 = time.perf_counter()
        dataset = _load_data(cfg)
        logger.info("loaded %d instances in %.2fs", len(dataset), time.perf_counter() - t0)
        t = time.perf_counter()
        plan, clustering = _folds(dataset, cfg)
        logger.info("fold plan: %d folds, k=%d clusters (%.2fs)", plan.n_folds, clustering.k_clusters, time.perf_counter() - t)
        config = cfg.selection
        if cfg.weights:
            try:
                weights = ExpertWeights.load(cfg.weights)
            except (OSError, ValueError) as exc:
                raise StageError("config", str(exc), EXIT_CONFIG) from None
            config = apply_expert_weights(weights, config)
        t = time.perf_counter()
        try:
            factory = FeatureFactory(dataset, config.features)
            result = recommend(dataset, plan, config, cfg.seed, factory)
        except (SelectionError, ValueError) as exc:
            raise StageError("selection_engine", str(exc), EXIT_DATA) from None
        logger.info("recommendation finished at level %d (%.2fs)", result.level_reached, time.perf_counter() - t)
        for lv in result.levels:
            logger.info("level %d quality %.4f", lv.level, lv.quality)
        if not (result.fe1.best_fold_metric >= result.fe2.best_fold_metric
                and result.fe2.min_fold_metric >= result.fe1.min_fold_metric):
            raise StageError("selection_engine", "Fe1/Fe2 ordering contract violated", EXIT_INTERNAL)

        plan.write(out / "folds.json")
        tables = {}
        for fold, wavelet in result.fold_wavelets.items():
            tables.setdefault(wavelet or "sweep", result.tables[fold])
        write_mapping_tables(out / "mapping_table.json", tables, result.fold_wavelets, cfg.seed, result.level_reached)
        _dump(out / "recommendation.json", result.to_dict())
        metrics = {
            "schema_version": SCHEMA_VERSION,
            "seed": cfg.seed,
            "metric": config.metric,
            "level_reached": result.level_reached,
        }
        for name, subset in (("fe1", result.fe1), ("fe2", result.fe2)):
            metrics[name] = {
                "feature_ids": subset.feature_ids,
                "test": [r.to_dict() for r in subset.test_reports],
                "test_min": min(r.value for r in subset.test_reports),
                "test_mean": float(np.mean([r.value for r in subset.test_reports])),
            }
        _dump(out / "metrics.json", metrics)
        resolved = cfg.to_dict()
        resolved["selection"] = config.to_dict()
        _dump(out / "run.config.json", resolved)
        logger.info("total %.2fs", time.perf_counter() - t0)
    finally:
        logging.getLogger("widefeat").removeHandler(handler)
        handler.close()
    return out


def cmd_recommend(args) -> int:
    cfg = load_run_config(args.config, args)
    out = run_recommend(cfg)
    print(out)
    return EXIT_OK


def _train_values(dataset, plan: FoldPlan, table, feature_ids, fold: int = 0):
    labels = {inst.instance_id: inst.label for inst in dataset.instances}
    by_id = dataset.by_id()
    train = plan.ids(fold, TRAIN)
    out = {}
    for fid in feature_ids:
        per_class = {0: [], 1: []}
        for iid in train:
            per_class[labels[iid]].append(replay_feature(fid, by_id[iid].samples, table))
        out[fid] = per_class
    return out


def run_interpret(run_dir, fundamentals=None, weights=None, max_n=DEFAULT_MAX_N, tolerance=DEFAULT_TOLERANCE) -> Path:
    run_dir = Path(run_dir)
    needed = ["mapping_table.json", "recommendation.json", "folds.json", "run.config.json"]
    missing = [n for n in needed if not (run_dir / n).exists()]
    if missing:
        raise StageError("interpretation", f"run directory incomplete, missing {', '.join(missing)}", EXIT_DATA)
    tables, fold_wavelets, _ = read_mapping_tables(run_dir / "mapping_table.json")
    rec = json.loads((run_dir / "recommendation.json").read_text())
    plan = FoldPlan.from_dict(json.loads((run_dir / "folds.json").read_text()))
    cfg_payload = json.loads((run_dir / "run.config.json").read_text())
    cfg = _config_stage(RunConfig.from_dict, cfg_payload, run_dir)
    dataset = _load_data(cfg)
    ref_fold = 0
    table = tables[fold_wavelets[ref_fold] or "sweep"]
    fe1, fe2 = rec["fe1"]["feature_ids"], rec["fe2"]["feature_ids"]
    try:
        funds = load_fundamentals(fundamentals) if fundamentals else None
        train_values = _train_values(dataset, plan, table, sorted(set(fe1) | set(fe2)), ref_fold)
        report = build_report(fe1, fe2, table, train_values, funds, max_n, tolerance, {
            "seed": rec["seed"], "level_reached": rec["level_reached"], "reference_fold": ref_fold,
            "wavelet": table.wavelet, "metric": rec["metric"],
        })
    except (InterpretationError, OSError, ValueError, KeyError) as exc:
        raise StageError("interpretation", str(exc), EXIT_DATA) from None
    write_report(report, run_dir)
    if weights:
        try:
            w = ExpertWeights.load(weights)
        except (OSError, ValueError) as exc:
            raise StageError("config", str(exc), EXIT_CONFIG) from None
        updated = apply_expert_weights(w, cfg.selection, table)
        rerun = cfg.to_dict()
        rerun["selection"] = updated.to_dict()
        _dump(run_dir / "rerun.config.json", rerun)
    return run_dir


def cmd_interpret(args) -> int:
    run_interpret(args.run, args.fundamentals, args.weights, args.max_n, args.tolerance)
    print(Path(args.run) / "interpretation.md")
    return EXIT_OK


def run_baseline_pca(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = _load_data(cfg)
    plan, _ = _folds(dataset, cfg)
    factory = FeatureFactory(dataset, cfg.selection.features)
    labels = {inst.instance_id: inst.label for inst in dataset.instances}
    rows = []
    for fold in range(plan.n_folds):
        pool, _ = factory.build(plan, fold, 1)

        def take(role):
            ids = plan.ids(fold, role)
            return pool.values[pool.row_index(ids)], np.array([labels[i] for i in ids])

        Xtr, ytr = take(TRAIN)
        Xev, yev = take(EVAL)
        try:
            res = models.pca_baseline(Xtr, ytr, Xev, yev, cfg.pca_components, cfg.selection.metric,
                                      cfg.selection.tuning, cfg.seed)
        except models.ModelError as exc:
            raise StageError("model_zoo", str(exc), EXIT_CONFIG) from None
        for row in res.rows:
            rows.append({"fold": fold, **row})
    best = {}
    for n in cfg.pca_components:
        per_fold = [max(r["report"]["value"] for r in rows if r["fold"] == f and r["n_components"] == n)
                    for f in range(plan.n_folds)]
        best[str(n)] = {"per_fold": per_fold, "min": min(per_fold), "mean": float(np.mean(per_fold))}
    baseline = {"seed": cfg.seed, "metric": cfg.selection.metric, "folds": plan.n_folds, "rows": rows, "by_components": best}
    path = out / "metrics.json"
    metrics = json.loads(path.read_text()) if path.exists() else {"schema_version": SCHEMA_VERSION, "seed": cfg.seed}
    metrics["baseline_pca"] = baseline
    _dump(path, metrics)
    plan.write(out / "folds.json")
    return baseline


def cmd_baseline_pca(args) -> int:
    cfg = load_run_config(args.config, args)
    if args.components:
        cfg.pca_components = list(args.components)
    run_baseline_pca(cfg)
    print(Path(cfg.out) / "metrics.json")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="widefeat", description="Interpretable feature recommendation for two-class signal data.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic tone dataset")
    p.add_argument("--spec", help="synthesis spec JSON (default: 50 Hz vs 80 Hz)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_synth)

    def with_overrides(p):
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--seed", type=int)
        p.add_argument("--tau", type=float)
        p.add_argument("--k", type=int)
        p.add_argument("--window-size-s", type=float, dest="window_size_s")
        p.add_argument("--metric", choices=models.METRICS)
        p.add_argument("--out")
        p.add_argument("--threads", type=int)

    p = sub.add_parser("recommend", help="run the recommendation pipeline")
    with_overrides(p)
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("interpret", help="describe the recommended features of a run")
    p.add_argument("--run", required=True, help="run directory written by 'recommend'")
    p.add_argument("--fundamentals")
    p.add_argument("--weights")
    p.add_argument("--max-n", type=int, default=DEFAULT_MAX_N, dest="max_n")
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p.set_defaults(func=cmd_interpret)

    p = sub.add_parser("baseline-pca", help="PCA + SVM baseline on the same folds")
    with_overrides(p)
    p.add_argument("--components", type=int, nargs="+")
    p.set_defaults(func=cmd_baseline_pca)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"widefeat: error [{exc.stage}]: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001 - last-resort guard for a clean exit code
        print(f"widefeat: error [internal]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
