"""Acceptance criteria for the primary component.

Each test records a PASS/FAIL line that the terminal summary prints, so a
plain ``pytest tests/test_acceptance.py`` shows one verdict per criterion.
"""

import contextlib
import json
import time

import numpy as np
import pytest

from widefeat import cli, models
from widefeat import selection as sel
from widefeat import transforms as tf
from widefeat.dataset_io import WindowPlan, dataset_from_arrays, write_dataset
from widefeat.features import FeatureConfig
from widefeat.information import entropy, mutual_information
from widefeat.interpretation import FundamentalFrequency, match_harmonics
from widefeat.partitioning import plan_folds, silhouette_score

import oracles
from conftest import ACCEPTANCE_RESULTS

pytestmark = pytest.mark.acceptance

FAST_TUNING = models.TuningBudget(max_evals=1)


@contextlib.contextmanager
def criterion(name):
    notes = []
    try:
        yield notes
    except BaseException as exc:
        ACCEPTANCE_RESULTS[name] = (False, f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
        raise
    ACCEPTANCE_RESULTS[name] = (True, "; ".join(notes))


@pytest.fixture(scope="module")
def tone_run(tone_dataset):
    plan, _ = plan_folds(tone_dataset, seed=0)
    config = sel.SelectionConfig(k=4, tau=0.98)
    start = time.perf_counter()
    result = sel.recommend(tone_dataset, plan, config, seed=0)
    return result, time.perf_counter() - start


def level3_only_dataset(n=60, seed=5):
    """Eight windows with geometrically growing noise scale.

    Both classes see the same set of scales, so window-averaged statistics
    match in distribution; class 1 visits them out of order, which only the
    window-to-window differences pick up.
    """
    rng = np.random.default_rng(seed)
    shuffled = [0, 4, 1, 5, 2, 6, 3, 7]
    signals, labels = [], []
    for i in range(n):
        label = i % 2
        scales = rng.uniform(1.0, 1.3) * 1.25 ** np.arange(8)
        if label:
            scales = scales[shuffled]
        signals.append(np.concatenate([s * rng.normal(size=256) for s in scales]))
        labels.append(label)
    return dataset_from_arrays(np.array(signals), np.array(labels), 1000.0, "level3-only")


@pytest.fixture(scope="module")
def level3_run():
    ds = level3_only_dataset()
    plan, _ = plan_folds(ds, seed=0)
    config = sel.SelectionConfig(k=3, tuning=FAST_TUNING, cross_fold_candidates=8,
                                 features=FeatureConfig(window=WindowPlan(0.256, 0.0)))
    return sel.recommend(ds, plan, config, seed=0)


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    from widefeat.dataset_io import SynthesisSpec, synthesize_dataset

    spec = SynthesisSpec(tones={0: [(50.0, 1.0)], 1: [(80.0, 1.0)]}, noise_sigma=0.5,
                         instances_per_class=30, n_samples=512, sampling_rate_hz=1000.0, name="tones")
    root = tmp_path_factory.mktemp("acceptance")
    return root, write_dataset(synthesize_dataset(spec, seed=3), root / "tones.csv")


def run_cli(root, dataset, out, *extra, weights=None):
    payload = {"dataset": str(dataset), "seed": 2, "selection": {"k": 3, "tuning": {"max_evals": 1}}}
    if weights is not None:
        (root / "weights.json").write_text(json.dumps(weights))
        payload["weights"] = str(root / "weights.json")
    cfg = root / f"{out}.config.json"
    cfg.write_text(json.dumps(payload))
    code = cli.main(["recommend", "--config", str(cfg), "--out", str(root / out), *extra])
    assert code == 0
    return root / out


@pytest.fixture(scope="module")
def determinism_runs(cli_dataset):
    root, data = cli_dataset
    return [run_cli(root, data, name, "--threads", str(t)) for name, t in (("t1a", 1), ("t1b", 1), ("t2", 2))]


def test_synthetic_end_to_end(tone_run):
    with criterion("1 synthetic end-to-end") as notes:
        result, seconds = tone_run
        table = result.tables[0]
        tests = [r.value for r in result.fe2.test_reports]
        notes.append(f"Fe2 Test accuracy per fold {[round(v, 4) for v in tests]}")
        assert len(tests) == 5 and min(tests) >= 0.95
        bin_hz = 1000.0 / 1024
        near = [
            f for f in set(result.fe1.feature_ids) | set(result.fe2.feature_ids)
            if table.record(f).carrier == "stft" and table.record(f).statistic == "magnitude"
            and min(abs(table.record(f).location["frequency_hz"] - t) for t in (50.0, 80.0)) <= 2 * bin_hz
        ]
        notes.append(f"STFT bins near 50/80 Hz: {[table.record(f).location['frequency_hz'] for f in near]}")
        assert near
        notes.append(f"wall clock {seconds:.1f}s")
        assert seconds < 300


def test_oracle_equivalence(rng):
    with criterion("2 oracle equivalence") as notes:
        for seed in range(10):
            r = np.random.default_rng(seed)
            y = r.integers(0, 2, 60)
            X = r.integers(0, 4, (60, 8))
            X[:, seed % 8] = np.where(r.random(60) < 0.75, y, X[:, seed % 8])
            assert sel.mrmr_rank(X, y, 8) == oracles.mrmr_path(X, y, 8)
        notes.append("(a) mRMR paths equal on 10 datasets")

        for seed in range(10):
            r = np.random.default_rng(seed)
            X, y = r.integers(0, 3, (50, 6)), r.integers(0, 2, 50)
            for size in range(1, 7):
                cols = [X[:, j] for j in range(size)]
                assert sel.dependency(cols, y) == oracles.positive_region_gamma(cols, y)
        notes.append("(b) gamma exact")

        data_rng = np.random.default_rng(21)
        Xtr, Xev = data_rng.normal(size=(60, 6)), data_rng.normal(size=(60, 6))
        ytr = (Xtr[:, 0] * Xtr[:, 1] > 0).astype(int)
        yev = (Xev[:, 0] * Xev[:, 1] > 0).astype(int)
        fold = sel.FoldData(0, Xtr, ytr, Xev, yev, Xev, yev, {j: j for j in range(6)})
        wrapper = sel.Wrapper(fold, "accuracy")
        specs = {"random_forest": models.ClassifierSpec("random_forest", n_trees=5, max_depth=4),
                 "svm_linear": models.default_spec("svm_linear"), "svm_rbf": models.default_spec("svm_rbf")}
        scores, _ = sel.exhaustive_search([3, 0, 5, 1, 4, 2], lambda s: wrapper.score(s, specs, "a"), 2**20)
        memo = {key[1]: max(v.values()) for key, v in wrapper.memo.items()}
        assert sel.best_subset(scores) == oracles.best_subset_by_enumeration(range(6), lambda s: memo[tuple(sorted(s))])
        for k in range(1, 11):
            r = np.random.default_rng(100 + k)
            table = {}

            def score(s):
                return table.setdefault(tuple(sorted(s)), float(r.integers(0, 6)) / 5)

            ids = sorted(r.choice(50, k, replace=False).tolist())
            found, fallback = sel.exhaustive_search(ids[::-1], score, 2**20)
            assert not fallback and len(found) == 2**k - 1
            assert sel.best_subset(found) == oracles.best_subset_by_enumeration(ids, score)
        notes.append("(c) exhaustive winner equals enumeration for k=1..10")

        worst = 0.0
        for n in (10, 57, 200):
            X = rng.normal(size=(n, 3))
            lab = list(rng.integers(0, 4, n))
            lab[:4] = [0, 1, 2, 3]
            worst = max(worst, abs(silhouette_score(X, lab) - oracles.silhouette(X, lab)))
        notes.append(f"(d) silhouette max error {worst:.1e}")
        assert worst <= 1e-12


def test_numerics(rng):
    with criterion("3 numerics") as notes:
        worst = 0.0
        for _ in range(1000):
            x = rng.normal(size=1024)
            s = tf.stft_magnitude(x, 1.0, window=None)
            worst = max(worst, abs(tf.spectral_energy(s) - np.sum(x**2)) / np.sum(x**2))
        notes.append(f"Parseval {worst:.1e}")
        assert worst <= 1e-9

        recon = 0.0
        for name in tf.WAVELET_LIBRARY:
            x = rng.normal(size=1024)
            recon = max(recon, float(np.max(np.abs(tf.idwt(tf.dwt(x, name, 5)) - x))))
        notes.append(f"DWT reconstruction {recon:.1e} over {len(tf.WAVELET_LIBRARY)} wavelets")
        assert len(tf.WAVELET_LIBRARY) == 7 and recon <= 1e-8

        for k in (1, 2, 4, 7):
            x = np.repeat(np.arange(k), 3 + np.arange(k))
            assert mutual_information(x, x) == entropy(x)
        mi_err = 0.0
        for seed in range(50):
            r = np.random.default_rng(seed)
            x, y = r.integers(0, 5, 200), r.integers(0, 3, 200)
            mi_err = max(mi_err, abs(mutual_information(x, y) - oracles.contingency_mi(list(x), list(y))))
        notes.append(f"MI oracle {mi_err:.1e}")
        assert mi_err <= 1e-12


def test_harmonic_matching():
    with criterion("4 harmonic matching") as notes:
        funds = [FundamentalFrequency(n, hz) for n, hz in (
            ("Outer Race Frequency", 236.4), ("Inner Race Frequency", 296.9),
            ("Rolling Element Frequency", 279.8), ("Shaft Frequency", 33.33), ("Bearing Cage Frequency", 14.7))]
        for hz, expected in ((14.4991, 0.01367), (14.3701, 0.02244)):
            (m,) = match_harmonics(hz, funds)
            assert (m.fundamental, m.harmonic_n) == ("Bearing Cage Frequency", 1)
            assert abs(m.relative_deviation - expected) <= 1e-5
            notes.append(f"{hz} Hz dev {m.relative_deviation:.5f}")
            assert not [x for x in match_harmonics(hz, funds) if x.fundamental == "Shaft Frequency"]


def test_escalation(level3_run, tone_run):
    with criterion("5 escalation") as notes:
        notes.append(f"level-3 fixture reached {level3_run.level_reached}")
        assert level3_run.level_reached == 3
        table = level3_run.tables[0]
        assert all(table.record(f).level == 3 for f in level3_run.fe2.feature_ids)
        tone, _ = tone_run
        notes.append(f"tone run counters {tone.counters}")
        assert tone.level_reached == 1 and len(tone.levels) == 1
        assert tone.counters["level1"] > 0 and tone.counters["level2"] == 0 and tone.counters["level3"] == 0


def test_determinism(determinism_runs):
    with criterion("6 determinism") as notes:
        first = determinism_runs[0]
        for other in determinism_runs[1:]:
            for name in ("recommendation.json", "folds.json", "mapping_table.json"):
                assert (first / name).read_bytes() == (other / name).read_bytes(), f"{name} differs in {other.name}"
        notes.append("byte-identical across --threads 1, 1, 2")


def test_fe1_fe2_contract(tone_run, level3_run, determinism_runs):
    with criterion("7 Fe1/Fe2 contract") as notes:
        outcomes = [(r.fe1.eval_scores, r.fe2.eval_scores) for r in (tone_run[0], level3_run)]
        outcomes += [(lv.fe1.eval_scores, lv.fe2.eval_scores) for r in (tone_run[0], level3_run) for lv in r.levels]
        for run in determinism_runs:
            rec = json.loads((run / "recommendation.json").read_text())
            outcomes.append((rec["fe1"]["eval_scores"], rec["fe2"]["eval_scores"]))
        for fe1, fe2 in outcomes:
            assert 0 < len(fe1) and max(fe1) >= max(fe2) and min(fe2) >= min(fe1)
        notes.append(f"{len(outcomes)} Fe1/Fe2 pairs checked")


def test_weight_neutrality(cli_dataset, determinism_runs):
    with criterion("8 weight neutrality") as notes:
        root, data = cli_dataset
        ones = [{"selector": {"domain": d}, "weight": 1.0} for d in ("time", "frequency", "wavelet")]
        ones.append({"selector": {"statistic": "kurtosis", "level": 2}, "weight": 1.0})
        weighted = run_cli(root, data, "weights-one", weights=ones)
        plain = json.loads((determinism_runs[0] / "recommendation.json").read_text())
        other = json.loads((weighted / "recommendation.json").read_text())
        keys = ("mrmr_order", "mrms_order", "union", "wrapper_ranked")
        stages = 0
        for lv_a, lv_b in zip(plain["levels"], other["levels"], strict=True):
            for a, b in zip(lv_a["stages"], lv_b["stages"], strict=True):
                for key in keys:
                    assert a[key] == b[key]
                    stages += 1
        assert plain == other
        notes.append(f"{stages} per-stage rankings identical")
