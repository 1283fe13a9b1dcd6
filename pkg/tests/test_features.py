import json

import numpy as np
import pytest

from widefeat import features as ff
from widefeat.dataset_io import WindowPlan
from widefeat.features import FeatureConfig, FeatureFactory, MappingTable
from widefeat.partitioning import TRAIN, plan_folds

from conftest import make_dataset


def by_name(values, records, **match):
    hits = [v for v, r in zip(values, records) if all(getattr(r, k) == want for k, want in match.items())]
    return hits


@pytest.fixture(scope="module")
def tone_pool(request):
    ds = request.getfixturevalue("small_tone_dataset")
    plan, _ = plan_folds(ds, seed=0)
    factory = FeatureFactory(ds, FeatureConfig())
    return ds, plan, factory


@pytest.fixture(scope="module")
def windowed_pool():
    rng = np.random.default_rng(8)
    t = np.arange(1024) / 1000.0
    signals, labels = [], []
    for i in range(24):
        lab = i % 2
        f = 60.0 if lab == 0 else 95.0
        signals.append(np.sin(2 * np.pi * f * t) * (1 + 0.5 * t) + 0.2 * rng.normal(size=t.size))
        labels.append(lab)
    ds = make_dataset(signals, labels)
    config = FeatureConfig(window=WindowPlan(0.256, 0.0), ratio_top_r=5)
    plan, _ = plan_folds(ds, seed=2)
    return ds, plan, FeatureFactory(ds, config)


class TestLevel1:
    def test_count_146(self):
        x = np.random.default_rng(0).normal(size=1024)
        values, records = ff.level1_features(x, 1000.0, "db4", FeatureConfig())
        assert values.size == len(records) == 7 + 129 + 10

    def test_zero_segment(self):
        values, records = ff.level1_features(np.zeros(256), 1000.0, "haar")
        assert np.all(values == 0)

    def test_tone_bin(self):
        t = np.arange(1024) / 1000.0
        values, records = ff.level1_features(np.sin(2 * np.pi * 100 * t), 1000.0, "haar", FeatureConfig(bin_stride=1))
        bins = [(v, r) for v, r in zip(values, records) if r.statistic == "magnitude"]
        v, r = max(bins, key=lambda p: p[0])
        assert abs(r.location["frequency_hz"] - 100.0) <= 1000.0 / 1024

    def test_zero_cross(self):
        values, records = ff.level1_features(np.array([1.0, -1.0, 1.0, -1.0] * 4), 16.0, "haar",
                                             FeatureConfig(dwt_levels=2))
        # the window repeats the pattern, so every adjacent pair changes sign
        assert by_name(values, records, statistic="zero_cross") == [15.0]
        v, r = ff.STATISTICS["zero_cross"].fn(np.array([1.0, -1.0, 1.0, -1.0]), {})
        assert v == 3.0

    def test_provenance_fields(self):
        values, records = ff.level1_features(np.random.default_rng(1).normal(size=512), 1000.0, "db2")
        for r in records:
            assert r.parent_feature_ids == []
            if r.domain == "time":
                assert r.frequency_hz is None
            else:
                assert r.frequency_hz is not None and r.frequency_hz >= 0


class TestLevel2:
    def test_kurtosis_of_gaussian(self):
        x = np.random.default_rng(42).normal(size=100_000)
        v, _ = ff.STATISTICS["kurtosis"].fn(x, {})
        assert abs(v) <= 0.2

    def test_centroid_two_tone(self):
        t = np.arange(1000) / 1000.0
        x = np.sin(2 * np.pi * 100 * t) + np.sin(2 * np.pi * 300 * t)
        values, records = ff.level2_features(x, 1000.0, "haar", FeatureConfig(n_fft=1000))
        (c,) = by_name(values, records, statistic="spectral_centroid")
        assert abs(c - 200.0) <= 1.0

    def test_ramp_has_no_peaks(self):
        values, records = ff.level2_features(np.linspace(0, 1, 256), 1000.0, "haar")
        assert by_name(values, records, statistic="peak_count") == [0.0]

    def test_degenerate_flags(self):
        values, records = ff.level2_features(np.zeros(128), 1000.0, "haar")
        (flat,) = by_name(values, records, statistic="spectral_flatness")
        assert flat == 1.0
        assert set(by_name(values, records, statistic="skewness")) == {0.0}
        flagged = {r.statistic for r in records if r.flags}
        assert {"skewness", "kurtosis", "entropy", "spectral_flatness"} <= flagged


class TestLevel3:
    def test_identical_windows(self):
        W = np.tile(np.arange(1.0, 6.0), (4, 1))
        recs = [ff.ProvenanceRecord(j, 2, "wavelet", "dwt", {}, {}, "std", "dwt", lineage_key=f"s{j}") for j in range(5)]
        values, records = ff.level3_features(W, recs, config=FeatureConfig(ratio_top_r=2))
        deriv = [v for v, r in zip(values, records) if r.kind == "derivative"]
        assert deriv == [0.0] * 5

    def test_std_difference(self):
        W = np.array([[2.0], [5.0]])
        rec = ff.ProvenanceRecord(0, 2, "wavelet", "dwt", {}, {}, "std", "dwt")
        values, records = ff.level3_features(W, [rec])
        assert values[0] == 3.0 and records[0].kind == "derivative" and records[0].parent_feature_ids == [0]

    def test_ratio_of_equal(self):
        W = np.array([[4.0, 4.0]])
        recs = [ff.ProvenanceRecord(j, 2, "time", "none", {}, {}, "energy", "raw") for j in range(2)]
        values, records = ff.level3_features(W, recs)
        assert list(values) == [1.0, 1.0]
        assert all(len(r.parent_feature_ids) == 2 for r in records)

    def test_ratio_guard(self):
        W = np.array([[4.0, 0.0]])
        recs = [ff.ProvenanceRecord(j, 2, "time", "none", {}, {}, "energy", "raw") for j in range(2)]
        values, records = ff.level3_features(W, recs)
        assert values[0] == 0.0 and records[0].flags == ["denominator_guard"]


class TestAggregation:
    def rec(self):
        return ff.ProvenanceRecord(0, 1, "time", "none", {}, {}, "mean", "raw", window_index=0, lineage_key="m")

    def test_single_window_identity(self):
        ids, M, recs = ff.aggregate_windows({5: np.array([[3.5]])}, [self.rec()])
        assert M[0, 0] == 3.5 and recs[0].window_index == ff.ALL_WINDOWS

    def test_mean(self):
        _, M, _ = ff.aggregate_windows({0: np.array([[1.0], [2.0], [3.0]])}, [self.rec()])
        assert M[0, 0] == 2.0

    def test_multi_agg(self):
        _, M, recs = ff.aggregate_windows({0: np.array([[1.0], [2.0], [3.0]])}, [self.rec()], multi_agg=True)
        assert M.shape == (1, 4)
        assert len({r.lineage_key for r in recs}) == 1
        assert [r.aggregation for r in recs] == list(ff.AGGREGATIONS)


class TestPool:
    def test_level1_shape_and_table(self, tone_pool):
        ds, plan, factory = tone_pool
        matrix, table = factory.build(plan, 0, 1)
        assert matrix.values.shape == (len(ds), 7 + 129 + 10) or matrix.values.shape[1] == len(table)
        assert len(table) == matrix.values.shape[1]
        assert list(matrix.feature_ids) == list(range(len(table)))
        assert np.all(np.isfinite(matrix.values))
        assert set(table.registry) >= {r.statistic for r in table.records}

    def test_deterministic(self, small_tone_dataset):
        plan, _ = plan_folds(small_tone_dataset, seed=0)
        a = FeatureFactory(small_tone_dataset).build(plan, 0, 2)
        b = FeatureFactory(small_tone_dataset).build(plan, 0, 2)
        assert a[0].values.tobytes() == b[0].values.tobytes()
        assert a[1].to_dict() == b[1].to_dict()

    def test_cumulative_levels(self, tone_pool):
        ds, plan, factory = tone_pool
        m1, t1 = factory.build(plan, 0, 1)
        m2, t2 = factory.build(plan, 0, 2)
        lineage1 = [r.lineage_key for r in t1.records]
        assert lineage1 == [r.lineage_key for r in t2.records if r.level == 1]
        assert {r.level for r in t2.records} == {1, 2}

    def test_ids_shared_across_folds(self, tone_pool):
        ds, plan, factory = tone_pool
        keys = [[r.lineage_key for r in factory.build(plan, f, 3)[1].records] for f in range(plan.n_folds)]
        assert all(k == keys[0] for k in keys)

    def test_level3_parents(self, windowed_pool):
        ds, plan, factory = windowed_pool
        matrix, table = factory.build(plan, 0, 3)
        kinds = {r.kind for r in table.records}
        assert {"base", "derivative", "ratio"} <= kinds
        for r in table.records:
            if r.kind == "ratio":
                assert len(r.parent_feature_ids) == 2
                assert all(table.record(p).level == 2 for p in r.parent_feature_ids)
            elif r.kind == "derivative":
                assert len(r.parent_feature_ids) == 1 and table.record(r.parent_feature_ids[0]).level == 2
            else:
                assert r.parent_feature_ids == []

    def test_mother_wavelet_uses_train_only(self, windowed_pool, monkeypatch):
        ds, plan, _ = windowed_pool
        factory = FeatureFactory(ds, FeatureConfig(window=WindowPlan(0.256, 0.0)))
        seen = {}

        def spy(per_class, library):
            seen["n"] = sum(len(v) for v in per_class.values())
            return ff.transforms.WaveletSelection("haar", "energy_entropy", [], {})

        monkeypatch.setattr(ff.transforms, "rank_mother_wavelets", spy)
        factory.select_wavelet(plan, 1)
        assert seen["n"] == len(plan.ids(1, TRAIN)) * 4

    def test_lineage_replay(self, windowed_pool):
        ds, plan, factory = windowed_pool
        matrix, table = factory.build(plan, 0, 3)
        rng = np.random.default_rng(0)
        by_id = ds.by_id()
        for _ in range(100):
            row = int(rng.integers(matrix.values.shape[0]))
            col = int(rng.integers(matrix.values.shape[1]))
            iid = int(matrix.instance_ids[row])
            assert ff.replay_feature(col, by_id[iid].samples, table) == matrix.values[row, col]

    def test_mapping_table_round_trip(self, windowed_pool, tmp_path):
        ds, plan, factory = windowed_pool
        _, table = factory.build(plan, 0, 3)
        ff.write_mapping_tables(tmp_path / "m.json", {table.wavelet: table}, {0: table.wavelet}, 3, 3)
        tables, fw, payload = ff.read_mapping_tables(tmp_path / "m.json")
        assert payload["schema_version"] == 1 and payload["seed"] == 3
        back = tables[table.wavelet]
        assert json.dumps(back.to_dict(), sort_keys=True) == json.dumps(
            MappingTable.from_dict(json.loads(json.dumps(table.to_dict()))).to_dict(), sort_keys=True)

    def test_level_counters(self, small_tone_dataset):
        plan, _ = plan_folds(small_tone_dataset, seed=0)
        factory = FeatureFactory(small_tone_dataset)
        factory.build(plan, 0, 1)
        assert factory.counters["level1"] > 0
        assert factory.counters["level2"] == 0 and factory.counters["level3"] == 0


def test_record_matches():
    rec = ff.ProvenanceRecord(0, 2, "wavelet", "dwt", {}, {}, "kurtosis", "dwt")
    assert ff.record_matches({"domain": "wavelet", "statistic": "kurtosis"}, rec)
    assert not ff.record_matches({"level": 1}, rec)
    with pytest.raises(ValueError):
        ff.record_matches({"colour": "red"}, rec)
