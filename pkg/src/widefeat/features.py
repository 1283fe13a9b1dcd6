"""Hierarchical feature pool (levels 1-3) with a provenance mapping table.

Level 1 holds time-domain basics, strided STFT bin magnitudes and DWT sub-band
energy/std. Level 2 applies distribution, spectral-shape and peak/trough
statistics to three carriers (raw window, STFT magnitudes, DWT sub-bands).
Level 3 derives window-to-window differences and pairwise ratios of level-2
features.

Every column of the pool has a :class:`ProvenanceRecord` that is enough to
recompute the value from the raw signal (see :func:`replay_feature`).
"""

from __future__ import annotations

import copy
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import stats as sps

from . import transforms
from .dataset_io import SignalDataset, WindowPlan, window_instance
from .information import AUTO, discretize, mutual_information
from .partitioning import TRAIN, FoldPlan

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ALL_WINDOWS = "ALL"
AGGREGATIONS = ("mean", "min", "max", "std")
SELECTED = "selected"

DOMAIN_OF = {"raw": "time", "stft": "frequency", "dwt": "wavelet"}
TRANSFORM_OF = {"raw": "none", "stft": "stft", "dwt": "dwt"}
KIND_RANK = {"base": 0, "window": 1, "derivative": 2, "ratio": 3}


@dataclass
class FeatureConfig:
    window: WindowPlan = field(default_factory=WindowPlan)
    n_fft: int | None = None
    bin_stride: int = 4
    dwt_levels: int = 5
    ratio_top_r: int = 24
    ratio_eps: float = 1e-12
    multi_agg: bool = False
    keep_window_features: bool = False
    stft_window_scales: tuple[float, ...] = (1.0,)
    wavelet_sweep: bool = False
    wavelet_library: tuple[str, ...] = transforms.WAVELET_LIBRARY
    wavelet_segments_per_class: int = 100

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window"] = {
            "window_size_s": self.window.window_size_s,
            "overlap_fraction": self.window.overlap_fraction,
        }
        d["stft_window_scales"] = list(self.stft_window_scales)
        d["wavelet_library"] = list(self.wavelet_library)
        return d

    @classmethod
    def from_dict(cls, payload: dict) -> "FeatureConfig":
        payload = dict(payload)
        window = payload.pop("window", None) or {}
        cfg = cls(window=WindowPlan(window.get("window_size_s"), window.get("overlap_fraction", 0.0)))
        for key, value in payload.items():
            if not hasattr(cfg, key):
                raise ValueError(f"unknown feature config field {key!r}")
            if key in ("stft_window_scales", "wavelet_library"):
                value = tuple(value)
            setattr(cfg, key, value)
        return cfg


# --------------------------------------------------------------------------
# statistics


def _zero_var(x):
    return x.size < 2 or np.all(x == x[0])


def _skewness(x, ctx):
    if _zero_var(x):
        return 0.0, "zero_variance"
    return float(sps.skew(x)), None


def _kurtosis(x, ctx):
    if _zero_var(x):
        return 0.0, "zero_variance"
    return float(sps.kurtosis(x, fisher=True)), None


def _shannon_entropy(x, ctx):
    sq = x * x
    energy = sq.sum()
    if energy <= 0:
        return 0.0, "zero_energy"
    p = sq[sq > 0] / energy
    return float(-(p * np.log(p)).sum()), None


def _crest_factor(x, ctx):
    rms = math.sqrt(float(np.mean(x * x)))
    if rms == 0:
        return 0.0, "zero_energy"
    return float(np.max(np.abs(x)) / rms), None


def _zero_cross(x, ctx):
    positive = x >= 0
    return float(np.count_nonzero(positive[1:] != positive[:-1])), None


def _spectral_weights(x):
    total = x.sum()
    return total, (x / total if total > 0 else None)


def _centroid(x, ctx):
    total, w = _spectral_weights(x)
    if w is None:
        return 0.0, "zero_spectrum"
    return float(np.sum(ctx["freqs"] * w)), None


def _spread(x, ctx):
    total, w = _spectral_weights(x)
    if w is None:
        return 0.0, "zero_spectrum"
    c = np.sum(ctx["freqs"] * w)
    return float(math.sqrt(np.sum((ctx["freqs"] - c) ** 2 * w))), None


def _rolloff(x, ctx, fraction=0.85):
    total = x.sum()
    if total <= 0:
        return 0.0, "zero_spectrum"
    idx = int(np.searchsorted(np.cumsum(x), fraction * total, side="left"))
    return float(ctx["freqs"][min(idx, x.size - 1)]), None


def _flatness(x, ctx):
    power = x * x
    if not np.any(power > 0):
        return 1.0, "zero_spectrum"
    power = np.maximum(power, 1e-20)
    return float(np.exp(np.mean(np.log(power))) / np.mean(power)), None


def _dominant_frequency(x, ctx):
    if not np.any(x > 0):
        return 0.0, "zero_spectrum"
    return float(ctx["freqs"][int(np.argmax(x))]), None


def _extrema(x):
    if x.size < 3:
        return np.array([], dtype=int), np.array([], dtype=int)
    mu, sd = x.mean(), x.std()
    mid = x[1:-1]
    peaks = np.flatnonzero((mid > x[:-2]) & (mid > x[2:]) & (mid > mu + 0.5 * sd)) + 1
    troughs = np.flatnonzero((mid < x[:-2]) & (mid < x[2:]) & (mid < mu - 0.5 * sd)) + 1
    return peaks, troughs


def _peak_count(x, ctx):
    return float(_extrema(x)[0].size), None


def _mean_peak_height(x, ctx):
    peaks, _ = _extrema(x)
    return (float(x[peaks].mean()), None) if peaks.size else (0.0, "no_peaks")


def _mean_trough_depth(x, ctx):
    _, troughs = _extrema(x)
    if not troughs.size:
        return 0.0, "no_troughs"
    return float(x.mean() - x[troughs].mean()), None


def _mean_peak_to_trough(x, ctx):
    peaks, troughs = _extrema(x)
    if not peaks.size or not troughs.size:
        return 0.0, "no_peaks"
    return float(x[peaks].mean() - x[troughs].mean()), None


def _mean_peak_distance(x, ctx):
    peaks, _ = _extrema(x)
    if peaks.size < 2:
        return 0.0, "no_peaks"
    return float(np.mean(np.diff(peaks)) / ctx["rate"]), None


@dataclass(frozen=True)
class Statistic:
    name: str
    fn: Callable
    description: str
    value_range: str


def _plain(fn):
    return lambda x, ctx: (float(fn(x)), None)


_STATS = [
    Statistic("mean", _plain(np.mean), "Mean value", "(-inf, inf), signal units"),
    Statistic("std", _plain(np.std), "Standard deviation", "[0, inf), signal units"),
    Statistic("rms", _plain(lambda x: math.sqrt(float(np.mean(x * x)))), "Root mean square", "[0, inf), signal units"),
    Statistic("min", _plain(np.min), "Minimum value", "(-inf, inf), signal units"),
    Statistic("max", _plain(np.max), "Maximum value", "(-inf, inf), signal units"),
    Statistic("median", _plain(np.median), "Median value", "(-inf, inf), signal units"),
    Statistic("zero_cross", _zero_cross, "Zero crossing count", "[0, n-1], count"),
    Statistic("magnitude", None, "Magnitude at a single frequency bin", "[0, inf)"),
    Statistic("energy", _plain(lambda x: float(np.sum(x * x))), "Energy (sum of squares)", "[0, inf)"),
    Statistic("skewness", _skewness, "Skewness", "(-inf, inf), ~0 for symmetric data"),
    Statistic("kurtosis", _kurtosis, "Excess kurtosis", "[-2, inf), 0 for Gaussian data"),
    Statistic("iqr", _plain(lambda x: np.percentile(x, 75) - np.percentile(x, 25)), "Interquartile range", "[0, inf)"),
    Statistic("entropy", _shannon_entropy, "Shannon entropy of normalised squared values", "[0, ln n], nats"),
    Statistic("crest_factor", _crest_factor, "Crest factor (peak over RMS)", "[1, sqrt(n)]"),
    Statistic("spectral_centroid", _centroid, "Spectral centroid", "[0, rate/2], Hz"),
    Statistic("spectral_spread", _spread, "Spectral spread", "[0, rate/2], Hz"),
    Statistic("spectral_rolloff", _rolloff, "Spectral roll-off (85%)", "[0, rate/2], Hz"),
    Statistic("spectral_flatness", _flatness, "Spectral flatness", "[0, 1]"),
    Statistic("dominant_frequency", _dominant_frequency, "Dominant frequency", "[0, rate/2], Hz"),
    Statistic("peak_count", _peak_count, "Peak count", "[0, n/2], count"),
    Statistic("mean_peak_height", _mean_peak_height, "Mean peak height", "(-inf, inf), signal units"),
    Statistic("mean_trough_depth", _mean_trough_depth, "Mean trough depth below the mean", "[0, inf), signal units"),
    Statistic("mean_peak_to_trough", _mean_peak_to_trough, "Mean peak-to-trough amplitude", "[0, inf), signal units"),
    Statistic("mean_peak_distance", _mean_peak_distance, "Mean inter-peak distance", "[0, window length], s"),
    Statistic("derivative", None, "Mean absolute change between consecutive windows", "[0, inf)"),
    Statistic("ratio", None, "Ratio of two level-2 features", "(-inf, inf)"),
]
STATISTICS = {s.name: s for s in _STATS}

TIME_BASICS = ("mean", "std", "rms", "min", "max", "median", "zero_cross")
DWT_LEVEL1 = ("energy", "std")
CARRIER_STATS = ("skewness", "kurtosis", "iqr", "entropy", "energy", "crest_factor", "std")
SPECTRAL_STATS = ("spectral_centroid", "spectral_spread", "spectral_rolloff", "spectral_flatness", "dominant_frequency")
PEAK_STATS = ("peak_count", "mean_peak_height", "mean_trough_depth", "mean_peak_to_trough", "mean_peak_distance")


def registry() -> dict[str, dict]:
    return {s.name: {"description": s.description, "value_range": s.value_range} for s in _STATS}


# --------------------------------------------------------------------------
# per-window evaluation


@dataclass(frozen=True)
class BaseFeature:
    """A statistic evaluated on one carrier of one window."""

    level: int
    carrier: str
    statistic: str
    bin_index: int = -1
    dwt_level: int = -1
    stft_scale: float = 1.0
    wavelet_slot: str = ""

    def key(self) -> tuple:
        return (
            self.level, KIND_RANK["base"], DOMAIN_OF[self.carrier], TRANSFORM_OF[self.carrier],
            self.stft_scale, self.wavelet_slot, self.dwt_level, self.bin_index,
            self.carrier, self.statistic,
        )

    def lineage(self) -> str:
        parts = [f"L{self.level}", self.carrier, self.statistic]
        if self.bin_index >= 0:
            parts.append(f"bin{self.bin_index}")
        if self.stft_scale != 1.0:
            parts.append(f"x{self.stft_scale:g}")
        if self.wavelet_slot:
            parts.append(f"{self.wavelet_slot}:d{self.dwt_level}")
        return "/".join(parts)


class WindowContext:
    def __init__(self, segment: np.ndarray, rate: float, n_fft: int, dwt_levels: int, wavelets: dict[str, str]):
        self.raw = segment
        self.rate = rate
        self.n_fft = n_fft
        self.dwt_levels = dwt_levels
        self.wavelets = wavelets  # slot -> concrete name
        self._details: dict[str, list[np.ndarray]] = {}

    @cached_property
    def spectrum(self) -> transforms.Spectrum:
        return transforms.stft_magnitude(self.raw, self.rate, self.n_fft)

    @cached_property
    def freqs(self) -> np.ndarray:
        return self.spectrum.frequencies

    def details(self, slot: str) -> list[np.ndarray]:
        if slot not in self._details:
            dec = transforms.dwt(self.raw, self.wavelets[slot], self.dwt_levels)
            self._details[slot] = dec.detail_coeffs
        return self._details[slot]

    def carrier(self, base: BaseFeature) -> np.ndarray:
        if base.carrier == "raw":
            return self.raw
        if base.carrier == "stft":
            return self.spectrum.magnitudes
        return self.details(base.wavelet_slot)[base.dwt_level - 1]

    def evaluate(self, base: BaseFeature) -> tuple[float, str | None]:
        x = self.carrier(base)
        if base.statistic == "magnitude":
            return float(x[base.bin_index]), None
        return STATISTICS[base.statistic].fn(x, {"freqs": self.freqs if base.carrier == "stft" else None, "rate": self.rate})


def aggregate(values: np.ndarray, how: str) -> float:
    v = np.ascontiguousarray(values, dtype=float)
    if how == "mean":
        return float(np.mean(v))
    if how == "min":
        return float(np.min(v))
    if how == "max":
        return float(np.max(v))
    if how == "std":
        return float(np.std(v))
    raise ValueError(f"unknown aggregation {how!r}")


def mean_abs_difference(values: np.ndarray) -> float:
    v = np.ascontiguousarray(values, dtype=float)
    if v.size < 2:
        return 0.0
    return float(np.mean(np.abs(np.diff(v))))


def _finite(value: float) -> tuple[float, bool]:
    return (value, False) if math.isfinite(value) else (0.0, True)


# --------------------------------------------------------------------------
# provenance


@dataclass
class ProvenanceRecord:
    feature_id: int
    level: int
    domain: str
    transform: str
    transform_params: dict
    location: dict
    statistic: str
    carrier: str | None = None
    window_index: int | str = ALL_WINDOWS
    aggregation: str | None = "mean"
    parent_feature_ids: list[int] = field(default_factory=list)
    kind: str = "base"
    lineage_key: str = ""
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ProvenanceRecord":
        return cls(**payload)

    @property
    def frequency_hz(self) -> float | None:
        if "frequency_hz" in self.location:
            return self.location["frequency_hz"]
        return self.location.get("pseudo_freq_hz")


@dataclass
class MappingTable:
    records: list[ProvenanceRecord]
    registry: dict[str, dict]
    rate: float
    wavelet: str | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self._by_id = {r.feature_id: r for r in self.records}

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, feature_id) -> bool:
        return feature_id in self._by_id

    def record(self, feature_id: int) -> ProvenanceRecord:
        try:
            return self._by_id[int(feature_id)]
        except KeyError:
            raise KeyError(f"feature id {feature_id} not in mapping table") from None

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "rate": self.rate,
            "wavelet": self.wavelet,
            "config": self.config,
            "registry": self.registry,
            "records": [r.to_dict() for r in self.records],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "MappingTable":
        return cls(
            [ProvenanceRecord.from_dict(r) for r in payload["records"]],
            payload["registry"],
            payload["rate"],
            payload.get("wavelet"),
            payload.get("config", {}),
        )


SELECTOR_FIELDS = ("domain", "transform", "statistic", "level", "carrier", "kind")


def record_matches(selector: dict, record: ProvenanceRecord) -> bool:
    """True when every field named in ``selector`` equals the record's value."""
    unknown = set(selector) - set(SELECTOR_FIELDS)
    if unknown:
        raise ValueError(f"unknown selector field(s): {', '.join(sorted(unknown))}")
    return all(getattr(record, name) == value for name, value in selector.items())


@dataclass
class FeatureMatrix:
    values: np.ndarray
    feature_ids: np.ndarray
    level_of: dict[int, int]
    instance_ids: np.ndarray

    @property
    def shape(self):
        return self.values.shape

    def row_index(self, ids: Iterable[int]) -> np.ndarray:
        pos = {int(i): k for k, i in enumerate(self.instance_ids)}
        return np.array([pos[int(i)] for i in ids], dtype=int)


# --------------------------------------------------------------------------
# pool construction


@dataclass
class _Column:
    """A pool column before id assignment."""

    key: tuple
    record: ProvenanceRecord
    values: np.ndarray  # per instance, dataset order
    flags: set = field(default_factory=set)


class FeatureFactory:
    """Builds feature pools for one dataset under one configuration.

    Window values are cached per (level, wavelet assignment), so pools for
    several folds or levels share the expensive transform work.
    ``counters`` records how many instances were processed per level.
    """

    def __init__(self, dataset: SignalDataset, config: FeatureConfig | None = None):
        self.dataset = dataset
        self.config = config or FeatureConfig()
        self.rate = dataset.sampling_rate_hz
        self.counters: Counter = Counter()
        self._windows: dict[float, dict[int, list[np.ndarray]]] = {}
        self._window_values: dict[tuple, dict[int, np.ndarray]] = {}
        self._selection: dict[tuple, transforms.WaveletSelection] = {}
        self._pairs: dict[tuple, list[tuple[tuple, tuple]]] = {}
        lengths = {inst.samples.size for inst in dataset.instances}
        self.window_length = self.config.window.window_length(self.rate, min(lengths))
        if self.window_length > min(lengths):
            raise ValueError("window longer than the shortest instance")
        self.dwt_levels = min(self.config.dwt_levels, transforms.max_dwt_level(self.window_length))
        if self.dwt_levels < 1:
            raise ValueError("window too short for a wavelet decomposition")

    # -- windowing -----------------------------------------------------------

    def plan_for_scale(self, scale: float) -> WindowPlan:
        base = self.window_length / self.rate
        return WindowPlan(base * scale, self.config.window.overlap_fraction)

    def n_fft_for_scale(self, scale: float) -> int:
        length = self.plan_for_scale(scale).window_length(self.rate)
        if scale == 1.0:
            length = self.window_length
            if self.config.n_fft is not None:
                return max(self.config.n_fft, length)
        return transforms.next_pow2(length)

    def windows(self, scale: float = 1.0) -> dict[int, list[np.ndarray]]:
        if scale not in self._windows:
            if scale == 1.0:
                plan = replace(self.config.window, window_size_s=self.window_length / self.rate)
            else:
                plan = self.plan_for_scale(scale)
            out = {}
            for inst in self.dataset.instances:
                segs = window_instance(inst, plan, self.rate)
                out[inst.instance_id] = [s.samples for s in segs]
            self._windows[scale] = out
        return self._windows[scale]

    def window_size_s(self, scale: float = 1.0) -> float:
        return self.window_length * scale / self.rate if scale != 1.0 else self.window_length / self.rate

    # -- wavelet choice ------------------------------------------------------

    def wavelet_slots(self, wavelet: str | None) -> dict[str, str]:
        if self.config.wavelet_sweep:
            return {name: name for name in self.config.wavelet_library}
        if wavelet is None:
            raise ValueError("a mother wavelet is required unless the wavelet sweep is enabled")
        return {SELECTED: wavelet}

    def select_wavelet(self, fold_plan: FoldPlan, fold: int) -> transforms.WaveletSelection:
        key = (id(fold_plan), fold)
        if key not in self._selection:
            labels = {inst.instance_id: inst.label for inst in self.dataset.instances}
            train = fold_plan.ids(fold, TRAIN)
            per_class = {0: [], 1: []}
            windows = self.windows()
            cap = self.config.wavelet_segments_per_class
            for label in (0, 1):
                members = [i for i in train if labels[i] == label]
                if len(members) > cap:
                    # evenly spaced over the sorted ids keeps this deterministic
                    members = [members[int(j)] for j in np.linspace(0, len(members) - 1, cap)]
                per_class[label] = [w for i in members for w in windows[i]]
            selection = transforms.rank_mother_wavelets(per_class, self.config.wavelet_library)
            logger.info("fold %d: mother wavelet %s via %s", fold, selection.name, selection.criterion)
            self._selection[key] = selection
        return self._selection[key]

    def fold_wavelet(self, fold_plan: FoldPlan, fold: int) -> str | None:
        if self.config.wavelet_sweep:
            return None
        return self.select_wavelet(fold_plan, fold).name

    # -- layouts -------------------------------------------------------------

    def level1_bases(self, slots: Sequence[str]) -> dict[float, list[BaseFeature]]:
        groups: dict[float, list[BaseFeature]] = {}
        main = [BaseFeature(1, "raw", s) for s in TIME_BASICS]
        for scale in self.scales():
            n_fft = self.n_fft_for_scale(scale)
            bins = [BaseFeature(1, "stft", "magnitude", bin_index=b, stft_scale=scale)
                    for b in range(0, n_fft // 2 + 1, self.config.bin_stride)]
            if scale == 1.0:
                main.extend(bins)
            else:
                groups[scale] = bins
        for slot in slots:
            for j in range(1, self.dwt_levels + 1):
                main.extend(BaseFeature(1, "dwt", s, dwt_level=j, wavelet_slot=slot) for s in DWT_LEVEL1)
        groups[1.0] = main
        return groups

    def level2_bases(self, slots: Sequence[str]) -> list[BaseFeature]:
        bases = [BaseFeature(2, "raw", s) for s in CARRIER_STATS]
        bases += [BaseFeature(2, "stft", s) for s in CARRIER_STATS]
        for slot in slots:
            for j in range(1, self.dwt_levels + 1):
                bases += [BaseFeature(2, "dwt", s, dwt_level=j, wavelet_slot=slot) for s in CARRIER_STATS]
        bases += [BaseFeature(2, "stft", s) for s in SPECTRAL_STATS]
        bases += [BaseFeature(2, "raw", s) for s in PEAK_STATS]
        return bases

    def scales(self) -> list[float]:
        scales = [1.0]
        shortest = min(inst.samples.size for inst in self.dataset.instances)
        for s in self.config.stft_window_scales:
            s = float(s)
            if s == 1.0 or s in scales:
                continue
            length = int(math.floor(self.window_length * s))
            if length < 4 or length > shortest:
                logger.warning("STFT window scale %g skipped (window of %d samples)", s, length)
                continue
            scales.append(s)
        return scales

    # -- per-window values ---------------------------------------------------

    def _per_window(self, bases: list[BaseFeature], scale: float, slots: dict[str, str], tag: str):
        """instance_id -> (n_windows x n_bases) matrix, plus per-base flag sets."""
        cache_key = (tag, scale, tuple(sorted(slots.items())))
        if cache_key in self._window_values:
            return self._window_values[cache_key]
        n_fft = self.n_fft_for_scale(scale)
        out: dict[int, np.ndarray] = {}
        flags = [set() for _ in bases]
        for iid, segments in self.windows(scale).items():
            mat = np.empty((len(segments), len(bases)))
            for w, seg in enumerate(segments):
                ctx = WindowContext(seg, self.rate, n_fft, self.dwt_levels, slots)
                for j, base in enumerate(bases):
                    value, flag = ctx.evaluate(base)
                    mat[w, j] = value
                    if flag:
                        flags[j].add(flag)
            out[iid] = mat
        self.counters[tag] += len(out)
        self._window_values[cache_key] = (out, flags)
        return out, flags

    # -- records -------------------------------------------------------------

    def _base_record(self, base: BaseFeature, slots: dict[str, str], aggregation, window_index) -> ProvenanceRecord:
        scale = base.stft_scale
        params: dict = {
            "window_size_s": self.window_size_s(scale),
            "overlap": self.config.window.overlap_fraction,
        }
        location: dict = {}
        if base.carrier == "stft":
            n_fft = self.n_fft_for_scale(scale)
            params.update(n_fft=n_fft, stft_scale=scale)
            if base.bin_index >= 0:
                location = {"bin_index": base.bin_index, "frequency_hz": base.bin_index * self.rate / n_fft}
            else:
                location = {"band_hz": [0.0, self.rate / 2.0]}
        elif base.carrier == "dwt":
            concrete = slots[base.wavelet_slot]
            params.update(wavelet=concrete, wavelet_slot=base.wavelet_slot, dwt_level=base.dwt_level)
            location = {
                "dwt_level": base.dwt_level,
                "pseudo_freq_hz": transforms.pseudo_frequency(concrete, base.dwt_level, self.rate),
            }
        return ProvenanceRecord(
            feature_id=-1,
            level=base.level,
            domain=DOMAIN_OF[base.carrier],
            transform=TRANSFORM_OF[base.carrier],
            transform_params=params,
            location=location,
            statistic=base.statistic,
            carrier=base.carrier,
            window_index=window_index,
            aggregation=aggregation,
            kind="base" if window_index == ALL_WINDOWS else "window",
            lineage_key=base.lineage(),
        )

    def _base_columns(self, level: int, slots: dict[str, str]) -> list[_Column]:
        ids = [inst.instance_id for inst in self.dataset.instances]
        aggs = AGGREGATIONS if self.config.multi_agg else ("mean",)
        columns: list[_Column] = []
        groups = self.level1_bases(list(slots)) if level == 1 else {1.0: self.level2_bases(list(slots))}
        for scale, bases in groups.items():
            per_window, flags = self._per_window(bases, scale, slots, f"level{level}")
            n_windows = {per_window[i].shape[0] for i in ids}
            for j, base in enumerate(bases):
                for rank, how in enumerate(aggs):
                    vals = np.array([aggregate(per_window[i][:, j], how) for i in ids])
                    key = base.key() + (rank, -1, ())
                    columns.append(_Column(key, self._base_record(base, slots, how, ALL_WINDOWS), vals, set(flags[j])))
                if self.config.keep_window_features and scale == 1.0 and len(n_windows) == 1:
                    (w_count,) = n_windows
                    if w_count > 1:
                        for w in range(w_count):
                            vals = np.array([per_window[i][w, j] for i in ids])
                            key = base.key()[:1] + (KIND_RANK["window"],) + base.key()[2:] + (0, w, ())
                            rec = self._base_record(base, slots, None, w)
                            columns.append(_Column(key, rec, vals, set(flags[j])))
        return columns

    def _derivative_columns(self, slots: dict[str, str], level2: list[_Column]) -> list[_Column]:
        ids = [inst.instance_id for inst in self.dataset.instances]
        bases = self.level2_bases(list(slots))
        per_window, _ = self._per_window(bases, 1.0, slots, "level2")
        parents = {c.key: c for c in level2 if c.record.aggregation == "mean" and c.record.kind == "base"}
        self.counters["level3"] += len(ids)
        columns = []
        for j, base in enumerate(bases):
            parent_key = base.key() + (0, -1, ())
            parent = parents[parent_key]
            vals = np.array([mean_abs_difference(per_window[i][:, j]) for i in ids])
            flags = set()
            if any(per_window[i].shape[0] < 2 for i in ids):
                flags.add("single_window")
            rec = ProvenanceRecord(
                feature_id=-1, level=3, domain=parent.record.domain, transform=parent.record.transform,
                transform_params=dict(parent.record.transform_params), location=dict(parent.record.location),
                statistic="derivative", carrier=parent.record.carrier, aggregation=None,
                kind="derivative", lineage_key=f"d({parent.record.lineage_key})",
            )
            key = (3, KIND_RANK["derivative"], "", "", 0.0, "", -1, -1, "", "derivative", 0, -1, (parent_key,))
            columns.append(_Column(key, rec, vals, flags))
            rec._parent_keys = [parent_key]  # resolved to ids after sorting
        return columns

    def _ratio_columns(self, pairs, by_key: dict[tuple, _Column]) -> list[_Column]:
        eps = self.config.ratio_eps
        columns = []
        for num_key, den_key in pairs:
            num, den = by_key[num_key], by_key[den_key]
            guard = np.abs(den.values) < eps
            with np.errstate(divide="ignore", invalid="ignore"):
                vals = np.where(guard, 0.0, num.values / np.where(guard, 1.0, den.values))
            flags = {"denominator_guard"} if guard.any() else set()
            rec = ProvenanceRecord(
                feature_id=-1, level=3, domain=num.record.domain, transform=num.record.transform,
                transform_params={}, location={}, statistic="ratio", carrier=None, aggregation=None,
                kind="ratio", lineage_key=f"({num.record.lineage_key})/({den.record.lineage_key})",
            )
            rec._parent_keys = [num_key, den_key]
            key = (3, KIND_RANK["ratio"], "", "", 0.0, "", -1, -1, "", "ratio", 0, -1, (num_key, den_key))
            columns.append(_Column(key, rec, vals, flags))
        return columns

    def _level2_for(self, slots):
        return self._cached_base_columns(2, slots)

    def _cached_base_columns(self, level: int, slots: dict[str, str]) -> list[_Column]:
        key = ("columns", level, tuple(sorted(slots.items())))
        if key not in self._window_values:
            self._window_values[key] = self._base_columns(level, slots)
        return self._window_values[key]

    def ratio_pairs(self, fold_plan: FoldPlan) -> list[tuple[tuple, tuple]]:
        """Union over folds of ordered pairs among each fold's top-R level-2 features."""
        cache_key = id(fold_plan)
        if cache_key in self._pairs:
            return self._pairs[cache_key]
        labels = self.dataset.labels
        ids = [inst.instance_id for inst in self.dataset.instances]
        pos = {iid: k for k, iid in enumerate(ids)}
        union: set[tuple[tuple, tuple]] = set()
        for fold in range(fold_plan.n_folds):
            slots = self.wavelet_slots(self.fold_wavelet(fold_plan, fold))
            cols = sorted(self._level2_for(slots), key=lambda c: c.key)
            train = np.array([pos[i] for i in fold_plan.ids(fold, TRAIN)])
            y = labels[train]
            scored = []
            for c in cols:
                codes = discretize(c.values[train], AUTO)
                scored.append((-mutual_information(codes, y), c.key))
            top = [k for _, k in sorted(scored, key=lambda t: t[0])[: self.config.ratio_top_r]]
            union.update((a, b) for a in top for b in top if a != b)
        pairs = sorted(union)
        self._pairs[cache_key] = pairs
        return pairs

    # -- assembly ------------------------------------------------------------

    def build(self, fold_plan: FoldPlan | None, fold: int | None, level: int, wavelet: str | None = None):
        """Pool of all levels <= ``level``; returns (FeatureMatrix, MappingTable)."""
        if level not in (1, 2, 3):
            raise ValueError("level must be 1, 2 or 3")
        if wavelet is None and not self.config.wavelet_sweep:
            if fold_plan is None:
                raise ValueError("need a fold plan to select the mother wavelet")
            wavelet = self.fold_wavelet(fold_plan, fold)
        slots = self.wavelet_slots(wavelet)
        columns = list(self._cached_base_columns(1, slots))
        if level >= 2:
            level2 = self._level2_for(slots)
            columns += level2
        if level >= 3:
            if fold_plan is None:
                raise ValueError("level 3 ratios need a fold plan")
            n_windows = {len(w) for w in self.windows().values()}
            if max(n_windows) >= 2:
                columns += self._derivative_columns(slots, level2)
            else:
                self.counters["level3"] += len(self.dataset)
            by_key = {c.key: c for c in level2}
            columns += self._ratio_columns(self.ratio_pairs(fold_plan), by_key)
        return self._assemble(columns, wavelet)

    def _assemble(self, columns: list[_Column], wavelet: str | None):
        columns = sorted(columns, key=lambda c: c.key)
        id_of = {c.key: i for i, c in enumerate(columns)}
        values = np.empty((len(self.dataset), len(columns)))
        records = []
        for i, c in enumerate(columns):
            rec = copy.copy(c.record)
            rec.feature_id = i
            parent_keys = getattr(rec, "_parent_keys", None)
            if parent_keys is not None:
                rec.parent_feature_ids = [id_of[k] for k in parent_keys]
                del rec._parent_keys
            vals = c.values.copy()
            bad = ~np.isfinite(vals)
            flags = set(c.flags)
            if bad.any():
                vals[bad] = 0.0
                flags.add("nonfinite_replaced")
            rec.flags = sorted(flags)
            values[:, i] = vals
            records.append(rec)
        matrix = FeatureMatrix(
            values=values,
            feature_ids=np.arange(len(columns)),
            level_of={r.feature_id: r.level for r in records},
            instance_ids=np.array([inst.instance_id for inst in self.dataset.instances]),
        )
        table = MappingTable(records, registry(), self.rate, wavelet, self.config.to_dict())
        return matrix, table


def build_feature_pool(dataset: SignalDataset, fold_plan: FoldPlan, fold: int, level: int, config: FeatureConfig | None = None, factory: FeatureFactory | None = None):
    factory = factory or FeatureFactory(dataset, config)
    return factory.build(fold_plan, fold, level)


# --------------------------------------------------------------------------
# standalone operations on a single segment / window matrix


def level1_features(segment, rate: float, wavelet_name: str, config: FeatureConfig | None = None):
    """Level-1 values and records for one segment (window index 0)."""
    return _single_segment_features(segment, rate, wavelet_name, config, level=1)


def level2_features(segment, rate: float, wavelet_name: str, config: FeatureConfig | None = None):
    return _single_segment_features(segment, rate, wavelet_name, config, level=2)


def _single_segment_features(segment, rate, wavelet_name, config, level):
    from .dataset_io import SignalInstance

    config = config or FeatureConfig()
    x = np.asarray(segment, dtype=float)
    cfg = replace(config, window=WindowPlan(None, 0.0), stft_window_scales=(1.0,), multi_agg=False, keep_window_features=False)
    ds = SignalDataset([SignalInstance(x, 0, 0), SignalInstance(x, 1, 1)], rate, "segment")
    factory = FeatureFactory(ds, cfg)
    slots = factory.wavelet_slots(wavelet_name)
    cols = factory._base_columns(level, slots)
    matrix, table = factory._assemble(cols, wavelet_name)
    for rec in table.records:
        rec.window_index = 0
    return matrix.values[0], table.records


def level3_features(level2_per_window: np.ndarray, level2_records: Sequence[ProvenanceRecord], relevance=None, config: FeatureConfig | None = None):
    """Derivatives (windows x stats matrix) and ratios of the top-R columns.

    ``relevance`` ranks columns for the ratio stage; without it every column
    is a ratio candidate up to R. Ratios use the window-mean of each column.
    """
    config = config or FeatureConfig()
    W = np.atleast_2d(np.asarray(level2_per_window, dtype=float))
    values, records = [], []
    if W.shape[0] >= 2:
        for j, parent in enumerate(level2_records):
            values.append(mean_abs_difference(W[:, j]))
            records.append(ProvenanceRecord(
                feature_id=len(records), level=3, domain=parent.domain, transform=parent.transform,
                transform_params=dict(parent.transform_params), location=dict(parent.location),
                statistic="derivative", carrier=parent.carrier, aggregation=None,
                parent_feature_ids=[parent.feature_id], kind="derivative",
                lineage_key=f"d({parent.lineage_key})",
            ))
    means = W.mean(axis=0)
    order = list(range(W.shape[1]))
    if relevance is not None:
        order = sorted(order, key=lambda j: (-relevance[j], j))
    top = order[: config.ratio_top_r]
    for a in top:
        for b in top:
            if a == b:
                continue
            den = means[b]
            flagged = abs(den) < config.ratio_eps
            values.append(0.0 if flagged else float(means[a] / den))
            records.append(ProvenanceRecord(
                feature_id=len(records), level=3, domain=level2_records[a].domain,
                transform=level2_records[a].transform, transform_params={}, location={},
                statistic="ratio", carrier=None, aggregation=None,
                parent_feature_ids=[level2_records[a].feature_id, level2_records[b].feature_id],
                kind="ratio", flags=["denominator_guard"] if flagged else [],
                lineage_key=f"({level2_records[a].lineage_key})/({level2_records[b].lineage_key})",
            ))
    return np.array(values), records


def aggregate_windows(per_window: dict[int, np.ndarray], records: Sequence[ProvenanceRecord], multi_agg: bool = False):
    """Collapse instance -> (windows x features) matrices to one row per instance.

    Returns (instance ids, matrix, records); with ``multi_agg`` each input
    feature yields mean/min/max/std columns sharing a lineage key.
    """
    aggs = AGGREGATIONS if multi_agg else ("mean",)
    ids = sorted(per_window)
    rows = []
    for iid in ids:
        mat = np.atleast_2d(per_window[iid])
        rows.append([aggregate(mat[:, j], how) for j in range(mat.shape[1]) for how in aggs])
    out_records = []
    for rec in records:
        lineage = rec.lineage_key or f"feature{rec.feature_id}"
        for how in aggs:
            new = ProvenanceRecord(**{**rec.to_dict(), "window_index": ALL_WINDOWS, "aggregation": how, "lineage_key": lineage})
            new.feature_id = len(out_records)
            out_records.append(new)
    return np.array(ids), np.array(rows, dtype=float), out_records


# --------------------------------------------------------------------------
# lineage replay


def _base_from_record(rec: ProvenanceRecord) -> BaseFeature:
    p = rec.transform_params
    return BaseFeature(
        level=rec.level,
        carrier=rec.carrier,
        statistic=rec.statistic,
        bin_index=rec.location.get("bin_index", -1),
        dwt_level=p.get("dwt_level", -1),
        stft_scale=p.get("stft_scale", 1.0),
        wavelet_slot=p.get("wavelet_slot", ""),
    )


def replay_feature(feature_id: int, samples, table: MappingTable) -> float:
    """Recompute one feature value for one signal using only its provenance."""
    rec = table.record(feature_id)
    dwt_levels = table.config.get("dwt_levels")
    if rec.kind == "ratio":
        a, b = rec.parent_feature_ids
        num = replay_feature(a, samples, table)
        den = replay_feature(b, samples, table)
        eps = table.config.get("ratio_eps", 1e-12)
        value = 0.0 if abs(den) < eps else num / den
    elif rec.kind == "derivative":
        parent = table.record(rec.parent_feature_ids[0])
        per_window = _replay_base_windows(parent, samples, table, dwt_levels)
        value = mean_abs_difference(per_window)
    else:
        per_window = _replay_base_windows(rec, samples, table, dwt_levels)
        if rec.window_index == ALL_WINDOWS:
            value = aggregate(per_window, rec.aggregation)
        else:
            value = float(per_window[int(rec.window_index)])
    return _finite(value)[0]


def _replay_base_windows(rec, samples, table, dwt_levels):
    base = _base_from_record(rec)
    p = rec.transform_params
    plan = WindowPlan(p["window_size_s"], p["overlap"])
    from .dataset_io import SignalInstance

    segs = window_instance(SignalInstance(np.asarray(samples, float), 0, 0), plan, table.rate)
    n_fft = p.get("n_fft") or transforms.next_pow2(segs[0].samples.size)
    if base.carrier == "stft" and base.stft_scale == 1.0:
        n_fft = p["n_fft"]
    levels = min(dwt_levels or 5, transforms.max_dwt_level(segs[0].samples.size))
    slots = {base.wavelet_slot: p["wavelet"]} if base.carrier == "dwt" else {}
    out = []
    for seg in segs:
        ctx = WindowContext(seg.samples, table.rate, n_fft, levels, slots)
        out.append(ctx.evaluate(base)[0])
    return np.array(out)


def write_mapping_tables(path, tables: dict[str, MappingTable], fold_wavelets: dict[int, str | None], seed: int, level: int) -> None:
    """One JSON file; records are stored once per distinct mother wavelet."""
    payload = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "level": level,
        "fold_wavelets": {str(k): v for k, v in sorted(fold_wavelets.items())},
        "tables": {str(name): t.to_dict() for name, t in sorted(tables.items(), key=lambda kv: str(kv[0]))},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_mapping_tables(path) -> tuple[dict[str, MappingTable], dict[int, str | None], dict]:
    with open(path) as fh:
        payload = json.load(fh)
    tables = {name: MappingTable.from_dict(t) for name, t in payload["tables"].items()}
    fold_wavelets = {int(k): v for k, v in payload["fold_wavelets"].items()}
    return tables, fold_wavelets, payload
