"""Readable descriptions of recommended features: provenance text, merging of
window-wise duplicates, per-class value ranges, harmonic matching against
known fundamental frequencies and expert weighting for the next run.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .features import ALL_WINDOWS, MappingTable, ProvenanceRecord, record_matches

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_MAX_N = 8
DEFAULT_TOLERANCE = 0.025
WEIGHT_SELECTOR_FIELDS = ("domain", "transform", "statistic", "level")

GROUP_HEADERS = {"none": "Time domain", "stft": "STFT", "dwt": "DWT"}
CARRIER_PHRASE = {
    "raw": "the raw signal",
    "stft": "STFT coefficients",
    "dwt": "DWT coefficients",
}
WINDOWED_PHRASE = {
    "raw": "the windowed raw signal",
    "stft": "windowed short-time Fourier transform (STFT) coefficients",
    "dwt": "windowed discrete wavelet transform (DWT) coefficients",
}
NOUNS = {
    "mean": "mean",
    "std": "standard deviation",
    "rms": "root mean square",
    "min": "minimum",
    "max": "maximum",
    "median": "median",
    "zero_cross": "zero crossing count",
    "energy": "energy",
    "skewness": "skewness",
    "kurtosis": "kurtosis",
    "iqr": "interquartile range",
    "entropy": "entropy",
    "crest_factor": "crest factor",
    "spectral_centroid": "spectral centroid",
    "spectral_spread": "spectral spread",
    "spectral_rolloff": "spectral roll-off",
    "spectral_flatness": "spectral flatness",
    "dominant_frequency": "dominant frequency",
    "peak_count": "peak count",
    "mean_peak_height": "mean peak height",
    "mean_trough_depth": "mean trough depth",
    "mean_peak_to_trough": "mean peak-to-trough amplitude",
    "mean_peak_distance": "mean inter-peak distance",
}
STATISTIC_OF_NOUN = {v: k for k, v in NOUNS.items()}


class InterpretationError(ValueError):
    pass


# --------------------------------------------------------------------------
# descriptions


@dataclass
class Description:
    feature_id: int
    header: str
    text: str
    detail: str | None
    provenance: dict

    def render(self) -> str:
        return self.text if self.detail is None else f"{self.text} ({self.detail})"


def _hz(value: float) -> str:
    return f"{value:.4f}"


def _window_suffix(rec: ProvenanceRecord) -> str:
    return "" if rec.window_index == ALL_WINDOWS else f", window {rec.window_index}"


def _base_text(rec: ProvenanceRecord) -> tuple[str, str | None]:
    if rec.carrier == "stft" and rec.statistic == "magnitude":
        return f"Frequency: {_hz(rec.location['frequency_hz'])} Hz", None
    noun = NOUNS[rec.statistic]
    text = f"{noun[0].upper()}{noun[1:]} of {CARRIER_PHRASE[rec.carrier]}"
    if rec.carrier == "dwt":
        return text, f"DWT Frequency: {_hz(rec.location['pseudo_freq_hz'])} Hz, level {rec.location['dwt_level']}"
    return text, None


def describe(feature_id: int, table: MappingTable) -> Description:
    """Fixed template per record kind; the text parses back with :func:`parse_description`."""
    try:
        rec = table.record(feature_id)
    except KeyError as exc:
        raise InterpretationError(str(exc)) from None
    header = "Level 3" if rec.kind == "ratio" else GROUP_HEADERS[rec.transform]
    if rec.kind == "ratio":
        a, b = (describe(p, table) for p in rec.parent_feature_ids)
        text, detail = f"Ratio of [{a.render()}] to [{b.render()}]", None
    elif rec.kind == "derivative":
        parent = table.record(rec.parent_feature_ids[0])
        if parent.carrier == "stft" and parent.statistic == "magnitude":
            text = f"Difference of magnitude values of {WINDOWED_PHRASE['stft']}"
            detail = f"Frequency: {_hz(parent.location['frequency_hz'])} Hz"
        else:
            text = f"Difference of {NOUNS[parent.statistic]} values of {WINDOWED_PHRASE[parent.carrier]}"
            detail = _base_text(parent)[1]
    else:
        text, detail = _base_text(rec)
        text += _window_suffix(rec)
    provenance = rec.to_dict()
    provenance["description_detail"] = detail
    return Description(int(rec.feature_id), header, text, detail, provenance)


_FREQ = r"(?P<hz>[0-9.]+) Hz"


def parse_description(header: str, text: str, detail: str | None = None) -> dict:
    """Structured fields recovered from a rendered description."""
    out: dict = {}
    m = re.fullmatch(r"Ratio of \[(?P<a>.*)\] to \[(?P<b>.*)\]", text)
    if m:
        return {"kind": "ratio", "parts": [_parse_rendered(m.group("a")), _parse_rendered(m.group("b"))]}
    m = re.fullmatch(r"Difference of (?P<noun>.+?) values of (the )?windowed (?P<what>.+)", text)
    if m:
        out["kind"] = "derivative"
        noun = m.group("noun")
        out["statistic"] = "magnitude" if noun == "magnitude" else STATISTIC_OF_NOUN[noun]
        what = m.group("what")
        out["transform"] = "stft" if "STFT" in what else "dwt" if "DWT" in what else "none"
    else:
        m = re.fullmatch(r"Frequency: " + _FREQ + r"(, window (?P<w>\d+))?", text)
        if m:
            out.update(kind="base", transform="stft", statistic="magnitude", frequency_hz=float(m.group("hz")))
        else:
            m = re.fullmatch(r"(?P<noun>.+?) of (?P<what>the raw signal|STFT coefficients|DWT coefficients)(, window (?P<w>\d+))?", text)
            if not m:
                raise InterpretationError(f"unrecognised description {text!r}")
            noun = m.group("noun")
            out["statistic"] = STATISTIC_OF_NOUN[noun[0].lower() + noun[1:]]
            out["transform"] = {"the raw signal": "none", "STFT coefficients": "stft", "DWT coefficients": "dwt"}[m.group("what")]
            out["kind"] = "base"
        if m.group("w") is not None:
            out["kind"] = "window"
            out["window_index"] = int(m.group("w"))
    if detail:
        f = re.search(r"Frequency: " + _FREQ, detail)
        if f:
            key = "pseudo_freq_hz" if detail.startswith("DWT") else "frequency_hz"
            out[key] = float(f.group("hz"))
        lv = re.search(r"level (\d+)", detail)
        if lv:
            out["dwt_level"] = int(lv.group(1))
    if header not in ("Level 3", *GROUP_HEADERS.values()):
        raise InterpretationError(f"unknown group header {header!r}")
    return out


def _parse_rendered(rendered: str) -> dict:
    m = re.fullmatch(r"(?P<text>.*?) \((?P<detail>(DWT )?Frequency: .*)\)", rendered)
    if m:
        return parse_description("Level 3", m.group("text"), m.group("detail"))
    return parse_description("Level 3", rendered)


# --------------------------------------------------------------------------
# window compression


@dataclass
class FeatureGroup:
    feature_ids: list[int]
    windows: list[int | str]

    @property
    def representative(self) -> int:
        return self.feature_ids[0]


def _merge_key(rec: ProvenanceRecord) -> str:
    d = rec.to_dict()
    for name in ("feature_id", "window_index", "flags"):
        d.pop(name)
    return json.dumps(d, sort_keys=True, default=str)


def compress_across_windows(feature_ids: Iterable[int], table: MappingTable) -> list[FeatureGroup]:
    """Merge ids whose provenance differs only by window index.

    Derivatives describe change over windows and are always reported alone.
    Groups come back ordered by their smallest id.
    """
    groups: dict[str, FeatureGroup] = {}
    singles: list[FeatureGroup] = []
    for fid in sorted(set(int(f) for f in feature_ids)):
        rec = table.record(fid)
        if rec.kind == "derivative":
            singles.append(FeatureGroup([fid], [rec.window_index]))
            continue
        key = _merge_key(rec)
        if key in groups:
            groups[key].feature_ids.append(fid)
            groups[key].windows.append(rec.window_index)
        else:
            groups[key] = FeatureGroup([fid], [rec.window_index])
    return sorted([*groups.values(), *singles], key=lambda g: g.representative)


# --------------------------------------------------------------------------
# harmonics


@dataclass(frozen=True)
class FundamentalFrequency:
    name: str
    hz: float

    def __post_init__(self):
        if not self.hz > 0:
            raise InterpretationError(f"fundamental {self.name!r} must have a positive frequency")


@dataclass(frozen=True)
class HarmonicMatch:
    feature_id: int | None
    feature_hz: float
    fundamental: str
    harmonic_n: int
    relative_deviation: float

    def to_dict(self) -> dict:
        return {
            "feature_id": self.feature_id,
            "feature_hz": self.feature_hz,
            "fundamental": self.fundamental,
            "harmonic_n": self.harmonic_n,
            "relative_deviation": self.relative_deviation,
        }


def load_fundamentals(path) -> list[FundamentalFrequency]:
    with open(path) as fh:
        payload = json.load(fh)
    items = [FundamentalFrequency(str(e["name"]), float(e["hz"])) for e in payload]
    names = [f.name for f in items]
    if len(set(names)) != len(names):
        raise InterpretationError("fundamental names must be unique")
    return items


def match_harmonics(feature_hz: float, fundamentals: Sequence[FundamentalFrequency],
                    max_n: int = DEFAULT_MAX_N, tolerance: float = DEFAULT_TOLERANCE,
                    feature_id: int | None = None) -> list[HarmonicMatch]:
    """Every (fundamental, n <= max_n) within ``tolerance``, closest first."""
    if not 0 < tolerance <= 0.1:
        raise InterpretationError("tolerance must lie in (0, 0.1]")
    if max_n < 1:
        raise InterpretationError("max_n must be at least 1")
    found = []
    for order, f0 in enumerate(fundamentals):
        for n in range(1, max_n + 1):
            target = n * f0.hz
            dev = abs(feature_hz - target) / target
            if dev <= tolerance:
                found.append((dev, order, n, HarmonicMatch(feature_id, float(feature_hz), f0.name, n, dev)))
    return [m for *_, m in sorted(found, key=lambda t: t[:3])]


# --------------------------------------------------------------------------
# value ranges


@dataclass(frozen=True)
class FiveNumber:
    min: float
    q1: float
    median: float
    q3: float
    max: float

    def as_tuple(self) -> tuple[float, ...]:
        return (self.min, self.q1, self.median, self.q3, self.max)


def five_number(values) -> FiveNumber:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise InterpretationError("empty class: no values to summarise")
    q = np.percentile(v, [0, 25, 50, 75, 100])
    return FiveNumber(*(float(x) for x in q))


def value_ranges(feature_id: int, train_values_by_class: Mapping[int, Sequence[float]]) -> dict[int, FiveNumber]:
    out = {}
    for label in sorted(train_values_by_class):
        values = train_values_by_class[label]
        if len(values) == 0:
            raise InterpretationError(f"feature {feature_id}: class {label} has no Train values")
        out[label] = five_number(values)
    return out


# --------------------------------------------------------------------------
# expert weights


@dataclass(frozen=True)
class WeightEntry:
    selector: dict
    weight: float

    def to_dict(self) -> dict:
        return {"selector": dict(self.selector), "weight": self.weight}


@dataclass
class ExpertWeights:
    entries: list[WeightEntry] = field(default_factory=list)

    def __post_init__(self):
        for e in self.entries:
            if not isinstance(e.selector, dict) or not e.selector:
                raise InterpretationError("selector must be a non-empty object")
            bad = set(e.selector) - set(WEIGHT_SELECTOR_FIELDS)
            if bad:
                raise InterpretationError(f"malformed selector: unknown field(s) {', '.join(sorted(bad))}")
            if not 0 < e.weight <= 10:
                raise InterpretationError(f"weight {e.weight} outside (0, 10]")

    @classmethod
    def from_list(cls, payload: list) -> "ExpertWeights":
        try:
            return cls([WeightEntry(dict(p["selector"]), float(p["weight"])) for p in payload])
        except (KeyError, TypeError, ValueError) as exc:
            raise InterpretationError(f"malformed weights entry: {exc}") from None

    @classmethod
    def load(cls, path) -> "ExpertWeights":
        with open(path) as fh:
            return cls.from_list(json.load(fh))

    def to_list(self) -> list[dict]:
        return [e.to_dict() for e in self.entries]

    def unmatched(self, table: MappingTable) -> list[dict]:
        return [e.selector for e in self.entries if not any(record_matches(e.selector, r) for r in table.records)]


def _selects(selector: dict, transform: str, domain: str) -> bool:
    return selector.get("transform", transform) == transform and selector.get("domain", domain) == domain


def apply_expert_weights(weights: ExpertWeights, config, table: MappingTable | None = None):
    """Return a copy of ``config`` carrying the non-neutral weights.

    Families weighted above 1 also widen generation on the next run: STFT
    selectors add half and double window lengths, DWT selectors switch on the
    sweep over every library wavelet.
    """
    if table is not None:
        missing = weights.unmatched(table)
        if missing:
            logger.warning("weight selectors matching no feature: %s", json.dumps(missing, sort_keys=True))
    active = [e for e in weights.entries if e.weight != 1.0]
    if not active:
        return config
    features = config.features
    scales = set(features.stft_window_scales)
    sweep = features.wavelet_sweep
    for e in active:
        if e.weight <= 1:
            continue
        if _selects(e.selector, "stft", "frequency"):
            scales.update({0.5, 2.0})
        if _selects(e.selector, "dwt", "wavelet"):
            sweep = True
    features = replace(features, stft_window_scales=tuple(sorted(scales)), wavelet_sweep=sweep)
    return replace(config, expert_weights=[*config.expert_weights, *(e.to_dict() for e in active)], features=features)


# --------------------------------------------------------------------------
# report


@dataclass
class FeatureEntry:
    group: FeatureGroup
    description: Description
    ranges: dict[int, FiveNumber]
    harmonics: list[HarmonicMatch]
    member_of: list[str]

    def to_dict(self) -> dict:
        return {
            "feature_ids": self.group.feature_ids,
            "windows": self.group.windows,
            "member_of": self.member_of,
            "header": self.description.header,
            "description": self.description.text,
            "detail": self.description.detail,
            "provenance": self.description.provenance,
            "train_ranges": {str(k): list(v.as_tuple()) for k, v in self.ranges.items()},
            "harmonic_matches": [m.to_dict() for m in self.harmonics],
        }


@dataclass
class InterpretationReport:
    entries: list[FeatureEntry]
    fundamentals: list[FundamentalFrequency] | None
    unmatched_fundamentals: list[str]
    metadata: dict

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "metadata": self.metadata,
            "features": [e.to_dict() for e in self.entries],
            "fundamentals": None if self.fundamentals is None else [{"name": f.name, "hz": f.hz} for f in self.fundamentals],
            "fundamentals_without_match": self.unmatched_fundamentals,
        }

    def to_markdown(self) -> str:
        meta = self.metadata
        lines = [f"# Feature interpretation (seed {meta.get('seed')}, level {meta.get('level_reached')})", ""]
        for name in ("Fe1", "Fe2"):
            picked = [e for e in self.entries if name in e.member_of]
            lines += [f"## {name}", ""]
            lines += ["| # | Group | Feature | Class 0 Train range | Class 1 Train range | Harmonic matches |",
                      "|---|---|---|---|---|---|"]
            for i, e in enumerate(picked, 1):
                ranges = [
                    " / ".join(f"{x:.4g}" for x in e.ranges[c].as_tuple()) if c in e.ranges else "" for c in (0, 1)
                ]
                harm = "; ".join(
                    f"consistent with {m.fundamental} n={m.harmonic_n} (dev {m.relative_deviation:.5f})"
                    for m in e.harmonics
                ) if self.fundamentals is not None else ""
                windows = "" if e.group.windows == [ALL_WINDOWS] else f" [windows {', '.join(map(str, e.group.windows))}]"
                lines.append(f"| {i} | {e.description.header} | {e.description.render()}{windows} | {ranges[0]} | {ranges[1]} | {harm} |")
            lines.append("")
        if self.fundamentals is not None:
            lines += ["## Fundamentals without a matching feature", ""]
            lines += [f"- {n}" for n in self.unmatched_fundamentals] or ["- none"]
            lines.append("")
        return "\n".join(lines)


def feature_hz(rec: ProvenanceRecord) -> float | None:
    return rec.frequency_hz


def build_report(fe1: Sequence[int], fe2: Sequence[int], table: MappingTable,
                 train_values: Mapping[int, Mapping[int, Sequence[float]]],
                 fundamentals: Sequence[FundamentalFrequency] | None = None,
                 max_n: int = DEFAULT_MAX_N, tolerance: float = DEFAULT_TOLERANCE,
                 metadata: dict | None = None) -> InterpretationReport:
    """``train_values[feature_id][label]`` holds Train-only values of each feature."""
    groups = compress_across_windows([*fe1, *fe2], table)
    entries = []
    matched_names: set[str] = set()
    for group in groups:
        fid = group.representative
        rec = table.record(fid)
        harmonics: list[HarmonicMatch] = []
        if fundamentals is not None and feature_hz(rec) is not None and rec.kind != "ratio":
            harmonics = match_harmonics(feature_hz(rec), fundamentals, max_n, tolerance, fid)
            matched_names.update(m.fundamental for m in harmonics)
        member_of = [name for name, ids in (("Fe1", fe1), ("Fe2", fe2)) if set(group.feature_ids) & set(ids)]
        entries.append(FeatureEntry(group, describe(fid, table), value_ranges(fid, train_values[fid]), harmonics, member_of))
    unmatched = [] if fundamentals is None else [f.name for f in fundamentals if f.name not in matched_names]
    return InterpretationReport(entries, None if fundamentals is None else list(fundamentals), unmatched, metadata or {})


def write_report(report: InterpretationReport, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    js = out_dir / "interpretation.json"
    md = out_dir / "interpretation.md"
    js.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    md.write_text(report.to_markdown())
    return js, md
