"""Loading, validation, windowing and synthesis of labeled 1-D signal datasets.

Canonical on-disk layout is a wide CSV (``label,s0,s1,...``) next to a JSON
sidecar carrying the sampling rate. Long signals can instead be described by a
``manifest.json`` that points at one single-column CSV per instance.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class DatasetError(ValueError):
    """Raised for malformed, inconsistent or unusable dataset inputs."""


@dataclass(frozen=True)
class SignalInstance:
    samples: np.ndarray
    label: int
    instance_id: int


@dataclass
class SignalDataset:
    instances: list[SignalInstance]
    sampling_rate_hz: float
    name: str = "dataset"

    def __post_init__(self):
        validate_dataset(self)

    @property
    def labels(self) -> np.ndarray:
        return np.array([inst.label for inst in self.instances], dtype=int)

    @property
    def ids(self) -> np.ndarray:
        return np.array([inst.instance_id for inst in self.instances], dtype=int)

    def class_counts(self) -> dict[int, int]:
        labels = self.labels
        return {c: int(np.sum(labels == c)) for c in (0, 1)}

    def by_id(self) -> dict[int, SignalInstance]:
        return {inst.instance_id: inst for inst in self.instances}

    def __len__(self) -> int:
        return len(self.instances)


@dataclass(frozen=True)
class WindowPlan:
    """Window size in seconds; ``None`` means one window spanning the instance."""

    window_size_s: float | None = None
    overlap_fraction: float = 0.0

    def __post_init__(self):
        if self.window_size_s is not None and not self.window_size_s > 0:
            raise DatasetError("window_size_s must be positive")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise DatasetError("overlap_fraction must lie in [0, 1)")

    def window_length(self, rate: float, n_samples: int | None = None) -> int:
        if self.window_size_s is None:
            if n_samples is None:
                raise DatasetError("full-instance window needs the instance length")
            length = n_samples
        else:
            length = int(math.floor(self.window_size_s * rate + 1e-9))
        if length < 4:
            raise DatasetError(f"window of {length} samples is shorter than 4")
        return length

    def hop(self, window_length: int) -> int:
        hop = int(math.floor(window_length * (1.0 - self.overlap_fraction) + 1e-9))
        if hop < 1:
            raise DatasetError("window hop is below one sample")
        return hop


@dataclass(frozen=True)
class WindowedSegment:
    samples: np.ndarray
    instance_id: int
    window_index: int
    start: int


@dataclass
class SynthesisSpec:
    """Per-class tone mixtures plus white Gaussian noise.

    ``tones`` maps a class id to a list of ``(frequency_hz, amplitude)`` pairs.
    """

    tones: dict[int, list[tuple[float, float]]]
    noise_sigma: float = 0.1
    instances_per_class: int = 100
    n_samples: int = 1024
    sampling_rate_hz: float = 1000.0
    random_phase: bool = True
    name: str = "synthetic"

    @classmethod
    def from_dict(cls, payload: dict) -> "SynthesisSpec":
        tones = {
            int(label): [(float(f), float(a)) for f, a in pairs]
            for label, pairs in payload["tones"].items()
        }
        kwargs = {k: v for k, v in payload.items() if k != "tones"}
        return cls(tones=tones, **kwargs)

    def to_dict(self) -> dict:
        return {
            "tones": {str(k): [list(p) for p in v] for k, v in sorted(self.tones.items())},
            "noise_sigma": self.noise_sigma,
            "instances_per_class": self.instances_per_class,
            "n_samples": self.n_samples,
            "sampling_rate_hz": self.sampling_rate_hz,
            "random_phase": self.random_phase,
            "name": self.name,
        }


def validate_dataset(dataset: SignalDataset) -> None:
    if not dataset.instances:
        raise DatasetError("empty dataset")
    if not (np.isfinite(dataset.sampling_rate_hz) and dataset.sampling_rate_hz > 0):
        raise DatasetError("sampling_rate_hz must be a positive finite number")
    seen: set[int] = set()
    for inst in dataset.instances:
        if inst.instance_id in seen:
            raise DatasetError(f"duplicate instance_id {inst.instance_id}")
        seen.add(inst.instance_id)
        if inst.label not in (0, 1):
            raise DatasetError(
                f"instance {inst.instance_id}: label {inst.label!r} is not binary (0/1)"
            )
        if inst.samples.ndim != 1 or inst.samples.size < 2:
            raise DatasetError(f"instance {inst.instance_id}: needs at least 2 samples")
        if not np.all(np.isfinite(inst.samples)):
            raise DatasetError(f"instance {inst.instance_id}: non-finite sample values")
    counts = dataset.class_counts()
    for label, count in counts.items():
        if count == 0:
            raise DatasetError(f"empty class: no instances with label {label}")


def _parse_label(raw: str, where: str) -> int:
    try:
        value = float(raw)
    except ValueError as exc:
        raise DatasetError(f"{where}: label {raw!r} is not numeric") from exc
    if value not in (0.0, 1.0):
        raise DatasetError(f"{where}: non-binary label {raw!r}")
    return int(value)


def _read_sidecar(path: Path) -> dict:
    if not path.exists():
        raise DatasetError(f"missing sidecar {path.name} (needs sampling_rate_hz)")
    meta = json.loads(path.read_text())
    if "sampling_rate_hz" not in meta:
        raise DatasetError(f"{path.name}: no sampling_rate_hz field")
    return meta


def sidecar_path(csv_path: Path) -> Path:
    csv_path = Path(csv_path)
    stem = csv_path.name[: -len(csv_path.suffix)] if csv_path.suffix else csv_path.name
    return csv_path.with_name(f"{stem}.meta.json")


def load_wide_csv(path: Path) -> SignalDataset:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    meta = _read_sidecar(sidecar_path(path))
    instances = []
    rejected = []
    with path.open(newline="", encoding="utf-8") as fh:
        for row_no, row in enumerate(csv.reader(fh)):
            if not row or all(not cell.strip() for cell in row):
                continue
            where = f"row {row_no}"
            label = _parse_label(row[0].strip(), where)
            try:
                samples = np.array([float(cell) for cell in row[1:]], dtype=float)
            except ValueError as exc:
                raise DatasetError(f"{where}: malformed sample value ({exc})") from exc
            if samples.size < 2:
                raise DatasetError(f"{where}: fewer than 2 samples")
            if not np.all(np.isfinite(samples)):
                bad = int(np.sum(~np.isfinite(samples)))
                rejected.append(row_no)
                logger.warning("%s rejected: %d non-finite sample(s)", where, bad)
                continue
            instances.append(SignalInstance(samples, label, len(instances)))
    if not instances:
        raise DatasetError("empty dataset")
    if rejected:
        logger.warning("rejected %d row(s) with non-finite values: %s", len(rejected), rejected)
    return SignalDataset(instances, float(meta["sampling_rate_hz"]), meta.get("name", path.stem))


def load_manifest(path: Path) -> SignalDataset:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    payload = json.loads(path.read_text())
    if "sampling_rate_hz" not in payload:
        raise DatasetError("manifest: no sampling_rate_hz field")
    entries = payload.get("instances", [])
    instances = []
    for i, entry in enumerate(entries):
        where = f"manifest entry {i}"
        label = _parse_label(str(entry["label"]), where)
        member = path.parent / entry["path"]
        if not member.exists():
            raise DatasetError(f"{where}: file {member} not found")
        values = []
        with member.open(newline="", encoding="utf-8") as fh:
            for line_no, row in enumerate(csv.reader(fh)):
                if not row or not row[0].strip():
                    continue
                try:
                    values.append(float(row[0]))
                except ValueError as exc:
                    raise DatasetError(f"{member.name} line {line_no}: {exc}") from exc
        samples = np.array(values, dtype=float)
        if not np.all(np.isfinite(samples)):
            logger.warning("%s (%s) rejected: non-finite values", where, member.name)
            continue
        instances.append(SignalInstance(samples, label, len(instances)))
    if not instances:
        raise DatasetError("empty dataset")
    return SignalDataset(instances, float(payload["sampling_rate_hz"]), payload.get("name", path.stem))


def load_dataset(path, format: str | None = None) -> SignalDataset:
    """Load a dataset in ``wide-csv`` or ``manifest`` format (inferred from suffix)."""
    path = Path(path)
    if format is None:
        format = "manifest" if path.suffix == ".json" else "wide-csv"
    if format == "wide-csv":
        return load_wide_csv(path)
    if format == "manifest":
        return load_manifest(path)
    raise DatasetError(f"unknown dataset format {format!r}")


def write_dataset(dataset: SignalDataset, path) -> Path:
    """Write wide CSV plus sidecar; ``repr`` of floats keeps the round trip exact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for inst in dataset.instances:
            writer.writerow([inst.label, *(repr(float(v)) for v in inst.samples)])
    meta = {"sampling_rate_hz": dataset.sampling_rate_hz, "name": dataset.name}
    sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n")
    return path


def window_instance(
    instance: SignalInstance, plan: WindowPlan, rate: float
) -> list[WindowedSegment]:
    n = instance.samples.size
    length = plan.window_length(rate, n)
    if length > n:
        raise DatasetError(
            f"instance {instance.instance_id}: window of {length} samples longer than signal ({n})"
        )
    hop = plan.hop(length)
    segments = []
    for index, start in enumerate(range(0, n - length + 1, hop)):
        segments.append(
            WindowedSegment(instance.samples[start : start + length], instance.instance_id, index, start)
        )
    return segments


def window_count(n_samples: int, plan: WindowPlan, rate: float) -> int:
    length = plan.window_length(rate, n_samples)
    if length > n_samples:
        return 0
    return (n_samples - length) // plan.hop(length) + 1


def synthesize_dataset(spec: SynthesisSpec, seed: int) -> SignalDataset:
    nyquist = spec.sampling_rate_hz / 2.0
    for label, tones in spec.tones.items():
        if label not in (0, 1):
            raise DatasetError(f"synthesis: class {label} is not binary")
        for freq, _ in tones:
            if freq >= nyquist:
                raise DatasetError(
                    f"synthesis: tone {freq} Hz at or above Nyquist ({nyquist} Hz)"
                )
            if freq < 0:
                raise DatasetError("synthesis: negative tone frequency")
    if spec.noise_sigma < 0:
        raise DatasetError("synthesis: noise_sigma must be non-negative")
    if spec.n_samples < 2 or spec.instances_per_class < 1:
        raise DatasetError("synthesis: need n_samples >= 2 and instances_per_class >= 1")

    rng = np.random.default_rng(seed)
    t = np.arange(spec.n_samples) / spec.sampling_rate_hz
    instances = []
    for label in sorted(spec.tones):
        for _ in range(spec.instances_per_class):
            x = np.zeros(spec.n_samples)
            for freq, amp in spec.tones[label]:
                phase = rng.uniform(0, 2 * np.pi) if spec.random_phase else 0.0
                x += amp * np.sin(2 * np.pi * freq * t + phase)
            if spec.noise_sigma > 0:
                x += rng.normal(0.0, spec.noise_sigma, spec.n_samples)
            instances.append(SignalInstance(x, label, len(instances)))
    return SignalDataset(instances, spec.sampling_rate_hz, spec.name)


def dataset_from_arrays(
    signals: Sequence[Iterable[float]] | np.ndarray,
    labels: Sequence[int],
    rate: float,
    name: str = "dataset",
) -> SignalDataset:
    instances = [
        SignalInstance(np.asarray(s, dtype=float), int(y), i)
        for i, (s, y) in enumerate(zip(signals, labels))
    ]
    return SignalDataset(instances, float(rate), name)
