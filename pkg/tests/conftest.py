import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from widefeat.dataset_io import SynthesisSpec, dataset_from_arrays, synthesize_dataset  # noqa: E402


@pytest.fixture(scope="session")
def tone_spec():
    return SynthesisSpec(tones={0: [(50.0, 1.0)], 1: [(80.0, 1.0)]}, noise_sigma=0.1,
                         instances_per_class=100, n_samples=1024, sampling_rate_hz=1000.0)


@pytest.fixture(scope="session")
def tone_dataset(tone_spec):
    return synthesize_dataset(tone_spec, seed=7)


@pytest.fixture(scope="session")
def small_tone_dataset():
    spec = SynthesisSpec(tones={0: [(50.0, 1.0)], 1: [(80.0, 1.0)]}, noise_sigma=0.1,
                         instances_per_class=20, n_samples=512, sampling_rate_hz=1000.0)
    return synthesize_dataset(spec, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_dataset(signals, labels, rate=1000.0, name="fixture"):
    return dataset_from_arrays(np.asarray(signals, dtype=float), np.asarray(labels), rate, name)


# acceptance criteria report their outcome here; the summary hook prints one line each
ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in sorted(ACCEPTANCE_RESULTS.items()):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
