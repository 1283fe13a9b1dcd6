"""Spectral and wavelet kernels: one-sided DFT magnitudes, a Mallat DWT with
symmetric boundary extension, pseudo-frequencies of DWT levels and mother
wavelet scoring by energy-to-entropy ratio.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Mapping, Sequence

import numpy as np
from scipy.signal import windows

logger = logging.getLogger(__name__)

WAVELET_LIBRARY = ("haar", "db2", "db4", "db8", "sym4", "sym8", "coif3")
ENTROPY_FLOOR = 1e-12
TIE_BAND = 0.05
CASCADE_PRECISION = 8


class TransformError(ValueError):
    pass


@dataclass(frozen=True)
class Spectrum:
    magnitudes: np.ndarray
    bin_hz: float
    n_fft: int

    @property
    def frequencies(self) -> np.ndarray:
        return np.arange(self.magnitudes.size) * self.bin_hz


@dataclass(frozen=True)
class Filters:
    name: str
    dec_lo: np.ndarray
    dec_hi: np.ndarray
    rec_lo: np.ndarray
    rec_hi: np.ndarray

    @property
    def length(self) -> int:
        return self.dec_lo.size


@dataclass
class WaveletDecomposition:
    wavelet_name: str
    levels: int
    detail_coeffs: list[np.ndarray]  # index 0 is level 1 (finest)
    approx_coeffs: np.ndarray
    pseudo_freq_hz: list[float]
    input_lengths: list[int]  # length of the signal entering each level


@dataclass(frozen=True)
class WaveletScore:
    wavelet_name: str
    energy: float
    entropy: float
    ratio: float


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def stft_magnitude(segment, rate: float, n_fft: int | None = None, window: str | None = "hann") -> Spectrum:
    """Magnitude of the one-sided DFT of a (Hann-tapered, zero-padded) segment."""
    x = np.asarray(segment, dtype=float)
    if x.size == 0:
        raise TransformError("empty segment")
    if n_fft is None:
        n_fft = next_pow2(x.size)
    if n_fft < x.size:
        raise TransformError(f"n_fft={n_fft} shorter than segment ({x.size})")
    if window == "hann":
        x = x * windows.hann(x.size, sym=False)
    elif window not in (None, "none"):
        raise TransformError(f"unsupported window {window!r}")
    mags = np.abs(np.fft.rfft(x, n=n_fft))
    return Spectrum(mags, rate / n_fft, n_fft)


def spectral_energy(spectrum: Spectrum) -> float:
    """Time-domain energy recovered from one-sided magnitudes (Parseval)."""
    p = spectrum.magnitudes**2
    n = spectrum.n_fft
    interior = p[1:-1].sum() if n % 2 == 0 else p[1:].sum()
    edge = p[0] + (p[-1] if n % 2 == 0 else 0.0)
    return float((edge + 2.0 * interior) / n)


@lru_cache(maxsize=None)
def _library_payload() -> dict:
    text = resources.files("widefeat").joinpath("data/wavelets.json").read_text()
    return json.loads(text)


@lru_cache(maxsize=None)
def load_filters(name: str) -> Filters:
    payload = _library_payload()["wavelets"]
    if name not in payload:
        raise TransformError(f"unknown wavelet {name!r}; library is {', '.join(WAVELET_LIBRARY)}")
    entry = payload[name]
    return Filters(
        name,
        np.array(entry["dec_lo"]),
        np.array(entry["dec_hi"]),
        np.array(entry["rec_lo"]),
        np.array(entry["rec_hi"]),
    )


def max_dwt_level(n_samples: int) -> int:
    return max(0, int(math.floor(math.log2(n_samples))) - 1) if n_samples > 1 else 0


def dwt_step(x: np.ndarray, filters: Filters) -> tuple[np.ndarray, np.ndarray]:
    L = filters.length
    ext = np.pad(x, (L - 1, L - 1), mode="symmetric")
    approx = np.convolve(ext, filters.dec_lo, mode="valid")[1::2]
    detail = np.convolve(ext, filters.dec_hi, mode="valid")[1::2]
    return approx, detail


def idwt_step(approx: np.ndarray, detail: np.ndarray, filters: Filters, out_len: int) -> np.ndarray:
    L = filters.length
    n = approx.size
    up_a = np.zeros(2 * n)
    up_d = np.zeros(2 * n)
    up_a[::2] = approx
    up_d[::2] = detail
    full = np.convolve(up_a, filters.rec_lo) + np.convolve(up_d, filters.rec_hi)
    return full[L - 2 : L - 2 + out_len]


def dwt(segment, wavelet_name: str, levels: int, rate: float | None = None) -> WaveletDecomposition:
    x = np.asarray(segment, dtype=float)
    filters = load_filters(wavelet_name)
    cap = max_dwt_level(x.size)
    if levels < 1 or levels > cap:
        raise TransformError(f"levels={levels} outside [1, {cap}] for a {x.size}-sample signal")
    details = []
    lengths = []
    approx = x
    for _ in range(levels):
        lengths.append(approx.size)
        approx, detail = dwt_step(approx, filters)
        details.append(detail)
    freqs = [pseudo_frequency(wavelet_name, j, rate) for j in range(1, levels + 1)] if rate else []
    return WaveletDecomposition(wavelet_name, levels, details, approx, freqs, lengths)


def idwt(decomposition: WaveletDecomposition) -> np.ndarray:
    filters = load_filters(decomposition.wavelet_name)
    approx = decomposition.approx_coeffs
    for level in range(decomposition.levels, 0, -1):
        approx = idwt_step(
            approx,
            decomposition.detail_coeffs[level - 1],
            filters,
            decomposition.input_lengths[level - 1],
        )
    return approx


def wavelet_function(name: str, precision: int = CASCADE_PRECISION) -> tuple[np.ndarray, float]:
    """Sampled wavelet function by the cascade algorithm; returns (psi, grid step)."""
    filters = load_filters(name)
    lo = math.sqrt(2.0) * filters.rec_lo
    hi = math.sqrt(2.0) * filters.rec_hi

    def upsample(v, factor):
        out = np.zeros((v.size - 1) * factor + 1)
        out[::factor] = v
        return out

    phi = np.array([1.0])
    for i in range(precision - 1):
        phi = np.convolve(phi, upsample(lo, 2**i))
    psi = np.convolve(phi, upsample(hi, 2 ** (precision - 1)))
    # zero sample at both ends of the support
    return np.pad(psi, 1), 2.0**-precision


@lru_cache(maxsize=None)
def center_frequency(name: str) -> float:
    """Dominant DFT bin of the sampled wavelet, in cycles per unit of its support."""
    psi, step = wavelet_function(name)
    span = (psi.size - 1) * step
    mags = np.abs(np.fft.fft(psi))
    half = psi.size // 2
    bin_index = int(np.argmax(mags[1 : half + 1])) + 1
    return bin_index / span


def pseudo_frequency(wavelet_name: str, level: int, rate: float) -> float:
    if level < 1:
        raise TransformError("DWT level must be >= 1")
    return center_frequency(wavelet_name) * rate / 2.0**level


def _energy_entropy(coeffs: np.ndarray) -> tuple[float, float]:
    sq = coeffs**2
    energy = float(sq.sum())
    if energy <= 0:
        return 0.0, 0.0
    p = sq[sq > 0] / energy
    entropy = max(float(-(p * np.log(p)).sum()), ENTROPY_FLOOR)
    return energy, entropy


def segment_wavelet_score(segment, wavelet_name: str) -> tuple[float, float] | None:
    """(energy, entropy) of a full-depth decomposition; ``None`` for zero energy."""
    x = np.asarray(segment, dtype=float)
    levels = max_dwt_level(x.size)
    if levels < 1:
        raise TransformError("segment too short to decompose")
    dec = dwt(x, wavelet_name, levels)
    energy, entropy = _energy_entropy(np.concatenate([*dec.detail_coeffs, dec.approx_coeffs]))
    if energy == 0:
        return None
    return energy, entropy


def _segment_scores(segments: Sequence, name: str) -> list[tuple[float, float]]:
    out = []
    for i, seg in enumerate(segments):
        result = segment_wavelet_score(seg, name)
        if result is None:
            logger.debug("segment %d has zero energy; skipped for %s", i, name)
            continue
        out.append(result)
    return out


def _summarise(name: str, pairs: list[tuple[float, float]]) -> WaveletScore:
    if not pairs:
        return WaveletScore(name, 0.0, 0.0, 0.0)
    e = np.array([p[0] for p in pairs])
    h = np.array([p[1] for p in pairs])
    return WaveletScore(name, float(e.mean()), float(h.mean()), float(np.mean(e / h)))


def score_wavelets(train_segments: Sequence, library: Sequence[str] = WAVELET_LIBRARY) -> list[WaveletScore]:
    """Mean energy/entropy ratio per wavelet, best first (library order on ties)."""
    if not library:
        raise TransformError("empty wavelet library")
    if len(train_segments) == 0:
        raise TransformError("no training segments to score")
    scores = [_summarise(name, _segment_scores(train_segments, name)) for name in library]
    return sorted(scores, key=lambda s: -s.ratio)


@dataclass
class WaveletSelection:
    name: str
    criterion: str  # "energy_entropy" or "class_distance"
    scores: list[WaveletScore]
    class_gaps: dict[str, float]


def rank_mother_wavelets(
    per_class_segments: Mapping[int, Sequence], library: Sequence[str] = WAVELET_LIBRARY
) -> WaveletSelection:
    if set(per_class_segments) != {0, 1} or not all(len(v) for v in per_class_segments.values()):
        raise TransformError("mother wavelet selection needs segments from both classes")
    if not library:
        raise TransformError("empty wavelet library")
    per_class_pairs = {
        name: {label: _segment_scores(per_class_segments[label], name) for label in (0, 1)}
        for name in library
    }
    overall = sorted(
        (_summarise(name, pairs[0] + pairs[1]) for name, pairs in per_class_pairs.items()),
        key=lambda s: -s.ratio,
    )
    gaps = {
        name: abs(_summarise(name, pairs[0]).ratio - _summarise(name, pairs[1]).ratio)
        for name, pairs in per_class_pairs.items()
    }

    top = overall[0]
    runner = overall[1] if len(overall) > 1 else None
    if runner is not None and top.ratio > 0 and (top.ratio - runner.ratio) / top.ratio <= TIE_BAND:
        # ties within the band are settled by class separation, then library order
        best = max(library, key=lambda n: (gaps[n], -list(library).index(n)))
        return WaveletSelection(best, "class_distance", overall, gaps)
    return WaveletSelection(top.wavelet_name, "energy_entropy", overall, gaps)


def select_mother_wavelet(
    per_class_segments: Mapping[int, Sequence], library: Sequence[str] = WAVELET_LIBRARY
) -> str:
    selection = rank_mother_wavelets(per_class_segments, library)
    logger.info("mother wavelet %s (%s)", selection.name, selection.criterion)
    return selection.name
