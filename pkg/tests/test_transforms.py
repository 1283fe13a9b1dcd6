import numpy as np
import pytest
import pywt

from widefeat import transforms as tf
from widefeat.transforms import TransformError

LIBRARY = tf.WAVELET_LIBRARY


class TestSTFT:
    def test_pure_tone_bin(self):
        t = np.arange(1000) / 1000.0
        s = tf.stft_magnitude(np.sin(2 * np.pi * 100 * t), 1000.0, n_fft=1000, window=None)
        assert s.bin_hz == 1.0
        assert int(np.argmax(s.magnitudes)) == 100
        assert s.magnitudes.size == 501

    def test_parseval(self, rng):
        worst = 0.0
        for _ in range(1000):
            x = rng.normal(size=1024)
            s = tf.stft_magnitude(x, 1.0, window=None)
            worst = max(worst, abs(tf.spectral_energy(s) - np.sum(x**2)) / np.sum(x**2))
        assert worst <= 1e-9

    def test_zero_segment(self):
        s = tf.stft_magnitude(np.zeros(64), 100.0)
        assert np.all(s.magnitudes == 0)

    def test_default_pads_to_power_of_two(self):
        s = tf.stft_magnitude(np.ones(100), 1000.0)
        assert s.n_fft == 128 and s.bin_hz == 1000.0 / 128

    def test_hann_applied(self):
        x = np.ones(16)
        s = tf.stft_magnitude(x, 16.0)
        assert s.magnitudes[0] == pytest.approx(8.0)  # periodic Hann sums to n/2

    def test_errors(self):
        with pytest.raises(TransformError):
            tf.stft_magnitude(np.array([]), 1.0)
        with pytest.raises(TransformError):
            tf.stft_magnitude(np.ones(10), 1.0, n_fft=8)


class TestDWT:
    @pytest.mark.parametrize("name", LIBRARY)
    def test_matches_pywt_symmetric(self, name, rng):
        x = rng.normal(size=300)
        ours = tf.dwt(x, name, 4)
        ref = pywt.wavedec(x, name, mode="symmetric", level=4)
        np.testing.assert_allclose(ours.approx_coeffs, ref[0], atol=1e-10)
        for level in range(1, 5):
            np.testing.assert_allclose(ours.detail_coeffs[level - 1], ref[-level], atol=1e-10)

    @pytest.mark.parametrize("name", LIBRARY)
    def test_perfect_reconstruction(self, name, rng):
        for n in (1024, 777):
            x = rng.normal(size=n)
            dec = tf.dwt(x, name, tf.max_dwt_level(n) if name == "haar" else 5)
            assert np.max(np.abs(tf.idwt(dec) - x)) <= 1e-8

    def test_constant_haar_details_vanish(self):
        dec = tf.dwt(np.full(64, 3.5), "haar", 5)
        for d in dec.detail_coeffs:
            assert np.max(np.abs(d)) < 1e-12

    def test_shifted_haar_wavelet(self):
        x = np.zeros(64)
        x[10], x[11] = 1 / np.sqrt(2), -1 / np.sqrt(2)
        dec = tf.dwt(x, "haar", 3)
        d1 = np.abs(dec.detail_coeffs[0])
        assert np.sum(d1 > 1e-12) == 1
        assert d1.max() == pytest.approx(1.0)
        assert all(np.max(np.abs(d)) < 1e-12 for d in dec.detail_coeffs[1:])

    def test_lengths(self):
        dec = tf.dwt(np.zeros(1024), "db4", 3)
        assert [d.size for d in dec.detail_coeffs] == [pywt.dwt_coeff_len(n, 8, "symmetric") for n in (1024, 515, 261)]

    def test_errors(self):
        with pytest.raises(TransformError, match="unknown wavelet"):
            tf.dwt(np.zeros(64), "morlet", 2)
        with pytest.raises(TransformError):
            tf.dwt(np.zeros(64), "haar", 6)


class TestPseudoFrequency:
    def test_haar_level4(self):
        # independent value: pywt's centre frequency at the same cascade precision
        ref_fc = pywt.central_frequency("haar", precision=8)
        assert tf.center_frequency("haar") == pytest.approx(ref_fc, rel=1e-12)
        assert tf.pseudo_frequency("haar", 4, 1000.0) == pytest.approx(62.25681, abs=1e-4)

    @pytest.mark.parametrize("name", LIBRARY)
    def test_center_frequency_close_to_pywt(self, name):
        # pywt pads its sampled wavelet differently, which moves the DFT grid slightly
        assert tf.center_frequency(name) == pytest.approx(pywt.central_frequency(name, precision=8), rel=5e-3)

    @pytest.mark.parametrize("name", LIBRARY)
    def test_halves_per_level_and_scales_with_rate(self, name):
        for level in range(1, 8):
            assert tf.pseudo_frequency(name, level + 1, 500.0) == tf.pseudo_frequency(name, level, 500.0) / 2
        assert tf.pseudo_frequency(name, 3, 2000.0) == 2 * tf.pseudo_frequency(name, 3, 1000.0)

    def test_decreasing_in_decomposition(self):
        dec = tf.dwt(np.zeros(256), "db2", 5, rate=1000.0)
        assert all(a > b for a, b in zip(dec.pseudo_freq_hz, dec.pseudo_freq_hz[1:]))


def haar_pulses(rng, n=16, length=256):
    out = []
    for _ in range(n):
        x = np.zeros(length)
        scale = 2 ** int(rng.integers(1, 4))
        start = int(rng.integers(0, length // scale - 2)) * scale
        x[start : start + scale // 2] = 1.0
        x[start + scale // 2 : start + scale] = -1.0
        out.append(x)
    return out


class TestWaveletScoring:
    def test_haar_pulses_prefer_haar(self, rng):
        scores = tf.score_wavelets(haar_pulses(rng))
        assert scores[0].wavelet_name == "haar"

    def test_white_noise_finite_positive(self, rng):
        scores = tf.score_wavelets([rng.normal(size=256) for _ in range(5)])
        assert all(np.isfinite(s.ratio) and s.ratio > 0 for s in scores)
        assert [s.ratio for s in scores] == sorted((s.ratio for s in scores), reverse=True)

    def test_zero_segment_skipped(self, caplog):
        import logging

        with caplog.at_level(logging.DEBUG, logger="widefeat.transforms"):
            scores = tf.score_wavelets([np.zeros(64)], ["haar"])
        assert scores[0].energy == 0 and "zero energy" in caplog.text

    def test_empty_library(self):
        with pytest.raises(TransformError):
            tf.score_wavelets([np.ones(8)], [])

    def test_permutation_invariant(self, rng):
        segs = [rng.normal(size=128) for _ in range(6)]
        a = tf.score_wavelets(segs)
        b = tf.score_wavelets(segs[::-1])
        assert [s.wavelet_name for s in a] == [s.wavelet_name for s in b]
        assert all(x.ratio == pytest.approx(y.ratio, rel=1e-12) for x, y in zip(a, b))

    def test_uniform_scaling(self, rng):
        segs = [rng.normal(size=128) for _ in range(4)]
        a = tf.score_wavelets(segs)
        b = tf.score_wavelets([3.0 * s for s in segs])
        assert [s.wavelet_name for s in a] == [s.wavelet_name for s in b]
        for x, y in zip(a, b):
            assert y.energy == pytest.approx(9 * x.energy, rel=1e-10)
            assert y.entropy == pytest.approx(x.entropy, rel=1e-10)


class TestMotherWaveletSelection:
    def test_clear_primary_winner(self, rng):
        pulses = haar_pulses(rng, 20)
        sel = tf.rank_mother_wavelets({0: pulses[:10], 1: pulses[10:]})
        top, runner = sel.scores[0], sel.scores[1]
        assert (top.ratio - runner.ratio) / top.ratio > tf.TIE_BAND
        assert sel.name == "haar" and sel.criterion == "energy_entropy"

    def test_identical_classes(self, rng):
        segs = haar_pulses(rng, 10)
        sel = tf.rank_mother_wavelets({0: segs, 1: segs})
        assert all(g == 0 for g in sel.class_gaps.values())
        assert sel.name == sel.scores[0].wavelet_name

    def test_tie_broken_by_class_distance(self, monkeypatch):
        # per-class (energy, entropy) pairs chosen so "a" leads overall by 3%
        # while "b" separates the classes more
        fake = {
            ("a", 0): [(100.0, 1.0)], ("a", 1): [(100.0, 1.0)],
            ("b", 0): [(92.0, 1.0)], ("b", 1): [(102.0, 1.0)],
        }
        monkeypatch.setattr(tf, "_segment_scores", lambda segs, name: fake[(name, segs[0])])
        sel = tf.rank_mother_wavelets({0: [0], 1: [1]}, ["a", "b"])
        assert [s.wavelet_name for s in sel.scores] == ["a", "b"]
        assert sel.scores[1].ratio == pytest.approx(97.0)
        assert sel.class_gaps == {"a": 0.0, "b": 10.0}
        assert sel.criterion == "class_distance" and sel.name == "b"

    def test_outside_band_primary_wins(self, monkeypatch):
        fake = {
            ("a", 0): [(100.0, 1.0)], ("a", 1): [(100.0, 1.0)],
            ("b", 0): [(80.0, 1.0)], ("b", 1): [(100.0, 1.0)],
        }
        monkeypatch.setattr(tf, "_segment_scores", lambda segs, name: fake[(name, segs[0])])
        sel = tf.rank_mother_wavelets({0: [0], 1: [1]}, ["a", "b"])
        assert sel.criterion == "energy_entropy" and sel.name == "a"

    def test_needs_both_classes(self):
        with pytest.raises(TransformError):
            tf.select_mother_wavelet({0: [np.ones(16)]})
