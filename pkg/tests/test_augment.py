import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robust_sed.augment import (
    PV_HOP, AugmentationSpec, augment_set, mix_noise, noise_gain, pitch_shift, resample,
    time_stretch,
)
from robust_sed.frontend import Waveform

SR = 22050


def _sine(f, seconds=1.0, amp=0.5):
    t = np.arange(int(seconds * SR)) / SR
    return Waveform(amp * np.sin(2 * np.pi * f * t), SR)


def dominant_frequency(x, sr=SR):
    """Peak of a zero-padded, Hann-windowed FFT, refined by parabolic interpolation."""
    x = np.asarray(x, dtype=float)
    n = 8 * len(x)
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x)), n))
    k = int(np.argmax(spec[1:-1])) + 1
    a, b, c = np.log(spec[k - 1 : k + 2] + 1e-300)
    k = k + 0.5 * (a - c) / (a - 2 * b + c)
    return k * sr / n


def _rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


class TestResample:
    def test_identity(self):
        x = _sine(440.0).samples
        assert _rms(resample(x, 1.0) - x) < 1e-6

    def test_halves_frequency(self):
        y = resample(_sine(440.0), 0.5)
        assert len(y) == 2 * SR
        assert dominant_frequency(y.samples) == pytest.approx(220.0, abs=1.0)

    def test_dc_preserved(self):
        for ratio in (0.5, 0.8, 1.3, 3.0):
            y = resample(np.full(3000, 0.7), ratio)
            np.testing.assert_allclose(y, 0.7, atol=1e-4)

    @given(st.integers(100, 5000), st.floats(0.25, 4.0))
    @settings(max_examples=30, deadline=None)
    def test_length(self, n, ratio):
        assert len(resample(np.zeros(n), ratio)) == int(round(n / ratio))

    def test_range(self):
        with pytest.raises(ValueError):
            resample(np.zeros(10), 5.0)


class TestTimeStretch:
    def test_unit_rate(self):
        x = _sine(1000.0).samples
        y = time_stretch(x, 1.0)
        assert len(y) == len(x)
        assert _rms(y - x) < 0.05 * _rms(x)

    def test_double_rate(self):
        y = time_stretch(_sine(1000.0, 2.0), 2.0)
        assert abs(len(y) - SR) <= PV_HOP
        assert dominant_frequency(y.samples) == pytest.approx(1000.0, rel=0.01)

    def test_half_rate(self):
        y = time_stretch(_sine(1000.0, 2.0), 0.5)
        assert abs(len(y) - 4 * SR) <= PV_HOP
        assert dominant_frequency(y.samples) == pytest.approx(1000.0, rel=0.01)

    @pytest.mark.parametrize("rate", [0.8, 1.1, 1.25])
    def test_pitch_preserved(self, rate):
        y = time_stretch(_sine(3000.0), rate)
        assert dominant_frequency(y.samples) == pytest.approx(3000.0, rel=0.01)

    def test_range(self):
        with pytest.raises(ValueError):
            time_stretch(np.zeros(2048), 3.0)


class TestPitchShift:
    def test_zero_is_identity(self):
        x = _sine(440.0).samples
        assert _rms(pitch_shift(x, 0) - x) < 0.05 * _rms(x)

    def test_octave_up(self):
        y = pitch_shift(_sine(440.0), 12)
        assert len(y) == SR
        assert dominant_frequency(y.samples) == pytest.approx(880.0, abs=5.0)

    def test_octave_down(self):
        y = pitch_shift(_sine(440.0), -12)
        assert len(y) == SR
        assert dominant_frequency(y.samples) == pytest.approx(220.0, abs=3.0)

    @given(st.floats(-1.0, 1.0))
    @settings(max_examples=10, deadline=None)
    def test_length_preserved(self, s):
        assert len(pitch_shift(np.random.default_rng(0).standard_normal(5000), s)) == 5000

    def test_limit(self):
        with pytest.raises(ValueError):
            pitch_shift(np.zeros(100), 13)


class TestMixNoise:
    def test_gain_formula(self):
        assert noise_gain(1.0, 1.0, 0.0) == 1.0
        assert noise_gain(4.0, 1.0, 20.0) == pytest.approx(0.2)

    def test_huge_snr_returns_clip(self):
        rng = np.random.default_rng(0)
        x, n = rng.standard_normal(1000), rng.standard_normal(2000)
        assert _rms(mix_noise(x, n, np.inf) - x) < 1e-5

    def test_equal_power_zero_db(self):
        rng = np.random.default_rng(1)
        x, n = rng.standard_normal(100_000), rng.standard_normal(100_000)
        n *= np.sqrt(np.mean(x**2) / np.mean(n**2))
        y, info = mix_noise(x, n, 0.0, return_info=True)
        assert info["gain"] == pytest.approx(1.0)
        assert np.mean(y**2) == pytest.approx(2 * np.mean(x**2), rel=0.02)

    def test_measured_snr(self):
        rng = np.random.default_rng(2)
        x, n = _sine(2000.0).samples, rng.standard_normal(3 * SR)
        y, info = mix_noise(x, n, 20.0, rng=rng, return_info=True)
        residual = y - x
        measured = 10 * np.log10(np.mean(x**2) / np.mean(residual**2))
        assert measured == pytest.approx(20.0, abs=0.1)
        excerpt = n[info["offset"] : info["offset"] + len(x)]
        assert _rms(y - info["gain"] * excerpt - x) < 1e-6

    def test_errors(self):
        with pytest.raises(ValueError, match="undefined SNR"):
            mix_noise(np.zeros(10), np.ones(20), 10.0)
        with pytest.raises(ValueError, match="shorter"):
            mix_noise(np.ones(10), np.ones(5), 10.0)


class TestAugmentSet:
    def _pool(self):
        rng = np.random.default_rng(3)
        return {s: Waveform(rng.standard_normal(SR), SR) for s in ("S1", "S2", "S3")}

    def test_twenty_variants(self):
        clip = _sine(3000.0, 0.2)
        out = augment_set(clip, AugmentationSpec(), self._pool(), clip_id="c0")
        assert len(out) == 20
        effects = [v.provenance["effect"] for v in out]
        assert effects.count("pitch_shift") == 4 and effects.count("time_stretch") == 4
        assert effects.count("add_noise") == 12
        noise = [v.provenance["noise_source"] for v in out if v.provenance["effect"] == "add_noise"]
        assert sorted(set(noise)) == ["S1", "S2", "S3"]
        assert all(v.provenance["source"] == "c0" for v in out)

    def test_parameters_within_ranges(self):
        spec = AugmentationSpec(seed=9)
        for v in augment_set(_sine(3000.0, 0.2), spec, self._pool()):
            p = v.provenance
            rng_ = {"pitch_shift": spec.pitch_range, "time_stretch": spec.stretch_range,
                    "add_noise": spec.snr_range}[p["effect"]]
            assert rng_[0] <= p["value"] <= rng_[1]

    def test_empty_spec(self):
        spec = AugmentationSpec(0, n_stretch=0, n_noise=0)
        assert augment_set(_sine(3000.0, 0.2), spec) == []

    def test_deterministic(self):
        a = augment_set(_sine(3000.0, 0.2), AugmentationSpec(seed=5), self._pool())
        b = augment_set(_sine(3000.0, 0.2), AugmentationSpec(seed=5), self._pool())
        for u, v in zip(a, b):
            assert u.waveform.samples.tobytes() == v.waveform.samples.tobytes()
            assert u.provenance == v.provenance

    def test_empty_pool(self):
        with pytest.raises(ValueError, match="empty noise pool"):
            augment_set(_sine(3000.0, 0.2), AugmentationSpec())

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            AugmentationSpec(n_pitch=-1)
        with pytest.raises(ValueError):
            AugmentationSpec(snr_range=(10.0, 0.0))
