"""Front-end tests: WAV I/O, STFT geometry and content, normalization, crops."""

import struct
import wave

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spkvlad import audio


def sine(freq, seconds=2.5, amp=0.5):
    n = int(seconds * audio.SAMPLE_RATE)
    return audio.AudioBuffer(
        (amp * np.sin(2 * np.pi * freq / audio.SAMPLE_RATE * np.arange(n))).astype(np.float32))


def naive_dft_bin_magnitudes(frame):
    """O(N^2) DFT oracle, independent of numpy's FFT."""
    n = audio.FFT_SIZE
    padded = np.zeros(n)
    padded[:frame.size] = frame
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    basis = np.exp(-2j * np.pi * k * i / n)
    return np.abs(basis @ padded)


class TestWav:
    def test_one_second_round_trip(self, tmp_path):
        buf = sine(440.0, seconds=1.0)
        path = tmp_path / "a.wav"
        audio.save_wav(buf, path)
        loaded = audio.load_wav(path)
        assert loaded.samples.size == 16000
        np.testing.assert_allclose(loaded.samples, buf.samples, atol=1.0 / 32768)

    def test_all_zero_file(self, tmp_path):
        path = tmp_path / "z.wav"
        audio.save_wav(np.zeros(8000, dtype=np.float32), path)
        loaded = audio.load_wav(path)
        assert np.all(loaded.samples == 0)

    def test_stereo_rejected_naming_channel_count(self, tmp_path):
        path = tmp_path / "st.wav"
        with wave.open(str(path), "wb") as wf:
            wf.setnchannels(2)
            wf.setsampwidth(2)
            wf.setframerate(16000)
            wf.writeframes(b"\x00\x00" * 64)
        with pytest.raises(audio.AudioFormatError, match="channel count 2, expected 1"):
            audio.load_wav(path)

    def test_wrong_rate_rejected_naming_rate(self, tmp_path):
        path = tmp_path / "r.wav"
        with wave.open(str(path), "wb") as wf:
            wf.setnchannels(1)
            wf.setsampwidth(2)
            wf.setframerate(8000)
            wf.writeframes(b"\x00\x00" * 64)
        with pytest.raises(audio.AudioFormatError, match="sample rate 8000"):
            audio.load_wav(path)

    def test_garbage_file_rejected(self, tmp_path):
        path = tmp_path / "g.wav"
        path.write_bytes(b"not a riff container at all")
        with pytest.raises(audio.AudioFormatError):
            audio.load_wav(path)


class TestStft:
    def test_2p5_seconds_gives_257_by_250(self):
        spec = audio.stft_spectrogram(sine(440.0, seconds=2.5))
        assert spec.values.shape == (257, 250)

    def test_zero_audio_gives_zero_magnitudes(self):
        buf = audio.AudioBuffer(np.zeros(16000, dtype=np.float32))
        spec = audio.stft_spectrogram(buf)
        assert spec.values.shape == (257, 100)
        assert np.all(spec.values == 0)

    def test_too_short_raises(self):
        with pytest.raises(ValueError, match="too short"):
            audio.stft_spectrogram(audio.AudioBuffer(np.zeros(399, dtype=np.float32)))

    def test_magnitudes_non_negative(self):
        rng = np.random.default_rng(0)
        buf = audio.AudioBuffer(rng.uniform(-0.5, 0.5, 9000).astype(np.float32))
        assert np.all(audio.stft_spectrogram(buf).values >= 0)

    @given(st.integers(400, 50_000))
    @settings(max_examples=40, deadline=None)
    def test_frame_count_law(self, n_samples):
        buf = audio.AudioBuffer(np.zeros(n_samples, dtype=np.float32))
        assert audio.stft_spectrogram(buf).frames == n_samples // audio.HOP

    def test_1khz_sine_peaks_at_bin_32(self):
        # 1000 / 16000 * 512 = 32, checked both in our path and a naive DFT.
        spec = audio.stft_spectrogram(sine(1000.0))
        interior = spec.values[:, 5:-5]
        assert np.all(interior.argmax(axis=0) == 32)

        frame = audio.windowed_frames(sine(1000.0))[100]
        oracle = naive_dft_bin_magnitudes(frame)
        assert oracle[:257].argmax() == 32
        np.testing.assert_allclose(spec.values[:, 100], oracle[:257], rtol=1e-4, atol=1e-4)

    def test_parseval_per_frame(self):
        rng = np.random.default_rng(1)
        buf = audio.AudioBuffer(rng.uniform(-0.7, 0.7, 12_345).astype(np.float32))
        spectra = audio.stft_full_spectrum(buf)          # (512, T)
        frames = audio.windowed_frames(buf)              # (T, 400)
        lhs = (np.abs(spectra) ** 2).sum(axis=0)
        rhs = audio.FFT_SIZE * (frames ** 2).sum(axis=1)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-3)

    def test_hamming_window_formula(self):
        w = audio.hamming_window()
        i = np.arange(400)
        np.testing.assert_allclose(w, 0.54 - 0.46 * np.cos(2 * np.pi * i / 399), atol=1e-12)


class TestNormalize:
    def test_ramp_column_standardized(self):
        values = np.tile(np.arange(1.0, 258.0)[:, None], (1, 3)).astype(np.float32)
        out = audio.normalize_spectrogram(audio.Spectrogram(values))
        assert out.normalized
        np.testing.assert_allclose(out.values.mean(axis=0), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.values.std(axis=0), 1.0, atol=1e-6)

    def test_constant_column_maps_to_zeros(self):
        values = np.full((257, 4), 3.25, dtype=np.float32)
        out = audio.normalize_spectrogram(audio.Spectrogram(values))
        assert np.all(out.values == 0)
        assert np.all(np.isfinite(out.values))

    def test_double_normalization_rejected(self):
        spec = audio.normalize_spectrogram(
            audio.Spectrogram(np.random.default_rng(2).random((257, 5)).astype(np.float32)))
        with pytest.raises(ValueError, match="already normalized"):
            audio.normalize_spectrogram(spec)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_random_matrix_column_stats(self, seed):
        rng = np.random.default_rng(seed)
        values = (rng.random((257, 10)) * 5).astype(np.float32)
        out = audio.normalize_spectrogram(audio.Spectrogram(values)).values.astype(np.float64)
        assert np.abs(out.mean(axis=0)).max() < 1e-6
        assert np.abs(out.std(axis=0) - 1).max() < 1e-6

    def test_formula_fixed_point(self):
        # Reapplying the math to an already-standardized column moves nothing.
        rng = np.random.default_rng(3)
        col = rng.standard_normal(257)
        col = (col - col.mean()) / col.std()
        again = (col - col.mean()) / max(col.std(), 1e-8)
        np.testing.assert_allclose(again, col, atol=1e-5)


class TestCrops:
    def _spec(self, frames=600, seed=4):
        rng = np.random.default_rng(seed)
        return audio.Spectrogram(rng.random((257, frames)).astype(np.float32))

    def test_2p5_seconds_is_250_frames(self):
        out = audio.random_crop(self._spec(), 2.5, np.random.default_rng(0))
        assert out.frames == 250

    def test_full_length_crop_is_identity_for_any_seed(self):
        spec = self._spec(frames=300)
        for seed in (0, 1, 99):
            out = audio.random_crop(spec, 3.0, np.random.default_rng(seed))
            np.testing.assert_array_equal(out.values, spec.values)

    def test_seeded_start_is_deterministic(self):
        spec = self._spec()
        a = audio.random_crop(spec, 2.0, np.random.default_rng(1234))
        b = audio.random_crop(spec, 2.0, np.random.default_rng(1234))
        np.testing.assert_array_equal(a.values, b.values)
        assert a.frames == 200

    def test_crop_longer_than_utterance_raises(self):
        with pytest.raises(ValueError, match="shorter than requested crop"):
            audio.random_crop(self._spec(frames=100), 2.5, np.random.default_rng(0))


class TestSpgFormat:
    def test_round_trip(self, tmp_path):
        spec = audio.stft_spectrogram(sine(700.0, seconds=1.0))
        path = tmp_path / "x.spg"
        audio.write_spg(spec, path)
        loaded = audio.read_spg(path)
        np.testing.assert_array_equal(loaded.values, spec.values)

    def test_layout_is_magic_dims_then_floats(self, tmp_path):
        spec = audio.Spectrogram(np.arange(257 * 2, dtype=np.float32).reshape(257, 2))
        path = tmp_path / "y.spg"
        audio.write_spg(spec, path)
        raw = path.read_bytes()
        assert raw[:4] == b"SPG1"
        assert struct.unpack("<II", raw[4:12]) == (257, 2)
        np.testing.assert_array_equal(np.frombuffer(raw[12:], dtype="<f4")[:4],
                                      [0.0, 1.0, 2.0, 3.0])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.spg"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="bad magic"):
            audio.read_spg(path)
