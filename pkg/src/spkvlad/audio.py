"""Spectrogram front-end: 16 kHz PCM in, normalized 257-bin magnitudes out.

Golden constants (everything downstream assumes these):

- sample rate 16000 Hz, PCM 16-bit mono WAV only, no resampling
- hamming window 400 samples (25 ms), hop 160 samples (10 ms)
- 512-point FFT, magnitude of bins 0..256 kept (DC + 256 components)
- frame count T = floor(num_samples / 160), achieved by reflecting 120
  samples at each end before framing; a 2.5 s crop is exactly 257 x 250
- per-frame normalization: each column standardized to mean 0 / std 1,
  with a 1e-8 std floor so silent frames come out all-zero

Linear magnitude, no log compression, no mel warping, no VAD.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field

import numpy as np

SAMPLE_RATE = 16_000
WINDOW = 400          # 25 ms
HOP = 160             # 10 ms
FFT_SIZE = 512
BINS = FFT_SIZE // 2 + 1
_EDGE_PAD = (WINDOW - HOP) // 2   # 120 samples each side
_STD_FLOOR = 1e-8

SPG_MAGIC = b"SPG1"


class AudioFormatError(ValueError):
    """Raised for WAV files this front-end does not accept."""


@dataclass
class AudioBuffer:
    """Mono waveform, float32 samples in [-1, 1] at 16 kHz."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.sample_rate != SAMPLE_RATE:
            raise AudioFormatError(
                f"sample rate {self.sample_rate}, expected {SAMPLE_RATE}")
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueError("AudioBuffer needs at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioBuffer contains non-finite samples")

    @property
    def seconds(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Spectrogram:
    """257 x T magnitude (or normalized) matrix; rows are frequency bins."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] != BINS:
            raise ValueError(
                f"Spectrogram must be {BINS} x T, got {self.values.shape}")
        if self.values.shape[1] < 1:
            raise ValueError("Spectrogram needs at least one frame")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("Spectrogram contains non-finite values")

    @property
    def bins(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


def hamming_window(n: int = WINDOW) -> np.ndarray:
    """0.54 - 0.46 cos(2 pi i / (n - 1)), float64."""
    i = np.arange(n, dtype=np.float64)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * i / (n - 1))


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def load_wav(path) -> AudioBuffer:
    """Read a PCM-16 mono 16 kHz RIFF/WAVE file; samples scaled by 1/32768."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            rate = wf.getframerate()
            width = wf.getsampwidth()
            comp = wf.getcomptype()
            nframes = wf.getnframes()
            raw = wf.readframes(nframes)
    except wave.Error as exc:
        raise AudioFormatError(f"not a readable PCM WAV file: {exc}") from exc
    except OSError as exc:
        raise AudioFormatError(f"cannot read '{path}': {exc}") from exc
    if comp != "NONE":
        raise AudioFormatError(f"compression type {comp!r}, expected NONE (PCM)")
    if channels != 1:
        raise AudioFormatError(f"channel count {channels}, expected 1")
    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"sample rate {rate}, expected {SAMPLE_RATE}")
    if width != 2:
        raise AudioFormatError(f"sample width {width} bytes, expected 2 (PCM 16-bit)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    return AudioBuffer(samples)


def save_wav(audio, path) -> None:
    """Write float samples in [-1, 1] as PCM-16 mono 16 kHz."""
    samples = audio.samples if isinstance(audio, AudioBuffer) else np.asarray(audio)
    pcm = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------

def _framed(audio: AudioBuffer) -> np.ndarray:
    """(T, 400) hamming-windowed frames with reflection-padded edges."""
    n = audio.samples.size
    if n < WINDOW:
        raise ValueError(f"audio too short: {n} samples, need at least {WINDOW}")
    frames = n // HOP
    padded = np.pad(audio.samples.astype(np.float64), _EDGE_PAD, mode="reflect")
    starts = np.arange(frames) * HOP
    windows = np.lib.stride_tricks.sliding_window_view(padded, WINDOW)[starts]
    return windows * hamming_window()


def windowed_frames(audio: AudioBuffer) -> np.ndarray:
    """Debug path: the exact windowed frames the FFT sees, float64 (T, 400)."""
    return _framed(audio)


def stft_full_spectrum(audio: AudioBuffer) -> np.ndarray:
    """Debug path: complex 512-point spectra, shape (512, T)."""
    return np.fft.fft(_framed(audio), n=FFT_SIZE, axis=1).T


def stft_spectrogram(audio: AudioBuffer) -> Spectrogram:
    """Magnitude STFT, 257 x floor(samples/160), unnormalized."""
    mags = np.abs(np.fft.rfft(_framed(audio), n=FFT_SIZE, axis=1))
    return Spectrogram(mags.T.astype(np.float32), normalized=False)


def normalize_spectrogram(spec: Spectrogram) -> Spectrogram:
    """Standardize each column (time step) to mean 0, population std 1."""
    if spec.normalized:
        raise ValueError("spectrogram is already normalized")
    v = spec.values.astype(np.float64)
    mean = v.mean(axis=0, keepdims=True)
    std = v.std(axis=0, keepdims=True)
    out = (v - mean) / np.maximum(std, _STD_FLOOR)
    return Spectrogram(out.astype(np.float32), normalized=True)


def draw_crop_start(spec: Spectrogram, seconds: float,
                    rng: np.random.Generator) -> tuple[int, int]:
    """Uniform (start, frame_count) for a crop of round(seconds * 100) frames."""
    need = int(round(seconds * 100))
    if need < 1:
        raise ValueError(f"crop of {seconds} s is empty")
    if spec.frames < need:
        raise ValueError(
            f"utterance has {spec.frames} frames, shorter than requested crop of {need}")
    return int(rng.integers(0, spec.frames - need + 1)), need


def crop_at(spec: Spectrogram, start: int, frames: int) -> Spectrogram:
    return Spectrogram(spec.values[:, start:start + frames].copy(),
                       normalized=spec.normalized)


def random_crop(spec: Spectrogram, seconds: float, rng: np.random.Generator) -> Spectrogram:
    """Contiguous crop of round(seconds * 100) frames, start uniform over the valid range."""
    start, need = draw_crop_start(spec, seconds, rng)
    return crop_at(spec, start, need)


# ---------------------------------------------------------------------------
# SPG1 dump format: magic, u32 rows, u32 cols, row-major f32 (all little-endian)
# ---------------------------------------------------------------------------

def write_spg(spec: Spectrogram, path) -> None:
    with open(path, "wb") as fh:
        fh.write(SPG_MAGIC)
        fh.write(struct.pack("<II", spec.bins, spec.frames))
        fh.write(np.ascontiguousarray(spec.values, dtype="<f4").tobytes())


def read_spg(path) -> Spectrogram:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SPG_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {SPG_MAGIC!r}")
        rows, cols = struct.unpack("<II", fh.read(8))
        data = fh.read(rows * cols * 4)
        if len(data) != rows * cols * 4:
            raise ValueError("truncated spectrogram file")
        values = np.frombuffer(data, dtype="<f4").reshape(rows, cols)
    # Normalization state is not stored; dumps are raw magnitudes.
    return Spectrogram(values.copy(), normalized=False)
