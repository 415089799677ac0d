"""Synthetic speakers via source-filter synthesis, plus dataset generation.

A speaker is a sawtooth glottal source at a fundamental f0 pushed through a
cascade of three second-order formant resonators. Within-speaker variation
(what the embedding must learn to ignore) comes from per-utterance f0 offset
and slow vibrato, a slow amplitude envelope, and additive white noise; all of
it is gated by the speaker's jitter so that jitter = 0, noise = 0 yields a
strictly periodic tone. Across speakers, f0 and the formant layout are the
identity cues; specs are rejection-sampled to keep a minimum distance in
normalized parameter space.

Datasets are written as WAV trees with plain-text manifests, one line per
utterance: ``<speaker_id> <relative_wav_path>``; an 80/20 per-speaker
train/heldout split is recorded in ``train.txt`` / ``heldout.txt``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy import signal

from .audio import SAMPLE_RATE, AudioBuffer, save_wav

F0_RANGE = (90.0, 280.0)
FORMANT_RANGES = ((300.0, 850.0), (950.0, 2350.0), (2450.0, 3400.0))
BANDWIDTH_RANGES = ((60.0, 120.0), (80.0, 160.0), (100.0, 200.0))
JITTER_RANGE = (0.04, 0.10)
NOISE_FLOOR_RANGE = (0.05, 0.25)
MIN_SPEAKER_DISTANCE = 0.25
PEAK = 0.9


@dataclass(frozen=True)
class SynthSpeakerSpec:
    """Source-filter parameters that define one synthetic speaker."""

    f0: float
    formant_freqs: tuple
    formant_bandwidths: tuple
    jitter: float
    noise_floor: float

    def __post_init__(self):
        if not F0_RANGE[0] <= self.f0 <= F0_RANGE[1]:
            raise ValueError(f"f0 {self.f0} outside {F0_RANGE}")
        for f in self.formant_freqs:
            if not 0 < f < SAMPLE_RATE / 2:
                raise ValueError(f"formant {f} not below Nyquist")
        if self.jitter < 0 or self.noise_floor < 0:
            raise ValueError("jitter and noise floor must be non-negative")


def _normalized_coords(spec: SynthSpeakerSpec) -> np.ndarray:
    coords = [(spec.f0 - F0_RANGE[0]) / (F0_RANGE[1] - F0_RANGE[0])]
    for f, (lo, hi) in zip(spec.formant_freqs, FORMANT_RANGES):
        coords.append((f - lo) / (hi - lo))
    return np.array(coords)


def speaker_distance(a: SynthSpeakerSpec, b: SynthSpeakerSpec) -> float:
    """Euclidean distance in normalized (f0, F1, F2, F3) space."""
    return float(np.linalg.norm(_normalized_coords(a) - _normalized_coords(b)))


def draw_speaker_specs(n: int, rng: np.random.Generator,
                       min_distance: float = MIN_SPEAKER_DISTANCE) -> list[SynthSpeakerSpec]:
    """Rejection-sample n speakers with pairwise distance >= min_distance."""
    specs: list[SynthSpeakerSpec] = []
    attempts = 0
    while len(specs) < n:
        attempts += 1
        if attempts > 10000 * n:
            raise RuntimeError(
                f"could not place {n} speakers at min distance {min_distance}")
        cand = SynthSpeakerSpec(
            f0=float(rng.uniform(*F0_RANGE)),
            formant_freqs=tuple(float(rng.uniform(lo, hi)) for lo, hi in FORMANT_RANGES),
            formant_bandwidths=tuple(float(rng.uniform(lo, hi)) for lo, hi in BANDWIDTH_RANGES),
            jitter=float(rng.uniform(*JITTER_RANGE)),
            noise_floor=float(rng.uniform(*NOISE_FLOOR_RANGE)),
        )
        if all(speaker_distance(cand, s) >= min_distance for s in specs):
            specs.append(cand)
    return specs


def _resonator_coeffs(freq: float, bandwidth: float):
    """Klatt-style DC-unity second-order resonator."""
    r = np.exp(-np.pi * bandwidth / SAMPLE_RATE)
    theta = 2.0 * np.pi * freq / SAMPLE_RATE
    b1 = 2.0 * r * np.cos(theta)
    b2 = -r * r
    return [1.0 - b1 - b2], [1.0, -b1, -b2]


def _slow_noise(n: int, rng: np.random.Generator, rate_hz: float = 8.0) -> np.ndarray:
    """Smooth unit-variance-ish modulation: interpolated control points."""
    points = max(int(rate_hz * n / SAMPLE_RATE) + 2, 2)
    ctrl = rng.standard_normal(points)
    return np.interp(np.arange(n), np.linspace(0, n - 1, points), ctrl)


def synth_utterance(spec: SynthSpeakerSpec, seconds: float, rng: np.random.Generator,
                    harmonic_gain: float = 1.0) -> AudioBuffer:
    """One utterance: jittered harmonic source through the speaker's formants,
    plus white noise at the spec's noise floor, peak-normalized to 0.9."""
    if seconds < 3.0:
        raise ValueError(f"utterance of {seconds} s is too short (need >= 3 s)")
    n = int(round(seconds * SAMPLE_RATE))
    dtime = np.arange(n) / SAMPLE_RATE

    out = np.zeros(n)
    if harmonic_gain > 0:
        # Small static offset (keeps averaged-spectrum peaks within one FFT
        # bin across takes) plus slow vibrato for within-speaker variation.
        f0 = spec.f0 * (1.0 + 0.3 * spec.jitter * rng.uniform(-1.0, 1.0))
        f0_track = f0 * (1.0 + 0.5 * spec.jitter * _slow_noise(n, rng))
        phase = 2.0 * np.pi * np.cumsum(f0_track) / SAMPLE_RATE
        source = signal.sawtooth(phase)
        voiced = source
        for freq, bw in zip(spec.formant_freqs, spec.formant_bandwidths):
            b, a = _resonator_coeffs(freq, bw)
            voiced = signal.lfilter(b, a, voiced)
        depth = min(0.5, 2.0 * spec.jitter)
        if depth > 0:
            rate = rng.uniform(2.0, 4.0)
            phi = rng.uniform(0.0, 2.0 * np.pi)
            voiced = voiced * (1.0 - depth * 0.5 * (1.0 + np.cos(2.0 * np.pi * rate * dtime + phi)))
        out += harmonic_gain * voiced / max(np.sqrt(np.mean(voiced ** 2)), 1e-12)
    if spec.noise_floor > 0:
        out += spec.noise_floor * rng.standard_normal(n)

    peak = np.abs(out).max()
    if peak > 0:
        out *= PEAK / peak
    return AudioBuffer(out.astype(np.float32))


def synth_mixed_utterance(spec: SynthSpeakerSpec, seconds: float, rng: np.random.Generator,
                          speech_fraction: float = 0.5,
                          chunk_seconds: float = 1.0) -> AudioBuffer:
    """Utterance interleaving speech chunks with pure-noise chunks.

    ``speech_fraction`` of the total duration is voiced; the rest is white
    noise — the 'irrelevant signal' condition for the segment-length probe.
    """
    if not 0.0 <= speech_fraction <= 1.0:
        raise ValueError("speech_fraction must be in [0, 1]")
    n = int(round(seconds * SAMPLE_RATE))
    chunk = max(int(round(chunk_seconds * SAMPLE_RATE)), 1)
    n_chunks = max(n // chunk, 1)
    n_speech = int(round(speech_fraction * n_chunks))
    flags = np.zeros(n_chunks, dtype=bool)
    flags[rng.permutation(n_chunks)[:n_speech]] = True

    speech = synth_utterance(spec, seconds, rng).samples.astype(np.float64)
    noise = rng.standard_normal(n)
    noise *= PEAK / max(np.abs(noise).max(), 1e-12)

    out = noise.copy()
    for i, is_speech in enumerate(flags):
        if is_speech:
            lo = i * chunk
            hi = n if i == n_chunks - 1 else (i + 1) * chunk
            out[lo:hi] = speech[lo:hi]
    return AudioBuffer(out.astype(np.float32))


# ---------------------------------------------------------------------------
# dataset generation and manifests
# ---------------------------------------------------------------------------

def write_manifest(entries, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for speaker, rel in entries:
            fh.write(f"{speaker} {rel}\n")


def read_manifest(path) -> list[tuple[str, str]]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            speaker, rel = line.split(maxsplit=1)
            entries.append((speaker, rel))
    return entries


def make_synth_dataset(out_dir, n_speakers: int, utts_per_speaker: int,
                       seconds_range=(6.0, 10.0), rng: np.random.Generator | None = None,
                       speech_fraction: float = 1.0,
                       min_distance: float = MIN_SPEAKER_DISTANCE):
    """Write WAVs + manifests for a synthetic-speaker corpus.

    Returns (all_entries, train_entries, heldout_entries, specs). The split is
    80/20 per speaker by utterance index; everything is a pure function of the
    rng state.
    """
    if n_speakers < 2:
        raise ValueError("need at least two speakers")
    if rng is None:
        rng = np.random.default_rng(0)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    specs = draw_speaker_specs(n_speakers, rng, min_distance)
    entries, train, heldout = [], [], []
    n_train = int(round(utts_per_speaker * 0.8))
    for si, spec in enumerate(specs):
        speaker = f"spk{si:03d}"
        (out_dir / speaker).mkdir(exist_ok=True)
        for ui in range(utts_per_speaker):
            seconds = float(rng.uniform(*seconds_range))
            if speech_fraction >= 1.0:
                audio = synth_utterance(spec, seconds, rng)
            else:
                audio = synth_mixed_utterance(spec, seconds, rng, speech_fraction)
            rel = f"{speaker}/utt{ui:03d}.wav"
            save_wav(audio, out_dir / rel)
            entries.append((speaker, rel))
            (train if ui < n_train else heldout).append((speaker, rel))

    write_manifest(entries, out_dir / "manifest.txt")
    write_manifest(train, out_dir / "train.txt")
    write_manifest(heldout, out_dir / "heldout.txt")
    with open(out_dir / "speakers.json", "w", encoding="utf-8") as fh:
        json.dump([asdict(s) for s in specs], fh, indent=2)
    return entries, train, heldout, specs
