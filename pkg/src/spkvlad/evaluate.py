"""Verification scoring: cosine trials, EER, pair sampling, length probe.

EER convention, fixed here once: sweep thresholds over the distinct scores
(plus sentinels below the min and above the max), with

    FAR(t) = fraction of negative trials scoring >= t   (ties accept)
    FRR(t) = fraction of positive trials scoring <  t

and the equal-error point linearly interpolated between the two bracketing
thresholds where FAR - FRR changes sign. The sweep only sees the score
ordering, so any strictly increasing transform of all scores leaves the EER
bit-identical. Negatives tied with the threshold count as false accepts;
on tie-free scores, negating scores and flipping labels is an exact
symmetry.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import audio
from .train import SpectrogramDataset


@dataclass(frozen=True)
class VerificationPair:
    label: bool          # True: same speaker
    path_a: str
    path_b: str


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError("scores and labels must be parallel 1-D arrays")
        if self.scores.size < 2:
            raise ValueError("need at least two trials")
        if self.labels.all() or not self.labels.any():
            raise ValueError("need at least one positive and one negative trial")


@dataclass(frozen=True)
class EerResult:
    eer: float
    threshold: float


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    """dot(a, b) / (|a| |b|); rejects zero vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"embedding dims differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine_score of a zero vector")
    return float(a @ b / (na * nb))


def compute_eer(scores: ScoreSet) -> EerResult:
    """Equal error rate of a labelled score set (see module docstring)."""
    pos = np.sort(scores.scores[scores.labels])
    neg = np.sort(scores.scores[~scores.labels])
    ts = np.unique(scores.scores)
    far = (neg.size - np.searchsorted(neg, ts, side="left")) / neg.size
    frr = np.searchsorted(pos, ts, side="left") / pos.size
    ts = np.concatenate(([ts[0] - 1.0], ts, [ts[-1] + 1.0]))
    far = np.concatenate(([1.0], far, [0.0]))
    frr = np.concatenate(([0.0], frr, [1.0]))

    d = far - frr
    j = int(np.argmax(d < 0))        # first threshold with FAR < FRR
    i = j - 1
    denom = d[i] - d[j]
    alpha = 0.0 if denom == 0 else d[i] / denom
    eer = far[i] + alpha * (far[j] - far[i])
    thr = ts[i] + alpha * (ts[j] - ts[i])
    return EerResult(float(eer), float(thr))


def sample_pairs(dataset: SpectrogramDataset, pos_per_speaker: int,
                 neg_per_speaker: int, rng: np.random.Generator) -> list[VerificationPair]:
    """Per speaker: same-speaker and cross-speaker trials, seeded.

    Pairs are drawn without replacement while distinct pairs remain, then
    with replacement. Every speaker needs at least two utterances.
    """
    by_spk = dataset.by_speaker()
    speakers = dataset.speakers
    for spk, utts in by_spk.items():
        if len(utts) < 2:
            raise ValueError(f"speaker '{spk}' has {len(utts)} utterance(s); need >= 2")

    pairs: list[VerificationPair] = []
    for spk in speakers:
        utts = by_spk[spk]
        combos = [(a, b) for ai, a in enumerate(utts) for b in utts[ai + 1:]]
        take = min(pos_per_speaker, len(combos))
        chosen = [combos[i] for i in rng.choice(len(combos), size=take, replace=False)]
        for _ in range(pos_per_speaker - take):
            chosen.append(combos[int(rng.integers(len(combos)))])
        pairs.extend(VerificationPair(True, a, b) for a, b in chosen)

        others = [(ospk, rel) for ospk in speakers if ospk != spk
                  for rel in by_spk[ospk]]
        universe = len(utts) * len(others)
        take = min(neg_per_speaker, universe)
        flat = rng.choice(universe, size=take, replace=False)
        neg_idx = list(flat) + [int(rng.integers(universe))
                                for _ in range(neg_per_speaker - take)]
        for f in neg_idx:
            a = utts[f // len(others)]
            b = others[f % len(others)][1]
            pairs.append(VerificationPair(False, a, b))
    return pairs


def score_pairs(model, pairs: list[VerificationPair], dataset: SpectrogramDataset,
                crop_seconds: float | None = None,
                rng: np.random.Generator | None = None) -> ScoreSet:
    """Embed both sides of every trial and emit cosine scores.

    Full-length scoring caches one embedding per unique path; with
    ``crop_seconds`` each trial side gets a fresh random crop (identical
    crops still share the cache through their (path, start, frames) key).
    """
    if crop_seconds is not None and rng is None:
        raise ValueError("cropped scoring needs an rng")
    cache: dict[tuple, np.ndarray] = {}

    def embed(rel: str) -> np.ndarray:
        spec = dataset.spectrogram(rel)
        if crop_seconds is None:
            key = (rel, None, None)
        else:
            start, frames = audio.draw_crop_start(spec, crop_seconds, rng)
            key = (rel, start, frames)
        if key not in cache:
            if crop_seconds is not None:
                spec = audio.crop_at(spec, key[1], key[2])
            cache[key] = model.embed(spec)
        return cache[key]

    scores = np.array([cosine_score(embed(p.path_a), embed(p.path_b)) for p in pairs])
    labels = np.array([p.label for p in pairs], dtype=bool)
    return ScoreSet(scores, labels)


def length_probe(model, dataset: SpectrogramDataset, lengths=(2, 3, 4, 5, 6),
                 repeats: int = 3, rng: np.random.Generator | None = None,
                 pos_per_speaker: int = 10, neg_per_speaker: int = 10):
    """EER vs crop length: mean and population std over seeded repeats.

    Returns a list of (length_seconds, eer_mean, eer_std). All utterances
    must be at least max(lengths) seconds long.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    need = int(round(max(lengths) * 100))
    for _, rel in dataset.entries:
        frames = dataset.spectrogram(rel).frames
        if frames < need:
            raise ValueError(
                f"'{rel}' has {frames} frames; the probe needs >= {need} "
                f"({max(lengths)} s)")
    pairs = sample_pairs(dataset, pos_per_speaker, neg_per_speaker, rng)
    rows = []
    for length in lengths:
        eers = [compute_eer(score_pairs(model, pairs, dataset,
                                        crop_seconds=float(length), rng=rng)).eer
                for _ in range(repeats)]
        rows.append((float(length), float(np.mean(eers)), float(np.std(eers))))
    return rows


# ---------------------------------------------------------------------------
# file formats: pair lists, score CSVs, probe CSVs
# ---------------------------------------------------------------------------

def write_pair_list(pairs: list[VerificationPair], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(f"{1 if p.label else 0} {p.path_a} {p.path_b}\n")


def read_pair_list(path) -> list[VerificationPair]:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            label, a, b = line.split()
            if label not in ("0", "1"):
                raise ValueError(f"pair label must be 0 or 1, got '{label}'")
            pairs.append(VerificationPair(label == "1", a, b))
    return pairs


def write_scores_csv(pairs: list[VerificationPair], scores: ScoreSet, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("label,path_a,path_b,score\n")
        for p, s in zip(pairs, scores.scores):
            fh.write(f"{1 if p.label else 0},{p.path_a},{p.path_b},{s:.8f}\n")


def read_scores_csv(path) -> ScoreSet:
    scores, labels = [], []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "label,path_a,path_b,score":
            raise ValueError(f"unexpected score CSV header: '{header}'")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            label, _, _, score = line.split(",")
            labels.append(label == "1")
            scores.append(float(score))
    return ScoreSet(np.array(scores), np.array(labels))


def write_probe_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("length_s,eer_mean,eer_std\n")
        for length, mean, std in rows:
            fh.write(f"{length:g},{mean:.6f},{std:.6f}\n")
