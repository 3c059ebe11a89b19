"""Phoneme-level prosody tokens: pitch buckets, clipped durations, and the frame alignment map.

Indices are 0-based throughout: ``AlignmentMap.f[t]`` is the phoneme index of
speech frame ``t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import AlignmentError, ConfigError

DEFAULT_PITCH_BUCKETS = 256
DEFAULT_MAX_DURATION = 32


@dataclass(frozen=True)
class PitchQuantizer:
    pitch_min: float = 0.0
    pitch_max: float = 1.0
    n_buckets: int = DEFAULT_PITCH_BUCKETS

    def __post_init__(self):
        if not self.pitch_min < self.pitch_max:
            raise ConfigError(f"pitch_min ({self.pitch_min}) must be < pitch_max ({self.pitch_max})")
        if self.n_buckets < 2:
            raise ConfigError(f"need at least 2 pitch buckets, got {self.n_buckets}")

    @classmethod
    def from_corpus(cls, values: Sequence[float], n_buckets: int = DEFAULT_PITCH_BUCKETS) -> "PitchQuantizer":
        """Fit the range to the 1st/99th percentiles of the voiced values."""
        voiced = np.asarray([v for v in values if v > 0], dtype=float)
        if voiced.size == 0:
            raise ConfigError("no voiced pitch values to fit a quantizer range")
        lo, hi = np.percentile(voiced, [1, 99])
        if hi <= lo:
            hi = lo + 1.0
        return cls(float(lo), float(hi), n_buckets)


@dataclass(frozen=True)
class ProsodySeq:
    pitch: tuple[int, ...]
    duration: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "pitch", tuple(int(p) for p in self.pitch))
        object.__setattr__(self, "duration", tuple(int(d) for d in self.duration))
        if len(self.pitch) != len(self.duration):
            raise AlignmentError(
                f"pitch and duration lengths differ: {len(self.pitch)} != {len(self.duration)}"
            )

    def __len__(self) -> int:
        return len(self.pitch)

    def validate(self, n_pitch: int, max_duration: int) -> None:
        for p in self.pitch:
            if not 0 <= p < n_pitch:
                raise AlignmentError(f"pitch bucket {p} outside [0, {n_pitch})")
        for d in self.duration:
            if not 1 <= d <= max_duration:
                raise AlignmentError(f"duration {d} outside [1, {max_duration}]")

    @property
    def total_duration(self) -> int:
        return sum(self.duration)

    def concat(self, other: "ProsodySeq") -> "ProsodySeq":
        return ProsodySeq(self.pitch + other.pitch, self.duration + other.duration)


@dataclass(frozen=True)
class AlignmentMap:
    """Speech-frame to phoneme map derived from durations.

    ``f[t]`` is the smallest phoneme index ``i`` with ``cum[i] > t``.
    """

    durations: tuple[int, ...]
    cum: tuple[int, ...] = field(init=False)
    f: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        durations = tuple(int(d) for d in self.durations)
        object.__setattr__(self, "durations", durations)
        object.__setattr__(self, "cum", tuple(np.cumsum(durations).tolist()))
        object.__setattr__(self, "f", tuple(np.repeat(np.arange(len(durations)), durations).tolist()))

    @property
    def total(self) -> int:
        return self.cum[-1] if self.cum else 0

    @property
    def n_phonemes(self) -> int:
        return len(self.durations)

    def phoneme_at(self, t: int) -> int:
        """Phoneme index for frame ``t``; frames past the end map to the last phoneme."""
        if t < 0:
            raise IndexError(t)
        return self.f[t] if t < len(self.f) else self.n_phonemes - 1

    def offset_at(self, t: int) -> int:
        """0-based position of frame ``t`` inside its phoneme."""
        i = self.f[t]
        start = self.cum[i - 1] if i > 0 else 0
        return t - start


def phoneme_pitch(frame_pitch: Sequence[float], durations: Sequence[int]) -> list[float]:
    """Mean voiced pitch of the frames aligned to each phoneme.

    Frames with pitch 0 are unvoiced and excluded; an all-unvoiced phoneme gets 0.
    """
    if any(d < 1 for d in durations):
        raise AlignmentError(f"durations must be >= 1, got {list(durations)}")
    frames = np.asarray(frame_pitch, dtype=float)
    if frames.shape[0] != sum(durations):
        raise AlignmentError(f"{frames.shape[0]} pitch frames but durations sum to {sum(durations)}")
    out = []
    start = 0
    for d in durations:
        seg = frames[start : start + d]
        voiced = seg[seg > 0]
        out.append(float(voiced.mean()) if voiced.size else 0.0)
        start += d
    return out


def quantize_pitch(value: float, q: PitchQuantizer) -> int:
    clamped = min(max(value, q.pitch_min), q.pitch_max)
    bucket = math.floor((clamped - q.pitch_min) / (q.pitch_max - q.pitch_min) * q.n_buckets)
    return min(max(bucket, 0), q.n_buckets - 1)


def clip_duration(d: int, max_duration: int = DEFAULT_MAX_DURATION) -> int:
    if d <= 0:
        raise AlignmentError(f"duration must be >= 1, got {d}")
    return min(d, max_duration)


def build_alignment_map(durations: Sequence[int]) -> AlignmentMap:
    if len(durations) == 0:
        raise AlignmentError("cannot build an alignment map from an empty duration list")
    if any(d < 1 for d in durations):
        raise AlignmentError(f"durations must be >= 1, got {list(durations)}")
    return AlignmentMap(tuple(durations))


def extract_prosody(
    frame_pitch: Sequence[float],
    durations: Sequence[int],
    q: PitchQuantizer,
    max_duration: int = DEFAULT_MAX_DURATION,
) -> ProsodySeq:
    """Frame pitch + alignment durations -> discrete phoneme-level prosody tokens."""
    means = phoneme_pitch(frame_pitch, durations)
    return ProsodySeq(
        tuple(quantize_pitch(m, q) for m in means),
        tuple(clip_duration(d, max_duration) for d in durations),
    )
