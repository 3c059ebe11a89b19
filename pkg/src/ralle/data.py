"""Utterance records and their JSONL serialization."""

from __future__ import annotations

import gzip
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .layout import CodecMatrix, SequenceLayout, assemble_ar_sequence
from .prosody import AlignmentMap, ProsodySeq, build_alignment_map

SCHEMA_VERSION = 1


@dataclass
class Utterance:
    """One synthetic utterance plus its acoustic prompt.

    ``durations`` are the alignment durations the model sees; ``true_durations``
    are the ones the codec tokens were rendered with (they differ when the
    corpus simulates alignment-tool errors).
    """

    uid: str
    phonemes: list[int]
    pitch_buckets: list[int]
    durations: list[int]
    codec_tokens: list[list[int]]
    prompt_phonemes: list[int] = field(default_factory=list)
    prompt_pitch_buckets: list[int] = field(default_factory=list)
    prompt_durations: list[int] = field(default_factory=list)
    prompt_codec_tokens: list[list[int]] = field(default_factory=list)
    true_durations: list[int] | None = None
    prompt_true_durations: list[int] | None = None
    speaker: int = 0
    category: str = "regular"

    @property
    def L(self) -> int:
        return len(self.phonemes)

    @property
    def T(self) -> int:
        return len(self.codec_tokens)

    @property
    def prosody(self) -> ProsodySeq:
        return ProsodySeq(self.pitch_buckets, self.durations)

    @property
    def prompt_prosody(self) -> ProsodySeq:
        return ProsodySeq(self.prompt_pitch_buckets, self.prompt_durations)

    @property
    def codes(self) -> CodecMatrix:
        return CodecMatrix(np.asarray(self.codec_tokens, dtype=np.int64).reshape(self.T, -1))

    @property
    def prompt_codes(self) -> np.ndarray:
        n = len(self.codec_tokens[0]) if self.codec_tokens else 1
        return np.asarray(self.prompt_codec_tokens, dtype=np.int64).reshape(-1, n)

    @property
    def render_durations(self) -> list[int]:
        return self.true_durations if self.true_durations is not None else self.durations

    @property
    def prompt_render_durations(self) -> list[int]:
        return self.prompt_true_durations if self.prompt_true_durations is not None else self.prompt_durations

    def alignment(self) -> AlignmentMap:
        """Joint prompt + target alignment used for masking."""
        return build_alignment_map(list(self.prompt_durations) + list(self.durations))

    def layer1(self) -> list[int]:
        return [row[0] for row in self.codec_tokens]

    def ar_layout(self, with_prosody: bool = True, *, with_target: bool = True) -> SequenceLayout:
        return assemble_ar_sequence(
            self.prompt_phonemes,
            self.phonemes,
            self.prompt_prosody if with_prosody else None,
            self.prosody if with_prosody else None,
            [row[0] for row in self.prompt_codec_tokens],
            self.layer1() if with_target else [],
            prompt_frames=sum(self.prompt_durations),
        )

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("true_durations", "prompt_true_durations"):
            if d[k] is None:
                del d[k]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Utterance":
        d = dict(d)
        d.pop("schema", None)
        return cls(**d)


def _open(path: Path, mode: str):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def write_jsonl(path: str | Path, records: Iterable[Utterance]) -> int:
    n = 0
    with _open(Path(path), "w") as fh:
        for r in records:
            fh.write(json.dumps({"schema": SCHEMA_VERSION, **r.to_json()}, sort_keys=True, separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def iter_jsonl(path: str | Path) -> Iterator[Utterance]:
    with _open(Path(path), "r") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield Utterance.from_json(json.loads(line))


def read_jsonl(path: str | Path) -> list[Utterance]:
    return list(iter_jsonl(path))
