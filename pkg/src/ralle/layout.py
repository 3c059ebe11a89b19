"""AR chain-of-thought stream layout and NAR summed-embedding input.

The AR stream is::

    [x_prompt x_target SEP_P | pd_prompt pd_target | SEP_C c_prompt c_target]
     \\_____ PHONEME _____/   \\____ PROSODY ____/   \\______ SPEECH ______/

Every row predicts the next item of its own stream: ``SEP_P`` and prosody row
``i`` predict prosody ``i + 1``; ``SEP_C`` and speech row ``t`` predict frame
``t + 1``, and the last speech row predicts EOS.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np

from .errors import LayoutError
from .prosody import ProsodySeq

IGNORE = -100


class Segment(IntEnum):
    PHONEME = 0
    PROSODY = 1
    SPEECH = 2


class TokenType(IntEnum):
    PHONEME = 0
    SEP_P = 1
    PROSODY = 2
    SEP_C = 3
    SPEECH = 4


def _ints(seq) -> np.ndarray:
    return np.asarray(list(seq), dtype=np.int64).reshape(-1)


@dataclass(frozen=True)
class CodecMatrix:
    """T x N codec tokens; column 0 is the AR (first RVQ layer) target."""

    tokens: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.tokens, dtype=np.int64)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2:
            raise LayoutError(f"codec matrix must be 2-D, got shape {arr.shape}")
        object.__setattr__(self, "tokens", arr)

    @property
    def T(self) -> int:
        return self.tokens.shape[0]

    @property
    def N(self) -> int:
        return self.tokens.shape[1]

    def layer(self, j: int) -> np.ndarray:
        """Tokens of RVQ layer ``j`` (1-based, as in the usual notation)."""
        return self.tokens[:, j - 1]

    def check_range(self, vocab: int) -> None:
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= vocab):
            raise LayoutError(f"codec tokens outside [0, {vocab})")


@dataclass(frozen=True, eq=False)
class SequenceLayout:
    phonemes: np.ndarray
    pitch: np.ndarray
    duration: np.ndarray
    speech: np.ndarray
    L_prompt: int
    T_prompt: int
    with_prosody: bool = True
    has_eos_target: bool = True

    @property
    def L_total(self) -> int:
        return int(self.phonemes.shape[0])

    @property
    def T_total(self) -> int:
        return int(self.speech.shape[0])

    @property
    def L_target(self) -> int:
        return self.L_total - self.L_prompt

    @property
    def T_target(self) -> int:
        return self.T_total - self.T_prompt

    @property
    def sep_p(self) -> int:
        return self.L_total

    @property
    def prosody_start(self) -> int:
        return self.L_total + 1

    @property
    def prosody_len(self) -> int:
        return self.L_total if self.with_prosody else 0

    @property
    def sep_c(self) -> int:
        return self.prosody_start + self.prosody_len

    @property
    def speech_start(self) -> int:
        return self.sep_c + 1

    @property
    def eos_slot(self) -> int:
        """Row whose prediction target is EOS."""
        return self.length - 1

    @property
    def length(self) -> int:
        return self.speech_start + self.T_total

    def spans(self) -> dict[Segment, tuple[int, int]]:
        """Half-open [start, stop) per segment; separators belong to the span they open or close."""
        return {
            Segment.PHONEME: (0, self.sep_p + 1),
            Segment.PROSODY: (self.prosody_start, self.sep_c),
            Segment.SPEECH: (self.sep_c, self.length),
        }

    def tags(self) -> dict[str, np.ndarray]:
        """Per-position tags: segment, token type, item index within segment (-1 for separators), prompt flag."""
        S = self.length
        seg = np.empty(S, dtype=np.int64)
        kind = np.empty(S, dtype=np.int64)
        idx = np.full(S, -1, dtype=np.int64)
        prompt = np.zeros(S, dtype=bool)
        L, P = self.L_total, self.prosody_len
        seg[:L + 1] = Segment.PHONEME
        kind[:L] = TokenType.PHONEME
        kind[L] = TokenType.SEP_P
        idx[:L] = np.arange(L)
        prompt[:self.L_prompt] = True
        prompt[L] = True
        a = self.prosody_start
        seg[a:a + P] = Segment.PROSODY
        kind[a:a + P] = TokenType.PROSODY
        idx[a:a + P] = np.arange(P)
        prompt[a:a + min(self.L_prompt, P)] = True
        c = self.sep_c
        seg[c:] = Segment.SPEECH
        kind[c] = TokenType.SEP_C
        prompt[c] = True
        kind[c + 1:] = TokenType.SPEECH
        idx[c + 1:] = np.arange(self.T_total)
        prompt[c + 1:c + 1 + self.T_prompt] = True
        return {"segment": seg, "kind": kind, "index": idx, "is_prompt": prompt}

    def input_ids(self) -> dict[str, np.ndarray]:
        """Per-position token ids for every embedding table; -1 where a table does not apply."""
        S = self.length
        ph = np.full(S, -1, dtype=np.int64)
        pi = np.full(S, -1, dtype=np.int64)
        du = np.full(S, -1, dtype=np.int64)
        sp = np.full(S, -1, dtype=np.int64)
        hint = np.full(S, -1, dtype=np.int64)
        ph[:self.L_total] = self.phonemes
        if self.with_prosody:
            a, b = self.prosody_start, self.sep_c
            pi[a:b] = self.pitch
            du[a:b] = self.duration
            # the row that predicts prosody pair g also carries phoneme g
            hint[self.sep_p] = self.phonemes[0]
            hint[a:b - 1] = self.phonemes[1:]
        sp[self.speech_start:] = self.speech
        t = self.tags()
        return {"phoneme": ph, "pitch": pi, "duration": du, "speech": sp, "hint": hint,
                "kind": t["kind"], "index": t["index"]}

    def targets(self, eos_id: int) -> dict[str, np.ndarray]:
        """Next-item targets per row, ``IGNORE`` where no loss applies (prompt items, phoneme rows)."""
        S = self.length
        pitch_t = np.full(S, IGNORE, dtype=np.int64)
        dur_t = np.full(S, IGNORE, dtype=np.int64)
        speech_t = np.full(S, IGNORE, dtype=np.int64)
        if self.with_prosody:
            for i in range(self.L_prompt, self.L_total):
                row = self.sep_p if i == 0 else self.prosody_start + i - 1
                pitch_t[row] = self.pitch[i]
                dur_t[row] = self.duration[i] - 1
        for t in range(self.T_prompt, self.T_total):
            speech_t[self.sep_c + t] = self.speech[t]
        if self.has_eos_target:
            speech_t[self.eos_slot] = eos_id
        return {"pitch": pitch_t, "duration": dur_t, "speech": speech_t}

    def speech_frame_of_row(self, row: int) -> int:
        """0-based frame a speech-span row predicts (SEP_C predicts frame 0)."""
        return row - self.sep_c

    def recover(self) -> dict[str, np.ndarray]:
        """Rebuild the input sequences from the position tags alone."""
        t = self.tags()
        ids = self.input_ids()
        kind = t["kind"]
        ph = ids["phoneme"][kind == TokenType.PHONEME]
        pros = kind == TokenType.PROSODY
        sp = ids["speech"][kind == TokenType.SPEECH]
        prompt = t["is_prompt"]
        return {
            "x_prompt": ph[: self.L_prompt], "x_target": ph[self.L_prompt:],
            "pitch": ids["pitch"][pros], "duration": ids["duration"][pros],
            "c_prompt": sp[: int(prompt[kind == TokenType.SPEECH].sum())],
            "c_target": sp[int(prompt[kind == TokenType.SPEECH].sum()):],
        }


def assemble_ar_sequence(
    x_prompt: Sequence[int],
    x_target: Sequence[int],
    pros_prompt: ProsodySeq | None,
    pros_target: ProsodySeq | None,
    c_prompt: Sequence[int],
    c_target: Sequence[int] = (),
    *,
    prompt_frames: int | None = None,
    with_eos: bool | None = None,
) -> SequenceLayout:
    """Build the AR stream. Pass ``None`` prosody for the no-prosody (baseline) layout.

    ``prompt_frames`` is the prompt's total duration; when given, ``c_prompt``
    must have exactly that length. ``with_eos`` defaults to "target speech given".
    """
    x_prompt, x_target = _ints(x_prompt), _ints(x_target)
    c_prompt, c_target = _ints(c_prompt), _ints(c_target)
    if x_target.size == 0:
        raise LayoutError("target phoneme sequence is empty")
    with_prosody = pros_prompt is not None or pros_target is not None
    if with_prosody:
        pros_prompt = pros_prompt or ProsodySeq((), ())
        pros_target = pros_target or ProsodySeq((), ())
        if len(pros_prompt) != x_prompt.size:
            raise LayoutError(f"prompt prosody length {len(pros_prompt)} != prompt phonemes {x_prompt.size}")
        if len(pros_target) != x_target.size:
            raise LayoutError(f"target prosody length {len(pros_target)} != target phonemes {x_target.size}")
        pros = pros_prompt.concat(pros_target)
        pitch, duration = _ints(pros.pitch), _ints(pros.duration)
    else:
        pitch = np.zeros(0, dtype=np.int64)
        duration = np.zeros(0, dtype=np.int64)
    if prompt_frames is not None and c_prompt.size != prompt_frames:
        raise LayoutError(f"prompt speech length {c_prompt.size} != prompt duration {prompt_frames}")
    if with_eos is None:
        with_eos = c_target.size > 0
    return SequenceLayout(
        phonemes=np.concatenate([x_prompt, x_target]),
        pitch=pitch,
        duration=duration,
        speech=np.concatenate([c_prompt, c_target]),
        L_prompt=int(x_prompt.size),
        T_prompt=int(c_prompt.size),
        with_prosody=with_prosody,
        has_eos_target=bool(with_eos),
    )


@dataclass(frozen=True, eq=False)
class NarInput:
    """Everything the NAR model sums into its input embeddings for layer ``j``.

    Phoneme positions carry phoneme + pitch + duration embeddings. Speech
    positions carry the sum of codec embeddings of layers ``< j`` (all ``N``
    layers for prompt frames) plus a layer-id embedding added everywhere.
    """

    phonemes: np.ndarray
    pitch: np.ndarray | None
    duration: np.ndarray | None
    codes: np.ndarray  # T_total x N, entries of layers >= j are ignored for target frames
    T_prompt: int
    layer: int
    n_layers: int

    @property
    def L(self) -> int:
        return int(self.phonemes.shape[0])

    @property
    def T(self) -> int:
        return int(self.codes.shape[0])

    @property
    def length(self) -> int:
        return self.L + self.T

    def summed_layers(self) -> list[list[int]]:
        """Which codec layers (1-based) are summed at each speech position."""
        out = []
        for t in range(self.T):
            top = self.n_layers if t < self.T_prompt else self.layer - 1
            out.append(list(range(1, top + 1)))
        return out

    def code_mask(self) -> np.ndarray:
        """T x N boolean: True where the codec embedding enters the sum."""
        m = np.zeros((self.T, self.n_layers), dtype=bool)
        m[: self.T_prompt, :] = True
        m[self.T_prompt:, : self.layer - 1] = True
        return m

    def target(self) -> np.ndarray:
        """Layer-``j`` tokens of the target frames."""
        return self.codes[self.T_prompt:, self.layer - 1]


def assemble_nar_input(
    x: Sequence[int],
    pros: ProsodySeq | None,
    codes: CodecMatrix | np.ndarray,
    layer: int,
    *,
    T_prompt: int = 0,
) -> NarInput:
    """Input recipe for predicting RVQ layer ``layer`` (1-based, 2..N) of every target frame."""
    codes = codes if isinstance(codes, CodecMatrix) else CodecMatrix(codes)
    N = codes.N
    if not 2 <= layer <= N:
        raise LayoutError(f"NAR layer {layer} outside [2, {N}]")
    x = _ints(x)
    if pros is not None and len(pros) != x.size:
        raise LayoutError(f"prosody length {len(pros)} != phonemes {x.size}")
    if pros is not None and pros.total_duration != codes.T:
        raise LayoutError(f"durations sum to {pros.total_duration} but codec has {codes.T} frames")
    return NarInput(
        phonemes=x,
        pitch=None if pros is None else _ints(pros.pitch),
        duration=None if pros is None else _ints(pros.duration),
        codes=codes.tokens.copy(),
        T_prompt=int(T_prompt),
        layer=int(layer),
        n_layers=N,
    )
