"""Synthetic corpora rendered through a deterministic, decodable toy codec.

Each frame's token on layer ``j`` is::

    (a_j * x + b_j * pitch_class + c_j * min(offset, phase_cap) + layer_offset_j) mod V

where ``x`` is the aligned phoneme, ``pitch_class`` a coarse class of its pitch
bucket and ``offset`` the frame's position inside the phoneme. The default
coefficients make layer 1 uniquely decodable into (phoneme class, pitch class,
phase) and layers 1..N jointly decodable into the exact phoneme id.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Utterance, write_jsonl
from .errors import ConfigError
from .layout import CodecMatrix
from .prosody import PitchQuantizer, ProsodySeq, build_alignment_map, extract_prosody

logger = logging.getLogger(__name__)

HARD_CATEGORIES = ("single", "repeat", "long_mixed")


@dataclass(frozen=True)
class Decoded:
    phoneme_class: int
    pitch_class: int
    phase: int


@dataclass(frozen=True)
class ToyCodecRule:
    vocab: int = 64
    n_layers: int = 2
    a: tuple[int, ...] = (8, 2)
    b: tuple[int, ...] = (4, 1)
    c: tuple[int, ...] = (1, 0)
    layer_offsets: tuple[int, ...] = (0, 0)
    phase_cap: int = 3
    pitch_classes: int = 2
    n_pitch: int = 256

    def __post_init__(self):
        for name in ("a", "b", "c", "layer_offsets"):
            v = tuple(int(t) for t in getattr(self, name))
            object.__setattr__(self, name, v)
            if len(v) != self.n_layers:
                raise ConfigError(f"toy codec needs {self.n_layers} '{name}' coefficients, got {len(v)}")
        if self.n_layers < 2:
            raise ConfigError("toy codec needs at least 2 layers")

    def pitch_class(self, bucket: int) -> int:
        return min(bucket * self.pitch_classes // self.n_pitch, self.pitch_classes - 1)

    def phoneme_class(self, x: int) -> int:
        """Layer-1 identity of a phoneme (phonemes with equal class share layer-1 tokens)."""
        return (self.a[0] * x) % self.vocab

    def token(self, layer: int, x: int, bucket: int, offset: int) -> int:
        j = layer - 1
        pc = self.pitch_class(bucket)
        ph = min(offset, self.phase_cap)
        return (self.a[j] * x + self.b[j] * pc + self.c[j] * ph + self.layer_offsets[j]) % self.vocab

    def decode_table(self) -> dict[int, Optional[Decoded]]:
        """Layer-1 token -> (class, pitch class, phase); None where ambiguous or unreachable."""
        hits: dict[int, set] = {}
        for xc in sorted({(self.a[0] * x) % self.vocab for x in range(self.vocab)}):
            for pc in range(self.pitch_classes):
                for ph in range(self.phase_cap + 1):
                    v = (xc + self.b[0] * pc + self.c[0] * ph + self.layer_offsets[0]) % self.vocab
                    hits.setdefault(v, set()).add(Decoded(xc, pc, ph))
        return {v: (next(iter(h)) if len(h) == 1 else None) for v, h in hits.items()}

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("a", "b", "c", "layer_offsets"):
            d[k] = list(d[k])
        return d


def toy_encode(
    x: Sequence[int], pros: ProsodySeq, rule: ToyCodecRule, durations: Sequence[int] | None = None
) -> CodecMatrix:
    """Render phonemes + prosody into a T x N token matrix.

    ``durations`` overrides the prosody durations (used when the prosody
    carries clipped or mis-aligned durations).
    """
    durs = list(pros.duration if durations is None else durations)
    if len(x) != len(pros) or len(durs) != len(x):
        raise ConfigError(f"length mismatch: {len(x)} phonemes, {len(pros)} prosody, {len(durs)} durations")
    if not durs:
        return CodecMatrix(np.zeros((0, rule.n_layers), dtype=np.int64))
    align = build_alignment_map(durs)
    out = np.empty((align.total, rule.n_layers), dtype=np.int64)
    for t in range(align.total):
        i = align.f[t]
        o = align.offset_at(t)
        for j in range(1, rule.n_layers + 1):
            out[t, j - 1] = rule.token(j, x[i], pros.pitch[i], o)
    return CodecMatrix(out)


def toy_decode(tokens: Sequence[int], rule: ToyCodecRule, table: dict | None = None) -> list[Optional[Decoded]]:
    """Decode layer-1 tokens; None marks a token that cannot be decoded."""
    table = rule.decode_table() if table is None else table
    return [table.get(int(v)) for v in tokens]


@dataclass(frozen=True)
class Block:
    phoneme_class: Optional[int]
    pitch_class: Optional[int]
    length: int
    well_formed: bool = True


def segment_blocks(decoded: Sequence[Optional[Decoded]], phase_cap: int = 3) -> list[Block]:
    """Group decoded frames into phoneme blocks.

    A block starts at phase 0 or wherever the class changes. A block is
    well formed when its phases run 0, 1, 2, ... up to the cap. Undecodable
    frames form one-frame blocks of their own with class None.
    """
    blocks: list[Block] = []
    run: list[Decoded] = []

    def close():
        if run:
            ok = all(d.phase == min(i, phase_cap) for i, d in enumerate(run))
            blocks.append(Block(run[0].phoneme_class, run[0].pitch_class, len(run), ok))
            run.clear()

    for d in decoded:
        if d is None:
            close()
            blocks.append(Block(None, None, 1, False))
            continue
        if run and (d.phase == 0 or d.phoneme_class != run[0].phoneme_class or d.pitch_class != run[0].pitch_class):
            close()
        run.append(d)
    close()
    return blocks


def transcript(tokens: Sequence[int], rule: ToyCodecRule, table: dict | None = None) -> list[int]:
    """Phoneme-class sequence read off layer-1 tokens; -1 marks an undecodable block."""
    return [-1 if b.phoneme_class is None else b.phoneme_class for b in segment_blocks(toy_decode(tokens, rule, table), rule.phase_cap)]


# ---------------------------------------------------------------- corpus generation


@dataclass(frozen=True)
class CorpusConfig:
    phoneme_vocab: int = 32
    n_pitch: int = 256
    max_duration: int = 32
    min_len: int = 4
    max_len: int = 16
    min_dur: int = 1
    max_dur: int = 8
    dur_jitter: int = 1
    rate_spread: float = 0.4
    n_speakers: int = 8
    prompt_min_len: int = 2
    prompt_max_len: int = 4
    pitch_step: float = 0.04
    pitch_reversion: float = 0.15
    unvoiced_prob: float = 0.1
    align_jitter: float = 0.0
    n_train: int = 2000
    n_test: int = 200
    hard_per_category: int = 50
    hard_repeat_min: int = 8
    hard_repeat_max: int = 20
    hard_long_min: int = 16
    hard_long_max: int = 24
    digit_vocab: int = 4
    seed: int = 0
    codec: ToyCodecRule = field(default_factory=ToyCodecRule)

    def __post_init__(self):
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(f"bad length range [{self.min_len}, {self.max_len}]")
        if not 1 <= self.min_dur <= self.max_dur <= self.max_duration:
            raise ConfigError(f"bad duration range [{self.min_dur}, {self.max_dur}] (cap {self.max_duration})")
        if self.codec.n_pitch != self.n_pitch:
            raise ConfigError("codec pitch bucket count must match the corpus")
        if self.digit_vocab > self.phoneme_vocab:
            raise ConfigError("digit vocabulary larger than the phoneme vocabulary")
        if not 0 <= self.align_jitter <= 1:
            raise ConfigError("align_jitter is a probability")
        if not 0 <= self.rate_spread < 1:
            raise ConfigError("rate_spread must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["codec"] = self.codec.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        codec = d.pop("codec", None)
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        if codec is not None:
            kw["codec"] = ToyCodecRule(**codec) if isinstance(codec, dict) else codec
        return cls(**kw)


_SPLITS = {"train": 0, "test": 1, "single": 2, "repeat": 3, "long_mixed": 4}


class _World:
    """Fixed per-corpus tables: phoneme base durations and speaker pitch levels."""

    def __init__(self, cfg: CorpusConfig):
        rng = np.random.default_rng([cfg.seed, 99])
        lo, hi = cfg.min_dur, cfg.max_dur
        self.base_dur = rng.integers(lo, hi + 1, size=cfg.phoneme_vocab)
        self.speaker_pitch = rng.uniform(0.25, 0.75, size=cfg.n_speakers)
        # speaking rate: per-speaker factor on every base duration
        self.speaker_rate = rng.uniform(1 - cfg.rate_spread, 1 + cfg.rate_spread, size=cfg.n_speakers)
        self.quantizer = PitchQuantizer(0.0, 1.0, cfg.n_pitch)


def _durations(
    x: Sequence[int], cfg: CorpusConfig, world: _World, rng: np.random.Generator, speaker: int
) -> list[int]:
    noise = rng.integers(-cfg.dur_jitter, cfg.dur_jitter + 1, size=len(x))
    rate = world.speaker_rate[speaker]
    return [int(np.clip(round(world.base_dur[p] * rate) + n, cfg.min_dur, cfg.max_dur)) for p, n in zip(x, noise)]


def _frame_pitch(n: int, level: float, cfg: CorpusConfig, rng: np.random.Generator) -> np.ndarray:
    out = np.empty(n)
    v = level + rng.normal(0, 0.1)
    for t in range(n):
        v += cfg.pitch_reversion * (level - v) + rng.normal(0, cfg.pitch_step)
        v = float(np.clip(v, 0.01, 0.99))
        out[t] = v
    out[rng.random(n) < cfg.unvoiced_prob] = 0.0
    return out


def _jitter(durs: list[int], p: float, rng: np.random.Generator) -> list[int]:
    """Shift phoneme boundaries by one frame, as an imperfect aligner would."""
    out = list(durs)
    for i in range(len(out) - 1):
        if rng.random() < p:
            step = 1 if rng.random() < 0.5 else -1
            if out[i] + step >= 1 and out[i + 1] - step >= 1:
                out[i] += step
                out[i + 1] -= step
    return out


def _render(
    x: Sequence[int], cfg: CorpusConfig, world: _World, rng: np.random.Generator, speaker: int, jitter: float
):
    true_d = _durations(x, cfg, world, rng, speaker)
    frames = _frame_pitch(sum(true_d), world.speaker_pitch[speaker], cfg, rng)
    seen_d = _jitter(true_d, jitter, rng) if jitter > 0 else list(true_d)
    pros = extract_prosody(frames, seen_d, world.quantizer, cfg.max_duration)
    # tokens carry the pitch class the aligner would report; timing follows the true durations
    codes = toy_encode(x, pros, cfg.codec, durations=true_d)
    return pros, seen_d, true_d, codes


def make_utterance(
    uid: str, x: Sequence[int], cfg: CorpusConfig, world: _World, rng: np.random.Generator,
    category: str = "regular", jitter: float | None = None,
) -> Utterance:
    jitter = cfg.align_jitter if jitter is None else jitter
    speaker = int(rng.integers(cfg.n_speakers))
    xp: list[int] = []
    if cfg.prompt_max_len > 0:
        n_prompt = int(rng.integers(cfg.prompt_min_len, cfg.prompt_max_len + 1))
        xp = rng.integers(cfg.phoneme_vocab, size=n_prompt).tolist()
    pros, seen_d, true_d, codes = _render(x, cfg, world, rng, speaker, jitter)
    if xp:
        ppros, pseen, ptrue, pcodes = _render(xp, cfg, world, rng, speaker, jitter)
    else:
        ppros, pseen, ptrue = ProsodySeq((), ()), [], []
        pcodes = CodecMatrix(np.zeros((0, cfg.codec.n_layers), dtype=np.int64))
    return Utterance(
        uid=uid,
        phonemes=[int(p) for p in x],
        pitch_buckets=list(pros.pitch),
        durations=list(pros.duration),
        codec_tokens=codes.tokens.tolist(),
        prompt_phonemes=[int(p) for p in xp],
        prompt_pitch_buckets=list(ppros.pitch),
        prompt_durations=list(ppros.duration),
        prompt_codec_tokens=pcodes.tokens.tolist(),
        true_durations=None if seen_d == true_d else list(true_d),
        prompt_true_durations=None if pseen == ptrue else list(ptrue),
        speaker=speaker,
        category=category,
    )


def generate_split(cfg: CorpusConfig, split: str, n: int) -> list[Utterance]:
    world = _World(cfg)
    out = []
    for i in range(n):
        rng = np.random.default_rng([cfg.seed, _SPLITS[split], i])
        L = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        x = rng.integers(cfg.phoneme_vocab, size=L).tolist()
        out.append(make_utterance(f"{split}-{i:05d}", x, cfg, world, rng))
    return out


def generate_hard(cfg: CorpusConfig, category: str, n: int) -> list[Utterance]:
    """Structural analogs of hard sentences. Rendered without alignment noise."""
    if category not in HARD_CATEGORIES:
        raise ConfigError(f"unknown hard category {category!r}")
    world = _World(cfg)
    out = []
    for i in range(n):
        rng = np.random.default_rng([cfg.seed, _SPLITS[category], i])
        if category == "single":
            x = [int(rng.integers(cfg.phoneme_vocab))]
        elif category == "repeat":
            reps = int(rng.integers(cfg.hard_repeat_min, cfg.hard_repeat_max + 1))
            x = [int(rng.integers(cfg.phoneme_vocab))] * reps
        else:
            L = int(rng.integers(cfg.hard_long_min, cfg.hard_long_max + 1))
            x = []
            while len(x) < L:
                if rng.random() < 0.5:
                    run = int(rng.integers(3, 7))
                    x += rng.integers(cfg.digit_vocab, size=run).tolist()
                else:
                    x += rng.integers(cfg.phoneme_vocab, size=int(rng.integers(1, 4))).tolist()
            x = x[:L]
        out.append(make_utterance(f"{category}-{i:03d}", x, cfg, world, rng, category=category, jitter=0.0))
    return out


def gen_corpus(cfg: CorpusConfig, out_dir: str | Path) -> dict[str, Path]:
    """Write ``train.jsonl`` and ``test.jsonl``; byte-identical for a fixed seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, n in (("train", cfg.n_train), ("test", cfg.n_test)):
        p = out_dir / f"{split}.jsonl"
        write_jsonl(p, generate_split(cfg, split, n))
        paths[split] = p
        logger.info("wrote %d %s utterances to %s", n, split, p)
    return paths


def gen_hard_suite(cfg: CorpusConfig, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for cat in HARD_CATEGORIES:
        records += generate_hard(cfg, cat, cfg.hard_per_category)
    p = out_dir / "hard.jsonl"
    write_jsonl(p, records)
    return p


def check_encoding(utt: Utterance, rule: ToyCodecRule) -> bool:
    """Re-render an utterance (target and prompt) and compare with its stored tokens."""

    def same(x, pitch, durs, tokens):
        if not x:
            return len(tokens) == 0
        pros = ProsodySeq(pitch, durs)
        return toy_encode(x, pros, rule, durations=durs).tokens.tolist() == [list(r) for r in tokens]

    return same(utt.phonemes, utt.pitch_buckets, utt.render_durations, utt.codec_tokens) and same(
        utt.prompt_phonemes, utt.prompt_pitch_buckets, utt.prompt_render_durations, utt.prompt_codec_tokens
    )
