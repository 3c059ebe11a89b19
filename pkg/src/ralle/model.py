"""AR and NAR codec language models with prosody heads, their losses and the training loop."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import __version__
from .data import Utterance
from .errors import CheckpointError, ConfigError, EmptyLossError, TrainingDiverged
from .layout import IGNORE, NarInput, SequenceLayout, TokenType, assemble_nar_input
from .masking import MaskConfig, MaskSet, build_ar_mask

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RALLECK1"
CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    dim: int = 64
    ff_dim: int = 256
    heads: tuple[int, int, int] = (1, 1, 2)
    dropout: float = 0.1
    phoneme_vocab: int = 32
    n_pitch: int = 256
    max_duration: int = 32
    codec_vocab: int = 64
    n_codebooks: int = 2
    k: Optional[int] = 1
    grouping: bool = True
    baseline_mode: bool = False
    with_prosody: bool = True
    use_pitch: bool = True
    use_duration: bool = True
    sinusoidal: bool = True
    max_positions: int = 1024
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    phoneme_hint: bool = True

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        if self.dim % self.n_heads:
            raise ConfigError(f"model dim {self.dim} not divisible by {self.n_heads} heads")
        if self.n_codebooks < 2:
            raise ConfigError("need at least 2 codec layers (one AR, one or more NAR)")
        if self.with_prosody and not (self.use_pitch or self.use_duration):
            raise ConfigError("a prosody stream needs pitch or duration tokens")
        if self.k is not None and self.k < 0:
            raise ConfigError(f"window size must be >= 0, got {self.k}")

    @property
    def n_heads(self) -> int:
        return sum(self.heads)

    @property
    def eos_id(self) -> int:
        return self.codec_vocab

    @property
    def predicts_pitch(self) -> bool:
        return self.with_prosody and self.use_pitch

    @property
    def predicts_duration(self) -> bool:
        return self.with_prosody and self.use_duration

    def mask_config(self) -> MaskConfig:
        return MaskConfig(
            k=self.k,
            grouping=self.grouping,
            baseline_mode=self.baseline_mode,
            heads=self.heads,
            no_pitch=not self.use_pitch,
            no_duration_cot=not self.use_duration,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["heads"] = list(self.heads)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class StepLogits(NamedTuple):
    pitch: Optional[torch.Tensor]
    duration: Optional[torch.Tensor]
    speech: torch.Tensor


# ---------------------------------------------------------------- building blocks


def sinusoid_table(n: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(n, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div[: dim // 2])
    return pe.to(dtype)


class PositionEncoding(nn.Module):
    def __init__(self, dim: int, max_positions: int, sinusoidal: bool = True):
        super().__init__()
        self.sinusoidal = sinusoidal
        if sinusoidal:
            self.register_buffer("table", sinusoid_table(max_positions, dim), persistent=False)
        else:
            self.table = nn.Parameter(torch.zeros(max_positions, dim))

    def forward(self, pos: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
        return self.table.to(dtype)[pos]


class MaskedSelfAttention(nn.Module):
    """Multi-head self-attention with a per-head boolean mask (True = may attend)."""

    def __init__(self, dim: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor, cache: Optional[list] = None) -> torch.Tensor:
        B, s, D = x.shape
        q, k, v = self.qkv(x).split(D, dim=-1)
        q, k, v = (t.view(B, s, self.n_heads, self.head_dim).transpose(1, 2) for t in (q, k, v))
        if cache is not None:
            if cache:
                k = torch.cat([cache[0], k], dim=2)
                v = torch.cat([cache[1], v], dim=2)
            cache[:] = [k, v]
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~mask, float("-inf"))
        w = self.drop(torch.softmax(scores, dim=-1))
        out = (w @ v).transpose(1, 2).reshape(B, s, D)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim: int, ff_dim: int, n_heads: int, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = MaskedSelfAttention(dim, n_heads, dropout)
        self.ln2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.GELU(), nn.Linear(ff_dim, dim))
        self.drop = nn.Dropout(dropout)

    def forward(self, h, mask, cache=None):
        h = h + self.drop(self.attn(self.ln1(h), mask, cache))
        return h + self.drop(self.ff(self.ln2(h)))


class Backbone(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            Block(cfg.dim, cfg.ff_dim, cfg.n_heads, cfg.dropout) for _ in range(cfg.n_layers)
        )
        self.ln_f = nn.LayerNorm(cfg.dim)

    def forward(self, h, mask, caches=None):
        for i, blk in enumerate(self.blocks):
            h = blk(h, mask, None if caches is None else caches[i])
        return self.ln_f(h)


def _lookup(table: nn.Embedding, ids: torch.Tensor) -> torch.Tensor:
    """Embedding lookup where negative ids contribute zero."""
    valid = (ids >= 0).unsqueeze(-1)
    return table(ids.clamp(min=0)) * valid


# ---------------------------------------------------------------- AR model


@dataclass
class ARBatch:
    phoneme: torch.Tensor
    pitch: torch.Tensor
    duration: torch.Tensor
    speech: torch.Tensor
    kind: torch.Tensor
    pos: torch.Tensor
    hint: torch.Tensor
    mask: torch.Tensor  # (B, H, S, S)
    pitch_target: torch.Tensor
    duration_target: torch.Tensor
    speech_target: torch.Tensor

    @property
    def size(self) -> int:
        return self.phoneme.shape[0]


def layout_positions(layout: SequenceLayout) -> np.ndarray:
    """Positions restart in every segment and name the token a row predicts.

    Phonemes 0..L-1. SEP_P and prosody token g-1 carry g, the index of the
    prosody pair they predict, so that row's query lines up with phoneme g.
    Speech: SEP_C and frame t-1 carry t.
    """
    S = layout.length
    pos = np.zeros(S, dtype=np.int64)
    L = layout.L_total
    pos[:L] = np.arange(L)
    pos[L] = 0
    pos[layout.prosody_start : layout.sep_c] = np.arange(1, layout.prosody_len + 1)
    pos[layout.sep_c :] = np.arange(layout.T_total + 1)
    return pos


def collate_ar(items: Sequence[tuple[SequenceLayout, MaskSet]], eos_id: int) -> ARBatch:
    B = len(items)
    S = max(lay.length for lay, _ in items)
    H = items[0][1].n_heads
    arr = {n: np.full((B, S), -1, dtype=np.int64) for n in ("phoneme", "pitch", "duration", "speech", "hint", "kind")}
    pos = np.zeros((B, S), dtype=np.int64)
    tgt = {n: np.full((B, S), IGNORE, dtype=np.int64) for n in ("pitch", "duration", "speech")}
    mask = np.zeros((B, H, S, S), dtype=bool)
    idx = np.arange(S)
    for b, (lay, m) in enumerate(items):
        n = lay.length
        ids = lay.input_ids()
        for name in arr:
            arr[name][b, :n] = ids[name]
        pos[b, :n] = layout_positions(lay)
        for name, t in lay.targets(eos_id).items():
            tgt[name][b, :n] = t
        mask[b, :, :n, :n] = m.per_head()
        mask[b, :, idx[n:], idx[n:]] = True
    t = lambda a: torch.from_numpy(a)
    return ARBatch(
        phoneme=t(arr["phoneme"]), pitch=t(arr["pitch"]), duration=t(arr["duration"]),
        speech=t(arr["speech"]), kind=t(arr["kind"]), pos=t(pos), hint=t(arr["hint"]), mask=t(mask),
        pitch_target=t(tgt["pitch"]), duration_target=t(tgt["duration"]), speech_target=t(tgt["speech"]),
    )


class ARModel(nn.Module):
    """Decoder over [phonemes | prosody | speech] with pitch, duration and speech(+EOS) heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.dim
        self.phoneme_emb = nn.Embedding(cfg.phoneme_vocab, D)
        self.special_emb = nn.Embedding(2, D)
        self.speech_emb = nn.Embedding(cfg.codec_vocab, D)
        self.pitch_emb = nn.Embedding(cfg.n_pitch, D) if cfg.predicts_pitch else None
        self.duration_emb = nn.Embedding(cfg.max_duration, D) if cfg.predicts_duration else None
        self.hint_emb = nn.Embedding(cfg.phoneme_vocab, D) if cfg.with_prosody and cfg.phoneme_hint else None
        self.pos = PositionEncoding(D, cfg.max_positions, cfg.sinusoidal)
        self.backbone = Backbone(cfg)
        self.pitch_head = nn.Linear(D, cfg.n_pitch) if cfg.predicts_pitch else None
        self.duration_head = nn.Linear(D, cfg.max_duration) if cfg.predicts_duration else None
        self.speech_head = nn.Linear(D, cfg.codec_vocab + 1)

    def embed(self, phoneme, pitch, duration, speech, kind, pos, hint) -> torch.Tensor:
        h = _lookup(self.phoneme_emb, phoneme) + _lookup(self.speech_emb, speech)
        if self.hint_emb is not None:
            h = h + _lookup(self.hint_emb, hint)
        sep = torch.where(kind == TokenType.SEP_P, 0, torch.where(kind == TokenType.SEP_C, 1, -1))
        h = h + _lookup(self.special_emb, sep)
        if self.pitch_emb is not None:
            h = h + _lookup(self.pitch_emb, pitch)
        if self.duration_emb is not None:
            h = h + _lookup(self.duration_emb, duration - 1)
        return h + self.pos(pos, h.dtype)

    def heads(self, h: torch.Tensor) -> StepLogits:
        return StepLogits(
            pitch=self.pitch_head(h) if self.pitch_head is not None else None,
            duration=self.duration_head(h) if self.duration_head is not None else None,
            speech=self.speech_head(h),
        )

    def forward(self, batch: ARBatch, input_delta: Optional[torch.Tensor] = None) -> StepLogits:
        h = self.embed(batch.phoneme, batch.pitch, batch.duration, batch.speech, batch.kind, batch.pos, batch.hint)
        if input_delta is not None:
            h = h + input_delta
        return self.heads(self.backbone(h, batch.mask))

    def hidden(self, batch: ARBatch, input_delta: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.embed(batch.phoneme, batch.pitch, batch.duration, batch.speech, batch.kind, batch.pos, batch.hint)
        if input_delta is not None:
            h = h + input_delta
        return self.backbone(h, batch.mask)

    def new_cache(self) -> list[list]:
        return [[] for _ in range(self.cfg.n_layers)]

    @torch.no_grad()
    def extend(self, ids: dict[str, torch.Tensor], mask_rows: torch.Tensor, cache: list[list]) -> StepLogits:
        """Run new positions against the cached prefix; ``mask_rows`` is (H, s_new, S_so_far)."""
        h = self.embed(ids["phoneme"], ids["pitch"], ids["duration"], ids["speech"], ids["kind"], ids["pos"], ids["hint"])
        return self.heads(self.backbone(h, mask_rows.unsqueeze(0), cache))


def ar_loss(logits: StepLogits, batch: ARBatch, weights: Sequence[float] = (1.0, 1.0, 1.0)) -> torch.Tensor:
    """Mean cross-entropy over every non-prompt prosody and speech target (EOS included)."""
    total = None
    count = 0
    terms = (
        (logits.pitch, batch.pitch_target, weights[0]),
        (logits.duration, batch.duration_target, weights[1]),
        (logits.speech, batch.speech_target, weights[2]),
    )
    for lg, tgt, w in terms:
        if lg is None:
            continue
        n = int((tgt != IGNORE).sum())
        if n == 0:
            continue
        ce = F.cross_entropy(lg.reshape(-1, lg.shape[-1]), tgt.reshape(-1), ignore_index=IGNORE, reduction="sum")
        total = w * ce if total is None else total + w * ce
        count += n
    if count == 0:
        raise EmptyLossError("no non-prompt targets in batch")
    return total / count


# ---------------------------------------------------------------- NAR model


@dataclass
class NARBatch:
    phoneme: torch.Tensor  # (B, S) with -1 outside phoneme positions
    pitch: torch.Tensor
    duration: torch.Tensor
    codes: torch.Tensor  # (B, S, N), -1 outside speech positions
    code_mask: torch.Tensor  # (B, S, N) bool
    pos: torch.Tensor
    valid: torch.Tensor  # (B, S) bool
    target: torch.Tensor  # (B, S), IGNORE outside target speech positions
    layer: int

    @property
    def mask(self) -> torch.Tensor:
        v = self.valid
        m = v[:, None, :] & v[:, :, None]
        eye = torch.eye(v.shape[1], dtype=torch.bool)[None]
        return (m | (eye & ~v[:, :, None])).unsqueeze(1)


def collate_nar(items: Sequence[NarInput]) -> NARBatch:
    layers = {it.layer for it in items}
    if len(layers) != 1:
        raise ConfigError(f"a NAR batch must target a single layer, got {sorted(layers)}")
    B = len(items)
    S = max(it.length for it in items)
    N = items[0].n_layers
    ph = np.full((B, S), -1, dtype=np.int64)
    pi = np.full((B, S), -1, dtype=np.int64)
    du = np.full((B, S), -1, dtype=np.int64)
    codes = np.full((B, S, N), -1, dtype=np.int64)
    cmask = np.zeros((B, S, N), dtype=bool)
    pos = np.zeros((B, S), dtype=np.int64)
    valid = np.zeros((B, S), dtype=bool)
    tgt = np.full((B, S), IGNORE, dtype=np.int64)
    for b, it in enumerate(items):
        L, T = it.L, it.T
        ph[b, :L] = it.phonemes
        if it.pitch is not None:
            pi[b, :L] = it.pitch
            du[b, :L] = it.duration
        codes[b, L : L + T] = it.codes
        cmask[b, L : L + T] = it.code_mask()
        pos[b, :L] = np.arange(L)
        pos[b, L : L + T] = np.arange(T)
        valid[b, : L + T] = True
        tgt[b, L + it.T_prompt : L + T] = it.target()
    t = torch.from_numpy
    return NARBatch(t(ph), t(pi), t(du), t(codes), t(cmask), t(pos), t(valid), t(tgt), items[0].layer)


class NARModel(nn.Module):
    """Bidirectional model predicting RVQ layer j of all frames from layers < j."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.dim
        self.phoneme_emb = nn.Embedding(cfg.phoneme_vocab, D)
        self.pitch_emb = nn.Embedding(cfg.n_pitch, D) if cfg.predicts_pitch else None
        self.duration_emb = nn.Embedding(cfg.max_duration, D) if cfg.predicts_duration else None
        self.code_embs = nn.ModuleList(nn.Embedding(cfg.codec_vocab, D) for _ in range(cfg.n_codebooks))
        self.layer_emb = nn.Embedding(cfg.n_codebooks + 1, D)
        self.pos = PositionEncoding(D, cfg.max_positions, cfg.sinusoidal)
        self.backbone = Backbone(cfg)
        self.heads = nn.ModuleList(nn.Linear(D, cfg.codec_vocab) for _ in range(cfg.n_codebooks - 1))

    def embed(self, batch: NARBatch) -> torch.Tensor:
        h = _lookup(self.phoneme_emb, batch.phoneme)
        if self.pitch_emb is not None:
            h = h + _lookup(self.pitch_emb, batch.pitch)
        if self.duration_emb is not None:
            h = h + _lookup(self.duration_emb, batch.duration - 1)
        for l, emb in enumerate(self.code_embs):
            ids = torch.where(batch.code_mask[..., l], batch.codes[..., l], -1)
            h = h + _lookup(emb, ids)
        j = torch.full_like(batch.pos, batch.layer)
        h = h + self.layer_emb(j) * batch.valid.unsqueeze(-1)
        return h + self.pos(batch.pos, h.dtype)

    def forward(self, batch: NARBatch, input_delta: Optional[torch.Tensor] = None) -> torch.Tensor:
        if not 2 <= batch.layer <= self.cfg.n_codebooks:
            raise ConfigError(f"NAR layer {batch.layer} outside [2, {self.cfg.n_codebooks}]")
        h = self.embed(batch)
        if input_delta is not None:
            h = h + input_delta
        h = self.backbone(h, batch.mask)
        return self.heads[batch.layer - 2](h)


def nar_loss(logits: torch.Tensor, batch: NARBatch) -> torch.Tensor:
    n = int((batch.target != IGNORE).sum())
    if n == 0:
        raise EmptyLossError("no non-prompt frames in NAR batch")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), batch.target.reshape(-1), ignore_index=IGNORE)


# ---------------------------------------------------------------- external duration model


@dataclass
class DurBatch:
    phoneme: torch.Tensor
    prompt_duration: torch.Tensor
    pos: torch.Tensor
    valid: torch.Tensor
    target: torch.Tensor

    @property
    def mask(self) -> torch.Tensor:
        v = self.valid
        m = v[:, None, :] & v[:, :, None]
        eye = torch.eye(v.shape[1], dtype=torch.bool)[None]
        return (m | (eye & ~v[:, :, None])).unsqueeze(1)


def collate_duration(items: Sequence[tuple[Sequence[int], Sequence[int], Sequence[int], Sequence[int]]]) -> DurBatch:
    """Items are (prompt phonemes, prompt durations, target phonemes, target durations or [])."""
    B = len(items)
    S = max(len(a) + len(c) for a, _, c, _ in items)
    ph = np.full((B, S), -1, dtype=np.int64)
    pd = np.full((B, S), -1, dtype=np.int64)
    pos = np.zeros((B, S), dtype=np.int64)
    valid = np.zeros((B, S), dtype=bool)
    tgt = np.full((B, S), IGNORE, dtype=np.int64)
    for b, (xp, dp, xt, dt) in enumerate(items):
        n0, n = len(xp), len(xp) + len(xt)
        ph[b, :n] = list(xp) + list(xt)
        pd[b, :n0] = dp
        pos[b, :n] = np.arange(n)
        valid[b, :n] = True
        if len(dt):
            tgt[b, n0:n] = np.asarray(dt) - 1
    t = torch.from_numpy
    return DurBatch(t(ph), t(pd), t(pos), t(valid), t(tgt))


class DurationPredictor(nn.Module):
    """Stand-alone bidirectional duration model, used when duration is kept out of the CoT stream."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.dim
        self.phoneme_emb = nn.Embedding(cfg.phoneme_vocab, D)
        self.duration_emb = nn.Embedding(cfg.max_duration, D)
        self.pos = PositionEncoding(D, cfg.max_positions, cfg.sinusoidal)
        self.backbone = Backbone(cfg)
        self.head = nn.Linear(D, cfg.max_duration)

    def forward(self, batch: DurBatch) -> torch.Tensor:
        h = _lookup(self.phoneme_emb, batch.phoneme) + _lookup(self.duration_emb, batch.prompt_duration - 1)
        h = h + self.pos(batch.pos, h.dtype)
        return self.head(self.backbone(h, batch.mask))


def duration_loss(logits: torch.Tensor, batch: DurBatch) -> torch.Tensor:
    if int((batch.target != IGNORE).sum()) == 0:
        raise EmptyLossError("no target phonemes in duration batch")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), batch.target.reshape(-1), ignore_index=IGNORE)


# ---------------------------------------------------------------- features per utterance


def ar_example(utt: Utterance, cfg: ModelConfig) -> tuple[SequenceLayout, MaskSet]:
    layout = utt.ar_layout(with_prosody=cfg.with_prosody)
    align = None if cfg.baseline_mode else utt.alignment()
    return layout, build_ar_mask(layout, align, cfg.mask_config())


def nar_example(utt: Utterance, cfg: ModelConfig, layer: int) -> NarInput:
    x = list(utt.prompt_phonemes) + list(utt.phonemes)
    pros = utt.prompt_prosody.concat(utt.prosody) if cfg.with_prosody else None
    codes = np.concatenate([utt.prompt_codes, np.asarray(utt.codec_tokens, dtype=np.int64)], axis=0)
    return assemble_nar_input(x, pros, codes, layer, T_prompt=len(utt.prompt_codec_tokens))


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 12000
    batch_size: int = 16
    peak_lr: float = 2e-3
    warmup: int = 100
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    log_every: int = 50

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def inverse_sqrt_lr(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to ``peak`` over ``warmup`` steps, then peak * sqrt(warmup / step)."""
    s = step + 1
    warmup = max(warmup, 1)
    return peak * min(s / warmup, math.sqrt(warmup / s))


@dataclass
class Checkpoint:
    kind: str  # "ar" | "nar" | "duration"
    config: ModelConfig
    state: dict[str, torch.Tensor]
    log: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def build(self) -> nn.Module:
        model = build_model(self.kind, self.config)
        model.load_state_dict({k: v.to(torch.float32) for k, v in self.state.items()})
        model.eval()
        return model

    def n_params(self) -> int:
        return sum(int(v.numel()) for v in self.state.values())


def build_model(kind: str, cfg: ModelConfig) -> nn.Module:
    if kind == "ar":
        return ARModel(cfg)
    if kind == "nar":
        return NARModel(cfg)
    if kind == "duration":
        return DurationPredictor(cfg)
    raise ConfigError(f"unknown model kind {kind!r}")


def _make_batches(kind: str, data: Sequence[Utterance], cfg: ModelConfig):
    if kind == "ar":
        feats = [ar_example(u, cfg) for u in data]
        return lambda idx, rng: collate_ar([feats[i] for i in idx], cfg.eos_id)
    if kind == "nar":
        per_layer = {j: [nar_example(u, cfg, j) for u in data] for j in range(2, cfg.n_codebooks + 1)}

        def nar_batch(idx, rng):
            j = int(rng.integers(2, cfg.n_codebooks + 1))
            return collate_nar([per_layer[j][i] for i in idx])

        return nar_batch
    if kind == "duration":
        items = [(u.prompt_phonemes, u.prompt_durations, u.phonemes, u.durations) for u in data]
        return lambda idx, rng: collate_duration([items[i] for i in idx])
    raise ConfigError(f"unknown model kind {kind!r}")


def _loss(kind: str, model: nn.Module, batch, cfg: ModelConfig) -> torch.Tensor:
    if kind == "ar":
        return ar_loss(model(batch), batch, cfg.loss_weights)
    if kind == "nar":
        return nar_loss(model(batch), batch)
    return duration_loss(model(batch), batch)


def train(
    dataset: Sequence[Utterance],
    cfg: ModelConfig,
    tcfg: TrainConfig,
    seed: int,
    kind: str = "ar",
) -> Checkpoint:
    """Train one model from scratch. Same inputs and seed give bit-identical parameters."""
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    torch.manual_seed(seed)
    model = build_model(kind, cfg)
    model.train()
    rng = np.random.default_rng(seed)
    make = _make_batches(kind, dataset, cfg)
    opt = torch.optim.Adam(
        model.parameters(), lr=tcfg.peak_lr, betas=(tcfg.beta1, tcfg.beta2), eps=1e-9,
        weight_decay=tcfg.weight_decay,
    )
    order = rng.permutation(len(dataset))
    cursor = 0
    log: list[dict] = []
    running = 0.0
    n_running = 0
    for step in range(tcfg.steps):
        if cursor + tcfg.batch_size > len(order):
            order = rng.permutation(len(dataset))
            cursor = 0
        idx = order[cursor : cursor + tcfg.batch_size]
        cursor += tcfg.batch_size
        batch = make(idx, rng)
        lr = inverse_sqrt_lr(step, tcfg.peak_lr, tcfg.warmup)
        for g in opt.param_groups:
            g["lr"] = lr
        loss = _loss(kind, model, batch, cfg)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"{kind} training diverged at step {step}: loss={loss.item()}")
        opt.zero_grad()
        loss.backward()
        if tcfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.grad_clip)
        opt.step()
        running += loss.item()
        n_running += 1
        if (step + 1) % tcfg.log_every == 0 or step + 1 == tcfg.steps:
            entry = {"step": step + 1, "loss": running / n_running, "lr": lr}
            log.append(entry)
            logger.info("%s step %d loss %.4f lr %.2e", kind, step + 1, entry["loss"], lr)
            running, n_running = 0.0, 0
    model.eval()
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(kind, cfg, state, log, {"seed": seed, "train": tcfg.to_dict(), "n_train": len(dataset)})


# ---------------------------------------------------------------- checkpoint I/O


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """JSON header (config, tensor index, log) followed by little-endian float32 blobs."""
    blobs = io.BytesIO()
    index = []
    for name in sorted(ckpt.state):
        arr = ckpt.state[name].detach().to(torch.float32).contiguous().numpy().astype("<f4")
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": blobs.tell(), "nbytes": len(raw)})
        blobs.write(raw)
    header = {
        "format": CHECKPOINT_FORMAT,
        "versions": {"ralle": __version__},
        "kind": ckpt.kind,
        "config": ckpt.config.to_dict(),
        "vocab": {
            "phoneme": ckpt.config.phoneme_vocab, "pitch": ckpt.config.n_pitch,
            "duration": ckpt.config.max_duration, "codec": ckpt.config.codec_vocab,
        },
        "params": index,
        "log": ckpt.log,
        "meta": ckpt.meta,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        fh.write(blobs.getvalue())


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + n].decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {header.get('format')}")
    base = 16 + n
    state = {}
    for p in header["params"]:
        raw = data[base + p["offset"] : base + p["offset"] + p["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(p["shape"]).copy()
        state[p["name"]] = torch.from_numpy(arr)
    return Checkpoint(header["kind"], ModelConfig.from_dict(header["config"]), state, header["log"], header["meta"])


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def with_overrides(cfg: ModelConfig, **kw) -> ModelConfig:
    return replace(cfg, **kw)
