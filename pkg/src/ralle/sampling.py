"""Nucleus sampling and two-phase (prosody, then speech) inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import SamplingError
from .evaluate import best_candidate
from .layout import CodecMatrix, SequenceLayout, TokenType, assemble_ar_sequence, assemble_nar_input
from .masking import MaskConfig, build_ar_mask
from .model import (
    ARModel,
    DurationPredictor,
    ModelConfig,
    NARModel,
    collate_duration,
    collate_nar,
    layout_positions,
)
from .prosody import ProsodySeq, build_alignment_map

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplingConfig:
    rho_p: float = 0.9
    rho_d: float = 0.9
    rho_c: float = 0.9
    seed: int = 0
    max_steps: int = 400
    duration_guided: bool = True
    rerank_n: int = 5
    greedy: bool = False

    def __post_init__(self):
        for name in ("rho_p", "rho_d", "rho_c"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise SamplingError(f"{name} must lie in (0, 1], got {v}")
        if self.rerank_n < 1:
            raise SamplingError("rerank_n must be >= 1")
        if self.max_steps < 1:
            raise SamplingError("max_steps must be >= 1")


def run_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream per (seed, keys...), e.g. (seed, utterance, candidate)."""
    return np.random.default_rng([int(seed), *(int(k) for k in keys)])


def _check_probs(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or not np.all(np.isfinite(p)) or np.any(p < 0):
        raise SamplingError("probabilities must be a finite, non-negative vector")
    if abs(p.sum() - 1.0) > 1e-6:
        raise SamplingError(f"probabilities sum to {p.sum():.8f}, not 1")
    return p


def nucleus_candidates(probs: np.ndarray, rho: float) -> np.ndarray:
    """Smallest highest-probability prefix with cumulative mass >= rho (ties: lower id first)."""
    p = _check_probs(probs)
    if not 0 < rho <= 1:
        raise SamplingError(f"rho must lie in (0, 1], got {rho}")
    order = np.argsort(-p, kind="stable")
    cum = np.cumsum(p[order])
    k = min(int(np.searchsorted(cum, rho, side="left")) + 1, p.size)
    return order[:k]


def nucleus_sample(probs: np.ndarray, rho: float, rng: np.random.Generator, exclude: Sequence[int] = ()) -> int:
    """Sample from the nucleus; ``exclude`` ids are dropped from it (argmax over the rest if it empties)."""
    p = _check_probs(probs)
    cand = nucleus_candidates(p, rho)
    if len(exclude):
        keep = ~np.isin(cand, exclude)
        cand = cand[keep]
        if cand.size == 0:
            q = p.copy()
            q[list(exclude)] = -1.0
            return int(np.argmax(q))
    w = p[cand]
    if w.sum() <= 0:
        return int(cand[0])
    cdf = np.cumsum(w / w.sum())
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return int(cand[min(i, cand.size - 1)])


def _pick(logits: torch.Tensor, rho: float, rng: np.random.Generator, greedy: bool, exclude: Sequence[int] = ()) -> int:
    lg = logits.detach().to(torch.float64)
    if greedy:
        if len(exclude):
            lg = lg.clone()
            lg[list(exclude)] = float("-inf")
        return int(torch.argmax(lg))
    probs = torch.softmax(lg, dim=-1).numpy()
    return nucleus_sample(probs / probs.sum(), rho, rng, exclude)


# ---------------------------------------------------------------- incremental decoding state


class _Decoder:
    """Feeds an AR layout position by position against a KV cache."""

    def __init__(self, model: ARModel, layout: SequenceLayout, mask: np.ndarray):
        self.model = model
        self.layout = layout
        self.mask = torch.from_numpy(mask)
        self.cache = model.new_cache()
        self.fed = 0

    def rebind(self, layout: SequenceLayout, mask: np.ndarray) -> None:
        """Swap in a longer layout whose first ``fed`` positions are unchanged."""
        self.layout = layout
        self.mask = torch.from_numpy(mask)

    def feed(self, upto: int):
        """Run positions [fed, upto) and return the logits at position upto - 1."""
        a, b = self.fed, upto
        ids = self.layout.input_ids()
        pos = layout_positions(self.layout)
        batch = {
            "phoneme": ids["phoneme"][a:b], "pitch": ids["pitch"][a:b], "duration": ids["duration"][a:b],
            "speech": ids["speech"][a:b], "kind": ids["kind"][a:b], "pos": pos[a:b],
            "hint": ids["hint"][a:b],
        }
        batch = {k: torch.from_numpy(np.ascontiguousarray(v))[None] for k, v in batch.items()}
        out = self.model.extend(batch, self.mask[:, a:b, :b], self.cache)
        self.fed = b
        return type(out)(*(None if t is None else t[0, -1] for t in out))


def _layout(x_prompt, x_target, pros_prompt, pros_target, c_prompt, c_target, with_prosody: bool) -> SequenceLayout:
    return assemble_ar_sequence(
        x_prompt, x_target,
        pros_prompt if with_prosody else None, pros_target if with_prosody else None,
        c_prompt, c_target, with_eos=False,
    )


def _mask_rows(layout: SequenceLayout, cfg: ModelConfig, align) -> np.ndarray:
    return build_ar_mask(layout, align, cfg.mask_config()).per_head()


@dataclass
class ProsodyState:
    prosody: ProsodySeq
    decoder: Optional[_Decoder] = None


def infer_prosody(
    model: ARModel,
    x_prompt: Sequence[int],
    x_target: Sequence[int],
    pros_prompt: ProsodySeq,
    c_prompt: Sequence[int],
    cfg: SamplingConfig,
    rng: np.random.Generator,
    durations: Sequence[int] | None = None,
) -> ProsodyState:
    """Sample pitch (rho_p) and duration (rho_d) for each target phoneme, one step per phoneme.

    ``durations`` supplies externally predicted durations when the model keeps
    duration out of its chain of thought; the model then samples pitch only.
    """
    mc = model.cfg
    L = len(x_target)
    if L < 1:
        raise SamplingError("target phoneme sequence is empty")
    if not mc.with_prosody:
        return ProsodyState(ProsodySeq((), ()))
    if not mc.predicts_duration and durations is None:
        raise SamplingError("this model needs externally predicted durations")
    pitch = [0] * L
    dur = list(durations) if durations is not None else [1] * L
    layout = _layout(x_prompt, x_target, pros_prompt, ProsodySeq(pitch, dur), c_prompt, [], True)
    # prosody rows are identical under every mask configuration
    mask = build_ar_mask(layout, None, MaskConfig(baseline_mode=True, grouping=False, heads=mc.heads)).per_head()
    dec = _Decoder(model, layout, mask)
    out = dec.feed(layout.prosody_start + layout.L_prompt)
    for i in range(L):
        if mc.predicts_pitch:
            pitch[i] = _pick(out.pitch, cfg.rho_p, rng, cfg.greedy)
        if mc.predicts_duration:
            dur[i] = _pick(out.duration, cfg.rho_d, rng, cfg.greedy) + 1
        layout = _layout(x_prompt, x_target, pros_prompt, ProsodySeq(pitch, dur), c_prompt, [], True)
        dec.rebind(layout, mask)
        out = dec.feed(layout.prosody_start + layout.L_prompt + i + 1)
    return ProsodyState(ProsodySeq(pitch, dur), dec)


@dataclass
class SpeechResult:
    tokens: list[int]
    truncated: bool = False
    eos_rejections: int = 0


def infer_speech(
    model: ARModel,
    x_prompt: Sequence[int],
    x_target: Sequence[int],
    pros_prompt: ProsodySeq | None,
    prosody: ProsodySeq | None,
    c_prompt: Sequence[int],
    cfg: SamplingConfig,
    rng: np.random.Generator,
    *,
    state: ProsodyState | None = None,
    prompt_durations: Sequence[int] | None = None,
) -> SpeechResult:
    """Sample layer-1 tokens.

    With ``duration_guided`` and known durations, exactly ``D = sum(d)``
    frames are produced: an EOS drawn early is rejected and the token is
    redrawn from the nucleus without EOS. Otherwise decoding halts at the
    first EOS or at ``max_steps`` (reported as truncated).
    """
    mc = model.cfg
    eos = mc.eos_id
    T_prompt = len(c_prompt)
    have_durs = prosody is not None and len(prosody) == len(x_target)
    guided = cfg.duration_guided and have_durs
    if guided:
        D = prosody.total_duration
        if D > cfg.max_steps:
            raise SamplingError(f"total duration {D} exceeds max_steps {cfg.max_steps}")
        n_max = D
    else:
        n_max = cfg.max_steps
    align = None
    if not mc.baseline_mode and have_durs:
        pd = list(prompt_durations if prompt_durations is not None else (pros_prompt.duration if pros_prompt else ()))
        align = build_alignment_map(pd + list(prosody.duration))
    elif not mc.baseline_mode:
        raise SamplingError("duration-guided masks need target durations")
    with_pros = mc.with_prosody
    layout = _layout(x_prompt, x_target, pros_prompt, prosody, c_prompt, [0] * n_max, with_pros)
    mask = _mask_rows(layout, mc, align)
    if state is not None and state.decoder is not None:
        dec = state.decoder
        dec.rebind(layout, mask)
    else:
        dec = _Decoder(model, layout, mask)
    speech = layout.speech.copy()
    out = dec.feed(layout.speech_start + T_prompt)
    tokens: list[int] = []
    rejections = 0
    truncated = False
    for step in range(n_max):
        if guided:
            tok = _pick(out.speech, cfg.rho_c, rng, cfg.greedy)
            if tok == eos:
                rejections += 1
                tok = _pick(out.speech, cfg.rho_c, rng, cfg.greedy, exclude=[eos])
        else:
            tok = _pick(out.speech, cfg.rho_c, rng, cfg.greedy)
            if tok == eos:
                break
        tokens.append(tok)
        if step + 1 == n_max:
            truncated = not guided
            break
        speech[T_prompt + step] = tok
        dec.layout = replace(layout, speech=speech.copy())
        out = dec.feed(layout.speech_start + T_prompt + step + 1)
    if truncated:
        logger.warning("generation hit max_steps=%d without EOS", cfg.max_steps)
    if not guided and not tokens and not truncated:
        logger.warning("model emitted EOS immediately; empty output")
    return SpeechResult(tokens, truncated, rejections)


@torch.no_grad()
def predict_durations(
    model: DurationPredictor,
    x_prompt: Sequence[int],
    prompt_durations: Sequence[int],
    x_target: Sequence[int],
    cfg: SamplingConfig,
    rng: np.random.Generator,
) -> list[int]:
    batch = collate_duration([(x_prompt, prompt_durations, x_target, [])])
    logits = model(batch)[0, len(x_prompt):]
    return [_pick(lg, cfg.rho_d, rng, cfg.greedy) + 1 for lg in logits]


@torch.no_grad()
def infer_nar(
    model: NARModel,
    x: Sequence[int],
    prosody: ProsodySeq | None,
    layer1: Sequence[int],
    prompt_codes: np.ndarray,
) -> CodecMatrix:
    """Greedy layers 2..N for the target frames, each conditioned on all lower layers.

    ``x`` and ``prosody`` cover prompt + target phonemes.
    """
    mc = model.cfg
    if len(layer1) == 0:
        raise SamplingError("no layer-1 tokens to extend")
    N = mc.n_codebooks
    T_prompt = int(prompt_codes.shape[0])
    codes = np.zeros((T_prompt + len(layer1), N), dtype=np.int64)
    codes[:T_prompt] = prompt_codes
    codes[T_prompt:, 0] = layer1
    pros = prosody if mc.with_prosody else None
    for j in range(2, N + 1):
        nar_in = _nar_input(x, pros, codes, j, T_prompt)
        logits = model(collate_nar([nar_in]))[0, len(x) + T_prompt : len(x) + codes.shape[0]]
        codes[T_prompt:, j - 1] = torch.argmax(logits, dim=-1).numpy()
    return CodecMatrix(codes[T_prompt:])


def _nar_input(x, pros, codes, j, T_prompt):
    from .layout import NarInput

    return NarInput(
        phonemes=np.asarray(x, dtype=np.int64),
        pitch=None if pros is None else np.asarray(pros.pitch, dtype=np.int64),
        duration=None if pros is None else np.asarray(pros.duration, dtype=np.int64),
        codes=codes.copy(), T_prompt=T_prompt, layer=j, n_layers=codes.shape[1],
    )


# ---------------------------------------------------------------- whole-utterance synthesis


@dataclass
class System:
    """A trained AR model plus optional NAR and external duration models."""

    ar: ARModel
    nar: Optional[NARModel] = None
    duration: Optional[DurationPredictor] = None
    name: str = "system"

    @property
    def cfg(self) -> ModelConfig:
        return self.ar.cfg


@dataclass
class Synthesis:
    tokens: list[int]
    prosody: Optional[ProsodySeq]
    truncated: bool
    codes: Optional[CodecMatrix] = None
    eos_rejections: int = 0


def synthesize(system: System, utt, cfg: SamplingConfig, rng: np.random.Generator, *, with_nar: bool = False) -> Synthesis:
    """Prosody (if any), then layer-1 speech, then optionally the NAR layers, for one utterance record."""
    mc = system.cfg
    c_prompt = [row[0] for row in utt.prompt_codec_tokens]
    pros_prompt = utt.prompt_prosody
    durations = None
    if mc.with_prosody and not mc.use_duration:
        if system.duration is None:
            raise SamplingError("model keeps duration outside the CoT but no duration model was loaded")
        durations = predict_durations(system.duration, utt.prompt_phonemes, utt.prompt_durations, utt.phonemes, cfg, rng)
    elif not mc.with_prosody and not mc.baseline_mode:
        raise SamplingError("duration-guided masking without a prosody stream is not supported")
    state = infer_prosody(system.ar, utt.prompt_phonemes, utt.phonemes, pros_prompt, c_prompt, cfg, rng, durations)
    prosody = state.prosody if mc.with_prosody else None
    x_target = list(utt.phonemes)
    overflow = cfg.duration_guided and prosody is not None and prosody.total_duration > cfg.max_steps
    if overflow:
        # keep the longest phoneme prefix whose sampled durations fit into max_steps
        n = int(np.searchsorted(np.cumsum(prosody.duration), cfg.max_steps, side="right"))
        logger.warning("sampled total duration %d exceeds max_steps=%d; keeping %d of %d phonemes",
                       prosody.total_duration, cfg.max_steps, n, len(x_target))
        x_target, prosody, state = x_target[:n], ProsodySeq(prosody.pitch[:n], prosody.duration[:n]), None
        if n == 0:
            return Synthesis([], prosody, True, None, 0)
    res = infer_speech(
        system.ar, utt.prompt_phonemes, x_target, pros_prompt if mc.with_prosody else None, prosody,
        c_prompt, cfg, rng, state=state, prompt_durations=utt.prompt_durations,
    )
    if overflow:
        res = SpeechResult(res.tokens, True, res.eos_rejections)
    codes = None
    if with_nar and system.nar is not None and res.tokens:
        x = list(utt.prompt_phonemes) + x_target
        full = pros_prompt.concat(prosody) if prosody is not None else None
        codes = infer_nar(system.nar, x, full, res.tokens, utt.prompt_codes)
    return Synthesis(res.tokens, prosody, res.truncated, codes, res.eos_rejections)


def rerank(candidates: Sequence[Sequence[int]], reference: Sequence[int]) -> Sequence[int]:
    """Candidate with the smallest edit distance to ``reference`` (lowest index on ties)."""
    return candidates[best_candidate(candidates, reference)]
