"""Duration-guided attention masks for the AR Transformer.

A speech row predicting frame ``t`` may see the phonemes (and prosody tokens)
whose index lies within ``k`` of ``f(t)``, the phoneme aligned to that frame,
plus the causal prefix of the speech span. With head grouping, the phoneme
window, the prosody window and the speech context go to disjoint head groups.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .errors import MaskError
from .layout import Segment, SequenceLayout
from .prosody import AlignmentMap


class GroupKind(str, Enum):
    UNGROUPED = "ungrouped"
    PHONEME = "phoneme"
    PROSODY = "prosody"
    CONTEXT = "context"


@dataclass(frozen=True)
class MaskConfig:
    """``k=None`` means an unbounded window."""

    k: Optional[int] = 1
    grouping: bool = True
    baseline_mode: bool = False
    heads: tuple[int, int, int] = (1, 1, 2)
    no_pitch: bool = False
    no_duration_cot: bool = False

    def __post_init__(self):
        if self.k is not None and self.k < 0:
            raise MaskError(f"window size must be >= 0 or None (unbounded), got {self.k}")
        if len(self.heads) != 3 or any(h < 1 for h in self.heads):
            raise MaskError(f"head split needs three positive counts, got {self.heads}")

    @property
    def n_heads(self) -> int:
        return sum(self.heads)


@dataclass(frozen=True)
class MaskGroup:
    kind: GroupKind
    heads: int
    matrix: np.ndarray


@dataclass(frozen=True, eq=False)
class MaskSet:
    """Boolean masks, True where attention is permitted."""

    groups: tuple[MaskGroup, ...]
    segment: np.ndarray = field(repr=False)

    @property
    def n_heads(self) -> int:
        return sum(g.heads for g in self.groups)

    @property
    def size(self) -> int:
        return int(self.segment.shape[0])

    def per_head(self) -> np.ndarray:
        """(H, S, S) boolean array with groups laid out in order."""
        return np.concatenate(
            [np.broadcast_to(g.matrix, (g.heads,) + g.matrix.shape) for g in self.groups], axis=0
        )

    def union(self) -> np.ndarray:
        out = np.zeros_like(self.groups[0].matrix)
        for g in self.groups:
            out |= g.matrix
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, MaskSet) or len(self.groups) != len(other.groups):
            return False
        return all(
            a.kind == b.kind and a.heads == b.heads and np.array_equal(a.matrix, b.matrix)
            for a, b in zip(self.groups, other.groups)
        )

    def to_json(self) -> dict:
        return {
            "size": self.size,
            "segment": self.segment.tolist(),
            "groups": [
                {"kind": g.kind.value, "heads": g.heads, "rows": ["".join("1" if v else "0" for v in r) for r in g.matrix]}
                for g in self.groups
            ],
        }


@dataclass(frozen=True)
class MaskViolation:
    group: int
    row: int
    reason: str


def _check_alignment(layout: SequenceLayout, align: AlignmentMap | None, cfg: MaskConfig) -> None:
    if cfg.baseline_mode:
        return
    if align is None:
        raise MaskError("duration-guided masks need an alignment map")
    if align.n_phonemes != layout.L_total:
        raise MaskError(f"alignment covers {align.n_phonemes} phonemes, layout has {layout.L_total}")
    if align.total != layout.T_total and layout.has_eos_target:
        raise MaskError(f"durations sum to {align.total} but the speech span holds {layout.T_total} frames")


def _grouped(layout: SequenceLayout, cfg: MaskConfig) -> bool:
    return cfg.grouping and not cfg.baseline_mode and layout.with_prosody


def frame_phonemes(layout: SequenceLayout, align: AlignmentMap | None) -> np.ndarray:
    """Aligned phoneme for every speech-span row (clamped to the last phoneme past the end)."""
    n_rows = layout.T_total + 1
    if align is None:
        return np.zeros(n_rows, dtype=np.int64)
    f = np.asarray(align.f, dtype=np.int64)
    out = np.full(n_rows, layout.L_total - 1, dtype=np.int64)
    m = min(n_rows, f.size)
    out[:m] = f[:m]
    return out


def build_ar_mask(layout: SequenceLayout, align: AlignmentMap | None, cfg: MaskConfig) -> MaskSet:
    _check_alignment(layout, align, cfg)
    S = layout.length
    L, P = layout.L_total, layout.prosody_len
    a, c = layout.prosody_start, layout.sep_c
    segment = layout.tags()["segment"]

    base = np.zeros((S, S), dtype=bool)
    base[: L + 1, : L + 1] = True
    if P:
        base[a:c, : L + 1] = True
        base[a:c, a:c] = np.tril(np.ones((P, P), dtype=bool))

    # speech rows c..S-1
    rows = slice(c, S)
    n_sp = S - c
    causal = np.tril(np.ones((n_sp, n_sp), dtype=bool))
    if cfg.baseline_mode or cfg.k is None:
        win = np.ones((n_sp, L), dtype=bool)
    else:
        centre = frame_phonemes(layout, align)[:, None]
        win = np.abs(np.arange(L)[None, :] - centre) <= cfg.k

    phon = np.zeros((n_sp, S), dtype=bool)
    phon[:, :L] = win
    pros = np.zeros((n_sp, S), dtype=bool)
    if P:
        pros[:, a:c] = win
    ctx = np.zeros((n_sp, S), dtype=bool)
    ctx[:, c:] = causal

    if not _grouped(layout, cfg):
        m = base.copy()
        m[rows] = phon | pros | ctx
        return MaskSet((MaskGroup(GroupKind.UNGROUPED, cfg.n_heads, m),), segment)

    groups = []
    for kind, heads, region in zip(
        (GroupKind.PHONEME, GroupKind.PROSODY, GroupKind.CONTEXT), cfg.heads, (phon, pros, ctx)
    ):
        m = base.copy()
        m[rows] = region
        groups.append(MaskGroup(kind, heads, m))
    return MaskSet(tuple(groups), segment)


def oracle_mask(layout: SequenceLayout, align: AlignmentMap | None, cfg: MaskConfig) -> MaskSet:
    """Entry-by-entry reference construction from the membership predicates; for small S only."""
    _check_alignment(layout, align, cfg)
    tags = layout.tags()
    seg, kind_idx = tags["segment"].tolist(), tags["index"].tolist()
    S = layout.length
    L = layout.L_total
    PHONEME, PROSODY, SPEECH = int(Segment.PHONEME), int(Segment.PROSODY), int(Segment.SPEECH)

    def aligned(row: int) -> int:
        t = row - layout.sep_c
        if align is None:
            return 0
        return align.f[t] if t < len(align.f) else L - 1

    def in_window(j: int, row: int) -> bool:
        if cfg.baseline_mode or cfg.k is None:
            return True
        return abs(j - aligned(row)) <= cfg.k

    def allowed(group: GroupKind, r: int, col: int) -> bool:
        rs, cs = seg[r], seg[col]
        if rs == PHONEME:
            return cs == PHONEME
        if rs == PROSODY:
            return cs == PHONEME or (cs == PROSODY and col <= r)
        # speech row
        is_phoneme = cs == PHONEME and col < L
        is_prosody = cs == PROSODY
        is_context = cs == SPEECH and col <= r
        j = kind_idx[col]
        if group == GroupKind.PHONEME:
            return is_phoneme and in_window(j, r)
        if group == GroupKind.PROSODY:
            return is_prosody and in_window(j, r)
        if group == GroupKind.CONTEXT:
            return is_context
        return (is_phoneme and in_window(j, r)) or (is_prosody and in_window(j, r)) or is_context

    if _grouped(layout, cfg):
        kinds = list(zip((GroupKind.PHONEME, GroupKind.PROSODY, GroupKind.CONTEXT), cfg.heads))
    else:
        kinds = [(GroupKind.UNGROUPED, cfg.n_heads)]
    groups = []
    for kind, heads in kinds:
        m = np.zeros((S, S), dtype=bool)
        for r in range(S):
            for col in range(S):
                m[r, col] = allowed(kind, r, col)
        groups.append(MaskGroup(kind, heads, m))
    return MaskSet(tuple(groups), tags["segment"])


def validate_mask(m: MaskSet, n_heads: int | None = None) -> MaskViolation | None:
    """First violation found, or None when the mask is well-formed."""
    if n_heads is not None and m.n_heads != n_heads:
        return MaskViolation(-1, -1, f"head counts sum to {m.n_heads}, model has {n_heads}")
    seg = m.segment
    later = np.triu(np.ones((m.size, m.size), dtype=bool), k=1)
    ordered = seg[None, :] > seg[:, None]
    for gi, g in enumerate(m.groups):
        mat = g.matrix
        if mat.shape != (m.size, m.size):
            return MaskViolation(gi, -1, f"matrix shape {mat.shape} != ({m.size}, {m.size})")
        empty = np.flatnonzero(~mat.any(axis=1))
        if empty.size:
            return MaskViolation(gi, int(empty[0]), "row attends to nothing")
        # within the prosody and speech segments nothing above the diagonal; nothing in a later segment
        gen = (seg[None, :] != Segment.PHONEME) & later & (seg[None, :] == seg[:, None])
        bad = mat & (gen | ordered)
        rows = np.flatnonzero(bad.any(axis=1))
        if rows.size:
            return MaskViolation(gi, int(rows[0]), "attends to a future position")
    return None


def check_mask(m: MaskSet, n_heads: int | None = None) -> None:
    v = validate_mask(m, n_heads)
    if v is not None:
        raise MaskError(f"invalid mask: group {v.group}, row {v.row}: {v.reason}")


def speech_window(m: MaskSet, row: int, layout: SequenceLayout) -> set[int]:
    """Phoneme indices visible from ``row`` in any head group."""
    u = m.union()
    return {int(j) for j in np.flatnonzero(u[row, : layout.L_total])}
