"""Edit-distance metrics, hard-sentence error classification and report tables."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Optional, Sequence

from .data import Utterance
from .errors import EvalError
from .synthdata import ToyCodecRule, segment_blocks, toy_decode

REPORT_SCHEMA = 1

# alignment operations
MATCH, SUB, DEL, INS = "=", "S", "D", "I"


@dataclass
class ErrorCounts:
    sub: int = 0
    dele: int = 0
    ins: int = 0
    total_ref_len: int = 0

    @property
    def errors(self) -> int:
        return self.sub + self.dele + self.ins

    @property
    def wer(self) -> float:
        if self.total_ref_len == 0:
            raise EvalError("WER is undefined for an empty reference")
        return self.errors / self.total_ref_len

    def __add__(self, other: "ErrorCounts") -> "ErrorCounts":
        return ErrorCounts(
            self.sub + other.sub, self.dele + other.dele, self.ins + other.ins,
            self.total_ref_len + other.total_ref_len,
        )


@dataclass
class Alignment:
    counts: ErrorCounts
    path: list[tuple[str, Optional[int], Optional[int]]]  # (op, ref index, hyp index)

    @property
    def distance(self) -> int:
        return self.counts.errors


def edit_distance(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    """Plain Levenshtein distance with unit costs."""
    prev = list(range(len(b) + 1))
    for i in range(1, len(a) + 1):
        cur = [i] + [0] * len(b)
        for j in range(1, len(b) + 1):
            cur[j] = min(prev[j - 1] + (a[i - 1] != b[j - 1]), prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[-1]


def edit_distance_align(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> Alignment:
    """Levenshtein alignment; on ties the backtrace prefers substitution, then deletion, then insertion."""
    if len(ref) == 0:
        raise EvalError("reference is empty; WER is undefined")
    n, m = len(ref), len(hyp)
    D = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        D[i][0] = i
    for j in range(m + 1):
        D[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            D[i][j] = min(D[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]), D[i - 1][j] + 1, D[i][j - 1] + 1)
    path = []
    c = ErrorCounts(total_ref_len=n)
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and D[i][j] == D[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            same = ref[i - 1] == hyp[j - 1]
            path.append((MATCH if same else SUB, i - 1, j - 1))
            c.sub += not same
            i, j = i - 1, j - 1
        elif i > 0 and D[i][j] == D[i - 1][j] + 1:
            path.append((DEL, i - 1, None))
            c.dele += 1
            i -= 1
        else:
            path.append((INS, None, j - 1))
            c.ins += 1
            j -= 1
    path.reverse()
    return Alignment(c, path)


# ---------------------------------------------------------------- hard-sentence verdicts

ERROR_TYPES = ("mispronunciation", "omission", "repetition", "hallucination")


@dataclass
class HardSentenceVerdict:
    mispronunciation: bool = False
    omission: bool = False
    repetition: bool = False
    hallucination: bool = False

    @property
    def error(self) -> bool:
        return self.mispronunciation or self.omission or self.repetition or self.hallucination


def reference_transcript(utt: Utterance, rule: ToyCodecRule) -> list[int]:
    return [rule.phoneme_class(x) for x in utt.phonemes]


def hypothesis_transcript(tokens: Sequence[int], rule: ToyCodecRule, table: dict | None = None) -> list[int]:
    blocks = segment_blocks(toy_decode(tokens, rule, table), rule.phase_cap)
    return [-1 if b.phoneme_class is None else b.phoneme_class for b in blocks]


def classify_hard_errors(
    ref: Utterance, hyp_tokens: Sequence[int], rule: ToyCodecRule, *, strict_pitch: bool = False,
    table: dict | None = None,
) -> HardSentenceVerdict:
    """Each error type is flagged at most once per utterance.

    Blocks are aligned to the reference by edit distance: a dropped block is
    an omission; an extra block of a phoneme present in the reference is a
    repetition; any block whose phoneme is absent from the reference (or
    cannot be decoded) is a hallucination; a block of a reference phoneme in
    the wrong slot is a mispronunciation.
    """
    blocks = segment_blocks(toy_decode(hyp_tokens, rule, table), rule.phase_cap)
    hyp = [-1 if b.phoneme_class is None else b.phoneme_class for b in blocks]
    ref_t = reference_transcript(ref, rule)
    present = set(ref_t)
    v = HardSentenceVerdict()
    for op, i, j in edit_distance_align(ref_t, hyp).path:
        if op == DEL:
            v.omission = True
        elif op == INS:
            if hyp[j] in present:
                v.repetition = True
            else:
                v.hallucination = True
        elif op == SUB:
            if hyp[j] in present:
                v.mispronunciation = True
            else:
                v.hallucination = True
        elif strict_pitch and blocks[j].pitch_class != rule.pitch_class(ref.pitch_buckets[i]):
            v.mispronunciation = True
    return v


def best_candidate(candidates: Sequence[Sequence[Hashable]], reference: Sequence[Hashable]) -> int:
    """Index of the candidate closest to the reference; ties go to the lowest index."""
    if not candidates:
        raise EvalError("no candidates to rerank")
    dists = [edit_distance(reference, c) for c in candidates]
    return dists.index(min(dists))


# ---------------------------------------------------------------- run scoring


@dataclass
class UtteranceScore:
    uid: str
    category: str
    counts: list[ErrorCounts]
    verdicts: list[HardSentenceVerdict]
    best: int
    truncated: list[bool] = field(default_factory=list)


@dataclass
class RunMetrics:
    system: str
    split: str
    n_utterances: int
    n_samples: int
    wer: float
    wer_r: float
    sub: float
    dele: float
    ins: float
    ser: float
    ser_r: float
    mispronunciation: int
    omission: int
    repetition: int
    hallucination: int
    truncated: int

    def row(self) -> dict:
        return asdict(self)


def score_utterance(
    ref: Utterance, candidates: Sequence[Sequence[int]], rule: ToyCodecRule, table: dict | None = None,
    strict_pitch: bool = False,
) -> UtteranceScore:
    ref_t = reference_transcript(ref, rule)
    hyps = [hypothesis_transcript(c, rule, table) for c in candidates]
    counts = [edit_distance_align(ref_t, h).counts for h in hyps]
    verdicts = [classify_hard_errors(ref, c, rule, strict_pitch=strict_pitch, table=table) for c in candidates]
    return UtteranceScore(ref.uid, ref.category, counts, verdicts, best_candidate(hyps, ref_t))


def score_run(
    system: str,
    split: str,
    results: Sequence[dict],
    refs: dict[str, Utterance],
    rule: ToyCodecRule,
    strict_pitch: bool = False,
) -> RunMetrics:
    """Aggregate metrics for one system on one split.

    WER pools every sample; WER-R keeps, per utterance, the sample closest to
    the reference transcript. SER is the fraction of errored samples and
    SER-R the fraction of utterances whose reranked sample is errored.
    """
    if not results:
        raise EvalError(f"no results for {system}/{split}")
    table = rule.decode_table()
    pooled = ErrorCounts()
    reranked = ErrorCounts()
    n_samples = errored = errored_r = truncated = 0
    types = dict.fromkeys(ERROR_TYPES, 0)
    for rec in results:
        ref = refs[rec["uid"]]
        sc = score_utterance(ref, rec["candidates"], rule, table, strict_pitch)
        for c in sc.counts:
            pooled = pooled + c
        reranked = reranked + sc.counts[sc.best]
        n_samples += len(sc.counts)
        errored += sum(v.error for v in sc.verdicts)
        best = sc.verdicts[sc.best]
        errored_r += best.error
        for t in ERROR_TYPES:
            types[t] += getattr(best, t)
        truncated += sum(bool(t) for t in rec.get("truncated", []))
    n = len(results)
    # rates over the pooled reference length, in percent
    ref_len = pooled.total_ref_len
    return RunMetrics(
        system=system, split=split, n_utterances=n, n_samples=n_samples,
        wer=100 * pooled.wer, wer_r=100 * reranked.wer,
        sub=100 * pooled.sub / ref_len, dele=100 * pooled.dele / ref_len, ins=100 * pooled.ins / ref_len,
        ser=100 * errored / n_samples, ser_r=100 * errored_r / n,
        truncated=truncated, **types,
    )


# ---------------------------------------------------------------- report files

COLUMNS = (
    ("system", "{}"), ("split", "{}"), ("n_utterances", "{}"), ("n_samples", "{}"),
    ("wer", "{:.2f}"), ("wer_r", "{:.2f}"), ("sub", "{:.2f}"), ("dele", "{:.2f}"), ("ins", "{:.2f}"),
    ("ser", "{:.1f}"), ("ser_r", "{:.1f}"),
    ("mispronunciation", "{}"), ("omission", "{}"), ("repetition", "{}"), ("hallucination", "{}"),
    ("truncated", "{}"),
)
HEADERS = {"wer": "WER%", "wer_r": "WER-R%", "sub": "Sub%", "dele": "Del%", "ins": "Ins%", "ser": "SER%", "ser_r": "SER-R%"}


def format_csv(rows: Iterable[RunMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["schema"] + [c for c, _ in COLUMNS])
    for r in rows:
        d = r.row()
        w.writerow([REPORT_SCHEMA] + [fmt.format(d[c]) for c, fmt in COLUMNS])
    return buf.getvalue()


def format_table(rows: Sequence[RunMetrics]) -> str:
    head = [HEADERS.get(c, c) for c, _ in COLUMNS]
    body = [[fmt.format(r.row()[c]) for c, fmt in COLUMNS] for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(head)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(head, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        lines.append("  ".join(v.ljust(w) for v, w in zip(b, widths)).rstrip())
    return "\n".join(lines) + "\n"


def report(rows: Sequence[RunMetrics], out_dir: str | Path, *, figures: bool = True) -> dict[str, Path]:
    """Write ``report.csv``, ``report.txt`` and (optionally) bar-chart figures."""
    if not rows:
        raise EvalError("report needs at least one run")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = sorted(rows, key=lambda r: (r.split, r.system))
    paths = {"csv": out_dir / "report.csv", "txt": out_dir / "report.txt", "json": out_dir / "report.json"}
    paths["csv"].write_text(format_csv(rows))
    paths["txt"].write_text(format_table(rows))
    paths["json"].write_text(json.dumps([r.row() for r in rows], indent=1, sort_keys=True) + "\n")
    if figures:
        from .plotting import plot_error_types, plot_wer

        paths["wer_png"] = plot_wer(rows, out_dir / "wer.png")
        paths["errors_png"] = plot_error_types(rows, out_dir / "error_types.png")
    return paths
