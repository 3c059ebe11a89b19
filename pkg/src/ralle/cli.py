"""Command-line entry point: gen, train, synth, eval, mask-dump, sweep-k.

Every command writes the fully resolved configuration next to its outputs.
The output root comes from ``--out``, else ``$RALLE_OUT``, else ``./runs``.
Exit codes: 0 success, 1 user error (bad flags, missing inputs), 2 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import (
    OUT_ENV,
    VARIANTS,
    RunConfig,
    apply_variant,
    load_config,
    write_config,
)
from .data import Utterance, read_jsonl
from .errors import ConfigError, RalleError
from .evaluate import RunMetrics, format_table, report, score_run
from .layout import assemble_ar_sequence
from .masking import MaskConfig, build_ar_mask
from .model import Checkpoint, ModelConfig, load_checkpoint, save_checkpoint, train
from .plotting import plot_mask, plot_sweep
from .sampling import SamplingConfig, System, run_rng, synthesize
from .synthdata import HARD_CATEGORIES, check_encoding, gen_corpus, gen_hard_suite

logger = logging.getLogger("ralle")

SPLITS = ("test", "hard")
TIMING_FILE = "timing.json"
SWEEP_KS = (0, 1, 2, None)
SWEEP_SETTINGS = ((0.9, 0.9), (0.9, 1.0), (1.0, 0.9), (1.0, 1.0))  # (rho_p = rho_d, rho_c)


class UsageError(RalleError):
    pass


def k_label(k: Optional[int]) -> str:
    return "inf" if k is None else str(k)


def setting_label(rho_pd: float, rho_c: float) -> str:
    return f"pd{rho_pd:g}_c{rho_c:g}"


# ---------------------------------------------------------------- helpers


def _data_dir(cfg: RunConfig) -> Path:
    return cfg.paths.resolve("data_dir")


def load_split(cfg: RunConfig, split: str) -> list[Utterance]:
    p = _data_dir(cfg) / f"{split}.jsonl"
    if not p.is_file():
        raise UsageError(f"dataset file {p} not found; run `ralle gen` first")
    return read_jsonl(p)


def _write_jsonl(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _write_log_csv(path: Path, log: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr"])
        for e in log:
            w.writerow([e["step"], f"{e['loss']:.6f}", f"{e['lr']:.6e}"])


def _setup_torch(cfg: RunConfig) -> None:
    torch.set_num_threads(max(1, cfg.run.torch_threads))
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------- commands


def cmd_gen(cfg: RunConfig) -> dict[str, Path]:
    """Write the train/test corpus and the hard suite, then re-encode-check every record."""
    out = _data_dir(cfg)
    paths = gen_corpus(cfg.corpus, out)
    paths["hard"] = gen_hard_suite(cfg.corpus, out)
    bad = 0
    for split, p in paths.items():
        for u in read_jsonl(p):
            bad += not check_encoding(u, cfg.corpus.codec)
    if bad:
        raise RalleError(f"{bad} generated records fail the codec re-encode check")
    write_config(cfg, out)
    return paths


def model_dir(cfg: RunConfig, name: str) -> Path:
    return cfg.paths.resolve("models_dir") / name


def cmd_train(cfg: RunConfig, variant: str = "rall-e", name: Optional[str] = None) -> Path:
    """Train the AR model for a variant (plus NAR and, for duration-external, a duration model)."""
    _setup_torch(cfg)
    mcfg = apply_variant(cfg.model, variant)
    cfg = replace(cfg, model=mcfg)
    data = load_split(cfg, "train")
    out = model_dir(cfg, name or variant)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.run.seed
    timing: dict[str, float] = {}
    t0 = time.perf_counter()
    ck = train(data, mcfg, cfg.train, seed, kind="ar")
    timing["ar_seconds"] = time.perf_counter() - t0
    ck.meta["variant"] = variant
    save_checkpoint(ck, out / "ar.ckpt")
    _write_log_csv(out / "ar_log.csv", ck.log)
    if cfg.run.nar_steps > 0:
        t0 = time.perf_counter()
        nar = train(data, mcfg, replace(cfg.train, steps=cfg.run.nar_steps), seed + 1, kind="nar")
        timing["nar_seconds"] = time.perf_counter() - t0
        save_checkpoint(nar, out / "nar.ckpt")
        _write_log_csv(out / "nar_log.csv", nar.log)
    if not mcfg.use_duration and mcfg.with_prosody:
        t0 = time.perf_counter()
        dur = train(data, mcfg, replace(cfg.train, steps=cfg.run.duration_steps), seed + 2, kind="duration")
        timing["duration_seconds"] = time.perf_counter() - t0
        save_checkpoint(dur, out / "duration.ckpt")
        _write_log_csv(out / "duration_log.csv", dur.log)
    # wall-clock only: the one output file that is not reproducible
    (out / TIMING_FILE).write_text(json.dumps(timing, indent=1, sort_keys=True) + "\n")
    write_config(cfg, out)
    return out


def load_system(directory: Path, name: str | None = None) -> System:
    ar_path = directory / "ar.ckpt"
    if not ar_path.is_file():
        raise UsageError(f"no checkpoint at {ar_path}; run `ralle train` first")
    ar = load_checkpoint(ar_path).build().eval()
    nar = load_checkpoint(directory / "nar.ckpt").build().eval() if (directory / "nar.ckpt").is_file() else None
    dur = (
        load_checkpoint(directory / "duration.ckpt").build().eval()
        if (directory / "duration.ckpt").is_file()
        else None
    )
    return System(ar, nar, dur, name or directory.name)


def synth_records(system: System, utts: Sequence[Utterance], scfg: SamplingConfig, *, with_nar: bool = True) -> list[dict]:
    """``rerank_n`` candidates per utterance, each with its own RNG stream."""
    rows = []
    for ui, u in enumerate(utts):
        rec = {"uid": u.uid, "category": u.category, "candidates": [], "truncated": [], "durations": []}
        layer2 = []
        for c in range(scfg.rerank_n):
            s = synthesize(system, u, scfg, run_rng(scfg.seed, ui, c), with_nar=with_nar)
            rec["candidates"].append(s.tokens)
            rec["truncated"].append(s.truncated)
            rec["durations"].append(list(s.prosody.duration) if s.prosody is not None else None)
            if s.codes is not None:
                layer2.append(s.codes.layer(2).tolist())
        if layer2:
            rec["layer2"] = layer2
        rows.append(rec)
    return rows


def cmd_synth(
    cfg: RunConfig, model: str = "rall-e", splits: Sequence[str] = SPLITS, tag: Optional[str] = None,
    limit: Optional[int] = None,
) -> Path:
    _setup_torch(cfg)
    system = load_system(model_dir(cfg, model), model)
    out = cfg.paths.resolve("synth_dir") / (tag or model)
    out.mkdir(parents=True, exist_ok=True)
    for split in splits:
        utts = load_split(cfg, split)[:limit]
        rows = synth_records(system, utts, cfg.sampling)
        _write_jsonl(out / f"{split}.jsonl", rows)
        logger.info("synthesized %d %s utterances with %s", len(rows), split, model)
    write_config(cfg, out)
    (out / "system.txt").write_text(model + "\n")
    return out


def score_results_dir(cfg: RunConfig, directory: Path, *, strict_pitch: bool = False) -> list[RunMetrics]:
    """Metrics for every ``<split>.jsonl`` in a synthesis output directory."""
    rows = []
    found = False
    for split in SPLITS:
        p = directory / f"{split}.jsonl"
        if not p.is_file():
            continue
        found = True
        refs = {u.uid: u for u in load_split(cfg, split)}
        rows.append(score_run(directory.name, split, _read_jsonl(p), refs, cfg.corpus.codec, strict_pitch))
    if not found:
        raise UsageError(f"no synthesis results in {directory}")
    return rows


def cmd_eval(
    cfg: RunConfig, results: Sequence[str | Path] = (), *, strict_pitch: bool = False, figures: bool = True,
) -> dict[str, Path]:
    dirs = [Path(r) for r in results]
    if not dirs:
        root = cfg.paths.resolve("synth_dir")
        dirs = sorted(p for p in root.glob("*") if p.is_dir()) if root.is_dir() else []
    if not dirs:
        raise UsageError("no synthesis result directories to evaluate")
    rows = []
    for d in dirs:
        rows += score_results_dir(cfg, d, strict_pitch=strict_pitch)
    out = cfg.paths.resolve("report_dir")
    paths = report(rows, out, figures=figures)
    write_config(cfg, out)
    print(format_table(sorted(rows, key=lambda r: (r.split, r.system))), end="")
    return paths


def write_pgm(path: Path, m: np.ndarray) -> None:
    """Binary PGM, white = attend."""
    h, w = m.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write((m.astype(np.uint8) * 255).tobytes())


def cmd_mask_dump(
    cfg: RunConfig, split: str = "test", index: int = 0, out: Optional[Path] = None, variant: str = "rall-e",
) -> dict[str, Path]:
    """Dump the training-time attention mask of one utterance as PGM (per head), JSON and PNG."""
    utts = load_split(cfg, split)
    if not 0 <= index < len(utts):
        raise UsageError(f"index {index} outside [0, {len(utts)})")
    u = utts[index]
    mcfg = apply_variant(cfg.model, variant)
    layout = u.ar_layout(with_prosody=mcfg.with_prosody)
    align = None if mcfg.baseline_mode else u.alignment()
    ms = build_ar_mask(layout, align, mcfg.mask_config())
    per_head = ms.per_head()
    out = Path(out) if out else cfg.paths.resolve("report_dir") / "masks"
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{variant}_{u.uid}"
    paths = {}
    for h in range(per_head.shape[0]):
        p = out / f"{stem}_head{h}.pgm"
        write_pgm(p, per_head[h])
        paths[f"head{h}"] = p
    paths["json"] = out / f"{stem}.json"
    paths["json"].write_text(json.dumps({"uid": u.uid, "variant": variant, **ms.to_json()}, sort_keys=True) + "\n")
    titles = [g.kind.name.lower() for g in ms.groups for _ in range(g.heads)]
    paths["png"] = plot_mask(per_head, out / f"{stem}.png", titles)
    write_config(replace(cfg, model=mcfg), out)
    return paths


# ---------------------------------------------------------------- window sweep


def _sweep_cell(args) -> list[dict]:
    cfg, k, seed, limit, reuse = args
    _setup_torch(cfg)
    mcfg = replace(cfg.model, k=k)
    cell = cfg.paths.resolve("sweep_dir") / f"k{k_label(k)}_s{seed}"
    cell.mkdir(parents=True, exist_ok=True)
    ck_path = cell / "ar.ckpt"
    if reuse and ck_path.is_file() and load_checkpoint(ck_path).config == mcfg:
        ck = load_checkpoint(ck_path)
    else:
        ck = train(load_split(cfg, "train"), mcfg, cfg.train, seed, kind="ar")
        save_checkpoint(ck, ck_path)
        _write_log_csv(cell / "ar_log.csv", ck.log)
    system = System(ck.build().eval(), name=f"k{k_label(k)}")
    test = load_split(cfg, "test")[:limit]
    refs = {u.uid: u for u in test}
    rows = []
    for rho_pd, rho_c in SWEEP_SETTINGS:
        scfg = replace(cfg.sampling, rho_p=rho_pd, rho_d=rho_pd, rho_c=rho_c, seed=seed, rerank_n=cfg.run.sweep_samples)
        res = synth_records(system, test, scfg, with_nar=False)
        _write_jsonl(cell / f"{setting_label(rho_pd, rho_c)}.jsonl", res)
        m = score_run(system.name, "test", res, refs, cfg.corpus.codec)
        rows.append({
            "k": k_label(k), "seed": seed, "rho_pd": rho_pd, "rho_c": rho_c,
            "wer": m.wer, "wer_r": m.wer_r, "truncated": m.truncated,
        })
        logger.info("sweep k=%s seed=%d %s WER %.2f", k_label(k), seed, setting_label(rho_pd, rho_c), m.wer)
    write_config(replace(cfg, model=mcfg), cell)
    return rows


def cmd_sweep_k(
    cfg: RunConfig, ks: Sequence[Optional[int]] = SWEEP_KS, seeds: Optional[Sequence[int]] = None,
    limit: Optional[int] = None, reuse: bool = False,
) -> dict[str, Path]:
    """Train one model per (k, seed) and score it under the four sampling settings."""
    seeds = tuple(cfg.run.sweep_seeds if seeds is None else seeds)
    cells = [(cfg, k, s, limit, reuse) for k in ks for s in seeds]
    if cfg.run.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.run.workers) as ex:
            results = list(ex.map(_sweep_cell, cells))
    else:
        results = [_sweep_cell(c) for c in cells]
    rows = [r for cell in results for r in cell]
    out = cfg.paths.resolve("sweep_dir")
    out.mkdir(parents=True, exist_ok=True)
    fields = ["k", "seed", "rho_pd", "rho_c", "wer", "wer_r", "truncated"]
    with open(out / "grid.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "wer": f"{r['wer']:.4f}", "wer_r": f"{r['wer_r']:.4f}"})
    mean: dict[str, dict[str, float]] = {}
    for rho_pd, rho_c in SWEEP_SETTINGS:
        lab = setting_label(rho_pd, rho_c)
        mean[lab] = {}
        for k in ks:
            v = [r["wer"] for r in rows if r["k"] == k_label(k) and r["rho_pd"] == rho_pd and r["rho_c"] == rho_c]
            mean[lab][k_label(k)] = float(np.mean(v))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["setting"] + [k_label(k) for k in ks])
        for lab, row in mean.items():
            w.writerow([lab] + [f"{row[k_label(k)]:.4f}" for k in ks])
    png = plot_sweep(mean, out / "sweep.png")
    write_config(cfg, out)
    return {"grid": out / "grid.csv", "summary": out / "summary.csv", "png": png}


# ---------------------------------------------------------------- argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _k_arg(s: str) -> Optional[int]:
    if s.lower() in ("inf", "none"):
        return None
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"window size must be an integer or 'inf', got {s!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("window size must be >= 0")
    return v


_UNSET = object()


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ralle", description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, help="INI config file (flags override its values)")
    p.add_argument("--out", help=f"output root (default: ${OUT_ENV} or ./runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, help="seed (training seed, or sampling seed for synth)")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    sub.add_parser("gen", parents=[common], help="generate the synthetic corpus and the hard suite")

    t = sub.add_parser("train", parents=[common], help="train a model variant")
    g = t.add_mutually_exclusive_group()
    for v in VARIANTS:
        g.add_argument(f"--{v}", dest="variant", action="store_const", const=v)
    t.add_argument("--name", help="model directory name (default: the variant)")
    t.add_argument("--steps", type=int)
    t.add_argument("--k", type=_k_arg, default=_UNSET, help="window size (integer or 'inf')")

    s = sub.add_parser("synth", parents=[common], help="sample speech tokens for the test split and the hard suite")
    s.add_argument("--model", default=None, help="model directory name (default: rall-e)")
    s.add_argument("--baseline", action="store_true", help="shorthand for --model baseline")
    s.add_argument("--rho-p", type=float)
    s.add_argument("--rho-d", type=float)
    s.add_argument("--rho-c", type=float)
    s.add_argument("--rerank", type=int, help="candidates per utterance")
    s.add_argument("--no-duration-stop", action="store_true", help="stop at EOS instead of the predicted length")
    s.add_argument("--max-steps", type=int)
    s.add_argument("--split", choices=SPLITS + ("all",), default="all")
    s.add_argument("--limit", type=int, help="only the first N utterances per split")
    s.add_argument("--tag", help="output directory name (default: the model name)")

    e = sub.add_parser("eval", parents=[common], help="score synthesis outputs and write report tables and figures")
    e.add_argument("results", nargs="*", help="synthesis result directories (default: all)")
    e.add_argument("--strict-pitch", action="store_true", help="count a wrong pitch class as mispronunciation")
    e.add_argument("--no-figures", action="store_true")

    m = sub.add_parser("mask-dump", parents=[common], help="write one utterance's attention masks as PGM/JSON/PNG")
    m.add_argument("--split", default="test")
    m.add_argument("--index", type=int, default=0)
    m.add_argument("--variant", choices=sorted(VARIANTS), default="rall-e")
    m.add_argument("--k", type=_k_arg, default=_UNSET)
    m.add_argument("--dest", type=Path)

    w = sub.add_parser("sweep-k", parents=[common], help="window-size sweep over k x sampling settings x seeds")
    w.add_argument("--seeds", type=int, nargs="+")
    w.add_argument("--ks", type=_k_arg, nargs="+", default=list(SWEEP_KS))
    w.add_argument("--steps", type=int)
    w.add_argument("--limit", type=int)
    w.add_argument("--workers", type=int)
    w.add_argument("--reuse", action="store_true", help="reuse existing cell checkpoints with the same config")
    return p


def _given(**kw) -> dict:
    return {k: v for k, v in kw.items() if v is not None}


def resolve(args: argparse.Namespace) -> RunConfig:
    """Defaults < config file < environment (output root) < flags."""
    ov: dict[str, dict] = {"run": {}, "train": {}, "sampling": {}, "model": {}}
    if args.cmd == "synth":
        ov["sampling"] = _given(
            rho_p=args.rho_p, rho_d=args.rho_d, rho_c=args.rho_c, rerank_n=args.rerank, max_steps=args.max_steps,
            seed=args.seed,
        )
        if args.no_duration_stop:
            ov["sampling"]["duration_guided"] = False
    else:
        ov["run"] = _given(seed=args.seed)
    if args.cmd in ("train", "sweep-k"):
        ov["train"] = _given(steps=args.steps)
    if args.cmd == "sweep-k":
        ov["run"].update(_given(workers=args.workers))
    if args.cmd in ("train", "mask-dump") and args.k is not _UNSET:
        ov["model"]["k"] = args.k
    cfg = load_config(args.config, ov)
    if args.out is not None:
        cfg = cfg.with_values("paths", out_root=args.out)
    elif os.environ.get(OUT_ENV):
        cfg = cfg.with_values("paths", out_root=os.environ[OUT_ENV])
    return cfg


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = resolve(args)
    if args.cmd == "gen":
        for split, path in cmd_gen(cfg).items():
            print(f"{split}: {path}")
    elif args.cmd == "train":
        print(cmd_train(cfg, args.variant or "rall-e", args.name))
    elif args.cmd == "synth":
        if args.baseline and args.model:
            raise UsageError("--baseline and --model are exclusive")
        name = "baseline" if args.baseline else (args.model or "rall-e")
        splits = SPLITS if args.split == "all" else (args.split,)
        print(cmd_synth(cfg, name, splits, args.tag, args.limit))
    elif args.cmd == "eval":
        cmd_eval(cfg, args.results, strict_pitch=args.strict_pitch, figures=not args.no_figures)
    elif args.cmd == "mask-dump":
        for name, path in cmd_mask_dump(cfg, args.split, args.index, args.dest, args.variant).items():
            print(f"{name}: {path}")
    elif args.cmd == "sweep-k":
        for name, path in cmd_sweep_k(cfg, args.ks, args.seeds, args.limit, args.reuse).items():
            print(f"{name}: {path}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    verbose = argv is not None and ("-v" in argv or "--verbose" in argv) or "-v" in sys.argv or "--verbose" in sys.argv
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return run(argv)
    except (RalleError, ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
