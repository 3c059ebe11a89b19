"""Run configuration: INI file with sections, flag overrides, provenance dump."""

from __future__ import annotations

import configparser
import dataclasses
import os
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError
from .model import ModelConfig, TrainConfig
from .sampling import SamplingConfig
from .synthdata import CorpusConfig, ToyCodecRule

OUT_ENV = "RALLE_OUT"

# training variants and the model switches each one flips
VARIANTS: dict[str, dict[str, Any]] = {
    "rall-e": {},
    "baseline": {"with_prosody": False, "baseline_mode": True, "grouping": False},
    "no-pitch": {"use_pitch": False},
    "k0": {"k": 0},
    "no-masking": {"baseline_mode": True},
    "duration-external": {"use_duration": False},
}


def apply_variant(cfg: ModelConfig, variant: str) -> ModelConfig:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    return replace(cfg, **VARIANTS[variant])


@dataclass(frozen=True)
class Paths:
    out_root: str = "runs"
    data_dir: str = "data"
    models_dir: str = "models"
    synth_dir: str = "synth"
    report_dir: str = "report"
    sweep_dir: str = "sweep"

    def resolve(self, name: str) -> Path:
        sub = getattr(self, name)
        p = Path(sub)
        return p if p.is_absolute() else Path(self.out_root) / p


@dataclass(frozen=True)
class RunOptions:
    seed: int = 0
    workers: int = 1
    torch_threads: int = 1
    nar_steps: int = 1000
    duration_steps: int = 1500
    sweep_seeds: tuple[int, ...] = (0, 1, 2)
    sweep_samples: int = 1


@dataclass(frozen=True)
class RunConfig:
    run: RunOptions = field(default_factory=RunOptions)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    paths: Paths = field(default_factory=Paths)

    def with_values(self, section: str, **kw) -> "RunConfig":
        if not kw:
            return self
        return replace(self, **{section: _replace_checked(getattr(self, section), kw, section)})


_SECTIONS = ("run", "corpus", "model", "train", "sampling", "paths")


def _replace_checked(obj, kw: dict, section: str):
    names = {f.name for f in fields(obj)}
    bad = set(kw) - names
    if bad:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(bad))}")
    try:
        return replace(obj, **kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}] {e}") from e


def _parse(text: str, tp, key: str):
    text = text.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union and type(None) in args:
        if text.lower() in ("none", "inf", "infinity", ""):
            return None
        return _parse(text, next(a for a in args if a is not type(None)), key)
    if origin is tuple:
        items = [s for s in text.replace(",", " ").split() if s]
        inner = args[0] if args else str
        return tuple(_parse(s, inner, key) for s in items)
    if tp is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {tp.__name__}, got {text!r}") from None
    return text


def _format(v) -> str:
    if v is None:
        return "inf"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format(x) for x in v)
    return str(v)


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _section_values(obj, section: configparser.SectionProxy, name: str) -> dict:
    hints = _hints(type(obj))
    names = {f.name for f in fields(obj)}
    out = {}
    for key, raw in section.items():
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        out[key] = _parse(raw, hints[key], f"{name}.{key}")
    return out


def load_config(path: str | Path | None = None, overrides: dict[str, dict] | None = None) -> RunConfig:
    """Defaults, then the file (if any), then ``overrides[section][key]``; unknown keys are errors."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
        for name in cp.sections():
            if name == "codec":
                continue
            if name not in _SECTIONS:
                raise ConfigError(f"unknown section [{name}] in {path}")
            cfg = cfg.with_values(name, **_section_values(getattr(cfg, name), cp[name], name))
        if cp.has_section("codec"):
            codec = _replace_checked(cfg.corpus.codec, _section_values(cfg.corpus.codec, cp["codec"], "codec"), "codec")
            cfg = cfg.with_values("corpus", codec=codec)
    for name, kw in (overrides or {}).items():
        cfg = cfg.with_values(name, **kw)
    # the model's vocabularies follow the corpus
    cfg = cfg.with_values(
        "model",
        phoneme_vocab=cfg.corpus.phoneme_vocab, n_pitch=cfg.corpus.n_pitch,
        max_duration=cfg.corpus.max_duration, codec_vocab=cfg.corpus.codec.vocab,
        n_codebooks=cfg.corpus.codec.n_layers,
    )
    return cfg


def default_out_root() -> str:
    return os.environ.get(OUT_ENV, "runs")


def dump_config(cfg: RunConfig) -> str:
    """Canonical INI text of a resolved config (sections and keys in a fixed order)."""
    lines = []
    for name in _SECTIONS:
        obj = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, ToyCodecRule):
                continue
            lines.append(f"{f.name} = {_format(v)}")
        lines.append("")
    lines.append("[codec]")
    for f in fields(cfg.corpus.codec):
        lines.append(f"{f.name} = {_format(getattr(cfg.corpus.codec, f.name))}")
    return "\n".join(lines) + "\n"


def write_config(cfg: RunConfig, directory: str | Path, name: str = "config.ini") -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    p = d / name
    p.write_text(dump_config(cfg))
    return p


def config_diff(a: Any, b: Any) -> dict[str, tuple]:
    """Field-level differences between two config dataclasses."""
    return {
        f.name: (getattr(a, f.name), getattr(b, f.name))
        for f in dataclasses.fields(a)
        if getattr(a, f.name) != getattr(b, f.name)
    }
