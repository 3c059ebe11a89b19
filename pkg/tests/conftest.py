from __future__ import annotations

import numpy as np
import pytest
import torch

from ralle.layout import assemble_ar_sequence
from ralle.model import ModelConfig
from ralle.prosody import ProsodySeq, build_alignment_map
from ralle.synthdata import CorpusConfig, generate_split


def random_layout(rng: np.random.Generator, max_len: int = 64, with_prosody: bool = True, with_target: bool = True):
    """Random prompt/target layout with total length <= max_len plus its joint alignment."""
    while True:
        Lp = int(rng.integers(0, 4))
        Lt = int(rng.integers(1, 10))
        dp = rng.integers(1, 5, size=Lp).tolist()
        dt = rng.integers(1, 5, size=Lt).tolist()
        xp = rng.integers(32, size=Lp).tolist()
        xt = rng.integers(32, size=Lt).tolist()
        pp = ProsodySeq(rng.integers(256, size=Lp).tolist(), dp)
        pt = ProsodySeq(rng.integers(256, size=Lt).tolist(), dt)
        cp = rng.integers(64, size=sum(dp)).tolist()
        ct = rng.integers(64, size=sum(dt)).tolist() if with_target else []
        lay = assemble_ar_sequence(
            xp, xt, pp if with_prosody else None, pt if with_prosody else None, cp, ct, prompt_frames=sum(dp)
        )
        if lay.length <= max_len:
            return lay, build_alignment_map(dp + dt)


@pytest.fixture(scope="session")
def small_corpus():
    cfg = CorpusConfig(n_train=32, n_test=8, hard_per_category=3, seed=3)
    return cfg, generate_split(cfg, "train", 32)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(n_layers=1, dim=16, ff_dim=32, heads=(1, 1, 2), dropout=0.0)


@pytest.fixture(autouse=True)
def _threads():
    torch.set_num_threads(1)


def finite_difference_errors(model: torch.nn.Module, loss_fn, eps: float = 1e-5) -> dict[str, float]:
    """Relative error between backprop and central differences, per parameter tensor.

    ``loss_fn()`` must return a scalar computed from ``model`` in double precision.
    """
    model.zero_grad()
    loss_fn().backward()
    out = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            ana = p.grad.detach().clone().reshape(-1)
            num = torch.zeros_like(ana)
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss_fn().item()
                flat[i] = old - eps
                down = loss_fn().item()
                flat[i] = old
                num[i] = (up - down) / (2 * eps)
            scale = max(ana.norm().item(), num.norm().item())
            out[name] = 0.0 if scale < 1e-12 else (ana - num).norm().item() / scale
    return out


ACCEPTANCE: dict[int, str] = {}


def record_acceptance(n: int, ok: bool, detail: str) -> None:
    """Remember one acceptance verdict; all of them are printed at the end of the session."""
    line = f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
