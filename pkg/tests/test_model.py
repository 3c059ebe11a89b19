from __future__ import annotations

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import finite_difference_errors
from ralle.data import Utterance
from ralle.errors import ConfigError, EmptyLossError, TrainingDiverged
from ralle.layout import IGNORE
from ralle.model import (
    ARModel,
    Checkpoint,
    ModelConfig,
    NARModel,
    StepLogits,
    TrainConfig,
    ar_example,
    ar_loss,
    build_model,
    collate_ar,
    collate_nar,
    count_params,
    inverse_sqrt_lr,
    layout_positions,
    load_checkpoint,
    nar_example,
    nar_loss,
    save_checkpoint,
    train,
)


def ar_batch(utts, cfg):
    return collate_ar([ar_example(u, cfg) for u in utts], cfg.eos_id)


def test_positions_name_the_predicted_token():
    from ralle.layout import assemble_ar_sequence
    from ralle.prosody import ProsodySeq

    lay = assemble_ar_sequence([4], [2, 3], ProsodySeq((5,), (1,)), ProsodySeq((11, 12), (1, 2)), [6], [7, 8, 9])
    pos = layout_positions(lay)
    tg = lay.targets(64)
    assert pos[: lay.L_total].tolist() == [0, 1, 2]
    # the row that predicts prosody pair g sits at position g, like phoneme g
    durations = [1, 1, 2]
    for g in range(lay.prosody_len):
        row = lay.sep_p if g == 0 else lay.prosody_start + g - 1
        assert pos[row] == g
        if g >= 1:  # pairs after the prompt carry a loss
            assert tg["duration"][row] == durations[g] - 1
    # the row that predicts frame t sits at position t
    assert pos[lay.sep_c :].tolist() == list(range(lay.T_total + 1))


def test_config_checks():
    with pytest.raises(ConfigError):
        ModelConfig(dim=10, heads=(1, 1, 2))
    with pytest.raises(ConfigError):
        ModelConfig(n_codebooks=1)
    with pytest.raises(ConfigError):
        ModelConfig(use_pitch=False, use_duration=False)
    cfg = ModelConfig(k=None)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_parameters_give_uniform_logits(small_corpus, tiny_cfg):
    _, utts = small_corpus
    m = ARModel(tiny_cfg).eval()
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
        out = m(ar_batch(utts[:2], tiny_cfg))
    for lg in out:
        probs = torch.softmax(lg, -1)
        torch.testing.assert_close(probs, torch.full_like(probs, 1.0 / lg.shape[-1]))


def test_loss_perfect_and_uniform(small_corpus, tiny_cfg):
    _, utts = small_corpus
    b = ar_batch(utts[:3], tiny_cfg)
    B, S = b.phoneme.shape
    uni = StepLogits(
        torch.zeros(B, S, tiny_cfg.n_pitch), torch.zeros(B, S, tiny_cfg.max_duration),
        torch.zeros(B, S, tiny_cfg.codec_vocab + 1),
    )
    n = [(t != IGNORE).sum().item() for t in (b.pitch_target, b.duration_target, b.speech_target)]
    expected = (n[0] * math.log(256) + n[1] * math.log(32) + n[2] * math.log(65)) / sum(n)
    assert ar_loss(uni, b).item() == pytest.approx(expected, rel=1e-6)

    def onehot(t, V):
        return F.one_hot(t.clamp(min=0), V).float() * 1e4

    perfect = StepLogits(onehot(b.pitch_target, 256), onehot(b.duration_target, 32), onehot(b.speech_target, 65))
    assert ar_loss(perfect, b).item() == pytest.approx(0.0, abs=1e-6)


def test_loss_equals_hand_summed_cross_entropy(small_corpus, tiny_cfg):
    _, utts = small_corpus
    b = ar_batch(utts[:2], tiny_cfg)
    torch.manual_seed(0)
    lg = StepLogits(*(torch.randn(*b.phoneme.shape, V) for V in (256, 32, 65)))
    total, count = 0.0, 0
    for logits, tgt in zip(lg, (b.pitch_target, b.duration_target, b.speech_target)):
        for i in range(tgt.shape[0]):
            for j in range(tgt.shape[1]):
                if tgt[i, j] != IGNORE:
                    total += -torch.log_softmax(logits[i, j], -1)[tgt[i, j]].item()
                    count += 1
    assert ar_loss(lg, b).item() == pytest.approx(total / count, rel=1e-5)


def test_loss_rejects_all_prompt_batch(small_corpus, tiny_cfg):
    _, utts = small_corpus
    b = ar_batch(utts[:1], tiny_cfg)
    for t in (b.pitch_target, b.duration_target, b.speech_target):
        t.fill_(IGNORE)
    with pytest.raises(EmptyLossError):
        ar_loss(ARModel(tiny_cfg)(b), b)


def test_loss_invariant_to_batch_order(small_corpus, tiny_cfg):
    _, utts = small_corpus
    m = ARModel(tiny_cfg).eval()
    with torch.no_grad():
        a = ar_loss(m(ar_batch(utts[:4], tiny_cfg)), ar_batch(utts[:4], tiny_cfg))
        b = ar_loss(m(ar_batch(utts[:4][::-1], tiny_cfg)), ar_batch(utts[:4][::-1], tiny_cfg))
    assert a.item() == pytest.approx(b.item(), rel=1e-6)


def test_masked_keys_have_no_influence(small_corpus, tiny_cfg):
    _, utts = small_corpus
    torch.manual_seed(1)
    m = ARModel(tiny_cfg).eval()
    lay, mask = ar_example(utts[0], tiny_cfg)
    b = collate_ar([(lay, mask)], tiny_cfg.eos_id)
    row = lay.sep_c + 3
    allowed = mask.union()[row]
    # only look at the row itself: keys not visible to it in any head and not earlier in the stream
    hidden = np.flatnonzero(~allowed & (np.arange(lay.length) > row))
    delta = torch.zeros(1, lay.length, tiny_cfg.dim)
    delta[0, hidden] = torch.randn(len(hidden), tiny_cfg.dim)
    with torch.no_grad():
        a = m(b).speech[0, row]
        c = m(b, input_delta=delta).speech[0, row]
    assert torch.equal(a, c)


def test_gradients_match_finite_differences(small_corpus):
    _, utts = small_corpus
    cfg = ModelConfig(n_layers=1, dim=8, ff_dim=16, heads=(1, 1, 2), dropout=0.0, n_pitch=16, max_duration=16,
                      phoneme_vocab=32, codec_vocab=64)
    small = [u for u in utts if max(u.pitch_buckets + u.prompt_pitch_buckets) < 16][:1]
    small = small or [Utterance("u", [1], [3], [2], [[1, 2], [3, 4]], [], [], [], [])]
    torch.manual_seed(0)
    m = ARModel(cfg).double()
    b = ar_batch(small, cfg)
    errs = finite_difference_errors(m, lambda: ar_loss(m(b), b))
    assert max(errs.values()) < 1e-4, errs


def test_nar_shapes_and_layer_checks(small_corpus, tiny_cfg):
    _, utts = small_corpus
    m = NARModel(tiny_cfg).eval()
    b = collate_nar([nar_example(u, tiny_cfg, 2) for u in utts[:2]])
    out = m(b)
    assert out.shape == (2, b.phoneme.shape[1], tiny_cfg.codec_vocab)
    assert nar_loss(out, b).item() > 0
    b.layer = 3
    with pytest.raises(ConfigError):
        m(b)


def test_nar_equivariant_to_frame_permutation(tiny_cfg):
    from ralle.layout import assemble_nar_input
    from ralle.prosody import ProsodySeq

    torch.manual_seed(0)
    cfg = ModelConfig(**{**tiny_cfg.to_dict(), "sinusoidal": False})
    m = NARModel(cfg).eval()
    codes = np.array([[1, 2], [3, 4], [5, 6], [7, 8]])
    n = assemble_nar_input([1, 2], ProsodySeq((3, 4), (2, 2)), codes, 2)
    b = collate_nar([n])
    perm = torch.tensor([0, 1, 4, 2, 5, 3])  # phonemes stay, frames shuffle
    b2 = collate_nar([n])
    for name in ("phoneme", "pitch", "duration", "codes", "code_mask", "pos", "valid", "target"):
        setattr(b2, name, getattr(b, name)[:, perm])
    with torch.no_grad():
        torch.testing.assert_close(m(b)[:, perm], m(b2))


def test_inverse_sqrt_schedule():
    assert inverse_sqrt_lr(0, 1.0, 10) == pytest.approx(0.1)
    assert inverse_sqrt_lr(9, 1.0, 10) == pytest.approx(1.0)
    assert inverse_sqrt_lr(39, 1.0, 10) == pytest.approx(0.5)


def test_training_is_deterministic(small_corpus, tiny_cfg, tmp_path):
    _, utts = small_corpus
    tc = TrainConfig(steps=5, batch_size=4, log_every=1)
    a, b = train(utts, tiny_cfg, tc, seed=7), train(utts, tiny_cfg, tc, seed=7)
    save_checkpoint(a, tmp_path / "a.ckpt")
    save_checkpoint(b, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    c = load_checkpoint(tmp_path / "a.ckpt")
    assert c.config == tiny_cfg and c.kind == "ar" and len(c.log) == 5
    for k, v in a.state.items():
        assert torch.equal(c.state[k], v.float())


def test_overfits_a_single_utterance(small_corpus):
    _, utts = small_corpus
    cfg = ModelConfig(dropout=0.0)
    ck = train(utts[:1], cfg, TrainConfig(steps=200, batch_size=1, peak_lr=3e-3, warmup=20, log_every=10), seed=0)
    assert ck.log[-1]["loss"] < 0.1


def test_baseline_flag_keeps_parameter_count(tiny_cfg):
    a = count_params(build_model("ar", tiny_cfg))
    b = count_params(build_model("ar", ModelConfig(**{**tiny_cfg.to_dict(), "baseline_mode": True})))
    assert a == b


def test_divergence_is_reported(small_corpus, tiny_cfg, monkeypatch):
    import ralle.model as model_mod

    _, utts = small_corpus
    real = model_mod._loss
    monkeypatch.setattr(model_mod, "_loss", lambda *a: real(*a) * float("nan"))
    with pytest.raises(TrainingDiverged):
        train(utts, tiny_cfg, TrainConfig(steps=3, batch_size=2), seed=0)


def test_empty_dataset_rejected(tiny_cfg):
    with pytest.raises(ConfigError):
        train([], tiny_cfg, TrainConfig(steps=1), seed=0)


def test_other_model_kinds_train(small_corpus, tiny_cfg):
    _, utts = small_corpus
    tc = TrainConfig(steps=2, batch_size=2)
    for kind in ("nar", "duration"):
        ck = train(utts, tiny_cfg, tc, seed=0, kind=kind)
        assert isinstance(ck, Checkpoint) and ck.kind == kind
        assert ck.build().training is False
