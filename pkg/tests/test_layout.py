from __future__ import annotations

import numpy as np
import pytest

from conftest import random_layout
from ralle.errors import LayoutError
from ralle.layout import (
    IGNORE,
    CodecMatrix,
    Segment,
    TokenType,
    assemble_ar_sequence,
    assemble_nar_input,
)
from ralle.prosody import ProsodySeq


def span_sizes(lay):
    return [b - a for a, b in (lay.spans()[s] for s in (Segment.PHONEME, Segment.PROSODY, Segment.SPEECH))]


def test_empty_prompt_spans():
    lay = assemble_ar_sequence([], [4, 5], ProsodySeq((), ()), ProsodySeq((1, 2), (1, 2)), [], [7, 8, 9])
    assert span_sizes(lay) == [3, 2, 4]
    assert lay.length == 2 + 2 + 3 + 2


def test_prompt_and_target_span_arithmetic():
    lay = assemble_ar_sequence([1], [2], ProsodySeq((3,), (2,)), ProsodySeq((4,), (1,)), [5, 6], [7], prompt_frames=2)
    assert lay.prosody_len == 2
    assert lay.T_total == 3
    assert span_sizes(lay) == [3, 2, 4]


def test_inference_layout_has_only_prompt_speech():
    lay = assemble_ar_sequence([1], [2, 3], ProsodySeq((3,), (2,)), ProsodySeq((4, 5), (1, 1)), [5, 6])
    a, b = lay.spans()[Segment.SPEECH]
    assert b - a == 1 + 2
    assert not lay.has_eos_target
    assert (lay.targets(64)["speech"] == IGNORE).all()


def test_layout_errors():
    with pytest.raises(LayoutError):
        assemble_ar_sequence([1], [], None, None, [])
    with pytest.raises(LayoutError):
        assemble_ar_sequence([], [1, 2], ProsodySeq((), ()), ProsodySeq((1,), (1,)), [])
    with pytest.raises(LayoutError):
        assemble_ar_sequence([1], [2], ProsodySeq((1,), (2,)), ProsodySeq((1,), (1,)), [5], prompt_frames=2)


def test_tags_roundtrip_and_prompt_flags():
    rng = np.random.default_rng(0)
    for _ in range(200):
        lay, _ = random_layout(rng, with_prosody=bool(rng.integers(2)))
        rec = lay.recover()
        L0 = lay.L_prompt
        assert rec["x_prompt"].tolist() == lay.phonemes[:L0].tolist()
        assert rec["x_target"].tolist() == lay.phonemes[L0:].tolist()
        assert rec["c_prompt"].tolist() == lay.speech[: lay.T_prompt].tolist()
        assert rec["c_target"].tolist() == lay.speech[lay.T_prompt :].tolist()
        if lay.with_prosody:
            assert rec["pitch"].tolist() == lay.pitch.tolist()
            assert rec["duration"].tolist() == lay.duration.tolist()
        t = lay.tags()
        kind, prompt = t["kind"], t["is_prompt"]
        assert lay.length == lay.L_total + lay.prosody_len + lay.T_total + 2
        # prompt flags: prompt items of each segment plus the two separators
        expected = np.zeros(lay.length, dtype=bool)
        expected[:L0] = True
        expected[lay.sep_p] = True
        if lay.with_prosody:
            expected[lay.prosody_start : lay.prosody_start + L0] = True
        expected[lay.sep_c : lay.speech_start + lay.T_prompt] = True
        assert (prompt == expected).all()
        assert kind[lay.sep_p] == TokenType.SEP_P and kind[lay.sep_c] == TokenType.SEP_C
        # spans are contiguous and ordered
        spans = lay.spans()
        assert spans[Segment.PHONEME][1] == spans[Segment.PROSODY][0]
        assert spans[Segment.PROSODY][1] == spans[Segment.SPEECH][0]
        assert spans[Segment.SPEECH][1] == lay.length


def test_targets_shift_by_one_within_each_stream():
    lay = assemble_ar_sequence([1], [2, 3], ProsodySeq((10,), (2,)), ProsodySeq((11, 12), (1, 2)), [5, 6], [7, 8, 9])
    tg = lay.targets(eos_id=64)
    # target prosody items 1 and 2 are predicted by the rows of prosody items 0 and 1
    assert tg["pitch"][lay.prosody_start + 0] == 11 and tg["pitch"][lay.prosody_start + 1] == 12
    assert tg["duration"][lay.prosody_start + 0] == 0 and tg["duration"][lay.prosody_start + 1] == 1
    assert (tg["pitch"] != IGNORE).sum() == 2
    # speech frame t is predicted by row sep_c + t; prompt frames carry no loss
    assert tg["speech"][lay.sep_c + 2] == 7 and tg["speech"][lay.sep_c + 4] == 9
    assert tg["speech"][lay.eos_slot] == 64
    assert (tg["speech"] != IGNORE).sum() == 4


def test_pitch_and_duration_share_positions():
    lay = assemble_ar_sequence([], [2, 3], ProsodySeq((), ()), ProsodySeq((11, 12), (1, 2)), [], [7, 8, 9])
    ids = lay.input_ids()
    a, b = lay.prosody_start, lay.sep_c
    assert ids["pitch"][a:b].tolist() == [11, 12] and ids["duration"][a:b].tolist() == [1, 2]
    assert (ids["pitch"][:a] == -1).all() and (ids["pitch"][b:] == -1).all()


def test_nar_minimal_stack_and_deep_stack():
    codes = np.arange(12).reshape(3, 4) % 8
    pros = ProsodySeq((0, 5), (1, 2))
    n2 = assemble_nar_input([1, 2], pros, codes[:, :2], 2)
    assert n2.summed_layers() == [[1], [1], [1]]
    n4 = assemble_nar_input([1, 2], pros, codes, 4)
    assert n4.summed_layers() == [[1, 2, 3]] * 3
    assert n4.target().tolist() == codes[:, 3].tolist()


def test_nar_prompt_frames_use_all_layers():
    codes = np.zeros((4, 3), dtype=np.int64)
    n = assemble_nar_input([1, 2], ProsodySeq((0, 0), (2, 2)), codes, 2, T_prompt=2)
    assert n.summed_layers() == [[1, 2, 3], [1, 2, 3], [1], [1]]
    assert n.code_mask().sum() == 8


def test_nar_layer_and_length_errors():
    codes = np.zeros((3, 2), dtype=np.int64)
    with pytest.raises(LayoutError):
        assemble_nar_input([1], ProsodySeq((0,), (3,)), codes, 1)
    with pytest.raises(LayoutError):
        assemble_nar_input([1], ProsodySeq((0,), (3,)), codes, 3)
    with pytest.raises(LayoutError):
        assemble_nar_input([1], ProsodySeq((0,), (2,)), codes, 2)


def test_nar_phoneme_position_embedding_sum():
    import torch

    from ralle.model import ModelConfig, NARModel, collate_nar

    cfg = ModelConfig(n_layers=1, dim=8, ff_dim=16, heads=(1, 1, 2), dropout=0.0)
    m = NARModel(cfg)
    n = assemble_nar_input([3], ProsodySeq((0,), (1,)), np.array([[5, 6]]), 2)
    b = collate_nar([n])
    h = m.embed(b)
    expected = (
        m.phoneme_emb.weight[3] + m.pitch_emb.weight[0] + m.duration_emb.weight[0]
        + m.layer_emb.weight[2] + m.pos(torch.tensor([0]), h.dtype)[0]
    )
    assert h.shape == (1, 2, 8)
    torch.testing.assert_close(h[0, 0], expected)


def test_codec_matrix_range():
    c = CodecMatrix(np.array([[1, 2], [3, 4]]))
    assert c.T == 2 and c.N == 2 and c.layer(2).tolist() == [2, 4]
    c.check_range(5)
    with pytest.raises(LayoutError):
        c.check_range(4)


def test_prosody_rows_carry_the_phoneme_they_predict():
    lay = assemble_ar_sequence([4], [2, 3], ProsodySeq((5,), (1,)), ProsodySeq((11, 12), (1, 2)), [9], [7, 8, 9])
    hint = lay.input_ids()["hint"]
    assert hint[lay.sep_p] == 4
    assert hint[lay.prosody_start : lay.sep_c].tolist() == [2, 3, -1]
    assert (hint[: lay.sep_p] == -1).all() and (hint[lay.sep_c :] == -1).all()
    no_pros = assemble_ar_sequence([], [2, 3], None, None, [], [7, 8])
    assert (no_pros.input_ids()["hint"] == -1).all()
