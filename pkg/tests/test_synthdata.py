from __future__ import annotations

import numpy as np
import pytest

from ralle.data import Utterance, read_jsonl, write_jsonl
from ralle.errors import ConfigError
from ralle.prosody import ProsodySeq
from ralle.synthdata import (
    HARD_CATEGORIES,
    CorpusConfig,
    ToyCodecRule,
    check_encoding,
    gen_corpus,
    gen_hard_suite,
    generate_hard,
    generate_split,
    segment_blocks,
    toy_decode,
    toy_encode,
    transcript,
)

RULE = ToyCodecRule()


def test_single_phoneme_single_frame_by_hand():
    c = toy_encode([3], ProsodySeq((200,), (1,)), RULE)
    # layer 1: 8*3 + 4*1 + 1*0 = 28; layer 2: 2*3 + 1*1 = 7
    assert c.tokens.tolist() == [[28, 7]]


def test_equal_inputs_give_equal_blocks():
    c = toy_encode([5, 5], ProsodySeq((10, 10), (3, 3)), RULE)
    assert c.tokens[:3].tolist() == c.tokens[3:].tolist()


def test_encode_rejects_length_mismatch():
    with pytest.raises(ConfigError):
        toy_encode([1, 2], ProsodySeq((1,), (1,)), RULE)


def test_decode_table_is_unambiguous_and_in_range():
    table = RULE.decode_table()
    assert len(table) == RULE.vocab and all(v is not None for v in table.values())
    assert all(0 <= k < RULE.vocab for k in table)


def test_encode_decode_inverts():
    rng = np.random.default_rng(0)
    for _ in range(200):
        L = int(rng.integers(1, 8))
        x = rng.integers(32, size=L).tolist()
        pros = ProsodySeq(rng.integers(256, size=L).tolist(), rng.integers(1, 9, size=L).tolist())
        c = toy_encode(x, pros, RULE)
        dec = toy_decode(c.layer(1), RULE)
        t = 0
        for i in range(L):
            for o in range(pros.duration[i]):
                assert dec[t].phoneme_class == RULE.phoneme_class(x[i])
                assert dec[t].pitch_class == RULE.pitch_class(pros.pitch[i])
                assert dec[t].phase == min(o, RULE.phase_cap)
                t += 1
        assert c.tokens.min() >= 0 and c.tokens.max() < RULE.vocab
        assert transcript(c.layer(1), RULE) == [RULE.phoneme_class(p) for p in x]


def test_layers_determine_the_phoneme_id():
    for x in range(32):
        for pc_bucket in (0, 200):
            pairs = {
                (RULE.token(1, y, pc_bucket, 0), RULE.token(2, y, pc_bucket, 0)) for y in range(32) if y != x
            }
            assert (RULE.token(1, x, pc_bucket, 0), RULE.token(2, x, pc_bucket, 0)) not in pairs


def test_segment_blocks_flags_undecodable_and_malformed():
    from ralle.synthdata import Decoded

    dec = [Decoded(8, 0, 0), Decoded(8, 0, 2), None, Decoded(16, 1, 0)]
    blocks = segment_blocks(dec, 3)
    assert [(b.phoneme_class, b.length, b.well_formed) for b in blocks] == [
        (8, 2, False), (None, 1, False), (16, 1, True)
    ]


def test_corpus_records_re_encode(tmp_path):
    cfg = CorpusConfig(n_train=50, n_test=10, hard_per_category=4, seed=1)
    paths = gen_corpus(cfg, tmp_path)
    hard = gen_hard_suite(cfg, tmp_path)
    for p in [*paths.values(), hard]:
        for u in read_jsonl(p):
            assert check_encoding(u, cfg.codec)
            assert sum(u.render_durations) == u.T
            assert sum(u.durations) == u.T
            assert len(u.prompt_codec_tokens) == sum(u.prompt_durations)
            assert all(0 <= b < 256 for b in u.pitch_buckets)


def test_corpus_is_byte_identical_per_seed(tmp_path):
    cfg = CorpusConfig(n_train=20, n_test=5, seed=4)
    a = gen_corpus(cfg, tmp_path / "a")
    b = gen_corpus(cfg, tmp_path / "b")
    for k in a:
        assert a[k].read_bytes() == b[k].read_bytes()
    c = gen_corpus(CorpusConfig(n_train=20, n_test=5, seed=5), tmp_path / "c")
    assert a["train"].read_bytes() != c["train"].read_bytes()


def test_empty_split_writes_empty_file(tmp_path):
    paths = gen_corpus(CorpusConfig(n_train=0, n_test=0), tmp_path)
    assert paths["train"].read_bytes() == b""


def test_default_sizes_and_ranges():
    cfg = CorpusConfig()
    assert (cfg.phoneme_vocab, cfg.codec.vocab, cfg.codec.n_layers) == (32, 64, 2)
    assert (cfg.min_len, cfg.max_len, cfg.min_dur, cfg.max_dur) == (4, 16, 1, 8)
    assert (cfg.n_train, cfg.n_test) == (2000, 200)
    for u in generate_split(CorpusConfig(seed=2), "train", 50):
        assert 4 <= u.L <= 16 and all(1 <= d <= 8 for d in u.render_durations)


def test_hard_suite_categories():
    cfg = CorpusConfig()
    single = generate_hard(cfg, "single", 50)
    assert len(single) == 50 and all(u.L == 1 for u in single)
    rep = generate_hard(cfg, "repeat", 50)
    assert all(len(set(u.phonemes)) == 1 and 8 <= u.L <= 20 for u in rep)
    mixed = generate_hard(cfg, "long_mixed", 50)
    assert all(16 <= u.L <= 24 for u in mixed)
    assert all(sum(p < cfg.digit_vocab for p in u.phonemes) >= 3 for u in mixed)
    assert all(u.true_durations is None for u in single + rep + mixed)
    with pytest.raises(ConfigError):
        generate_hard(cfg, "nonsense", 1)
    assert HARD_CATEGORIES == ("single", "repeat", "long_mixed")


def test_alignment_noise_is_present_in_training_data():
    utts = generate_split(CorpusConfig(seed=0, align_jitter=0.15), "train", 100)
    assert sum(u.true_durations is not None for u in utts) > 20


def test_jsonl_roundtrip_with_gzip(tmp_path):
    utts = generate_split(CorpusConfig(seed=0), "test", 5)
    write_jsonl(tmp_path / "x.jsonl.gz", utts)
    back = read_jsonl(tmp_path / "x.jsonl.gz")
    assert [u.to_json() for u in back] == [u.to_json() for u in utts]
    assert isinstance(back[0], Utterance)


def test_corpus_config_validation():
    with pytest.raises(ConfigError):
        CorpusConfig(min_len=5, max_len=4)
    with pytest.raises(ConfigError):
        CorpusConfig(max_dur=40)
    assert CorpusConfig.from_dict(CorpusConfig().to_dict()) == CorpusConfig()


def test_speaking_rate_scales_durations_per_speaker():
    base = CorpusConfig(n_train=200, align_jitter=0.0, dur_jitter=0, rate_spread=0.0)
    fast_slow = CorpusConfig(n_train=200, align_jitter=0.0, dur_jitter=0, rate_spread=0.5)
    a = generate_split(base, "train", 200)
    b = generate_split(fast_slow, "train", 200)
    # without a rate spread a phoneme always gets its base duration
    per_phoneme: dict[int, set] = {}
    for u in a:
        for x, d in zip(u.phonemes, u.durations):
            per_phoneme.setdefault(x, set()).add(d)
    assert all(len(v) == 1 for v in per_phoneme.values())
    # with one, it depends on the speaker, and a prompt shares its utterance's rate
    per_speaker: dict[tuple[int, int], set] = {}
    for u in b:
        for x, d in zip(u.phonemes + u.prompt_phonemes, u.durations + u.prompt_durations):
            per_speaker.setdefault((u.speaker, x), set()).add(d)
    assert all(len(v) == 1 for v in per_speaker.values())
    across: dict[int, set] = {}
    for (_, x), v in per_speaker.items():
        across.setdefault(x, set()).update(v)
    assert sum(len(v) > 1 for v in across.values()) > len(across) // 2
    with pytest.raises(ConfigError):
        CorpusConfig(rate_spread=1.0)
