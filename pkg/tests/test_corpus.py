import math

import numpy as np
import pytest

from csnat.corpus import (CorpusError, FeatureFormatError, SynthSpec, build_vocabulary, gen_corpus, load_split,
                          read_features, read_manifest, spec_augment, synth_split, write_features)
from csnat.masking import detect_cs_pairs
from csnat.numerics import make_rng

SMALL = SynthSpec(n_train=12, n_valid=4, n_test=4, feat_dim=6, seed=3)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_generation_is_byte_identical(tmp_path):
    gen_corpus(SMALL, tmp_path / "a")
    gen_corpus(SMALL, tmp_path / "b")
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b
    assert "vocab.txt" in a and "train.tsv" in a and len([k for k in a if k.endswith(".natf")]) == 20


def test_manifest_and_features_round_trip(tmp_path):
    manifests = gen_corpus(SMALL, tmp_path)
    vocab = build_vocabulary(SMALL)
    entries = read_manifest(tmp_path / "valid.tsv", vocab)
    assert [e.tokens for e in entries] == [e.tokens for e in manifests["valid"]]
    utts = load_split(tmp_path, "valid")
    fresh = synth_split(SMALL, "valid")
    for u, f, e in zip(utts, fresh, entries):
        assert u.utt_id == f.utt_id and u.tokens == f.tokens
        assert np.array_equal(u.features, f.features) and e.frames == f.features.shape[0]


def test_transcripts_use_real_tokens_only():
    vocab = build_vocabulary(SMALL)
    for split in ("train", "valid", "test"):
        for u in synth_split(SMALL, split):
            assert all(1 <= t <= vocab.size for t in u.tokens)
            assert SMALL.len_min <= len(u.tokens) <= SMALL.len_max
            n = u.features.shape[0]
            assert SMALL.frames_min * len(u.tokens) <= n <= SMALL.frames_max * len(u.tokens)


def test_splits_differ():
    a = [u.tokens for u in synth_split(SMALL, "valid")]
    b = [u.tokens for u in synth_split(SMALL, "test")]
    assert a != b


def test_switch_probability_boundaries():
    vocab = build_vocabulary(SMALL)
    mono = SynthSpec(n_train=50, switch_prob=0.0, feat_dim=4)
    for u in synth_split(mono, "train"):
        assert detect_cs_pairs(u.tokens, vocab.langmap) == []
    always = SynthSpec(n_train=50, switch_prob=1.0, len_min=4, len_max=4, feat_dim=4)
    for u in synth_split(always, "train"):
        assert len(detect_cs_pairs(u.tokens, vocab.langmap)) == 3


def test_switch_rate_within_three_standard_errors():
    spec = SynthSpec(n_train=3000, feat_dim=2, frames_min=1, frames_max=1)
    vocab = build_vocabulary(spec)
    switches = chances = 0
    for u in synth_split(spec, "train"):
        switches += len(detect_cs_pairs(u.tokens, vocab.langmap))
        chances += len(u.tokens) - 1
    p = spec.switch_prob
    se = math.sqrt(p * (1 - p) / chances)
    assert abs(switches / chances - p) < 3 * se


def test_spec_validation():
    for bad in (dict(switch_prob=1.5), dict(noise_sigma=-1.0), dict(len_min=5, len_max=4),
                dict(frames_min=0), dict(en_vocab=0)):
        with pytest.raises(CorpusError):
            SynthSpec(**bad).validate()


def test_feature_io(tmp_path):
    x = np.random.default_rng(0).normal(size=(5, 3)).astype(np.float32)
    path = tmp_path / "x.natf"
    write_features(path, x)
    assert np.array_equal(read_features(path), x)
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FeatureFormatError):
        read_features(path)
    path.write_bytes(raw[:-2])
    with pytest.raises(FeatureFormatError):
        read_features(path)
    path.write_bytes(raw[:4] + (7).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FeatureFormatError):
        read_features(path)
    with pytest.raises(FeatureFormatError):
        write_features(path, np.zeros((0, 3)))
    with pytest.raises(FeatureFormatError):
        write_features(path, np.array([[np.nan]]))


def test_spec_augment():
    x = np.arange(1.0, 41.0).reshape(8, 5)
    assert np.array_equal(spec_augment(x, (0, 0), (0, 0), make_rng(0)), x)
    assert not np.any(spec_augment(x, (1, 8), (0, 0), make_rng(0), min_width=8))
    record = []
    out = spec_augment(x, (2, 3), (1, 2), make_rng(4), record=record)
    assert np.array_equal(out, spec_augment(x, (2, 3), (1, 2), make_rng(4)))
    expected = x.copy()
    for axis, s, w in record:
        if axis == 0:
            expected[s:s + w] = 0
        else:
            expected[:, s:s + w] = 0
    assert len(record) == 3 and np.array_equal(out, expected)
    assert x[0, 0] == 1.0  # input untouched
    with pytest.raises(CorpusError):
        spec_augment(x, (1, 9), (0, 0), make_rng(0))
