import dataclasses
import json

import numpy as np
import pytest

from tonalasr import synth_corpus as sc
from tonalasr.model import ConfigError
from tonalasr.orthography import parse_tailo, tone_sequence


SPEC = sc.ToyLanguageSpec(lexicon_size=20, seed=3)


def test_language_is_deterministic():
    a, b = sc.build_language(SPEC), sc.build_language(SPEC)
    assert a.words == b.words and a.han_forms == b.han_forms
    np.testing.assert_array_equal(a.word_weights, b.word_weights)


def test_lexicon_covers_han_forms():
    lang = sc.build_language(SPEC)
    lex = lang.lexicon()
    for w, forms in enumerate(lang.han_forms):
        for form in forms:
            assert form in lex
            assert len(form) == len(lang.words[w])
    for syls in lang.words:
        for s in syls:
            parse_tailo(f"{s.initial}{s.final}{s.tone}")  # respects the checked-final rule


def test_tone_separability_is_high_but_not_trivial():
    acc = sc.tone_separability(SPEC, n=400)
    assert 0.7 < acc <= 1.0
    noisy = sc.tone_separability(sc.ToyLanguageSpec(noise_sigma=0.5), n=400)
    assert noisy < acc


def test_generate_corpus(tmp_path):
    manifests = sc.gen_corpus(SPEC, {"train": 5, "dev": 2, "test": 2}, tmp_path)
    recs = sc.read_manifest(manifests["train"])
    assert len(recs) == 5
    utts = sc.load_utterances(manifests["train"])
    lang = sc.build_language(SPEC)
    for rec, utt in zip(recs, utts):
        assert utt.features.shape == (rec["num_frames"], SPEC.feature_dim)
        assert len(tone_sequence(rec["tailo_text"])) == len(rec["han_text"])
    assert (tmp_path / "lexicon.tsv").exists() and (tmp_path / "mapping.tsv").exists()
    speakers = {s: {r["speaker"] for r in sc.read_manifest(manifests[s])} for s in ("train", "dev", "test")}
    assert not speakers["train"] & speakers["test"]


def test_generation_is_reproducible(tmp_path):
    a = sc.gen_corpus(SPEC, {"train": 3, "dev": 1, "test": 1}, tmp_path / "a")
    b = sc.gen_corpus(SPEC, {"train": 3, "dev": 1, "test": 1}, tmp_path / "b")
    assert a["train"].read_text() == b["train"].read_text()
    for rec in sc.read_manifest(a["train"]):
        assert (tmp_path / "a" / rec["feature_path"]).read_bytes() == (tmp_path / "b" / rec["feature_path"]).read_bytes()


def test_source_corpus_uses_four_tones(tmp_path):
    m = sc.gen_source_corpus(SPEC, 0.6, {"train": 6, "dev": 1, "test": 1}, tmp_path)
    assert m["train"].name == "source-train.jsonl"
    for rec in sc.read_manifest(m["train"]):
        assert set(tone_sequence(rec["tailo_text"])) <= set(sc.SOURCE_TONES)


def test_source_phoneme_overlap():
    target = sc.phoneme_table(SPEC)
    for overlap in (0.0, 0.5, 1.0):
        src = sc.source_phoneme_table(SPEC, overlap)
        shared = sum(np.array_equal(src[k], target[k]) for k in target)
        assert shared == round(overlap * len(target))
    with pytest.raises(ConfigError):
        sc.source_phoneme_table(SPEC, 1.5)


def test_feature_file_errors(tmp_path):
    p = tmp_path / "x.clff"
    sc.write_features(p, np.ones((3, 2)))
    np.testing.assert_array_equal(sc.read_features(p), np.ones((3, 2)))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(sc.FeatureFormatError):
        sc.read_features(p)
    p.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(sc.FeatureFormatError):
        sc.read_features(p)


def test_manifest_errors(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text('{"id": "a"}\n{"id": "a"}\n')
    with pytest.raises(ValueError, match="duplicate"):
        sc.read_manifest(p)
    p.write_text("{oops\n")
    with pytest.raises(ValueError, match="malformed"):
        sc.read_manifest(p)


def test_frame_count_mismatch(tmp_path):
    m = sc.gen_corpus(SPEC, {"train": 1, "dev": 1, "test": 1}, tmp_path)
    rec = sc.read_manifest(m["train"])[0]
    rec["num_frames"] += 1
    m["train"].write_text(json.dumps(rec) + "\n")
    with pytest.raises(sc.FeatureFormatError):
        sc.load_utterances(m["train"])


def test_spec_errors(tmp_path):
    with pytest.raises(ConfigError):
        sc.build_language(sc.ToyLanguageSpec(feature_dim=2))
    with pytest.raises(ConfigError):
        sc.build_language(sc.ToyLanguageSpec(num_base_syllables=10_000))
    with pytest.raises(ConfigError):
        sc.gen_corpus(SPEC, {"train": 0, "dev": 1, "test": 1}, tmp_path)


def test_bad_words_per_utterance_rejected():
    with pytest.raises(ConfigError):
        sc.build_language(dataclasses.replace(SPEC, words_per_utterance=(3, 2)))
