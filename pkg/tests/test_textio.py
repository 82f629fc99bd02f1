import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rnntkit.errors import ParseError, SpecError, VocabError
from rnntkit.textio import (
    BLANK, CAP, ROLES, DecoratedTranscript, RichVocab, SynthSpec, Utterance, Word, from_symbols,
    gen_synthetic, grapheme_vocab, merged_vocab, parse_decorated, read_dataset, read_jsonl, read_vocab,
    render_decorated, sample_clause_punctuation, symbol_word_index, to_symbols, transcripts_from_jsonl,
    unit_alignment, write_dataset, write_vocab,
)


@st.composite
def transcripts(draw, alphabet="abcde", max_words=12):
    n = draw(st.integers(0, max_words))
    words = []
    for _ in range(n):
        words.append(Word(
            draw(st.text(alphabet, min_size=1, max_size=5)),
            draw(st.sampled_from(ROLES)),
            draw(st.booleans()),
            draw(st.sampled_from(["", ".", ",", "?"])),
        ))
    return DecoratedTranscript(tuple(words))


def test_parse_example():
    t = parse_decorated("<spk:dr> <cap> hello . <spk:pt> yes")
    assert t.words == (Word("hello", "DR", True, "."), Word("yes", "PT", False, ""))


@pytest.mark.parametrize("text", [
    "<cap> <spk:dr> hi", "hi", "<spk:dr> hi <cap>", "<spk:dr> <spk:pt> hi", "<spk:dr> hi <spk:dr> yo",
    "<spk:dr> . hi", "<spk:dr> hi . .", "<spk:dr> hi <foo>", "<spk:dr> hi <spk:pt>", "<spk:xx> hi",
    "<spk:dr> <cap> <cap> hi", "<spk:dr> hi|there",
])
def test_parse_rejects(text):
    with pytest.raises(ParseError):
        parse_decorated(text)


def test_parse_error_reports_position():
    with pytest.raises(ParseError) as e:
        parse_decorated("<spk:dr> hi <bogus>")
    assert e.value.position == 2


def test_render_examples():
    assert render_decorated(DecoratedTranscript()) == ""
    assert render_decorated(DecoratedTranscript((Word("a", "DR"), Word("b", "DR")))) == "<spk:dr> a b"
    assert render_decorated(DecoratedTranscript((Word("word", "CG", True, "."),))) == "<spk:cg> <cap> word ."


@settings(max_examples=300, deadline=None)
@given(transcripts())
def test_grammar_round_trips(t):
    text = render_decorated(t)
    assert parse_decorated(text) == t
    assert render_decorated(parse_decorated(text)) == text


@settings(max_examples=300, deadline=None)
@given(transcripts())
def test_symbol_round_trip(t):
    vocab = grapheme_vocab("abcde")
    assert from_symbols(to_symbols(t, vocab)) == t


@settings(max_examples=100, deadline=None)
@given(transcripts())
def test_symbol_round_trip_merged_units(t):
    vocab = merged_vocab("abcde", ["abab", "cde", "ab"], n_merges=3)
    assert from_symbols(to_symbols(t, vocab)) == t


def test_to_symbols_examples():
    t = DecoratedTranscript((Word("hi", "DR", False, "."),))
    assert to_symbols(t, grapheme_vocab("hi")) == ["<spk:dr>", "h", "i", "."]
    assert to_symbols(t, RichVocab(["h", "i", "hi"])) == ["<spk:dr>", "hi", "."]
    with pytest.raises(VocabError):
        to_symbols(DecoratedTranscript((Word("hz", "DR"),)), grapheme_vocab("hi"))


def test_word_separator_sits_before_speaker_and_cap():
    t = parse_decorated("<spk:dr> ab . <spk:pt> <cap> cd")
    assert to_symbols(t, grapheme_vocab("abcd")) == ["<spk:dr>", "a", "b", ".", "|", "<spk:pt>", "<cap>", "c", "d"]


def test_from_symbols_repairs_malformed_streams():
    t = from_symbols([".", "a", "<cap>", "<blank>", "b", ",", ",", "<cap>"])
    assert t.words == (Word("a", "OTHER"), Word("b", "OTHER", True, ","))
    assert from_symbols(["a"], initial_role="DR").words[0].speaker_role == "DR"


def test_symbol_word_index():
    syms = ["<spk:dr>", "<cap>", "h", "i", ".", "|", "y", "o"]
    assert symbol_word_index(syms) == [-1, -1, 0, 0, -1, -1, 1, 1]


def test_vocab_layout_and_files(tmp_path):
    v = grapheme_vocab("abc")
    assert v.tokens[0] == "|" and v.tokens[-1] == BLANK and v.blank == len(v) - 1
    assert v.tokens[1:4] == ("a", "b", "c")
    assert set(v.tokens) >= {"<spk:dr>", "<spk:pt>", "<spk:cg>", "<spk:other>", ".", ",", "?", CAP}
    p = tmp_path / "vocab.txt"
    write_vocab(v, p)
    assert p.read_text().splitlines()[-1] == BLANK
    assert read_vocab(p) == v
    with pytest.raises(VocabError):
        RichVocab(["a", "<cap>"])
    with pytest.raises(VocabError):
        RichVocab.from_tokens(["a", "b"])


def test_merged_vocab_takes_most_frequent_bigrams():
    v = merged_vocab("abc", ["abab", "abc", "bc"], n_merges=2)
    assert v.units == ("a", "b", "c", "ab", "bc")


def test_generator_is_deterministic_and_sliceable():
    spec = SynthSpec(seed=4, n_conversations=6)
    a, b = gen_synthetic(spec), gen_synthetic(spec)
    for x, y in zip(a, b):
        assert x.id == y.id and x.reference == y.reference and np.array_equal(x.frames, y.frames)
    tail = gen_synthetic(spec, 3, 3)
    assert [u.id for u in tail] == [u.id for u in a[3:]]
    assert all(np.array_equal(x.frames, y.frames) for x, y in zip(tail, a[3:]))


def test_generator_structure():
    spec = SynthSpec(seed=2, n_conversations=20)
    vocab = grapheme_vocab(spec.alphabet)
    for u in gen_synthetic(spec):
        assert u.frames.dtype == np.float32 and u.frames.shape[1] == spec.feature_dim
        assert u.reference.words[0].capitalized
        for prev, w in zip(u.reference.words, u.reference.words[1:]):
            if prev.trailing_punct in (".", "?"):
                assert w.capitalized
        al = unit_alignment(u, vocab)
        assert [tok for tok, _, _ in al] == to_symbols(u.reference, vocab)
        assert al[-1][2] == len(u.frames)
        for tok, s, e in al:
            n = e - s
            assert n == 0 if tok == CAP else lo_hi(spec, n)
        assert u.segments[0][0] == 0 and u.segments[-1][1] == len(u.frames)


def lo_hi(spec, n):
    return spec.frames_per_symbol_range[0] <= n <= spec.frames_per_symbol_range[1]


def test_noise_free_frames_repeat_per_symbol_and_role():
    spec = SynthSpec(seed=1, n_conversations=5, noise_sigma=0.0)
    seen = {}
    for u in gen_synthetic(spec):
        role, onset = None, False
        for tok, s, e in u.alignment:
            if tok.startswith("<spk:"):
                role = tok
            onset = tok == CAP or (onset and tok not in ("|", ".", ",", "?") and not tok.startswith("<spk:"))
            for t in range(s, e):
                key = ("<turn>" if tok.startswith("<spk:") else tok, role, onset)
                if key in seen:
                    np.testing.assert_array_equal(seen[key], u.frames[t])
                seen[key] = u.frames[t]


def test_punctuation_marks_share_a_pause_sound():
    ac_spec = SynthSpec(seed=1, n_conversations=30, noise_sigma=0.0)
    frames = {}
    for u in gen_synthetic(ac_spec):
        for tok, s, e in u.alignment:
            if e > s and tok not in frames:
                frames[tok] = u.frames[s]
    marks = [frames[m] for m in (".", ",", "?")]
    gap = max(np.linalg.norm(a - b) for a in marks for b in marks)
    letters = [frames[c] for c in ac_spec.alphabet if c in frames]
    assert gap < min(np.linalg.norm(marks[0] - x) for x in letters)


def test_punctuation_frequencies_within_three_sigma():
    spec = SynthSpec(seed=11)
    marks = sample_clause_punctuation(spec, 1000)
    assert len(marks) == 1000
    probs = dict(spec.punct_probs)
    probs[""] = 1 - sum(probs.values())
    for m, p in probs.items():
        k = sum(1 for x in marks if x == m)
        sigma = np.sqrt(1000 * p * (1 - p))
        assert abs(k - 1000 * p) <= 3 * sigma, (m, k)


@pytest.mark.parametrize("kw", [{"vocab_size": 1}, {"speakers": (0, 2)}, {"speakers": (2, 5)},
                                {"punct_probs": {".": 0.8, ",": 0.5}}, {"noise_sigma": -1.0}, {"onset_offset_scale": -0.1},
                                {"turn_len_geometric_p": 0.0}])
def test_spec_validation(kw):
    with pytest.raises(SpecError):
        SynthSpec(**kw)


def test_dataset_round_trip(tmp_path):
    utts = gen_synthetic(SynthSpec(seed=3, n_conversations=3))
    p = tmp_path / "d.jsonl"
    write_dataset(p, utts)
    back = read_dataset(p)
    for a, b in zip(utts, back):
        assert a.reference == b.reference and a.segments == b.segments and a.alignment == b.alignment
        np.testing.assert_array_equal(a.frames, b.frames)
    rec = json.loads(p.read_text().splitlines()[0])
    assert set(rec) == {"id", "frames", "reference", "segments", "alignment"}
    assert transcripts_from_jsonl(p)[utts[0].id] == utts[0].reference


def test_synth_ref_records_regenerate(tmp_path):
    spec = SynthSpec(seed=3, n_conversations=3)
    p = tmp_path / "r.jsonl"
    p.write_text(json.dumps({"id": "x", "synth_ref": {"spec": spec.to_dict(), "index": 1}}) + "\n")
    (u,) = read_dataset(p)
    np.testing.assert_array_equal(u.frames, gen_synthetic(spec)[1].frames)


def test_bad_files(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text("{not json\n")
    with pytest.raises(ParseError):
        list(read_jsonl(p))
    p.write_text('{"id": "a"}\n')
    with pytest.raises(ParseError):
        read_dataset(p)


def test_segments_must_partition():
    with pytest.raises(SpecError):
        Utterance("u", np.zeros((5, 2)), DecoratedTranscript(), [(0, 2), (3, 5)])
    with pytest.raises(SpecError):
        Utterance("u", np.zeros((5, 2)), DecoratedTranscript(), [(0, 4)])
