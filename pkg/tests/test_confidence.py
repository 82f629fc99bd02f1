import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from rnntkit.confidence import (
    ConfidenceExample, ConfidenceHead, aggregate_word_scores, confidence_loss, extract_features,
    hypothesis_word_indices, make_head_optimizer, make_word_labels, posterior_baseline, rescore_with_temperature,
    score_words, temperature_scale, train_confidence,
)
from rnntkit.decoder import Hypothesis, greedy_decode
from rnntkit.errors import GroupingError, ParameterError
from rnntkit.model import ModelConfig, init_model
from rnntkit.textio import DecoratedTranscript, Word, grapheme_vocab, parse_decorated, symbol_word_index, to_symbols

VOCAB = grapheme_vocab("acpt")
E = 4


def model():
    return init_model(ModelConfig(input_dim=2, vocab=VOCAB.tokens, enc_dim=E, pred_dim=4, joint_dim=4))


def hyp_for(text, times):
    ids = [VOCAB.index(s) for s in to_symbols(parse_decorated(text), VOCAB)]
    return Hypothesis(tuple(ids), 0.0, tuple(times), tuple([-0.1] * len(ids)))


def test_feature_layout_and_padding():
    m = model()
    enc = torch.arange(1, 6 * E + 1, dtype=torch.float32).reshape(6, E)
    # "<spk:dr> <cap> cat . | <spk:pt> a": 4 of the 9 symbols spell words
    h = hyp_for("<spk:dr> <cap> cat . <spk:pt> a", [0, 0, 0, 1, 2, 2, 3, 3, 5])
    ex = extract_features(m, enc, h)
    assert [e.word_index for e in ex] == [0, 0, 0, 1]
    assert [VOCAB.tokens[e.symbol] for e in ex] == ["c", "a", "t", "a"]
    assert all(e.features.shape == (7 * E,) for e in ex)
    # emitted at frame 0: three left frames are zero padding, center is frame 0
    assert not ex[0].features[: 3 * E].any()
    np.testing.assert_array_equal(ex[0].features[3 * E: 4 * E], enc[0].numpy())
    np.testing.assert_array_equal(ex[3].features[4 * E:], np.zeros(3 * E))
    np.testing.assert_array_equal(ex[1].features.reshape(7, E)[2:6], enc[0:4].numpy())


def test_example_count_follows_symbols_not_frames():
    m = model()
    h = hyp_for("<spk:dr> ca ta", [1, 1, 1, 2, 2, 2])
    for T in (3, 40, 5000):
        assert len(extract_features(m, torch.zeros(T, E), h)) == 4
    assert extract_features(m, torch.zeros(3, E), Hypothesis()) == []
    with pytest.raises(IndexError):
        extract_features(m, torch.zeros(2, E), h)


def test_features_read_only_the_seven_frame_window():
    m = model()
    rng = np.random.default_rng(0)
    enc = rng.normal(size=(50, E))
    h = hyp_for("<spk:dr> ca", [0, 20, 21])
    base = [e.features for e in extract_features(m, enc, h)]
    far = enc.copy()
    far[:17] += 1.0
    far[25:] -= 1.0
    assert all(np.array_equal(a, e.features) for a, e in zip(base, extract_features(m, far, h)))


def T_(text):
    return parse_decorated(text)


def test_word_labels_examples():
    assert make_word_labels(T_("<spk:dr> <cap> cat ."), T_("<spk:pt> cat")) == [True]
    hyp = T_("<spk:dr> cap")
    idx = [w for w in symbol_word_index(to_symbols(hyp, VOCAB)) if w >= 0]
    assert make_word_labels(hyp, T_("<spk:dr> cat"), idx) == [False, False, False]
    hyp = T_("<spk:dr> cat a pat")
    idx = [w for w in symbol_word_index(to_symbols(hyp, VOCAB)) if w >= 0]
    assert make_word_labels(hyp, T_("<spk:dr> cat pat"), idx) == [True] * 3 + [False] + [True] * 3


@settings(max_examples=100, deadline=None)
@given(st.lists(st.text("acpt", min_size=1, max_size=4), max_size=6),
       st.lists(st.text("acpt", min_size=1, max_size=4), max_size=6))
def test_labels_never_split_a_word(ref_words, hyp_words):
    ref = DecoratedTranscript(tuple(Word(w, "DR") for w in ref_words))
    hyp = DecoratedTranscript(tuple(Word(w, "DR") for w in hyp_words))
    idx = [w for w in symbol_word_index(to_symbols(hyp, VOCAB)) if w >= 0]
    units = make_word_labels(hyp, ref, idx)
    words = make_word_labels(hyp, ref)
    assert units == [words[w] for w in idx]
    assert sum(words) <= len(ref_words)


def head(causal=False, layers=2, feature_dim=6, seed=0):
    return ConfidenceHead(feature_dim, n_symbols=5, embed_dim=3, model_dim=8, layers=layers, causal=causal,
                          seed=seed)


def test_head_input_length_and_range():
    h = ConfidenceHead(7 * E, n_symbols=len(VOCAB), embed_dim=5)
    feats = np.random.default_rng(0).normal(size=(9, 7 * E))
    assert h.input_vectors(feats, np.zeros(9, dtype=int)).shape == (9, 7 * E + 5)
    s = h.scores(feats, np.arange(9) % len(VOCAB))
    assert s.shape == (9,) and ((s > 0) & (s < 1)).all()


@pytest.mark.parametrize("causal,layers,lo,hi", [(False, 1, -9, 10), (False, 2, -18, 20),
                                                 (True, 1, 0, 19), (True, 2, 0, 38)])
def test_receptive_field_is_exactly_the_stacked_window(causal, layers, lo, hi):
    """Output i changes when input j moves iff lo <= i - j <= hi."""
    h = head(causal, layers)
    assert h.span == ((19, 0) if causal else (10, 9))
    rng = np.random.default_rng(1)
    n, j = 90, 45
    feats = rng.normal(size=(n, 6))
    syms = rng.integers(0, 5, size=n)
    with torch.no_grad():
        a = h(feats, syms).numpy()
        feats[j] += 3.0
        b = h(feats, syms).numpy()
    changed = {i - j for i in range(n) if a[i] != b[i]}
    assert changed == set(range(lo, hi + 1))


def test_initial_loss_near_ln2_on_balanced_labels():
    rng = np.random.default_rng(2)
    seqs = [[ConfidenceExample(rng.normal(size=6), int(rng.integers(0, 5)), i, bool(i % 2)) for i in range(40)]
            for _ in range(5)]
    for seed in range(3):
        assert float(confidence_loss(head(seed=seed), seqs).detach()) == pytest.approx(math.log(2), abs=0.1)


def separable(n_seq, rng):
    seqs = []
    for _ in range(n_seq):
        y = rng.random(12) < 0.5
        x = rng.normal(size=(12, 6))
        x[:, 0] = np.where(y, 1.0, -1.0) + 0.1 * rng.normal(size=12)
        seqs.append([ConfidenceExample(x[i], int(rng.integers(0, 5)), i, bool(y[i])) for i in range(12)])
    return seqs


def test_separable_toy_task_is_learned():
    rng = np.random.default_rng(3)
    seqs = separable(20, rng)
    h = head()
    opt = make_head_optimizer(h, lr=1e-2)
    for step in range(500):
        train_confidence(h, seqs[step % 20: step % 20 + 4], opt)
    correct = total = 0
    for seq in seqs:
        s = h.scores(np.stack([e.features for e in seq]), [e.symbol for e in seq])
        correct += sum((p > 0.5) == e.label for p, e in zip(s, seq))
        total += len(seq)
    assert correct / total >= 0.99


def test_zero_learning_rate_and_missing_labels():
    h = head()
    before = [p.detach().clone() for p in h.parameters()]
    seqs = separable(2, np.random.default_rng(4))
    train_confidence(h, seqs, make_head_optimizer(h, lr=0.0))
    assert all(torch.equal(a, b) for a, b in zip(before, h.parameters()))
    seqs[0][0].label = None
    with pytest.raises(ValueError):
        train_confidence(h, seqs, make_head_optimizer(h))


def test_word_aggregation():
    assert aggregate_word_scores([0.8, 0.6], [0, 0]) == pytest.approx([0.7])
    assert aggregate_word_scores([0.3, 0.8, 0.6], [0, 1, 1]) == pytest.approx([0.3, 0.7])
    for bad in ([0, 1, 0], [1, 1, 1], [0, 2, 2]):
        with pytest.raises(GroupingError):
            aggregate_word_scores([0.5] * 3, bad)
    with pytest.raises(GroupingError):
        aggregate_word_scores([0.5, 0.5], [0])
    assert aggregate_word_scores([], []) == []


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.floats(0.001, 0.999), min_size=1, max_size=5), min_size=1, max_size=6), st.randoms())
def test_word_scores_ignore_unit_order_within_words(groups, rnd):
    idx = [w for w, g in enumerate(groups) for _ in g]
    flat = [x for g in groups for x in g]
    shuffled = [x for g in groups for x in rnd.sample(g, len(g))]
    assert aggregate_word_scores(flat, idx) == pytest.approx(aggregate_word_scores(shuffled, idx), abs=1e-12)
    assert aggregate_word_scores(flat, idx) == pytest.approx([np.mean(g) for g in groups], abs=1e-12)


def test_score_words_uses_example_word_indices():
    rng = np.random.default_rng(5)
    ex = [ConfidenceExample(rng.normal(size=6), 1, w) for w in (0, 0, 1, 2, 2, 2)]
    h = head()
    units = h.scores(np.stack([e.features for e in ex]), [1] * 6)
    assert score_words(h, ex) == pytest.approx([units[:2].mean(), units[2], units[3:].mean()])
    assert score_words(h, []) == []


def test_posterior_baseline():
    h = Hypothesis((0, 1, 2), 0.0, (0, 0, 1), (0.0, 0.0, math.log(0.5)))
    assert posterior_baseline(h, [0, 0, -1]) == [1.0]
    assert posterior_baseline(h, [-1, 0, 0]) == pytest.approx([0.75])
    assert posterior_baseline(h, [0, -1, 1]) == pytest.approx([1.0, 0.5])


def test_infinite_temperature_flattens_the_baseline():
    m = model()
    enc = torch.as_tensor(np.random.default_rng(6).normal(size=(6, E)) * 3, dtype=torch.float32)
    hyp = greedy_decode(m, enc)
    hyp = Hypothesis((1, 2, 0, 3), 0.0, (0, 1, 1, 4), ()) if not hyp.symbols else hyp
    lps = rescore_with_temperature(m, enc, hyp, 1.0)
    assert lps == pytest.approx(list(hyp.per_symbol_logprob) or lps, abs=1e-5)
    flat = rescore_with_temperature(m, enc, hyp, 1e9)
    idx = hypothesis_word_indices(m, hyp)
    scored = Hypothesis(hyp.symbols, 0.0, hyp.emit_times, tuple(flat))
    if any(w >= 0 for w in idx):
        assert posterior_baseline(scored, idx) == pytest.approx([1 / len(VOCAB)] * (max(idx) + 1), abs=1e-6)
    with pytest.raises(ParameterError):
        rescore_with_temperature(m, enc, hyp, 0.0)


def test_temperature_scale():
    x = torch.tensor([[1.0, -2.0, 3.5]])
    assert torch.equal(temperature_scale(x, 1.0), x)
    assert torch.equal(temperature_scale(x, 2.0), x / 2)
    for tau in (0.01, 0.7, 5.0, 1e6):
        assert temperature_scale(x, tau).argmax() == x.argmax()
    for tau in (0.0, -1.0):
        with pytest.raises(ParameterError):
            temperature_scale(x, tau)
