import numpy as np
import pytest
import torch

from rnntkit.decoder import (
    BeamConfig, BeamSearch, beam_decode, decode_segments, decode_utterance, greedy_decode, path_log_prob,
    streaming_decode,
)
from rnntkit.errors import ConfigError, ModeError
from rnntkit.model import ModelConfig, encode, init_model
from rnntkit.textio import DecoratedTranscript

from oracles import sequence_logprobs


class RuleStub:
    """Scorer whose logits come from ``rule(t, n_emitted)``; the hidden state counts emissions."""

    def __init__(self, V, rule):
        self.V, self.blank, self.rule = V, V, rule

    def dec_init(self):
        return torch.zeros(1, 1, dtype=torch.float64), torch.zeros(1, 1, 1, dtype=torch.float64)

    def dec_step(self, symbols, hidden):
        h = hidden + 1
        return h[0].clone(), h

    def enc_project(self, encodings):
        return torch.arange(len(encodings), dtype=torch.float64)[:, None]

    def joint_logprobs(self, enc_t, pred):
        rows = [self.rule(int(enc_t[0]), int(n)) for n in pred[:, 0]]
        return torch.log_softmax(torch.tensor(np.array(rows), dtype=torch.float64), dim=-1)


def logits_for(V, hot, value=10.0):
    x = np.zeros(V + 1)
    x[hot] = value
    return x


def test_blank_preferring_stub_gives_empty_output():
    stub = RuleStub(3, lambda t, n: logits_for(3, 3))
    enc = np.zeros((5, 1))
    g = greedy_decode(stub, enc)
    assert g.symbols == () and g.emit_times == ()
    top = beam_decode(stub, enc, BeamConfig(4))[0]
    lp_blank = float(torch.log_softmax(torch.tensor(logits_for(3, 3)), 0)[3])
    assert top.symbols == () and top.score >= 5 * lp_blank
    assert top.path_score == pytest.approx(5 * lp_blank, abs=1e-12)


def test_forced_symbol_at_first_frame():
    stub = RuleStub(2, lambda t, n: logits_for(2, 0 if (t == 0 and n == 0) else 2))
    enc = np.zeros((3, 1))
    for h in (greedy_decode(stub, enc), beam_decode(stub, enc, BeamConfig(3))[0]):
        assert h.symbols == (0,) and h.emit_times == (0,)


def test_ties_go_to_lower_symbol_index():
    stub = RuleStub(2, lambda t, n: np.zeros(3))
    enc = np.zeros((2, 1))
    assert greedy_decode(stub, enc, 1).symbols == (0, 0)
    assert beam_decode(stub, enc, BeamConfig(1, 1))[0].symbols == (0, 0)


def test_max_symbols_per_frame_caps_label_loops():
    stub = RuleStub(2, lambda t, n: logits_for(2, 1))
    h = greedy_decode(stub, np.zeros((3, 1)), max_symbols_per_frame=2)
    assert h.symbols == (1,) * 6 and h.emit_times == (0, 0, 1, 1, 2, 2)
    assert beam_decode(stub, np.zeros((3, 1)), BeamConfig(2, 2))[0].symbols == (1,) * 6


def micro(seed, V=2, dim=4, kind="recurrent-uni", mode="streaming"):
    vocab = tuple("abcdefg"[:V]) + ("<blank>",)
    return init_model(ModelConfig(input_dim=2, vocab=vocab, enc_kind=kind, mode=mode, enc_dim=dim, pred_dim=dim,
                                  joint_dim=dim, seed=seed, dtype="float64"))


def scaled_encodings(seed, T, dim=4, scale=3.0):
    return torch.as_tensor(scale * np.random.default_rng(seed).normal(size=(T, dim)))


def test_greedy_equals_width_one_beam_on_random_micro_models():
    for seed in range(50):
        m = micro(seed, V=3)
        enc = scaled_encodings(seed, 6)
        g = greedy_decode(m, enc, 3)
        b = beam_decode(m, enc, BeamConfig(1, 3))
        assert len(b) == 1
        assert (g.symbols, g.emit_times) == (b[0].symbols, b[0].emit_times)
        assert g.score == pytest.approx(b[0].score, abs=1e-9)


@pytest.mark.parametrize("T,M", [(3, 1), (2, 2)])
def test_wide_beam_matches_exhaustive_oracle(T, M):
    for seed in range(6):
        m = micro(seed)
        enc = scaled_encodings(seed, T)
        oracle = sequence_logprobs(m, enc, 2, T, M)
        hyps = beam_decode(m, enc, BeamConfig(500, M))
        assert len(hyps) == len(oracle)
        best = max(oracle, key=oracle.get)
        assert hyps[0].symbols == best
        for h in hyps:
            assert h.score == pytest.approx(oracle[h.symbols], abs=1e-9)
        scores = [h.score for h in hyps]
        assert scores == sorted(scores, reverse=True)


def test_wider_beams_never_lower_the_top_score():
    for seed in range(15):
        m = micro(seed, V=3)
        enc = scaled_encodings(seed, 5)
        tops = [beam_decode(m, enc, BeamConfig(w, 2))[0].score for w in (1, 2, 4, 8, 16)]
        assert all(b >= a - 1e-12 for a, b in zip(tops, tops[1:])), tops


def test_hypothesis_bookkeeping_is_self_consistent():
    for seed in range(10):
        m = micro(seed, V=3)
        enc = scaled_encodings(seed, 6)
        for h in beam_decode(m, enc, BeamConfig(4, 2)) + [greedy_decode(m, enc, 2)]:
            assert len(h.emit_times) == len(h.symbols) == len(h.per_symbol_logprob)
            assert list(h.emit_times) == sorted(h.emit_times)
            assert all(0 <= t < 6 for t in h.emit_times)
            assert h.path_score == pytest.approx(sum(h.per_symbol_logprob) + h.blank_logprob, abs=1e-6)
            assert h.path_score == pytest.approx(path_log_prob(m, enc, h), abs=1e-6)
            assert h.score >= h.path_score - 1e-9


def test_search_consumes_every_frame():
    m = micro(0)
    search = BeamSearch(m, BeamConfig(3))
    search.advance(scaled_encodings(0, 7))
    assert search.t == 7


def test_decoding_is_deterministic():
    m = micro(3, V=3)
    enc = scaled_encodings(3, 6)
    assert beam_decode(m, enc, BeamConfig(4)) == beam_decode(m, enc, BeamConfig(4))


def test_beam_config_validation():
    with pytest.raises(ConfigError):
        BeamConfig(0)
    with pytest.raises(ConfigError):
        BeamConfig(2, 0)


def rich_model(kind="recurrent-uni", mode="streaming", seed=0):
    vocab = ("|", "a", "b", "<spk:dr>", "<spk:pt>", "<cap>", ".", "<blank>")
    return init_model(ModelConfig(input_dim=3, vocab=vocab, enc_kind=kind, mode=mode, enc_dim=8, pred_dim=8,
                                  joint_dim=8, subsample_factor=2, attention_window=3, seed=seed))


@pytest.mark.parametrize("kind", ["recurrent-uni", "windowed-attention"])
def test_carried_segments_match_the_unsplit_decode(kind):
    m = rich_model(kind)
    x = np.random.default_rng(1).normal(size=(17, 3)) * 2
    whole = decode_segments(m, [x])[0]
    for cuts in ([5], [1, 8, 9], [16]):
        segs = np.split(x, cuts)
        split = decode_segments(m, segs, carry_state=True)
        assert len(split) == 1
        assert split[0].symbols == whole.symbols and split[0].emit_times == whole.emit_times
        assert split[0].score == pytest.approx(whole.score, abs=1e-4)
        assert streaming_decode(m, segs) == streaming_decode(m, [x])


def test_uncarried_segments_restart_and_shift_times():
    m = rich_model()
    x = np.random.default_rng(2).normal(size=(12, 3)) * 2
    hyps = decode_segments(m, np.split(x, [6]), carry_state=False)
    assert len(hyps) == 2
    with torch.no_grad():
        second = beam_decode(m, encode(m, x[6:])[0], BeamConfig())[0]
    assert hyps[1].symbols == second.symbols
    assert hyps[1].emit_times == tuple(t + 3 for t in second.emit_times)


def test_streaming_decode_edge_cases():
    assert streaming_decode(rich_model(), []) == DecoratedTranscript()
    bi = rich_model("recurrent-bi", "non-streaming")
    with pytest.raises(ModeError):
        streaming_decode(bi, [np.zeros((4, 3))])
    h, enc = decode_utterance(bi, np.zeros((4, 3)), BeamConfig(1))
    assert enc.shape[0] == 2 and all(t < 2 for t in h.emit_times)
