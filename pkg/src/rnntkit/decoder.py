"""Time-synchronous greedy and beam decoding, plus segment streaming.

The search talks to a scorer through four methods, implemented by
:class:`~rnntkit.model.Transducer` and by the test stubs::

    dec_init()                       -> (pred_proj (1, J), hidden)
    dec_step(symbols, hidden)        -> (pred_proj (N, J), hidden)
    enc_project(encodings)           -> (T, J)
    joint_logprobs(enc_t, pred_proj) -> (N, V + 1) log-probabilities

``hidden`` is a tensor whose second axis indexes hypotheses.
"""
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, ModeError
from .model import encode, initial_state
from .textio import DecoratedTranscript, from_symbols


@dataclass
class Hypothesis:
    symbols: tuple = ()
    score: float = 0.0
    emit_times: tuple = ()
    per_symbol_logprob: tuple = ()
    # log-probability of the single retained alignment; equals ``score``
    # unless recombination merged several alignments of the same labels
    path_score: float = 0.0
    blank_logprob: float = 0.0

    def __len__(self):
        return len(self.symbols)


@dataclass
class BeamConfig:
    beam_width: int = 4
    max_symbols_per_frame: int = 4

    def __post_init__(self):
        if self.beam_width < 1:
            raise ConfigError("beam_width must be >= 1")
        if self.max_symbols_per_frame < 1:
            raise ConfigError("max_symbols_per_frame must be >= 1")


@dataclass
class _Hyp:
    symbols: tuple
    score: float
    path_score: float
    emit_times: tuple
    logprobs: tuple
    blank_lp: float
    pred: torch.Tensor = field(repr=False)
    hidden: torch.Tensor = field(repr=False)

    def public(self):
        return Hypothesis(self.symbols, float(self.score), self.emit_times, self.logprobs,
                          float(self.path_score), float(self.blank_lp))


def _rank_key(score, symbols, done, blank):
    path = symbols + (blank,) if done else symbols
    return (-score, path, len(path))


def _merge(pool, key, cand):
    """Recombine: sum probabilities, keep the better single path's bookkeeping."""
    old = pool.get(key)
    if old is None:
        pool[key] = cand
        return
    total = float(np.logaddexp(old["score"], cand["score"]))
    keep = cand if cand["path_score"] > old["path_score"] else old
    keep = dict(keep)
    keep["score"] = total
    pool[key] = keep


class BeamSearch:
    """Incremental time-synchronous search; feed encoder frames with :meth:`advance`."""

    def __init__(self, scorer, cfg=None, frame_offset=0):
        self.scorer = scorer
        self.cfg = cfg or BeamConfig()
        self.blank = scorer.blank
        self.t = frame_offset
        pred, hidden = scorer.dec_init()
        self.beam = [_Hyp((), 0.0, 0.0, (), (), 0.0, pred[0], hidden)]

    def advance(self, encodings):
        with torch.no_grad():
            proj = self.scorer.enc_project(encodings)
            for i in range(proj.shape[0]):
                self._frame(proj[i])
                self.t += 1

    def _frame(self, enc_t):
        W, M, blank = self.cfg.beam_width, self.cfg.max_symbols_per_frame, self.blank
        active = self.beam
        done = {}
        for step in range(M + 1):
            if not active:
                break
            preds = torch.stack([h.pred for h in active])
            lp = self.scorer.joint_logprobs(enc_t, preds).double().numpy()
            cands = {}
            for i, h in enumerate(active):
                b = lp[i, blank]
                _merge(done, h.symbols, {
                    "score": h.score + b, "path_score": h.path_score + b, "hyp": h, "sym": None,
                })
                if step < M:
                    for k in range(blank):
                        key = h.symbols + (k,)
                        cands[key] = {
                            "score": h.score + lp[i, k], "path_score": h.path_score + lp[i, k],
                            "hyp": h, "sym": k, "lp": lp[i, k],
                        }
            pool = [(_rank_key(c["score"], key, True, blank), True, key) for key, c in done.items()]
            pool += [(_rank_key(c["score"], key, False, blank), False, key) for key, c in cands.items()]
            pool.sort()
            keep = pool[:W]
            done = {key: done[key] for _, is_done, key in keep if is_done}
            grow = [cands[key] for _, is_done, key in keep if not is_done]
            active = self._extend(grow)
        beam = []
        for key, c in done.items():
            h = c["hyp"]
            beam.append(_Hyp(key, c["score"], c["path_score"], h.emit_times, h.logprobs,
                             h.blank_lp + (c["path_score"] - h.path_score), h.pred, h.hidden))
        beam.sort(key=lambda h: _rank_key(h.score, h.symbols, True, blank))
        self.beam = beam

    def _extend(self, grow):
        if not grow:
            return []
        syms = torch.tensor([c["sym"] for c in grow], dtype=torch.long)
        hidden = torch.cat([c["hyp"].hidden for c in grow], dim=1)
        pred, hidden = self.scorer.dec_step(syms, hidden)
        out = []
        for i, c in enumerate(grow):
            h = c["hyp"]
            out.append(_Hyp(h.symbols + (c["sym"],), c["score"], c["path_score"],
                            h.emit_times + (self.t,), h.logprobs + (float(c["lp"]),), h.blank_lp,
                            pred[i], hidden[:, i:i + 1]))
        return out

    def results(self):
        return [h.public() for h in self.beam]


def beam_decode(scorer, encodings, cfg=None):
    """Hypotheses sorted by score (log-probability summed over merged alignments)."""
    search = BeamSearch(scorer, cfg)
    search.advance(encodings)
    return search.results()


def greedy_decode(scorer, encodings, max_symbols_per_frame=4):
    """Frame-synchronous argmax decoding (ties go to the lower symbol index)."""
    blank = scorer.blank
    syms, times, lps = [], [], []
    score = blank_lp = 0.0
    with torch.no_grad():
        proj = scorer.enc_project(encodings)
        pred, hidden = scorer.dec_init()
        for t in range(proj.shape[0]):
            emitted = 0
            while True:
                lp = scorer.joint_logprobs(proj[t], pred).double().numpy()[0]
                k = int(np.argmax(lp))
                if k == blank or emitted >= max_symbols_per_frame:
                    score += lp[blank]
                    blank_lp += lp[blank]
                    break
                score += lp[k]
                syms.append(k)
                times.append(t)
                lps.append(float(lp[k]))
                emitted += 1
                pred, hidden = scorer.dec_step(torch.tensor([k]), hidden)
    return Hypothesis(tuple(syms), float(score), tuple(times), tuple(lps), float(score), float(blank_lp))


def path_log_prob(scorer, encodings, hyp):
    """Recompute the log-probability of the alignment implied by ``hyp``."""
    blank = scorer.blank
    total = 0.0
    with torch.no_grad():
        proj = scorer.enc_project(encodings)
        pred, hidden = scorer.dec_init()
        j = 0
        for t in range(proj.shape[0]):
            while j < len(hyp.symbols) and hyp.emit_times[j] == t:
                k = hyp.symbols[j]
                total += float(scorer.joint_logprobs(proj[t], pred).double()[0, k])
                pred, hidden = scorer.dec_step(torch.tensor([k]), hidden)
                j += 1
            total += float(scorer.joint_logprobs(proj[t], pred).double()[0, blank])
    return total


def _check_streaming(model):
    c = model.config
    if c.enc_kind == "recurrent-bi" or c.mode != "streaming":
        raise ModeError("streaming decoding needs a streaming-mode encoder")


def decode_segments(model, segments, carry_state=True, cfg=None):
    """Decode consecutive segments; returns one hypothesis per independent decode.

    With ``carry_state`` the encoder state and the search (label history
    included) flow across segment boundaries, so the result is a single
    hypothesis identical to decoding the unsplit input.  Without it every
    segment starts from scratch and its emit times are shifted to global
    encoder frames.
    """
    _check_streaming(model)
    cfg = cfg or BeamConfig()
    if carry_state:
        search = BeamSearch(model, cfg)
        state = initial_state(model.config)
        with torch.no_grad():
            for seg in segments:
                enc, state = encode(model, seg, "streaming", state)
                search.advance(enc)
        return [search.results()[0]] if segments else []
    out = []
    offset = 0
    with torch.no_grad():
        for seg in segments:
            enc, _ = encode(model, seg, "streaming")
            search = BeamSearch(model, cfg, frame_offset=offset)
            search.advance(enc)
            out.append(search.results()[0])
            offset += enc.shape[0]
    return out


def hypotheses_to_transcript(model, hyps):
    """Render per-segment hypotheses; segments never share speaker context."""
    vocab = model.config.vocab
    words = []
    for h in hyps:
        words.extend(from_symbols([vocab[k] for k in h.symbols]).words)
    return DecoratedTranscript(tuple(words))


def streaming_decode(model, segments, carry_state=True, cfg=None):
    if not len(segments):
        return DecoratedTranscript()
    return hypotheses_to_transcript(model, decode_segments(model, segments, carry_state, cfg))


def decode_utterance(model, frames, cfg=None, mode=None):
    """Whole-utterance decode in the model's own mode (greedy when beam_width == 1)."""
    cfg = cfg or BeamConfig()
    with torch.no_grad():
        enc, _ = encode(model, frames, mode)
    if cfg.beam_width == 1:
        return greedy_decode(model, enc, cfg.max_symbols_per_frame), enc
    return beam_decode(model, enc, cfg)[0], enc
