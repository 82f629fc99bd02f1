"""Word confidence from emission-time features.

Each scored unit (a non-blank symbol that spells part of a word) gets a
feature vector made of the encoder outputs at its emission frame and three
frames on either side.  A small windowed self-attention head reads the unit
sequence together with a learned embedding of each symbol and predicts
whether the unit belongs to a correctly recognized word.  Word scores are
the mean of their unit scores.
"""
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import DivergenceError, GroupingError, ParameterError
from .metrics import MATCH, align_words
from .model import WindowedBlock
from .textio import RICH_TOKENS, WORD_SEP, symbol_word_index

CONTEXT = 3


@dataclass
class ConfidenceExample:
    features: np.ndarray
    symbol: int
    word_index: int
    label: bool = None


def scored_positions(tokens):
    """Indices of hypothesis symbols that spell words (rich tokens excluded)."""
    return [i for i, w in enumerate(symbol_word_index(tokens)) if w >= 0]


def extract_features(model, encodings, hyp):
    """One unlabeled example per scored symbol; cost is linear in the symbol count."""
    tokens = [model.config.vocab[k] for k in hyp.symbols]
    word_idx = symbol_word_index(tokens)
    pos = [i for i, w in enumerate(word_idx) if w >= 0]
    if not pos:
        return []
    T, E = encodings.shape
    times = np.asarray([hyp.emit_times[i] for i in pos], dtype=np.int64)
    if times.min() < 0 or times.max() >= T:
        raise IndexError(f"emit time outside encoder range [0, {T})")
    idx = times[:, None] + np.arange(-CONTEXT, CONTEXT + 1)[None, :]
    valid = (idx >= 0) & (idx < T)
    rows = np.clip(idx, 0, T - 1)
    if torch.is_tensor(encodings):
        gathered = encodings.detach()[torch.from_numpy(rows)].double().numpy()
    else:
        gathered = np.asarray(encodings)[rows].astype(np.float64)
    stacked = gathered * valid[:, :, None]
    stacked = stacked.reshape(len(pos), (2 * CONTEXT + 1) * E)
    return [ConfidenceExample(stacked[j], int(hyp.symbols[i]), word_idx[i]) for j, i in enumerate(pos)]


def make_word_labels(hyp, ref, word_indices=None):
    """Correctness of each hypothesis word, optionally expanded to its units.

    A word is correct only if the alignment matches it exactly; every unit of
    an incorrect word is marked incorrect even if most of its letters agree.
    """
    a = align_words([w.text.lower() for w in ref.words], [w.text.lower() for w in hyp.words])
    correct = [False] * len(hyp.words)
    for kind, _, h in a.ops:
        if kind == MATCH:
            correct[h] = True
    if word_indices is None:
        return correct
    return [correct[w] for w in word_indices]


class ConfidenceHead(nn.Module):
    def __init__(self, feature_dim, n_symbols, embed_dim=16, model_dim=32, layers=2, window=20,
                 causal=False, seed=0):
        super().__init__()
        self.feature_dim = feature_dim
        self.embed_dim = embed_dim
        self.window = window
        self.causal = causal
        g = torch.Generator().manual_seed(seed)
        self.embed = nn.Embedding(n_symbols, embed_dim)
        self.inp = nn.Linear(feature_dim + embed_dim, model_dim)
        self.blocks = nn.ModuleList(WindowedBlock(model_dim, window) for _ in range(layers))
        self.out = nn.Linear(model_dim, 1)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if "norm" in name:
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                elif "rel_bias" in name:
                    p.zero_()
                else:
                    bound = 1.0 / np.sqrt(p.shape[-1] if p.dim() > 1 else p.shape[0])
                    p.copy_((torch.rand(p.shape, generator=g, dtype=torch.float64) * 2 - 1) * bound)
            # start near 0.5 everywhere
            self.out.weight.mul_(0.1)
            self.out.bias.zero_()
        self.double()

    @property
    def span(self):
        """(positions back, positions forward) each layer attends to."""
        if self.causal:
            return self.window - 1, 0
        return self.window // 2, self.window - 1 - self.window // 2

    def input_vectors(self, features, symbols):
        x = torch.as_tensor(np.asarray(features), dtype=torch.float64)
        s = torch.as_tensor(np.asarray(symbols), dtype=torch.long)
        return torch.cat([x, self.embed(s)], dim=-1)

    def forward(self, features, symbols):
        """Logits (pre-sigmoid) for one unit sequence."""
        z = self.inp(self.input_vectors(features, symbols))
        back, fwd = self.span
        for block in self.blocks:
            z = block(z, z[:0], back, fwd)
        return self.out(z)[:, 0]

    def scores(self, features, symbols):
        with torch.no_grad():
            return torch.sigmoid(self.forward(features, symbols)).numpy()


def _stack(examples):
    feats = np.stack([e.features for e in examples])
    syms = np.asarray([e.symbol for e in examples])
    return feats, syms


@dataclass
class HeadTrainState:
    optimizer: torch.optim.Optimizer
    lr: float
    clip_norm: float = 1.0
    step: int = 0


def make_head_optimizer(head, lr=1e-3):
    return HeadTrainState(torch.optim.Adam(head.parameters(), lr=lr), lr)


def confidence_loss(head, sequences):
    total, count = 0.0, 0
    for seq in sequences:
        if not seq:
            continue
        feats, syms = _stack(seq)
        y = torch.tensor([float(e.label) for e in seq], dtype=torch.float64)
        logits = head(feats, syms)
        total = total + nn.functional.binary_cross_entropy_with_logits(logits, y, reduction="sum")
        count += len(seq)
    return total / max(count, 1)


def train_confidence(head, sequences, opt):
    """One binary cross-entropy step over a batch of labeled unit sequences."""
    if any(e.label is None for seq in sequences for e in seq):
        raise ValueError("every example needs a label for training")
    opt.optimizer.zero_grad(set_to_none=True)
    loss = confidence_loss(head, sequences)
    value = float(loss.detach()) if torch.is_tensor(loss) else float(loss)
    if not np.isfinite(value):
        raise DivergenceError(f"confidence head diverged at step {opt.step}", {"step": opt.step, "loss": value})
    if torch.is_tensor(loss):
        loss.backward()
        nn.utils.clip_grad_norm_(head.parameters(), opt.clip_norm)
        opt.optimizer.step()
    opt.step += 1
    return head, value


def aggregate_word_scores(unit_scores, word_indices):
    """Arithmetic mean of unit scores per word; words must be contiguous runs."""
    unit_scores = np.asarray(unit_scores, dtype=np.float64)
    if len(unit_scores) != len(word_indices):
        raise GroupingError("one word index per unit score is required")
    out, seen, prev = [], set(), None
    start = 0
    for i, w in enumerate(list(word_indices) + [None]):
        if w != prev:
            if prev is not None:
                if prev in seen:
                    raise GroupingError(f"units of word {prev} are not contiguous")
                seen.add(prev)
                out.append(float(unit_scores[start:i].mean()))
            start, prev = i, w
    if seen and sorted(seen) != list(range(len(seen))):
        raise GroupingError("word indices must run 0..n-1 without gaps")
    return out


def score_words(head, examples, word_indices=None):
    if not examples:
        return []
    feats, syms = _stack(examples)
    units = head.scores(feats, syms)
    if word_indices is None:
        word_indices = [e.word_index for e in examples]
    return aggregate_word_scores(units, word_indices)


def posterior_baseline(hyp, word_indices):
    """Word confidence from the recognizer's own emission probabilities.

    ``word_indices`` gives, for every hypothesis symbol, the word it spells
    (-1 for speaker, punctuation, capitalization and separator tokens).
    """
    probs = [float(np.exp(lp)) for lp, w in zip(hyp.per_symbol_logprob, word_indices) if w >= 0]
    words = [w for w in word_indices if w >= 0]
    return aggregate_word_scores(probs, words)


def temperature_scale(logits, tau):
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    return logits / tau


def rescore_with_temperature(model, encodings, hyp, tau):
    """Per-symbol log-probabilities along ``hyp``'s path with logits divided by ``tau``."""
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    out = []
    with torch.no_grad():
        proj = model.enc_project(encodings)
        pred, hidden = model.dec_init()
        for k, t in zip(hyp.symbols, hyp.emit_times):
            logits = model.joint_out(torch.tanh(proj[t][None, :] + pred))
            out.append(float(torch.log_softmax(temperature_scale(logits, tau).double(), -1)[0, k]))
            pred, hidden = model.dec_step(torch.tensor([k]), hidden)
    return out


def hypothesis_word_indices(model, hyp):
    return symbol_word_index([model.config.vocab[k] for k in hyp.symbols])


def is_scored_token(tok):
    return tok not in RICH_TOKENS and tok != WORD_SEP
