"""Recipe-driven training and evaluation runs.

A recipe is a JSON object with ``synth``, ``model``, ``train`` and ``eval``
sections.  Evaluation conditions:

* ``NS``    whole-utterance decoding (non-streaming or bidirectional model)
* ``S-ESS`` segment-by-segment streaming with encoder and search state carried
* ``S``     segment-by-segment streaming, every segment decoded from scratch
"""
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from .confidence import (ConfidenceHead, extract_features, make_head_optimizer, make_word_labels,
                         posterior_baseline, score_words, train_confidence, hypothesis_word_indices)
from .decoder import BeamConfig, decode_utterance, streaming_decode
from .errors import ConfigError
from .metrics import nce, score_report
from .model import ModelConfig, init_model, make_optimizer, output_length, train_step
from .tagger import (TagTaskSpec, evaluate_tagger, gen_tagging, new_tagger, train_tagger,
                     word_embeddings)
from .textio import (SynthSpec, emit_frames, from_symbols, gen_synthetic, grapheme_vocab, merged_vocab,
                     to_symbols, unit_alignment)
from .trellis import BLANK as BLANK_MOVE, AlignmentPath

log = logging.getLogger("rnntkit")

RECIPE_DIR = Path(__file__).resolve().parents[2] / "recipes"
CONDITIONS = ("NS", "S-ESS", "S")


def load_recipe(path_or_name):
    p = Path(path_or_name)
    if not p.exists() and not p.suffix:
        p = RECIPE_DIR / f"{path_or_name}.json"
    with open(p) as fh:
        return json.load(fh)


def synth_spec(recipe):
    d = dict(recipe.get("synth", {}))
    for k in ("speakers", "clause_len_range", "frames_per_symbol_range", "word_len_range",
              "turns_range", "segment_words_range"):
        if k in d:
            d[k] = tuple(d[k])
    return SynthSpec(**d)


def build_vocab(spec, units="grapheme", train_utts=None, n_merges=50):
    if units == "grapheme":
        return grapheme_vocab(spec.alphabet)
    if units == "merged":
        words = [w.text for u in (train_utts or []) for w in u.reference.words]
        return merged_vocab(spec.alphabet, words, n_merges)
    raise ConfigError(f"units must be 'grapheme' or 'merged', got {units!r}")


def model_config(recipe, vocab, spec, **overrides):
    d = dict(recipe.get("model", {}))
    d.update(overrides)
    return ModelConfig(input_dim=spec.feature_dim, vocab=vocab.tokens, **d)


def reference_path(utt, vocab, subsample_factor):
    """Alignment path placing each reference symbol at the frame where it ends."""
    if not utt.alignment:
        raise ConfigError(f"utterance {utt.id} carries no frame alignment")
    n_enc = output_length(len(utt.frames), subsample_factor)
    frames = emit_frames(unit_alignment(utt, vocab), subsample_factor, n_enc)
    moves, u = [], 0
    for t in range(n_enc):
        while u < len(frames) and frames[u] == t:
            moves.append(u)
            u += 1
        moves.append(BLANK_MOVE)
    return AlignmentPath(tuple(moves))


def training_items(utts, vocab, objective="marginal", subsample_factor=1):
    items = []
    for u in utts:
        target = vocab.encode(to_symbols(u.reference, vocab))
        if objective == "fixed-alignment":
            target = (target, reference_path(u, vocab, subsample_factor))
        items.append((u.frames, target))
    return items


def train_recognizer(recipe, train_utts, vocab, log_fn=None, objective="marginal", **overrides):
    """Train one recognizer on ``train_utts``; returns (model, history)."""
    spec = synth_spec(recipe)
    tr = recipe.get("train", {})
    model = init_model(model_config(recipe, vocab, spec, **overrides))
    opt = make_optimizer(model, tr.get("lr", 3e-3), tr.get("clip_norm", 1.0))
    items = training_items(train_utts, vocab, objective, model.config.subsample_factor)
    rng = np.random.default_rng(tr.get("shuffle_seed", 0))
    bs = tr.get("batch_size", 8)
    history = []
    for ep in range(tr.get("epochs", 20)):
        t0 = time.time()
        order = rng.permutation(len(items))
        losses = [train_step(model, [items[j] for j in order[i:i + bs]], objective, opt)[1]
                  for i in range(0, len(items), bs)]
        history.append(float(np.mean(losses)))
        if log_fn:
            log_fn(f"epoch {ep} loss {history[-1]:.3f} ({time.time() - t0:.1f}s)")
    return model, history


def decode_condition(model, utt, condition, cfg=None):
    cfg = cfg or BeamConfig(1, 4)
    if condition == "NS":
        hyp, _ = decode_utterance(model, utt.frames, cfg)
        return from_symbols([model.config.vocab[k] for k in hyp.symbols])
    if condition in ("S-ESS", "S"):
        return streaming_decode(model, utt.segment_frames(), condition == "S-ESS", cfg)
    raise ConfigError(f"condition must be one of {CONDITIONS}, got {condition!r}")


def evaluate_recognizer(model, utts, condition, cfg=None):
    pairs = [(u.reference, decode_condition(model, u, condition, cfg)) for u in utts]
    return score_report(pairs), pairs


def run_rich(recipe, log_fn=None, conditions=CONDITIONS):
    """Train a streaming and a non-streaming recognizer and score every condition."""
    spec = synth_spec(recipe)
    ev = recipe.get("eval", {})
    train_utts = gen_synthetic(spec)
    test_utts = gen_synthetic(spec, ev.get("start", spec.n_conversations), ev.get("count", 40))
    vocab = build_vocab(spec, recipe.get("units", "grapheme"), train_utts)
    cfg = BeamConfig(ev.get("beam_width", 1), ev.get("max_symbols_per_frame", 4))
    results, models = {}, {}
    t0 = time.time()
    if "S" in conditions or "S-ESS" in conditions:
        models["streaming"], _ = train_recognizer(recipe, train_utts, vocab, log_fn)
        for c in ("S-ESS", "S"):
            if c in conditions:
                results[c] = evaluate_recognizer(models["streaming"], test_utts, c, cfg)[0]
    if "NS" in conditions:
        ns = recipe.get("non_streaming", {"enc_kind": "recurrent-bi", "mode": "non-streaming"})
        models["non-streaming"], _ = train_recognizer(recipe, train_utts, vocab, log_fn, **ns)
        results["NS"] = evaluate_recognizer(models["non-streaming"], test_utts, "NS", cfg)[0]
    return {"results": results, "seconds": time.time() - t0}, models, test_utts


# confidence

def confidence_data(model, utts, cfg=None):
    """Per-utterance labeled unit sequences plus word labels and baseline scores."""
    cfg = cfg or BeamConfig(1, 4)
    out = []
    for u in utts:
        hyp, enc = decode_utterance(model, u.frames, cfg)
        hyp_t = from_symbols([model.config.vocab[k] for k in hyp.symbols])
        examples = extract_features(model, enc, hyp)
        word_idx = [e.word_index for e in examples]
        labels = make_word_labels(hyp_t, u.reference, word_idx)
        for e, lab in zip(examples, labels):
            e.label = lab
        out.append({
            "id": u.id, "hyp": hyp, "transcript": hyp_t, "examples": examples,
            "word_labels": make_word_labels(hyp_t, u.reference),
            "baseline": posterior_baseline(hyp, hypothesis_word_indices(model, hyp)),
        })
    return out


def train_confidence_head(model, data, epochs=30, lr=3e-3, seed=0, causal=False, batch_size=8, log_fn=None):
    feat_dim = 7 * model.config.enc_dim
    head = ConfidenceHead(feat_dim, model.V + 1, causal=causal, seed=seed)
    opt = make_head_optimizer(head, lr)
    seqs = [d["examples"] for d in data if d["examples"]]
    rng = np.random.default_rng(seed)
    for ep in range(epochs):
        order = rng.permutation(len(seqs))
        losses = [train_confidence(head, [seqs[j] for j in order[i:i + batch_size]], opt)[1]
                  for i in range(0, len(seqs), batch_size)]
        if log_fn:
            log_fn(f"confidence epoch {ep} loss {np.mean(losses):.4f}")
    return head


def confidence_eval(head, data):
    conf, base, labels = [], [], []
    for d in data:
        if not d["examples"]:
            continue
        conf += score_words(head, d["examples"])
        base += d["baseline"]
        labels += d["word_labels"]
    return {
        "nce_head": nce(conf, labels), "nce_baseline": nce(base, labels),
        "n_words": len(labels), "correct_rate": float(np.mean(labels)) if labels else float("nan"),
    }, conf, labels


def run_confidence(recipe, log_fn=None):
    """Train a recognizer, then a confidence head on its held-out decodes."""
    spec = synth_spec(recipe)
    c = recipe.get("confidence", {})
    train_utts = gen_synthetic(spec)
    vocab = build_vocab(spec, recipe.get("units", "grapheme"), train_utts)
    model, _ = train_recognizer(recipe, train_utts, vocab, log_fn)
    n = spec.n_conversations
    head_utts = gen_synthetic(spec, n, c.get("train_count", 1000))
    eval_utts = gen_synthetic(spec, n + c.get("train_count", 1000), c.get("eval_count", 100))
    with torch.no_grad():
        head_data = confidence_data(model, head_utts)
        eval_data = confidence_data(model, eval_utts)
    head = train_confidence_head(model, head_data, c.get("epochs", 12), c.get("lr", 3e-3),
                                 c.get("seed", 0), c.get("causal", False), log_fn=log_fn)
    report, _, _ = confidence_eval(head, eval_data)
    report["examples"] = sum(len(d["examples"]) for d in eval_data)
    return report, model, head, eval_data


# tagging

def tag_spec(recipe):
    d = dict(recipe.get("task", {}))
    if "cue_labels" in d:
        d["cue_labels"] = tuple(d["cue_labels"])
    return TagTaskSpec(**d)


def run_tagging(recipe, log_fn=None):
    """F1 of both objectives at every configured sequence length."""
    spec = tag_spec(recipe)
    table = word_embeddings(spec)
    tr = recipe.get("train", {})
    m = recipe.get("model", {})
    out = {}
    for L in recipe.get("seq_lens", [50, 200]):
        train = gen_tagging(spec, tr.get("total_words", 6000) // L, L)
        test = gen_tagging(spec, max(1, recipe.get("eval_words", 2000) // L), L, start=10**6)
        # a fixed word budget per batch gives every length the same number of updates
        bs = max(1, tr["batch_words"] // L) if "batch_words" in tr else tr.get("batch_size", 8)
        for obj in ("fixed-alignment", "marginal"):
            model = new_tagger(spec, **m)
            train_tagger(model, train, obj, table, epochs=tr.get("epochs", 10),
                         batch_size=bs, lr=tr.get("lr", 3e-3),
                         seed=tr.get("shuffle_seed", 0), log=log_fn)
            out[f"{obj}@{L}"] = evaluate_tagger(model, test, table)
            if log_fn:
                log_fn(f"seq_len {L} {obj} {out[f'{obj}@{L}']}")
    return out
