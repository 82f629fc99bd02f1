"""Command-line entry point: ``rnntkit <command> [options]``.

Every command prints (or writes to ``--out``) a JSON document whose
``config`` field echoes the fully resolved configuration.  Exit codes:
0 success, 2 usage error, 3 data error, 4 numeric error.
"""
import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import errors
from .confidence import ConfidenceHead, score_words
from .decoder import BeamConfig, decode_segments, decode_utterance, hypotheses_to_transcript
from .experiments import (
    build_vocab, confidence_data, synth_spec, tag_spec, train_confidence_head, train_recognizer,
)
from .metrics import calibration_report, score_report
from .model import load_model, save_model
from .tagger import evaluate_tagger, gen_tagging, new_tagger, read_annotations, train_tagger, word_embeddings
from .textio import (
    DecoratedTranscript, from_symbols, gen_synthetic, parse_decorated, read_dataset, read_jsonl, render_decorated,
    utterance_to_json, write_jsonl,
)
from .trellis import LogitLattice, enumerate_oracle, marginal_loss_and_grad

log = logging.getLogger("rnntkit")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

DATA_ERRORS = (errors.InputError, errors.PathError, errors.LoadError, errors.ParseError, errors.SpecError,
               errors.AnnotationError, errors.VocabError, errors.GroupingError, errors.StateError,
               FileNotFoundError, IsADirectoryError, json.JSONDecodeError)
NUMERIC_ERRORS = (errors.DivergenceError, errors.UndefinedMetricError, errors.RefusalError,
                  FloatingPointError)
USAGE_ERRORS = (errors.ConfigError, errors.ModeError, errors.ParameterError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p, out_help="write the JSON result here instead of stdout"):
    p.add_argument("--config", help="JSON config (recipe) file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help=out_help)
    p.add_argument("--jobs", type=int, default=1, help="worker processes for per-utterance work")


def build_parser():
    ap = _Parser(prog="rnntkit", description="Rich transcription with transducers on synthetic data.")
    sub = ap.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-synth", help="generate synthetic conversations (JSONL)")
    _common(p, "dataset JSONL path (required)")
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--count", type=int)

    p = sub.add_parser("train", help="train a recognizer")
    _common(p, "model file path (required)")
    p.add_argument("--data", help="training dataset JSONL (default: generate from the config)")
    p.add_argument("--mode", choices=["streaming", "non-streaming"])
    p.add_argument("--objective", choices=["marginal", "fixed"], default="marginal")
    p.add_argument("--units", choices=["grapheme", "merged"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--report", help="also write the JSON summary here")

    p = sub.add_parser("decode", help="decode a dataset")
    _common(p, "hypothesis JSONL path (required)")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["streaming", "non-streaming"])
    p.add_argument("--carry-state", choices=["on", "off"], default="on")
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--max-symbols", type=int, default=4)

    p = sub.add_parser("score", help="WER, WDER and slot error rates")
    _common(p)
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)

    p = sub.add_parser("confidence-train", help="train a confidence head")
    _common(p, "head file path (required)")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--causal", action="store_true", help="left-only attention window")

    p = sub.add_parser("confidence-score", help="word confidences for a dataset")
    _common(p, "confidence JSONL path (required)")
    p.add_argument("--model", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("tag-train", help="train a span tagger")
    _common(p, "tagger model path (required)")
    p.add_argument("--data", help="annotation JSONL (default: synthetic task from the config)")
    p.add_argument("--objective", choices=["marginal", "fixed"], default="fixed")
    p.add_argument("--seq-len", type=int, default=50)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("tag-eval", help="span F1 of a tagger")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="annotation JSONL (default: synthetic held-out docs)")
    p.add_argument("--seq-len", type=int, default=50)

    p = sub.add_parser("selfcheck", help="trellis oracle and gradient checks")
    _common(p)
    p.add_argument("--trials", type=int, default=50)
    return ap


# helpers

def _load_config(args):
    cfg = {}
    if args.config:
        with open(args.config) as fh:
            cfg = json.load(fh)
        if not isinstance(cfg, dict):
            raise errors.ParseError(f"{args.config}: config must be a JSON object")
    return cfg


def _require_out(args):
    if not args.out:
        raise UsageError(f"{args.command} needs --out")
    return args.out


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _emit(args, payload, path=None):
    payload = dict(payload)
    payload["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    text = json.dumps(payload, sort_keys=True, indent=2, default=_jsonable)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


def _jsonl_with_header(path, header, records):
    """JSONL whose first line is a ``{"header": ...}`` provenance record."""
    write_jsonl(path, [{"header": header}] + list(records))


def _records(path):
    return [r for r in read_jsonl(path) if "header" not in r]


# commands

def cmd_gen_synth(args):
    cfg = _load_config(args)
    recipe = cfg if "synth" in cfg else {"synth": cfg}
    synth = dict(recipe["synth"])
    if args.seed is not None:
        synth["seed"] = args.seed
    spec = synth_spec({"synth": synth})
    out = _require_out(args)
    utts = gen_synthetic(spec, args.start, args.count)
    resolved = {"synth": spec.to_dict(), "start": args.start, "count": len(utts)}
    _jsonl_with_header(out, {"command": "gen-synth", "config": resolved},
                       (utterance_to_json(u) for u in utts))
    return {"command": "gen-synth", "config": resolved, "path": out, "utterances": len(utts)}


def _resolve_train(args, cfg):
    recipe = json.loads(json.dumps(cfg))
    recipe.setdefault("synth", {})
    recipe.setdefault("model", {})
    recipe.setdefault("train", {})
    if args.seed is not None:
        recipe["synth"]["seed"] = args.seed
        recipe["model"]["seed"] = args.seed
    if args.mode:
        recipe["model"]["mode"] = args.mode
        if args.mode == "streaming" and recipe["model"].get("enc_kind") == "recurrent-bi":
            recipe["model"]["enc_kind"] = "recurrent-uni"
    if args.units:
        recipe["units"] = args.units
    if args.epochs is not None:
        recipe["train"]["epochs"] = args.epochs
    recipe["objective"] = "fixed-alignment" if args.objective == "fixed" else "marginal"
    recipe.setdefault("units", "grapheme")
    return recipe


def cmd_train(args):
    recipe = _resolve_train(args, _load_config(args))
    out = _require_out(args)
    spec = synth_spec(recipe)
    utts = read_dataset(args.data) if args.data else gen_synthetic(spec)
    if not utts:
        raise errors.InputError("training data is empty")
    vocab = build_vocab(spec, recipe["units"], utts)
    model, history = train_recognizer(recipe, utts, vocab, log.info, objective=recipe["objective"])
    save_model(model, out)
    recipe["model_resolved"] = model.config.to_dict(with_vocab=False)
    result = {"command": "train", "config": recipe, "model_path": out, "loss_history": history,
              "parameters": model.param_count()}
    if args.report:
        _emit(args, result, args.report)
    return result


_WORKER = {}


def _init_worker(model_path):
    torch.set_num_threads(1)
    _WORKER["model"] = load_model(model_path)[0]


def _decode_one(task):
    utt, mode, carry, cfg = task
    return _decode_record(_WORKER["model"], utt, mode, carry, cfg)


def _decode_record(model, utt, mode, carry, cfg):
    if mode == "streaming" and model.config.mode == "streaming":
        hyps = decode_segments(model, utt.segment_frames(), carry, cfg)
        transcript = hypotheses_to_transcript(model, hyps)
        symbols = [s for h in hyps for s in h.symbols]
        times = [t for h in hyps for t in h.emit_times]
        score = float(sum(h.score for h in hyps))
    else:
        hyp, _ = decode_utterance(model, utt.frames, cfg, mode)
        transcript = from_symbols([model.config.vocab[k] for k in hyp.symbols])
        symbols, times, score = list(hyp.symbols), list(hyp.emit_times), hyp.score
    return {
        "id": utt.id, "hypothesis": render_decorated(transcript),
        "symbols": [model.config.vocab[k] for k in symbols], "emit_times": [int(t) for t in times],
        "score": round(float(score), 6),
    }


def cmd_decode(args):
    out = _require_out(args)
    model, mcfg = load_model(args.model)
    mode = args.mode or mcfg.mode
    if mode == "streaming" and mcfg.mode != "streaming":
        raise errors.ModeError("a non-streaming model cannot decode in streaming mode")
    cfg = BeamConfig(args.beam, args.max_symbols)
    carry = args.carry_state == "on"
    utts = read_dataset(args.data)
    if args.jobs > 1 and len(utts) > 1:
        with ProcessPoolExecutor(args.jobs, initializer=_init_worker, initargs=(args.model,)) as ex:
            records = list(ex.map(_decode_one, [(u, mode, carry, cfg) for u in utts]))
    else:
        records = [_decode_record(model, u, mode, carry, cfg) for u in utts]
    resolved = {"model": args.model, "data": args.data, "mode": mode, "carry_state": args.carry_state,
                "beam": args.beam, "max_symbols": args.max_symbols}
    _jsonl_with_header(out, {"command": "decode", "config": resolved}, records)
    return {"command": "decode", "config": resolved, "path": out, "utterances": len(records)}


def _transcripts(path):
    out = {}
    for rec in _records(path):
        if "id" not in rec:
            raise errors.ParseError(f"{path}: record without id")
        text = rec.get("hypothesis", rec.get("transcript", rec.get("reference")))
        if text is None:
            raise errors.ParseError(f"{path}: record {rec['id']!r} carries no transcript")
        out[rec["id"]] = parse_decorated(text) if text else DecoratedTranscript()
    return out


def cmd_score(args):
    ref = _transcripts(args.ref)
    hyp = _transcripts(args.hyp)
    missing = sorted(set(ref) - set(hyp))
    if missing:
        raise errors.InputError(f"hypotheses missing for {len(missing)} utterances, e.g. {missing[0]!r}")
    pairs = [(ref[k], hyp[k]) for k in sorted(ref)]
    metrics = score_report(pairs)
    resolved = {"ref": args.ref, "hyp": args.hyp}
    return {"command": "score", "config": resolved, "utterances": len(pairs), "metrics": metrics}


def _save_head(head, path, meta):
    torch.save({"meta": meta, "state": head.state_dict()}, path)


def _load_head(path):
    try:
        blob = torch.load(path, weights_only=True)
        meta = blob["meta"]
        head = ConfidenceHead(meta["feature_dim"], meta["n_symbols"], causal=meta["causal"], seed=meta["seed"])
        head.load_state_dict(blob["state"])
    except (OSError, RuntimeError, KeyError, TypeError) as e:
        raise errors.LoadError(f"cannot load confidence head from {path}: {e}") from e
    return head, meta


def cmd_confidence_train(args):
    cfg = _load_config(args)
    out = _require_out(args)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    model, _ = load_model(args.model)
    with torch.no_grad():
        data = confidence_data(model, read_dataset(args.data))
    head = train_confidence_head(model, data, cfg.get("epochs", args.epochs), cfg.get("lr", 3e-3), seed,
                                 cfg.get("causal", args.causal), log_fn=log.info)
    meta = {"feature_dim": head.feature_dim, "n_symbols": model.V + 1, "causal": head.causal, "seed": seed}
    _save_head(head, out, meta)
    resolved = {"model": args.model, "data": args.data, "seed": seed, "epochs": cfg.get("epochs", args.epochs),
                "lr": cfg.get("lr", 3e-3), "causal": head.causal}
    return {"command": "confidence-train", "config": resolved, "head_path": out,
            "examples": sum(len(d["examples"]) for d in data)}


def cmd_confidence_score(args):
    out = _require_out(args)
    model, _ = load_model(args.model)
    head, meta = _load_head(args.head)
    with torch.no_grad():
        data = confidence_data(model, read_dataset(args.data))
    records, conf, labels = [], [], []
    for d in data:
        scores = score_words(head, d["examples"])
        records.append({"id": d["id"], "words": [
            {"text": w.text, "confidence": round(float(c), 6)} for w, c in zip(d["transcript"].words, scores)]})
        conf += scores
        labels += d["word_labels"][:len(scores)]
    resolved = {"model": args.model, "head": args.head, "data": args.data, "head_meta": meta}
    _jsonl_with_header(out, {"command": "confidence-score", "config": resolved}, records)
    result = {"command": "confidence-score", "config": resolved, "path": out, "words": len(conf)}
    if conf and 0 < sum(labels) < len(labels):
        rep = calibration_report(conf, labels)
        result["calibration"] = {k: float(v) for k, v in rep.__dict__.items()}
    return result


def _tag_inputs(args, cfg, held_out):
    spec = tag_spec(cfg)
    if args.seed is not None:
        spec = type(spec)(**{**spec.to_dict(), "cue_labels": tuple(spec.cue_labels), "seed": args.seed})
    table = word_embeddings(spec)
    if args.data:
        docs = read_annotations(args.data)
        unknown = {w for _, words, _ in docs for w in words} - set(table)
        if unknown:
            raise errors.InputError(f"words outside the tagging lexicon: {sorted(unknown)[:5]}")
    else:
        total = cfg.get("eval_words", 2000) if held_out else cfg.get("train", {}).get("total_words", 6000)
        docs = gen_tagging(spec, max(1, total // args.seq_len), args.seq_len, start=10**6 if held_out else 0)
    return spec, table, docs


def cmd_tag_train(args):
    cfg = _load_config(args)
    out = _require_out(args)
    spec, table, docs = _tag_inputs(args, cfg, held_out=False)
    tr = cfg.get("train", {})
    epochs = args.epochs if args.epochs is not None else tr.get("epochs", 10)
    model = new_tagger(spec, **cfg.get("model", {}))
    objective = "fixed-alignment" if args.objective == "fixed" else "marginal"
    _, _, losses = train_tagger(model, docs, objective, table, epochs=epochs, batch_size=tr.get("batch_size", 8),
                                lr=tr.get("lr", 3e-3), seed=tr.get("shuffle_seed", 0), log=log.info)
    save_model(model, out)
    resolved = {"task": spec.to_dict(), "model": cfg.get("model", {}), "objective": objective,
                "seq_len": args.seq_len, "epochs": epochs, "data": args.data}
    return {"command": "tag-train", "config": resolved, "model_path": out, "loss_history": losses}


def cmd_tag_eval(args):
    cfg = _load_config(args)
    model, _ = load_model(args.model)
    spec, table, docs = _tag_inputs(args, cfg, held_out=True)
    resolved = {"task": spec.to_dict(), "model": args.model, "seq_len": args.seq_len, "data": args.data}
    return {"command": "tag-eval", "config": resolved, "metrics": evaluate_tagger(model, docs, table)}


def selfcheck(trials=50, seed=0):
    """Trellis loss against path enumeration and gradients against finite differences."""
    rng = np.random.default_rng(seed)
    worst_loss = worst_grad = 0.0
    for _ in range(trials):
        T, U, V = int(rng.integers(1, 5)), int(rng.integers(0, 4)), int(rng.integers(1, 4))
        lat = LogitLattice(rng.normal(size=(T, U + 1, V + 1)), rng.integers(0, V, size=U))
        res = marginal_loss_and_grad(lat)
        worst_loss = max(worst_loss, abs(res.loss - enumerate_oracle(lat)))
        h = 1e-5
        flat = lat.logits.reshape(-1)
        for i in rng.choice(flat.size, size=min(5, flat.size), replace=False):
            plus, minus = flat.copy(), flat.copy()
            plus[i] += h
            minus[i] -= h
            fd = (marginal_loss_and_grad(LogitLattice(plus.reshape(lat.logits.shape), lat.targets)).loss
                  - marginal_loss_and_grad(LogitLattice(minus.reshape(lat.logits.shape), lat.targets)).loss) / (2 * h)
            g = res.grad.reshape(-1)[i]
            worst_grad = max(worst_grad, abs(g - fd) / max(1.0, abs(fd)))
    checks = {
        "loss_vs_enumeration": {"max_abs_err": float(worst_loss), "pass": bool(worst_loss <= 1e-6)},
        "grad_vs_finite_diff": {"max_rel_err": float(worst_grad), "pass": bool(worst_grad <= 1e-6)},
    }
    return checks


def cmd_selfcheck(args):
    seed = args.seed if args.seed is not None else 0
    checks = selfcheck(args.trials, seed)
    for name, c in checks.items():
        print(f"{'PASS' if c['pass'] else 'FAIL'} {name}", file=sys.stderr)
    result = {"command": "selfcheck", "config": {"trials": args.trials, "seed": seed}, "checks": checks,
              "pass": all(c["pass"] for c in checks.values())}
    if not result["pass"]:
        raise _Failed(result)
    return result


class _Failed(Exception):
    def __init__(self, result):
        super().__init__("selfcheck failed")
        self.result = result


COMMANDS = {
    "gen-synth": cmd_gen_synth, "train": cmd_train, "decode": cmd_decode, "score": cmd_score,
    "confidence-train": cmd_confidence_train, "confidence-score": cmd_confidence_score,
    "tag-train": cmd_tag_train, "tag-eval": cmd_tag_eval, "selfcheck": cmd_selfcheck,
}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        result = COMMANDS[args.command](args)
    except UsageError as e:
        print(f"rnntkit: error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except _Failed as e:
        _emit(args, e.result, args.out if args.command == "selfcheck" else None)
        return EXIT_NUMERIC
    except NUMERIC_ERRORS as e:
        print(f"rnntkit: numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except USAGE_ERRORS as e:
        print(f"rnntkit: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as e:
        print(f"rnntkit: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    # commands that write an artifact to --out report on stdout
    writes_artifact = args.command in ("gen-synth", "train", "decode", "confidence-train",
                                       "confidence-score", "tag-train")
    _emit(args, result, None if writes_artifact else args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
