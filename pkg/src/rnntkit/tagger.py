"""Span tagging as transduction over word sequences.

Each word is one encoder step.  A span of label ``L`` becomes a begin token
``B:L`` emitted at its first word and an end token ``END:L`` emitted at its
last word, so emission times carry the span location.
"""
from dataclasses import dataclass

import numpy as np

from .decoder import BeamConfig, decode_utterance
from .errors import AnnotationError, SpecError
from .metrics import pooled_tag_f1
from .model import ModelConfig, init_model, make_optimizer, train_step
from .textio import BLANK, read_jsonl, write_jsonl
from .trellis import BLANK as BLANK_MOVE, AlignmentPath, validate_path

BEGIN, END = "B:", "END:"


@dataclass(frozen=True, order=True)
class TagSpan:
    label: str
    start: int
    end: int

    def __post_init__(self):
        if not self.label:
            raise AnnotationError("span label must be non-empty")
        if not 0 <= self.start <= self.end:
            raise AnnotationError(f"bad span bounds [{self.start}, {self.end}]")

    def to_dict(self):
        return {"label": self.label, "start": self.start, "end": self.end}


class TagVocab:
    def __init__(self, labels):
        self.labels = tuple(sorted(set(labels)))
        if not self.labels:
            raise AnnotationError("a tag vocabulary needs at least one label")
        for lab in self.labels:
            if lab.startswith((BEGIN, END)) or lab == BLANK:
                raise AnnotationError(f"label {lab!r} clashes with tag token syntax")
        self.tokens = tuple(t for lab in self.labels for t in (BEGIN + lab, END + lab)) + (BLANK,)
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    @property
    def blank(self):
        return len(self.tokens) - 1

    def index(self, token):
        return self._index[token]

    @staticmethod
    def parse(token):
        """('begin' | 'end', label) for a tag token, or None."""
        if token.startswith(BEGIN):
            return "begin", token[len(BEGIN):]
        if token.startswith(END):
            return "end", token[len(END):]
        return None


def check_spans(n_words, spans):
    by_label = {}
    for s in spans:
        if s.end >= n_words:
            raise AnnotationError(f"span {s} runs past the last word ({n_words} words)")
        by_label.setdefault(s.label, []).append(s)
    for label, group in by_label.items():
        group = sorted(group, key=lambda s: (s.start, s.end))
        for a, b in zip(group, group[1:]):
            if b.start <= a.end:
                raise AnnotationError(f"overlapping {label} spans {a} and {b}")


def step_emissions(n_words, spans):
    """Tag tokens per word step in emission order.

    At one step, ends of spans opened earlier come first, then begins, then
    ends of single-word spans (so each begin precedes its own end); ties are
    broken by label.
    """
    check_spans(n_words, spans)
    steps = [[] for _ in range(n_words)]
    for s in spans:
        steps[s.start].append((1, s.label, BEGIN + s.label))
        steps[s.end].append((2 if s.start == s.end else 0, s.label, END + s.label))
    return [[tok for _, _, tok in sorted(st)] for st in steps]


def annotation_to_path(n_words, spans, vocab):
    """Target symbol ids and the alignment path that places them at their words."""
    steps = step_emissions(n_words, spans)
    target, moves = [], []
    for toks in steps:
        for tok in toks:
            if tok not in vocab._index:
                raise AnnotationError(f"label of {tok!r} is not in the tag vocabulary")
            moves.append(len(target))
            target.append(vocab.index(tok))
        moves.append(BLANK_MOVE)
    path = AlignmentPath(tuple(moves))
    validate_path(path, n_words, len(target))
    return np.asarray(target, dtype=np.int64), path


class DecodedSpans(list):
    """Spans recovered from a hypothesis; ``dropped`` counts unpaired tag tokens."""

    dropped = 0


def decode_spans(hyp, vocab):
    out = DecodedSpans()
    open_at = {}
    for k, t in zip(hyp.symbols, hyp.emit_times):
        parsed = TagVocab.parse(vocab.tokens[k]) if k != vocab.blank else None
        if parsed is None:
            continue
        kind, label = parsed
        if kind == "begin":
            if label in open_at:
                out.dropped += 1
            open_at[label] = int(t)
        elif label in open_at:
            out.append(TagSpan(label, open_at.pop(label), int(t)))
        else:
            out.dropped += 1
    out.dropped += len(open_at)
    out.sort(key=lambda s: (s.start, s.end, s.label))
    return out


# annotation files

def annotation_to_json(doc_id, words, spans):
    return {"id": doc_id, "words": list(words), "spans": [s.to_dict() for s in spans]}


def annotation_from_json(rec):
    try:
        words = list(rec["words"])
        spans = [TagSpan(s["label"], int(s["start"]), int(s["end"])) for s in rec["spans"]]
    except (KeyError, TypeError) as e:
        raise AnnotationError(f"malformed annotation record: {e}") from e
    check_spans(len(words), spans)
    return rec.get("id"), words, spans


def write_annotations(path, docs):
    write_jsonl(path, [annotation_to_json(*d) for d in docs])


def read_annotations(path):
    return [annotation_from_json(r) for r in read_jsonl(path)]


# synthetic tagging task

@dataclass(frozen=True)
class TagTaskSpec:
    """Marker words open spans whose label is set by the most recent cue word.

    Marker ``m<k>`` starts a span covering itself and the next ``k - 1`` words,
    so the label depends on context that may lie far to the left.
    """

    seed: int = 0
    n_fillers: int = 30
    cue_labels: tuple = ("CONDITION:ACUTE", "MEDS", "SYM:PAIN")
    max_span: int = 3
    marker_prob: float = 0.12
    cue_prob: float = 0.06
    embed_dim: int = 16

    def __post_init__(self):
        if self.n_fillers < 1 or self.max_span < 1 or self.embed_dim < 1:
            raise SpecError("n_fillers, max_span and embed_dim must be positive")
        if not self.cue_labels:
            raise SpecError("at least one cue label is required")
        if not (0 <= self.marker_prob <= 1 and 0 <= self.cue_prob <= 1
                and self.marker_prob + self.cue_prob <= 1):
            raise SpecError("marker_prob and cue_prob must be probabilities summing to at most 1")

    @property
    def fillers(self):
        return [f"w{i:02d}" for i in range(self.n_fillers)]

    @property
    def cues(self):
        return [f"cue{i}" for i in range(len(self.cue_labels))]

    @property
    def markers(self):
        return [f"m{k}" for k in range(1, self.max_span + 1)]

    @property
    def lexicon(self):
        return self.fillers + self.cues + self.markers

    def tag_vocab(self):
        return TagVocab(self.cue_labels)

    def to_dict(self):
        return {
            "seed": self.seed, "n_fillers": self.n_fillers, "cue_labels": list(self.cue_labels),
            "max_span": self.max_span, "marker_prob": self.marker_prob, "cue_prob": self.cue_prob,
            "embed_dim": self.embed_dim,
        }


def word_embeddings(spec):
    """Fixed text front-end: one deterministic random vector per lexicon word."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2**32 - 2]))
    table = rng.normal(size=(len(spec.lexicon), spec.embed_dim)).astype(np.float32)
    return {w: table[i] for i, w in enumerate(spec.lexicon)}


def embed_words(words, table):
    return np.stack([table[w] for w in words])


def _sample_doc(spec, rng, n_words):
    fillers, cues, markers = spec.fillers, spec.cues, spec.markers
    c = int(rng.integers(len(cues)))
    words, spans = [cues[c]], []
    while len(words) < n_words:
        r = rng.random()
        room = n_words - len(words)
        if r < spec.cue_prob:
            c = int(rng.integers(len(cues)))
            words.append(cues[c])
        elif r < spec.cue_prob + spec.marker_prob:
            k = int(rng.integers(1, min(spec.max_span, room) + 1))
            spans.append(TagSpan(spec.cue_labels[c], len(words), len(words) + k - 1))
            words.append(markers[k - 1])
            words.extend(fillers[i] for i in rng.integers(len(fillers), size=k - 1))
        else:
            words.append(fillers[int(rng.integers(len(fillers)))])
    return words, spans


def gen_tagging(spec, n_docs, seq_len, start=0):
    """Documents of exactly ``seq_len`` words with their gold spans."""
    if seq_len < 1:
        raise SpecError("seq_len must be positive")
    docs = []
    for i in range(start, start + n_docs):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, seq_len, i]))
        words, spans = _sample_doc(spec, rng, seq_len)
        docs.append((f"tag-{spec.seed}-{seq_len}-{i:05d}", words, spans))
    return docs


def tagging_config(spec, enc_dim=32, pred_dim=16, joint_dim=32, seed=0, enc_layers=1):
    return ModelConfig(
        input_dim=spec.embed_dim, vocab=spec.tag_vocab().tokens, enc_kind="recurrent-bi",
        enc_layers=enc_layers, enc_dim=enc_dim, subsample_factor=1, pred_dim=pred_dim,
        joint_dim=joint_dim, seed=seed, mode="non-streaming",
    )


def tagging_items(docs, table, vocab, objective):
    items = []
    for _, words, spans in docs:
        target, path = annotation_to_path(len(words), spans, vocab)
        frames = embed_words(words, table)
        items.append((frames, (target, path) if objective == "fixed-alignment" else target))
    return items


def train_tagger(model, docs, objective, table, opt=None, epochs=1, batch_size=8, seed=0, lr=3e-3,
                 log=None):
    """Train on annotated documents with either objective; returns (model, opt, losses)."""
    if objective == "fixed":
        objective = "fixed-alignment"
    vocab = TagVocab([t[len(BEGIN):] for t in model.config.vocab if t.startswith(BEGIN)])
    items = tagging_items(docs, table, vocab, objective)
    opt = opt or make_optimizer(model, lr)
    rng = np.random.default_rng(seed)
    losses = []
    for ep in range(epochs):
        order = rng.permutation(len(items))
        ep_losses = []
        for i in range(0, len(items), batch_size):
            _, loss = train_step(model, [items[j] for j in order[i:i + batch_size]], objective, opt)
            ep_losses.append(loss)
        losses.append(float(np.mean(ep_losses)))
        if log:
            log(f"epoch {ep} {objective} loss {losses[-1]:.4f}")
    return model, opt, losses


def tag_document(model, words, table, vocab):
    hyp, _ = decode_utterance(model, embed_words(words, table), BeamConfig(1, 4))
    return decode_spans(hyp, vocab)


def evaluate_tagger(model, docs, table):
    """Pooled exact-match F1 plus the number of dropped unpaired tags."""
    vocab = TagVocab([t[len(BEGIN):] for t in model.config.vocab if t.startswith(BEGIN)])
    pairs, dropped = [], 0
    for _, words, spans in docs:
        hyp = tag_document(model, words, table, vocab)
        dropped += hyp.dropped
        pairs.append((spans, list(hyp)))
    return {"f1": pooled_tag_f1(pairs), "dropped": dropped, "docs": len(docs)}


def new_tagger(spec, **kw):
    return init_model(tagging_config(spec, **kw))
