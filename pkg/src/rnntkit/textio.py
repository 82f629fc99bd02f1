"""Decorated transcripts, rich token inventory, data files and synthetic data.

Serialized grammar (single spaces)::

    <spk:dr> <cap> hello . how are you ? <spk:pt> fine

A speaker token opens every turn, ``<cap>`` precedes an upper-case word and
punctuation follows its word as a separate token.
"""
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ParseError, SpecError, VocabError

ROLES = ("DR", "PT", "CG", "OTHER")
SPEAKER_TOKENS = {r: f"<spk:{r.lower()}>" for r in ROLES}
TOKEN_ROLES = {v: k for k, v in SPEAKER_TOKENS.items()}
PUNCT = (".", ",", "?")
CAP = "<cap>"
BLANK = "<blank>"
WORD_SEP = "|"
RICH_TOKENS = tuple(SPEAKER_TOKENS.values()) + PUNCT + (CAP,)


@dataclass(frozen=True)
class Word:
    text: str
    speaker_role: str
    capitalized: bool = False
    trailing_punct: str = ""

    def __post_init__(self):
        if self.speaker_role not in ROLES:
            raise ValueError(f"unknown speaker role {self.speaker_role!r}")
        if self.trailing_punct not in ("",) + PUNCT:
            raise ValueError(f"unknown punctuation {self.trailing_punct!r}")


@dataclass(frozen=True)
class DecoratedTranscript:
    words: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))

    def __len__(self):
        return len(self.words)

    def texts(self):
        return [w.text for w in self.words]

    def __str__(self):
        return render_decorated(self)


def _is_word_token(tok):
    return bool(tok) and not any(c in tok for c in "<>.,?|") and not tok.isspace()


def parse_decorated(text):
    """Parse the serialized grammar; strict, so that render(parse(x)) == x."""
    words = []
    role = None
    cap_pending = False
    turn_has_word = True
    for pos, tok in enumerate(text.split()):
        if tok in TOKEN_ROLES:
            if cap_pending:
                raise ParseError("dangling <cap> before speaker token", pos)
            if not turn_has_word:
                raise ParseError("speaker turn without words", pos)
            new_role = TOKEN_ROLES[tok]
            if new_role == role:
                raise ParseError("redundant speaker token (role unchanged)", pos)
            role = new_role
            turn_has_word = False
        elif tok == CAP:
            if cap_pending:
                raise ParseError("repeated <cap>", pos)
            cap_pending = True
        elif tok in PUNCT:
            if cap_pending:
                raise ParseError("dangling <cap> before punctuation", pos)
            if not words or turn_has_word is False or words[-1].trailing_punct:
                raise ParseError("punctuation without a preceding word", pos)
            last = words[-1]
            words[-1] = Word(last.text, last.speaker_role, last.capitalized, tok)
        elif _is_word_token(tok):
            if role is None:
                raise ParseError("word before any speaker token", pos)
            words.append(Word(tok, role, cap_pending, ""))
            cap_pending = False
            turn_has_word = True
        else:
            raise ParseError(f"unknown token {tok!r}", pos)
    if cap_pending:
        raise ParseError("dangling <cap> at end of text", len(text.split()))
    if not turn_has_word:
        raise ParseError("speaker turn without words", len(text.split()))
    return DecoratedTranscript(tuple(words))


def render_decorated(t):
    out = []
    role = None
    for w in t.words:
        if w.speaker_role != role:
            out.append(SPEAKER_TOKENS[w.speaker_role])
            role = w.speaker_role
        if w.capitalized:
            out.append(CAP)
        out.append(w.text)
        if w.trailing_punct:
            out.append(w.trailing_punct)
    return " ".join(out)


# -- vocabularies ------------------------------------------------------------


class RichVocab:
    """Base units, the word separator, rich tokens, and blank (always last)."""

    def __init__(self, units):
        units = [u for u in units if u not in (WORD_SEP, BLANK)]
        clash = set(units) & set(RICH_TOKENS)
        if clash:
            raise VocabError(f"base units collide with rich tokens: {sorted(clash)}")
        self.units = tuple(units)
        self._unit_set = frozenset(units)
        self.tokens = (WORD_SEP,) + self.units + RICH_TOKENS + (BLANK,)
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise VocabError("duplicate tokens in vocabulary")
        self.max_unit_len = max((len(u) for u in self.units), default=1)

    @classmethod
    def from_tokens(cls, tokens):
        tokens = list(tokens)
        if not tokens or tokens[-1] != BLANK:
            raise VocabError("vocabulary must end with the blank token")
        vocab = cls([t for t in tokens if t not in RICH_TOKENS])
        if list(vocab.tokens) != tokens:
            raise VocabError("token order does not match the canonical layout")
        return vocab

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, RichVocab) and self.tokens == other.tokens

    @property
    def blank(self):
        return len(self.tokens) - 1

    @property
    def V(self):
        return len(self.tokens) - 1

    def index(self, token):
        try:
            return self._index[token]
        except KeyError:
            raise VocabError(f"symbol {token!r} not in vocabulary") from None

    def encode(self, tokens):
        return [self.index(t) for t in tokens]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    def is_rich(self, token):
        return token in RICH_TOKENS

    def split_word(self, word):
        """Greedy longest-match segmentation of a word into base units."""
        units, i = [], 0
        while i < len(word):
            for n in range(min(self.max_unit_len, len(word) - i), 0, -1):
                piece = word[i:i + n]
                if piece in self._unit_set:
                    units.append(piece)
                    i += n
                    break
            else:
                raise VocabError(f"character {word[i]!r} in {word!r} is not representable")
        return units


def write_vocab(vocab, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(vocab.tokens) + "\n")


def read_vocab(path):
    with open(path, encoding="utf-8") as f:
        return RichVocab.from_tokens([line.rstrip("\n") for line in f if line.rstrip("\n")])


def grapheme_vocab(alphabet):
    return RichVocab(list(alphabet))


def merged_vocab(alphabet, words, n_merges=50):
    """Graphemes plus the ``n_merges`` most frequent within-word bigrams."""
    counts = Counter()
    for w in words:
        counts.update(w[i:i + 2] for i in range(len(w) - 1))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return RichVocab(list(alphabet) + [b for b, _ in ranked[:n_merges]])


# -- symbolization -------------------------------------------------------------


def to_symbols(t, vocab):
    out = []
    role = None
    for i, w in enumerate(t.words):
        if i:
            out.append(WORD_SEP)
        if w.speaker_role != role:
            out.append(SPEAKER_TOKENS[w.speaker_role])
            role = w.speaker_role
        if w.capitalized:
            out.append(CAP)
        out.extend(vocab.split_word(w.text))
        if w.trailing_punct:
            out.append(w.trailing_punct)
    return out


def from_symbols(symbols, default_role="OTHER", initial_role=None):
    """Rebuild a transcript from a (possibly errorful) decoded token stream.

    Exact inverse of :func:`to_symbols` on well-formed streams; malformed
    streams are repaired (orphan punctuation and ``<cap>`` are dropped).
    Words before any speaker token take ``initial_role`` if given, else
    ``default_role``.
    """
    words = []
    role = initial_role or default_role
    cap = False
    cur = []
    cur_role, cur_cap = role, False

    def flush():
        nonlocal cur
        if cur:
            words.append([("".join(cur)), cur_role, cur_cap, ""])
            cur = []

    for tok in symbols:
        if tok == BLANK:
            continue
        if tok == WORD_SEP:
            flush()
        elif tok in TOKEN_ROLES:
            flush()
            role = TOKEN_ROLES[tok]
        elif tok == CAP:
            flush()
            cap = True
        elif tok in PUNCT:
            flush()
            if words and not words[-1][3]:
                words[-1][3] = tok
        else:
            if not cur:
                cur_role, cur_cap = role, cap
                cap = False
            cur.append(tok)
    flush()
    return DecoratedTranscript(tuple(Word(*w) for w in words))


def symbol_word_index(symbols):
    """Map each token to the index of the word it spells (-1 for rich/sep tokens)."""
    idx, out, in_word = -1, [], False
    for tok in symbols:
        if tok in RICH_TOKENS or tok in (WORD_SEP, BLANK):
            in_word = False
            out.append(-1)
        else:
            if not in_word:
                idx += 1
                in_word = True
            out.append(idx)
    return out


# -- data files ----------------------------------------------------------------


@dataclass
class Utterance:
    id: str
    frames: np.ndarray
    reference: DecoratedTranscript
    segments: list = field(default_factory=list)
    alignment: list = field(default_factory=list)

    def __post_init__(self):
        T = len(self.frames)
        if self.segments:
            pos = 0
            for s, e in self.segments:
                if s != pos or e <= s:
                    raise SpecError(f"segments of {self.id} do not partition [0, {T})")
                pos = e
            if pos != T:
                raise SpecError(f"segments of {self.id} do not partition [0, {T})")

    def segment_frames(self):
        if not self.segments:
            return [self.frames]
        return [self.frames[s:e] for s, e in self.segments]


def utterance_to_json(u):
    rec = {
        "id": u.id,
        "frames": np.asarray(u.frames, dtype=np.float32).tolist(),
        "reference": render_decorated(u.reference),
        "segments": [list(map(int, s)) for s in u.segments],
    }
    if u.alignment:
        rec["alignment"] = [[tok, int(s), int(e)] for tok, s, e in u.alignment]
    return rec


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False, separators=(",", ":")) + "\n")


def read_jsonl(path):
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as e:
                    raise ParseError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None


def write_dataset(path, utterances):
    write_jsonl(path, (utterance_to_json(u) for u in utterances))


def read_dataset(path):
    out = []
    synth_cache = {}
    for rec in read_jsonl(path):
        if "header" in rec:
            continue
        if "frames" in rec:
            frames = np.asarray(rec["frames"], dtype=np.float32)
            ref = parse_decorated(rec["reference"])
            out.append(Utterance(rec["id"], frames, ref, [tuple(s) for s in rec.get("segments", [])],
                                 [tuple(a) for a in rec.get("alignment", [])]))
        elif "synth_ref" in rec:
            sref = rec["synth_ref"]
            key = json.dumps(sref["spec"], sort_keys=True)
            spec = SynthSpec(**sref["spec"])
            if key not in synth_cache:
                synth_cache[key] = _Acoustics(spec)
            out.append(_generate_one(spec, int(sref["index"]), synth_cache[key]))
        else:
            raise ParseError(f"record {rec.get('id')!r} has neither frames nor synth_ref")
    return out


def transcripts_from_jsonl(path):
    """Read ``{"id", "reference"|"hypothesis"|"transcript"}`` records."""
    out = {}
    for rec in read_jsonl(path):
        if "header" in rec:
            continue
        text = rec.get("hypothesis", rec.get("transcript", rec.get("reference")))
        if text is None:
            raise ParseError(f"record {rec.get('id')!r} carries no transcript")
        out[rec["id"]] = parse_decorated(text) if text else DecoratedTranscript()
    return out


# -- synthetic conversations -----------------------------------------------------


@dataclass
class SynthSpec:
    seed: int = 0
    n_conversations: int = 10
    vocab_size: int = 12
    speakers: tuple = (2, 4)
    feature_dim: int = 16
    noise_sigma: float = 0.5
    clause_len_range: tuple = (2, 4)
    punct_probs: dict = field(default_factory=lambda: {".": 0.45, ",": 0.25, "?": 0.2})
    turn_len_geometric_p: float = 0.6
    frames_per_symbol_range: tuple = (2, 4)
    lexicon_size: int = 40
    word_len_range: tuple = (2, 5)
    turns_range: tuple = (2, 4)
    role_offset_scale: float = 0.35
    segment_words_range: tuple = (3, 8)
    # punctuation marks share a pause sound and differ only by this offset
    punct_offset_scale: float = 0.3
    # added to every frame of a sentence-initial (capitalized) word
    onset_offset_scale: float = 0.6

    def __post_init__(self):
        if self.vocab_size < 2:
            raise SpecError("vocab_size must be at least 2")
        if self.vocab_size > 26:
            raise SpecError("vocab_size must be at most 26 (graphemes a-z)")
        if self.n_conversations < 0:
            raise SpecError("n_conversations must be non-negative")
        for name in ("speakers", "clause_len_range", "frames_per_symbol_range", "word_len_range",
                     "turns_range", "segment_words_range"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise SpecError(f"{name} must satisfy 1 <= lo <= hi")
            setattr(self, name, (int(lo), int(hi)))
        if self.speakers[1] > len(ROLES):
            raise SpecError(f"at most {len(ROLES)} speaker roles")
        if not 0 < self.turn_len_geometric_p <= 1:
            raise SpecError("turn_len_geometric_p must lie in (0, 1]")
        if any(p < 0 for p in self.punct_probs.values()) or sum(self.punct_probs.values()) > 1 + 1e-12:
            raise SpecError("punct_probs must be non-negative and sum to at most 1")
        if set(self.punct_probs) - set(PUNCT):
            raise SpecError(f"punct_probs keys must be among {PUNCT}")
        for name in ("noise_sigma", "role_offset_scale", "punct_offset_scale", "onset_offset_scale"):
            if getattr(self, name) < 0:
                raise SpecError(f"{name} must be non-negative")

    @property
    def alphabet(self):
        return "abcdefghijklmnopqrstuvwxyz"[: self.vocab_size]

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


_GLOBAL_STREAM = 2**32 - 1
TURN_TOKEN = "<turn>"


class _Acoustics:
    """Shared per-dataset draws: lexicon, symbol means and role offsets."""

    def __init__(self, spec):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _GLOBAL_STREAM]))
        lo, hi = spec.word_len_range
        letters = list(spec.alphabet)
        lexicon = set()
        attempts = 0
        while len(lexicon) < spec.lexicon_size and attempts < 100 * spec.lexicon_size:
            n = int(rng.integers(lo, hi + 1))
            lexicon.add("".join(rng.choice(letters, size=n)))
            attempts += 1
        self.lexicon = sorted(lexicon)
        self.word_probs = rng.dirichlet(np.ones(len(self.lexicon)))
        classes = letters + [WORD_SEP, ".", ",", "?", TURN_TOKEN]
        means = rng.normal(size=(len(classes), spec.feature_dim))
        self.means = {c: means[i] for i, c in enumerate(classes)}
        self.role_offsets = {
            r: spec.role_offset_scale * rng.normal(size=spec.feature_dim) for r in ROLES
        }
        pause = rng.normal(size=spec.feature_dim)
        for m in PUNCT:
            self.means[m] = pause + spec.punct_offset_scale * rng.normal(size=spec.feature_dim)
        self.onset = spec.onset_offset_scale * rng.normal(size=spec.feature_dim)


def _acoustic_class(token):
    return TURN_TOKEN if token in TOKEN_ROLES else token


def _sample_transcript(spec, rng, ac):
    n_speakers = int(rng.integers(spec.speakers[0], spec.speakers[1] + 1))
    roles = [ROLES[i] for i in rng.permutation(len(ROLES))[:n_speakers]]
    n_turns = int(rng.integers(spec.turns_range[0], spec.turns_range[1] + 1))
    marks = list(spec.punct_probs)
    probs = np.array([spec.punct_probs[m] for m in marks] + [1.0 - sum(spec.punct_probs.values())])
    probs = np.clip(probs, 0.0, None)
    probs /= probs.sum()
    words = []
    clause_ends = []
    prev = None
    cap_next = True
    for _ in range(n_turns):
        choices = [r for r in roles if r != prev] or roles
        role = choices[int(rng.integers(len(choices)))]
        prev = role
        n_clauses = int(rng.geometric(spec.turn_len_geometric_p))
        for _ in range(n_clauses):
            n_words = int(rng.integers(spec.clause_len_range[0], spec.clause_len_range[1] + 1))
            for j in range(n_words):
                text = ac.lexicon[int(rng.choice(len(ac.lexicon), p=ac.word_probs))]
                words.append([text, role, cap_next, ""])
                cap_next = False
            k = int(rng.choice(len(probs), p=probs))
            punct = marks[k] if k < len(marks) else ""
            words[-1][3] = punct
            clause_ends.append(punct)
            cap_next = punct in (".", "?")
    return DecoratedTranscript(tuple(Word(*w) for w in words)), clause_ends


def _generate_one(spec, index, ac):
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    ref, _ = _sample_transcript(spec, rng, ac)
    symbols = to_symbols(ref, grapheme_vocab(spec.alphabet))
    roles = []
    role = None
    for tok in symbols:
        if tok in TOKEN_ROLES:
            role = TOKEN_ROLES[tok]
        roles.append(role)
    lo, hi = spec.frames_per_symbol_range
    chunks, alignment = [], []
    t = 0
    onset = False
    for tok, role in zip(symbols, roles):
        if tok == CAP:
            alignment.append((tok, t, t))
            onset = True
            continue
        if tok in RICH_TOKENS or tok == WORD_SEP:
            onset = False
        n = int(rng.integers(lo, hi + 1))
        mean = ac.means[_acoustic_class(tok)] + ac.role_offsets[role] + (ac.onset if onset else 0.0)
        chunks.append(mean + spec.noise_sigma * rng.normal(size=(n, spec.feature_dim)))
        alignment.append((tok, t, t + n))
        t += n
    frames = np.concatenate(chunks).astype(np.float32)
    # segment boundaries fall at the start of word separators
    sep_starts = [s for tok, s, _ in alignment if tok == WORD_SEP]
    segments, start, w = [], 0, 0
    target = int(rng.integers(spec.segment_words_range[0], spec.segment_words_range[1] + 1))
    for s in sep_starts:
        w += 1
        if w >= target:
            segments.append((start, s))
            start, w = s, 0
            target = int(rng.integers(spec.segment_words_range[0], spec.segment_words_range[1] + 1))
    segments.append((start, len(frames)))
    return Utterance(f"synth-{spec.seed}-{index:05d}", frames, ref, segments, alignment)


def gen_synthetic(spec, start=0, count=None):
    """Deterministic synthetic conversations; each is independent of the others.

    ``start``/``count`` select a slice of the conversation index space, so
    held-out sets share the lexicon and acoustics of the training set.
    """
    ac = _Acoustics(spec)
    count = spec.n_conversations if count is None else count
    return [_generate_one(spec, i, ac) for i in range(start, start + count)]


def synthetic_lexicon(spec):
    return list(_Acoustics(spec).lexicon)


def sample_clause_punctuation(spec, n_clauses):
    """Draw clause-final punctuation exactly as the generator does (for checks)."""
    ac = _Acoustics(spec)
    out = []
    i = 0
    while len(out) < n_clauses:
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, i]))
        _, ends = _sample_transcript(spec, rng, ac)
        out.extend(ends)
        i += 1
    return out[:n_clauses]


def unit_alignment(utt, vocab):
    """Per-token (token, start, end) for ``vocab``'s segmentation of the reference.

    Merged units span the frames of their constituent graphemes.
    """
    tokens = to_symbols(utt.reference, vocab)
    out = []
    g = iter(utt.alignment)
    for tok in tokens:
        if tok in RICH_TOKENS or tok == WORD_SEP:
            gt, s, e = next(g)
            assert gt == tok
            out.append((tok, s, e))
        else:
            parts = [next(g) for _ in range(len(tok))]
            assert "".join(p[0] for p in parts) == tok
            out.append((tok, parts[0][1], parts[-1][2]))
    return out


def emit_frames(alignment, subsample_factor, n_enc_frames):
    """Encoder frame at which each aligned token becomes fully observable.

    Encoder frame ``j`` summarizes input frames up to ``j * subsample_factor``.
    Zero-length tokens (``<cap>``) share the frame of the token after them.
    """
    f = subsample_factor
    frames = []
    for tok, s, e in alignment:
        frames.append(None if e == s else min(math.ceil((e - 1) / f), n_enc_frames - 1))
    nxt = n_enc_frames - 1
    for i in range(len(frames) - 1, -1, -1):
        if frames[i] is None:
            frames[i] = nxt
        else:
            nxt = frames[i]
    for i in range(1, len(frames)):
        frames[i] = max(frames[i], frames[i - 1])
    return frames
