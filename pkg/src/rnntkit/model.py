"""A small trainable transducer: encoder, prediction network and joint network.

The encoder comes in three kinds (unidirectional GRU, bidirectional GRU and
windowed self-attention) and can run in streaming mode, where an
:class:`EncoderState` carries everything needed to continue exactly where a
previous call stopped.  Frames are subsampled by stacking: encoder output
``j`` sits at input frame ``j * subsample_factor`` and summarizes the
``subsample_factor`` input frames ending there.
"""
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DivergenceError, LoadError, ModeError, StateError, VocabError
from .trellis import AlignmentPath, LogitLattice, fixed_alignment_loss_and_grad, marginal_loss_and_grad

ENC_KINDS = ("recurrent-uni", "recurrent-bi", "windowed-attention")
MODES = ("streaming", "non-streaming")
FORMAT_VERSION = 1
MAGIC = b"RNNTKIT\x00"


@dataclass
class ModelConfig:
    input_dim: int
    vocab: tuple
    enc_kind: str = "recurrent-uni"
    enc_layers: int = 1
    enc_dim: int = 32
    attention_window: int = 8
    subsample_factor: int = 1
    pred_dim: int = 32
    joint_dim: int = 32
    seed: int = 0
    mode: str = "streaming"
    dtype: str = "float32"

    def __post_init__(self):
        self.vocab = tuple(self.vocab)
        self.validate()

    def validate(self):
        if self.enc_kind not in ENC_KINDS:
            raise ConfigError(f"enc_kind must be one of {ENC_KINDS}, got {self.enc_kind!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.enc_kind == "recurrent-bi" and self.mode == "streaming":
            raise ConfigError("a bidirectional encoder cannot run in streaming mode")
        for name in ("input_dim", "enc_layers", "enc_dim", "attention_window", "subsample_factor",
                     "pred_dim", "joint_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if len(self.vocab) < 2 or self.vocab[-1] != "<blank>":
            raise ConfigError("vocab must hold at least one symbol and end with <blank>")
        if len(set(self.vocab)) != len(self.vocab):
            raise ConfigError("vocab contains duplicates")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def V(self):
        return len(self.vocab) - 1

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self, with_vocab=True):
        d = asdict(self)
        d["vocab"] = list(self.vocab)
        if not with_vocab:
            del d["vocab"]
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EncoderState:
    """Streaming carry: stacked-frame history, frame counter, per-layer memory."""

    prev_frames: np.ndarray
    frames_seen: int
    hidden: np.ndarray = None
    context: np.ndarray = None
    n_context: int = 0

    def to_dict(self):
        d = {"frames_seen": int(self.frames_seen), "n_context": int(self.n_context)}
        for name in ("prev_frames", "hidden", "context"):
            v = getattr(self, name)
            d[name] = None if v is None else {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
        return d

    @classmethod
    def from_dict(cls, d):
        def arr(v):
            return None if v is None else np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])

        return cls(arr(d["prev_frames"]), d["frames_seen"], arr(d["hidden"]), arr(d["context"]),
                   d["n_context"])


def initial_state(config):
    f = config.subsample_factor
    prev = np.zeros((f - 1, config.input_dim))
    if config.enc_kind == "windowed-attention":
        ctx = np.zeros((config.enc_layers, config.attention_window - 1, config.enc_dim))
        return EncoderState(prev, 0, context=ctx)
    if config.enc_kind == "recurrent-uni":
        return EncoderState(prev, 0, hidden=np.zeros((config.enc_layers, config.enc_dim)))
    raise ModeError("bidirectional encoders have no streaming state")


class WindowedBlock(nn.Module):
    """Pre-norm self-attention over a fixed window, with a relative-position bias."""

    def __init__(self, dim, window):
        super().__init__()
        self.window = window
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.rel_bias = nn.Parameter(torch.zeros(2 * window - 1))
        self.norm2 = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, 2 * dim)
        self.ff2 = nn.Linear(2 * dim, dim)

    def forward(self, x, ctx, back, fwd):
        c, n, d = ctx.shape[0], x.shape[0], x.shape[1]
        full = torch.cat([ctx, x]) if c else x
        h = self.norm1(full)
        q, k, v = self.qkv(h).split(d, dim=-1)
        q = q[c:]
        key_pos = torch.arange(c + n) - c
        offset = key_pos[None, :] - torch.arange(n)[:, None]
        allowed = (offset >= -back) & (offset <= fwd)
        w = self.window
        scores = q @ k.T / math.sqrt(d) + self.rel_bias[offset.clamp(-(w - 1), w - 1) + (w - 1)]
        scores = scores.masked_fill(~allowed, float("-inf"))
        x = x + self.out(torch.softmax(scores, dim=-1) @ v)
        return x + self.ff2(torch.relu(self.ff1(self.norm2(x))))


class Transducer(nn.Module):
    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        c = config
        self.frontend = nn.Linear(c.subsample_factor * c.input_dim, c.enc_dim)
        if c.enc_kind == "windowed-attention":
            self.blocks = nn.ModuleList(WindowedBlock(c.enc_dim, c.attention_window) for _ in range(c.enc_layers))
        else:
            bi = c.enc_kind == "recurrent-bi"
            self.rnn = nn.GRU(c.enc_dim, c.enc_dim, c.enc_layers, batch_first=True, bidirectional=bi)
            if bi:
                self.bi_proj = nn.Linear(2 * c.enc_dim, c.enc_dim)
        self.embed = nn.Embedding(c.V + 1, c.pred_dim)
        self.pred_rnn = nn.GRU(c.pred_dim, c.pred_dim, batch_first=True)
        self.joint_enc = nn.Linear(c.enc_dim, c.joint_dim)
        self.joint_pred = nn.Linear(c.pred_dim, c.joint_dim, bias=False)
        self.joint_out = nn.Linear(c.joint_dim, c.V + 1)
        self.to(c.torch_dtype)
        self._initialize(c.seed)

    @torch.no_grad()
    def _initialize(self, seed):
        g = torch.Generator().manual_seed(int(seed))
        for name, p in self.named_parameters():
            if "norm" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif "rel_bias" in name:
                p.zero_()
            else:
                fan_in = p.shape[-1] if p.dim() > 1 else p.shape[0]
                bound = 1.0 / math.sqrt(fan_in)
                p.copy_(torch.rand(p.shape, generator=g, dtype=torch.float64) * 2 * bound - bound)

    @property
    def V(self):
        return self.config.V

    @property
    def blank(self):
        return self.config.V

    def param_count(self):
        return sum(p.numel() for p in self.parameters())

    def flat_parameters(self):
        return torch.cat([p.detach().reshape(-1).double() for p in self.parameters()]).numpy()

    # -- prediction / joint ------------------------------------------------

    def predict(self, targets):
        """Prediction-network outputs for every prefix of ``targets`` (U+1 rows)."""
        ids = torch.as_tensor(np.r_[self.blank, np.asarray(targets, dtype=np.int64)], dtype=torch.long)
        out, _ = self.pred_rnn(self.embed(ids)[None])
        return out[0]

    def pred_step(self, symbols, hidden):
        """One prediction-network step for a batch of hypotheses."""
        out, h = self.pred_rnn(self.embed(symbols)[:, None, :], hidden)
        return out[:, 0], h

    def initial_pred_hidden(self, n=1):
        return torch.zeros(1, n, self.config.pred_dim, dtype=self.config.torch_dtype)

    def joint(self, enc, pred):
        z = torch.tanh(self.joint_enc(enc)[:, None, :] + self.joint_pred(pred)[None, :, :])
        return self.joint_out(z)

    # scorer interface used by the decoder

    def dec_init(self):
        hidden = self.initial_pred_hidden(1)
        return self.dec_step(torch.tensor([self.blank]), hidden)

    def dec_step(self, symbols, hidden):
        out, hidden = self.pred_step(symbols, hidden)
        return self.joint_pred(out), hidden

    def enc_project(self, encodings):
        return self.joint_enc(torch.as_tensor(encodings, dtype=self.config.torch_dtype))

    def joint_logprobs(self, enc_t, pred_proj):
        return torch.log_softmax(self.joint_out(torch.tanh(enc_t[None, :] + pred_proj)), dim=-1)


def init_model(config):
    """Build a transducer with deterministic scaled-uniform weights."""
    return Transducer(config)


def param_count(config):
    return Transducer(config).param_count()


# -- encoder ---------------------------------------------------------------


def _check_state(state, config):
    ref = initial_state(config)
    for name in ("prev_frames", "hidden", "context"):
        a, b = getattr(state, name), getattr(ref, name)
        if (a is None) != (b is None) or (a is not None and np.shape(a) != np.shape(b)):
            raise StateError(f"encoder state field {name!r} does not match the model config")
    if not 0 <= state.n_context <= config.attention_window - 1:
        raise StateError("encoder state n_context out of range")


def _stack_frames(x, prev, seen, f):
    """Stack ``f`` frames ending at each global position divisible by ``f``."""
    full = torch.cat([prev, x]) if f > 1 else x
    n = x.shape[0]
    first = -(-seen // f) * f
    positions = torch.arange(first, max(first, seen + n), f)
    idx = positions - seen + (f - 1)
    rows = idx[:, None] + torch.arange(-(f - 1), 1)[None, :]
    stacked = full[rows].reshape(len(positions), f * x.shape[1])
    new_prev = full[full.shape[0] - (f - 1):] if f > 1 else prev
    return stacked, new_prev


def encode(model, frames, mode=None, state=None):
    """Encode a feature matrix; returns ``(encodings, state)``.

    In streaming mode ``state`` may carry over from a previous call, and the
    concatenation of outputs over consecutive calls equals one call on the
    concatenated frames.  Non-streaming calls return ``None`` as state.
    """
    c = model.config
    mode = mode or c.mode
    if mode not in MODES:
        raise ModeError(f"unknown mode {mode!r}")
    if mode == "streaming" and c.enc_kind == "recurrent-bi":
        raise ModeError("bidirectional encoder cannot run in streaming mode")
    if mode == "non-streaming" and state is not None:
        raise StateError("non-streaming encoding does not take a carried state")
    dt = c.torch_dtype
    x = torch.as_tensor(np.asarray(frames), dtype=dt) if not torch.is_tensor(frames) else frames.to(dt)
    if x.ndim != 2 or x.shape[1] != c.input_dim:
        raise ConfigError(f"frames must have shape (T, {c.input_dim}), got {tuple(x.shape)}")
    streaming = mode == "streaming"
    if streaming:
        state = state if state is not None else initial_state(c)
        _check_state(state, c)
    else:
        state = initial_state(c) if c.enc_kind != "recurrent-bi" else EncoderState(
            np.zeros((c.subsample_factor - 1, c.input_dim)), 0)
    f = c.subsample_factor
    prev = torch.as_tensor(state.prev_frames, dtype=dt)
    stacked, new_prev = _stack_frames(x, prev, state.frames_seen, f)
    z = model.frontend(stacked)
    n = z.shape[0]
    new_state = EncoderState(new_prev.detach().double().numpy(), state.frames_seen + x.shape[0])

    if c.enc_kind == "windowed-attention":
        W = c.attention_window
        back, fwd = (W - 1, 0) if streaming else (W // 2, W - 1 - W // 2)
        ctx_all = torch.as_tensor(state.context, dtype=dt)
        k = state.n_context
        new_ctx = np.zeros_like(state.context)
        for layer, block in enumerate(model.blocks):
            ctx = ctx_all[layer, W - 1 - k:] if (streaming and k) else z[:0]
            if streaming:
                hist = torch.cat([ctx, z])[-(W - 1):] if W > 1 else z[:0]
                new_ctx[layer, W - 1 - hist.shape[0]:] = hist.detach().double().numpy()
            z = block(z, ctx, back, fwd) if n else z
        new_state.context = new_ctx
        new_state.n_context = min(W - 1, k + n)
    else:
        if c.enc_kind == "recurrent-uni":
            h0 = torch.as_tensor(state.hidden, dtype=dt)[:, None, :]
            if n:
                z, h = model.rnn(z[None], h0)
                z = z[0]
                new_state.hidden = h[:, 0].detach().double().numpy()
            else:
                new_state.hidden = state.hidden.copy()
        elif n:
            z, _ = model.rnn(z[None])
            z = model.bi_proj(z[0])
    return z, (new_state if streaming else None)


def output_length(T, subsample_factor):
    return -(-T // subsample_factor)


def symbol_ids(model, target):
    """Map symbol strings (or ids) to indices, rejecting blank and unknowns."""
    vocab = model.config.vocab
    index = {s: i for i, s in enumerate(vocab)}
    out = []
    for s in target:
        if isinstance(s, (int, np.integer)):
            i = int(s)
            if not 0 <= i < model.V:
                raise VocabError(f"symbol id {i} outside [0, {model.V})")
        else:
            if s not in index or index[s] == model.blank:
                raise VocabError(f"symbol {s!r} not in vocabulary")
            i = index[s]
        out.append(i)
    return np.asarray(out, dtype=np.int64)


def joint_lattice(model, encodings, target):
    """Full T x (U+1) x (V+1) joint logits as a :class:`LogitLattice`."""
    ids = symbol_ids(model, target)
    enc = torch.as_tensor(encodings, dtype=model.config.torch_dtype)
    with torch.no_grad():
        logits = model.joint(enc, model.predict(ids))
    return LogitLattice(logits.double().numpy(), ids)


# -- training --------------------------------------------------------------


class _TrellisLoss(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logits, targets, path):
        lattice = LogitLattice(logits.detach().double().cpu().numpy(), targets)
        if path is None:
            res = marginal_loss_and_grad(lattice)
        else:
            res = fixed_alignment_loss_and_grad(lattice, path)
        ctx.save_for_backward(torch.from_numpy(res.grad).to(logits.dtype))
        return logits.new_tensor(res.loss)

    @staticmethod
    def backward(ctx, grad_output):
        (grad,) = ctx.saved_tensors
        return grad_output * grad, None, None


def trellis_loss(logits, targets, path=None):
    """Differentiable transducer loss; ``path`` switches to the fixed-alignment objective."""
    return _TrellisLoss.apply(logits, np.asarray(targets, dtype=np.int64), path)


def utterance_loss(model, frames, targets, path=None, mode=None):
    enc, _ = encode(model, frames, mode)
    ids = symbol_ids(model, targets)
    logits = model.joint(enc, model.predict(ids))
    if not torch.all(torch.isfinite(logits)):
        raise DivergenceError("non-finite joint logits", {"max_abs": float(logits.detach().abs().max())})
    return trellis_loss(logits, ids, path)


@dataclass
class TrainState:
    optimizer: torch.optim.Optimizer
    lr: float
    clip_norm: float = 1.0
    step: int = 0
    history: list = field(default_factory=list)


def make_optimizer(model, lr=1e-3, clip_norm=1.0):
    """Adam with global gradient-norm clipping."""
    return TrainState(torch.optim.Adam(model.parameters(), lr=lr), lr, clip_norm)


def _split_item(item, objective):
    frames, target = item
    if objective == "fixed-alignment":
        if not (isinstance(target, tuple) and len(target) == 2 and isinstance(target[1], AlignmentPath)):
            raise ConfigError("fixed-alignment objective needs (target, AlignmentPath) per example")
        return frames, target[0], target[1]
    if objective != "marginal":
        raise ConfigError(f"unknown objective {objective!r}")
    if isinstance(target, tuple) and len(target) == 2 and isinstance(target[1], AlignmentPath):
        target = target[0]
    return frames, target, None


def _encode_batch(model, frames_list, mode):
    """Zero-state encodings for several utterances; recurrent kinds run padded."""
    c = model.config
    mode = mode or c.mode
    if c.enc_kind == "windowed-attention" or len(frames_list) == 1:
        return [encode(model, fr, mode)[0] for fr in frames_list]
    if mode == "streaming" and c.enc_kind == "recurrent-bi":
        raise ModeError("bidirectional encoder cannot run in streaming mode")
    dt = c.torch_dtype
    f = c.subsample_factor
    prev = torch.zeros(f - 1, c.input_dim, dtype=dt)
    zs = [model.frontend(_stack_frames(torch.as_tensor(np.asarray(fr), dtype=dt), prev, 0, f)[0])
          for fr in frames_list]
    lengths = torch.tensor([z.shape[0] for z in zs])
    padded = nn.utils.rnn.pad_sequence(zs, batch_first=True)
    if c.enc_kind == "recurrent-uni":
        out, _ = model.rnn(padded)
    else:
        packed = nn.utils.rnn.pack_padded_sequence(padded, lengths, batch_first=True, enforce_sorted=False)
        out, _ = model.rnn(packed)
        out, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True)
        out = model.bi_proj(out)
    return [out[i, : int(n)] for i, n in enumerate(lengths)]


def _predict_batch(model, ids_list):
    seqs = [torch.as_tensor(np.r_[model.blank, ids], dtype=torch.long) for ids in ids_list]
    padded = nn.utils.rnn.pad_sequence(seqs, batch_first=True)
    out, _ = model.pred_rnn(model.embed(padded))
    return [out[i, : len(sq)] for i, sq in enumerate(seqs)]


def batch_loss(model, batch, objective="marginal", mode=None):
    items = [_split_item(item, objective) for item in batch]
    ids = [symbol_ids(model, target) for _, target, _ in items]
    encs = _encode_batch(model, [frames for frames, _, _ in items], mode)
    preds = _predict_batch(model, ids)
    losses = []
    for enc, pred, y, (_, _, path) in zip(encs, preds, ids, items):
        logits = model.joint(enc, pred)
        if not torch.all(torch.isfinite(logits)):
            raise DivergenceError("non-finite joint logits", {"max_abs": float(logits.detach().abs().max())})
        losses.append(trellis_loss(logits, y, path))
    return torch.stack(losses).mean()


def train_step(model, batch, objective, opt, mode=None):
    """One optimizer step on the mean loss of ``batch``; returns ``(model, loss)``."""
    opt.optimizer.zero_grad(set_to_none=True)
    loss = batch_loss(model, batch, objective, mode)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss at step {opt.step}", {"step": opt.step, "loss": value})
    loss.backward()
    norm = float(nn.utils.clip_grad_norm_(model.parameters(), opt.clip_norm))
    if not math.isfinite(norm):
        raise DivergenceError(f"non-finite gradient at step {opt.step}",
                              {"step": opt.step, "loss": value, "grad_norm": norm})
    opt.optimizer.step()
    opt.step += 1
    opt.history.append(value)
    return model, value


# -- persistence -------------------------------------------------------------


def _model_bytes(model):
    tensors, blobs, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy()
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = np.ascontiguousarray(le).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    payload = b"".join(blobs)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(with_vocab=False),
        "vocab": list(model.config.vocab),
        "tensors": tensors,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload


def save_model(model, path, config=None):
    """Write ``MAGIC | u64 header length | JSON header | little-endian tensors``."""
    if config is not None and config != model.config:
        raise ConfigError("config passed to save_model differs from the model's own")
    with open(path, "wb") as f:
        f.write(_model_bytes(model))


def load_model(path):
    """Inverse of :func:`save_model`; returns ``(model, config)``."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise LoadError(f"{path}: not a model file (bad magic or truncated)")
    (hlen,) = struct.unpack("<Q", blob[len(MAGIC): len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if len(blob) < start + hlen:
        raise LoadError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start: start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise LoadError(f"{path}: corrupt header ({e})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise LoadError(f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}")
    payload = blob[start + hlen:]
    if len(payload) != header["payload_bytes"] or zlib.crc32(payload) != header["payload_crc32"]:
        raise LoadError(f"{path}: corrupt or truncated tensor payload")
    try:
        config = ModelConfig.from_dict({**header["config"], "vocab": header["vocab"]})
    except ConfigError as e:
        raise LoadError(f"{path}: invalid config ({e})") from None
    model = Transducer(config)
    state = {}
    for t in header["tensors"]:
        raw = payload[t["offset"]: t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise LoadError(f"{path}: tensors do not match config ({e})") from None
    return model, config
