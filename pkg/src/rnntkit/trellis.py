"""Exact log-domain computations over the RNN-T alignment trellis.

The trellis has a node for every (frame ``t``, emitted-label count ``u``).
From a node a path either emits blank (``t -> t + 1``) or the next target
label (``u -> u + 1``).  Every path terminates with a blank emitted at
``(T - 1, U)``.

Logits are laid out as ``(T, U + 1, V + 1)`` with symbol ``V`` the blank.
All arithmetic is carried out in float64 whatever the storage dtype.
"""
from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np

from ._accel import njit, resolve_backend
from .errors import InputError, PathError, RefusalError

NEG_INF = -1.0e30
BLANK = -1
ORACLE_MAX_SIZE = 12


@dataclass(frozen=True, eq=False)
class LogitLattice:
    """Joint-network scores for one utterance plus its target labels."""

    logits: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        logits = np.asarray(self.logits)
        targets = np.asarray(self.targets, dtype=np.int64).reshape(-1)
        if logits.ndim != 3:
            raise InputError(f"logits must be 3-d (T, U+1, V+1), got shape {logits.shape}")
        T, U1, K = logits.shape
        if T < 1:
            raise InputError("lattice has no frames (T=0)")
        if K < 2:
            raise InputError("need at least one non-blank symbol plus blank")
        if U1 != targets.size + 1:
            raise InputError(f"label axis has {U1} nodes but {targets.size} targets")
        if targets.size and (targets.min() < 0 or targets.max() >= K - 1):
            raise InputError("target indices must lie in [0, V)")
        if not np.all(np.isfinite(logits)):
            raise InputError("lattice contains non-finite logits")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "targets", targets)

    @property
    def T(self):
        return self.logits.shape[0]

    @property
    def U(self):
        return self.logits.shape[1] - 1

    @property
    def V(self):
        return self.logits.shape[2] - 1

    def log_probs(self):
        x = self.logits.astype(np.float64)
        m = x.max(axis=-1, keepdims=True)
        return x - (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True)))


@dataclass(frozen=True)
class AlignmentPath:
    """A sequence of moves; ``BLANK`` (-1) or a label index into the target."""

    moves: tuple

    def __post_init__(self):
        object.__setattr__(self, "moves", tuple(int(m) for m in self.moves))

    def __len__(self):
        return len(self.moves)

    def __iter__(self):
        return iter(self.moves)

    def nodes(self):
        """Yield ``(t, u, move)`` for every emission along the path."""
        t = u = 0
        for m in self.moves:
            yield t, u, m
            if m == BLANK:
                t += 1
            else:
                u += 1


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray


def path_problem(path, T, U):
    """Return a description of why ``path`` is invalid, or None."""
    moves = path.moves if isinstance(path, AlignmentPath) else tuple(path)
    n_blank = sum(1 for m in moves if m == BLANK)
    labels = [m for m in moves if m != BLANK]
    if n_blank != T:
        return f"expected {T} blank moves, found {n_blank}"
    if len(labels) != U:
        return f"expected {U} label moves, found {len(labels)}"
    if labels != list(range(U)):
        return "label moves out of target order"
    if not moves or moves[-1] != BLANK:
        return "path must terminate with a blank at (T-1, U)"
    return None


def validate_path(path, T, U):
    return path_problem(path, T, U) is None


def enumerate_paths(T, U):
    """All valid alignment paths for a T x U trellis, in lexicographic order."""
    slots = T - 1 + U
    for label_pos in combinations(range(slots), U):
        moves = [BLANK] * slots
        for i, p in enumerate(label_pos):
            moves[p] = i
        yield AlignmentPath(tuple(moves) + (BLANK,))


def path_count(T, U):
    return comb(T - 1 + U, U)


# -- kernels ---------------------------------------------------------------


@njit
def _lse2(a, b):
    if a < b:
        a, b = b, a
    if b <= -1.0e29:
        return a
    return a + np.log1p(np.exp(b - a))


@njit
def _forward_backward_loops(lp, targets):
    T, U1, K = lp.shape
    U = U1 - 1
    blank = K - 1
    alpha = np.full((T, U1), -1.0e30)
    beta = np.full((T, U1), -1.0e30)
    alpha[0, 0] = 0.0
    for t in range(T):
        for u in range(U1):
            if t == 0 and u == 0:
                continue
            a = -1.0e30
            b = -1.0e30
            if t > 0:
                a = alpha[t - 1, u] + lp[t - 1, u, blank]
            if u > 0:
                b = alpha[t, u - 1] + lp[t, u - 1, targets[u - 1]]
            alpha[t, u] = _lse2(a, b)
    beta[T - 1, U] = lp[T - 1, U, blank]
    for t in range(T - 1, -1, -1):
        for u in range(U, -1, -1):
            if t == T - 1 and u == U:
                continue
            a = -1.0e30
            b = -1.0e30
            if t < T - 1:
                a = beta[t + 1, u] + lp[t, u, blank]
            if u < U:
                b = beta[t, u + 1] + lp[t, u, targets[u]]
            beta[t, u] = _lse2(a, b)
    logz = beta[0, 0]
    grad = np.zeros((T, U1, K))
    for t in range(T):
        for u in range(U1):
            occ = np.exp(alpha[t, u] + beta[t, u] - logz)
            if occ == 0.0:
                continue
            for k in range(K):
                grad[t, u, k] = np.exp(lp[t, u, k]) * occ
            if t < T - 1:
                grad[t, u, blank] -= np.exp(alpha[t, u] + lp[t, u, blank] + beta[t + 1, u] - logz)
            elif u == U:
                grad[t, u, blank] -= np.exp(alpha[t, u] + lp[t, u, blank] - logz)
            if u < U:
                y = targets[u]
                grad[t, u, y] -= np.exp(alpha[t, u] + lp[t, u, y] + beta[t, u + 1] - logz)
    return logz, grad, alpha, beta


def _forward_backward_diagonal(lp, targets):
    """Pure numpy version; sweeps anti-diagonals t + u = d."""
    T, U1, K = lp.shape
    U = U1 - 1
    lpb = lp[:, :, K - 1]
    lpy = np.take_along_axis(lp[:, :U, :], targets[None, :, None], axis=2)[:, :, 0]
    alpha = np.full((T, U1), NEG_INF)
    beta = np.full((T, U1), NEG_INF)
    alpha[0, 0] = 0.0
    for d in range(1, T + U):
        ts = np.arange(max(0, d - U), min(T - 1, d) + 1)
        us = d - ts
        from_t = np.where(ts > 0, alpha[ts - 1, us] + lpb[ts - 1, us], NEG_INF)
        if U:
            prev_u = np.maximum(us - 1, 0)
            from_u = np.where(us > 0, alpha[ts, prev_u] + lpy[ts, np.minimum(prev_u, U - 1)], NEG_INF)
        else:
            from_u = np.full(ts.shape, NEG_INF)
        alpha[ts, us] = np.logaddexp(from_t, from_u)
    beta[T - 1, U] = lpb[T - 1, U]
    for d in range(T + U - 2, -1, -1):
        ts = np.arange(max(0, d - U), min(T - 1, d) + 1)
        us = d - ts
        nxt_t = np.minimum(ts + 1, T - 1)
        from_t = np.where(ts < T - 1, beta[nxt_t, us] + lpb[ts, us], NEG_INF)
        if U:
            nxt_u = np.minimum(us + 1, U)
            from_u = np.where(us < U, beta[ts, nxt_u] + lpy[ts, np.minimum(us, U - 1)], NEG_INF)
        else:
            from_u = np.full(ts.shape, NEG_INF)
        beta[ts, us] = np.logaddexp(from_t, from_u)
    logz = beta[0, 0]

    occ = np.exp(alpha + beta - logz)
    grad = np.exp(lp) * occ[:, :, None]
    blank_next = np.full((T, U1), NEG_INF)
    blank_next[:-1] = beta[1:]
    blank_next[T - 1, U] = 0.0
    grad[:, :, K - 1] -= np.exp(alpha + lpb + blank_next - logz)
    if U:
        label_flow = np.exp(alpha[:, :U] + lpy + beta[:, 1:] - logz)
        np.add.at(grad, (slice(None), np.arange(U), targets), -label_flow)
    return logz, grad, alpha, beta


def forward_backward(lattice, backend=None):
    """Return ``(log P(Y|X), grad wrt logits of -log P, alpha, beta)``."""
    lp = lattice.log_probs()
    targets = np.ascontiguousarray(lattice.targets, dtype=np.int64)
    if resolve_backend(backend) == "numba":
        return _forward_backward_loops(np.ascontiguousarray(lp), targets)
    return _forward_backward_diagonal(lp, targets)


# -- public operations -----------------------------------------------------


def marginal_loss_and_grad(lattice, target_len=None, backend=None):
    """Negative log of the probability summed over every alignment."""
    if target_len is not None and target_len != lattice.U:
        raise InputError(f"target_len={target_len} but lattice label axis has U={lattice.U}")
    logz, grad, _, _ = forward_backward(lattice, backend)
    return LossResult(loss=float(-logz), grad=grad)


def path_emissions(path, K, targets):
    """Vectorised cursor positions and emitted symbol ids for a valid path."""
    moves = np.asarray(path.moves, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    is_blank = moves == BLANK
    ts = np.cumsum(is_blank) - is_blank
    us = np.cumsum(~is_blank) - ~is_blank
    ks = np.full(len(moves), K - 1, dtype=np.int64)
    ks[~is_blank] = targets[moves[~is_blank]]
    return ts, us, ks


def fixed_alignment_loss_and_grad(lattice, path):
    """Negative log-probability of one specific alignment path."""
    if not isinstance(path, AlignmentPath):
        path = AlignmentPath(path)
    problem = path_problem(path, lattice.T, lattice.U)
    if problem:
        raise PathError(f"invalid alignment path for T={lattice.T}, U={lattice.U}: {problem}")
    lp = lattice.log_probs()
    K = lp.shape[2]
    ts, us, ks = path_emissions(path, K, lattice.targets)
    grad = np.zeros_like(lp)
    grad[ts, us, :] = np.exp(lp[ts, us, :])
    grad[ts, us, ks] -= 1.0
    return LossResult(loss=float(-lp[ts, us, ks].sum()), grad=grad)


def path_log_prob(lattice, path):
    return -fixed_alignment_loss_and_grad(lattice, path).loss


def enumerate_oracle(lattice):
    """-log P(Y|X) by explicitly summing every alignment path (test oracle)."""
    T, U = lattice.T, lattice.U
    if T + U > ORACLE_MAX_SIZE:
        raise RefusalError(f"T+U={T + U} exceeds the enumeration guard of {ORACLE_MAX_SIZE}")
    lp = lattice.log_probs()
    blank = lp.shape[2] - 1
    scores = []
    for path in enumerate_paths(T, U):
        s = 0.0
        for t, u, m in path.nodes():
            s += lp[t, u, blank if m == BLANK else lattice.targets[m]]
        scores.append(s)
    scores = np.asarray(scores)
    m = scores.max()
    return float(-(m + np.log(np.exp(scores - m).sum())))
