"""Evaluation metrics: WER, WDER, slot error rates, confidence calibration, tag F1.

Corpus-level numbers are computed by pooling count tuples, never by
averaging per-utterance rates.
"""
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ._accel import njit, resolve_backend
from .errors import UndefinedMetricError

MATCH, SUB, DEL, INS = "M", "S", "D", "I"
SLOTS = (".", ",", "?", "cap")
NCE_EPS = 1e-7


@dataclass
class WordAlignment:
    """Minimal-cost edit script; each op is ``(kind, ref_idx, hyp_idx)``."""

    ops: list = field(default_factory=list)

    def count(self, kind):
        return sum(1 for op in self.ops if op[0] == kind)

    @property
    def cost(self):
        return sum(1 for op in self.ops if op[0] != MATCH)

    def pairs(self):
        """(ref_idx, hyp_idx) for every Match and Substitute."""
        return [(r, h) for k, r, h in self.ops if k in (MATCH, SUB)]


@njit
def _edit_table_loops(r, h):
    n, m = r.shape[0], h.shape[0]
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    for i in range(n + 1):
        d[i, 0] = i
    for j in range(m + 1):
        d[0, j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            best = d[i - 1, j - 1] + (0 if r[i - 1] == h[j - 1] else 1)
            if d[i - 1, j] + 1 < best:
                best = d[i - 1, j] + 1
            if d[i, j - 1] + 1 < best:
                best = d[i, j - 1] + 1
            d[i, j] = best
    return d


def _edit_table_rows(r, h):
    n, m = r.shape[0], h.shape[0]
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[0] = np.arange(m + 1)
    cols = np.arange(m + 1)
    for i in range(1, n + 1):
        diag = d[i - 1, :-1] + (r[i - 1] != h)
        up = d[i - 1, 1:] + 1
        row = np.empty(m + 1, dtype=np.int64)
        row[0] = i
        row[1:] = np.minimum(diag, up)
        # insertions chain left to right: row[j] = min_k (row[k] + j - k)
        row = np.minimum.accumulate(row - cols) + cols
        d[i] = row
    return d


def align_words(ref, hyp, backend=None):
    vocab = {}
    r = np.array([vocab.setdefault(w, len(vocab)) for w in ref], dtype=np.int64)
    h = np.array([vocab.setdefault(w, len(vocab)) for w in hyp], dtype=np.int64)
    if resolve_backend(backend) == "numba":
        d = _edit_table_loops(r, h)
    else:
        d = _edit_table_rows(r, h)
    ops = []
    i, j = len(r), len(h)
    while i or j:
        if i and j and r[i - 1] == h[j - 1] and d[i, j] == d[i - 1, j - 1]:
            ops.append((MATCH, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i and j and d[i, j] == d[i - 1, j - 1] + 1:
            ops.append((SUB, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i and d[i, j] == d[i - 1, j] + 1:
            ops.append((DEL, i - 1, None))
            i -= 1
        else:
            ops.append((INS, None, j - 1))
            j -= 1
    ops.reverse()
    return WordAlignment(ops)


def _norm(words):
    return [w.lower().strip(".,?") for w in words]


def wer_counts(ref, hyp):
    a = align_words(_norm(ref), _norm(hyp))
    return {"S": a.count(SUB), "D": a.count(DEL), "I": a.count(INS), "N": len(ref)}


def wer(ref, hyp):
    """Word error rate ``(S + D + I) / len(ref)`` and the alignment behind it."""
    a = align_words(_norm(ref), _norm(hyp))
    errors = a.cost
    if not ref:
        return (0.0 if not errors else float("inf")), a
    return errors / len(ref), a


def pooled_wer(pairs):
    tot = Counter()
    for ref, hyp in pairs:
        tot.update(wer_counts(ref, hyp))
    if tot["N"] == 0:
        return 0.0 if tot["S"] + tot["D"] + tot["I"] == 0 else float("inf")
    return (tot["S"] + tot["D"] + tot["I"]) / tot["N"]


# -- speaker attribution -------------------------------------------------------


def wder_counts(ref, hyp):
    a = align_words(_norm(ref.texts()), _norm(hyp.texts()))
    pairs = a.pairs()
    wrong = sum(1 for r, h in pairs if ref.words[r].speaker_role != hyp.words[h].speaker_role)
    return wrong, len(pairs)


def wder(ref, hyp):
    """Fraction of aligned (matched or substituted) words with the wrong speaker role."""
    return pooled_wder([(ref, hyp)])


def pooled_wder(pairs):
    wrong = total = 0
    for ref, hyp in pairs:
        w, n = wder_counts(ref, hyp)
        wrong += w
        total += n
    if total == 0:
        raise UndefinedMetricError("WDER undefined: no aligned word pairs")
    return wrong / total


# -- slot error rate -----------------------------------------------------------


def _slot_value(word, slot):
    if word is None:
        return None
    if slot == "cap":
        return "cap" if word.capitalized else None
    return word.trailing_punct or None


def ser_counts(ref, hyp, slot):
    """Slot error counts for one slot family: dict with S, D, I, N."""
    if slot not in SLOTS:
        raise ValueError(f"unknown slot {slot!r}")
    a = align_words(_norm(ref.texts()), _norm(hyp.texts()))
    c = {"S": 0, "D": 0, "I": 0, "N": 0}
    for _, ri, hi in a.ops:
        rv = _slot_value(ref.words[ri] if ri is not None else None, slot)
        hv = _slot_value(hyp.words[hi] if hi is not None else None, slot)
        r_has, h_has = rv == slot, hv == slot
        c["N"] += r_has
        if r_has and h_has:
            continue
        if r_has:
            c["D" if hv is None else "S"] += 1
        elif h_has:
            c["I" if rv is None else "S"] += 1
    return c


def all_slot_error_counts(ref, hyp):
    """Slot errors over punctuation and capitalization, each mismatch counted once."""
    a = align_words(_norm(ref.texts()), _norm(hyp.texts()))
    errors = n = 0
    for _, ri, hi in a.ops:
        rw = ref.words[ri] if ri is not None else None
        hw = hyp.words[hi] if hi is not None else None
        rp = rw.trailing_punct if rw else ""
        hp = hw.trailing_punct if hw else ""
        rc = bool(rw and rw.capitalized)
        hc = bool(hw and hw.capitalized)
        n += bool(rp) + rc
        errors += (rp != hp) + (rc != hc)
    return errors, n


def ser(ref, hyp, slot):
    return pooled_ser([(ref, hyp)], slot)


def pooled_ser(pairs, slot):
    tot = Counter()
    for ref, hyp in pairs:
        tot.update(ser_counts(ref, hyp, slot))
    if tot["N"] == 0:
        raise UndefinedMetricError(f"SER undefined for {slot!r}: reference has no such slots")
    return (tot["S"] + tot["D"] + tot["I"]) / tot["N"]


# -- confidence calibration ----------------------------------------------------


@dataclass
class CalibrationReport:
    nce: float
    ece: float
    auc_roc: float
    auc_prc: float
    auc_npv_tnr: float


def _as_arrays(confidences, labels):
    c = np.asarray(confidences, dtype=np.float64).reshape(-1)
    y = np.asarray([_label_bool(v) for v in labels], dtype=bool).reshape(-1)
    if c.shape != y.shape:
        raise ValueError("confidences and labels differ in length")
    return c, y


def _label_bool(v):
    if isinstance(v, str):
        if v not in ("correct", "incorrect"):
            raise ValueError(f"label must be 'correct' or 'incorrect', got {v!r}")
        return v == "correct"
    return bool(v)


def nce(confidences, labels):
    """Normalized cross-entropy of confidences against correctness labels (nats)."""
    c, y = _as_arrays(confidences, labels)
    n_c = int(y.sum())
    n_i = y.size - n_c
    if n_c == 0 or n_i == 0:
        raise UndefinedMetricError("NCE undefined when every word is correct or every word is incorrect")
    p_c = n_c / y.size
    h_base = -(n_c * np.log(p_c) + n_i * np.log1p(-p_c))
    # the floor only guards log(0); exact 1/0 confidences on the right side cost nothing
    h_conf = -(np.log(np.maximum(c[y], NCE_EPS)).sum() + np.log(np.maximum(1.0 - c[~y], NCE_EPS)).sum())
    return float((h_base - h_conf) / h_base)


def ece(confidences, labels, bins=10):
    c, y = _as_arrays(confidences, labels)
    if c.size == 0:
        raise UndefinedMetricError("ECE of an empty set")
    idx = np.minimum((c * bins).astype(np.int64), bins - 1)
    total = 0.0
    for b in range(bins):
        m = idx == b
        if m.any():
            total += m.sum() / c.size * abs(y[m].mean() - c[m].mean())
    return float(total)


def _trapezoid(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def auc_roc(confidences, labels):
    c, y = _as_arrays(confidences, labels)
    if y.all() or not y.any():
        raise UndefinedMetricError("ROC AUC needs both correct and incorrect labels")
    order = np.argsort(-c, kind="stable")
    cs, ys = c[order], y[order]
    last = np.r_[cs[1:] != cs[:-1], True]
    tp = np.cumsum(ys)[last]
    fp = np.cumsum(~ys)[last]
    return _trapezoid(np.r_[0, fp / fp[-1]], np.r_[0, tp / tp[-1]])


def auc_prc(confidences, labels):
    """Area under precision-recall for detecting correct words.

    The curve is flat-extended from its first point to recall 0.
    """
    c, y = _as_arrays(confidences, labels)
    if not y.any():
        raise UndefinedMetricError("PRC AUC needs at least one correct label")
    order = np.argsort(-c, kind="stable")
    cs, ys = c[order], y[order]
    last = np.r_[cs[1:] != cs[:-1], True]
    tp = np.cumsum(ys)[last]
    k = np.cumsum(np.ones_like(ys, dtype=np.int64))[last]
    recall = tp / y.sum()
    precision = tp / k
    return _trapezoid(np.r_[0.0, recall], np.r_[precision[0], precision])


def npv_tnr_points(confidences, labels):
    """(TNR, NPV) for every threshold t over distinct confidences; incorrect when c < t.

    Thresholds that predict nothing incorrect (undefined NPV) are skipped.
    """
    c, y = _as_arrays(confidences, labels)
    n_inc = (~y).sum()
    order = np.argsort(c, kind="stable")
    cs, ys = c[order], y[order]
    # predicted-incorrect set for threshold t_k = k-th distinct value is cs[:start_k]
    starts = np.flatnonzero(np.r_[True, cs[1:] != cs[:-1]])
    tn = np.cumsum(~ys)
    tnr, npv = [], []
    for s in starts:
        if s == 0:
            continue
        tnr.append(tn[s - 1] / n_inc)
        npv.append(tn[s - 1] / s)
    return np.array(tnr), np.array(npv)


def auc_npv_tnr(confidences, labels):
    """Area under NPV as a function of TNR, flat-extended to TNR 0 and TNR 1."""
    c, y = _as_arrays(confidences, labels)
    if y.all():
        raise UndefinedMetricError("NPV-TNR curve undefined without incorrect labels")
    tnr, npv = npv_tnr_points(c, y)
    if tnr.size == 0:
        return float((~y).mean())
    return _trapezoid(np.r_[0.0, tnr, 1.0], np.r_[npv[0], npv, npv[-1]])


def calibration_report(confidences, labels, bins=10):
    c, y = _as_arrays(confidences, labels)
    if c.size == 0:
        raise UndefinedMetricError("calibration report of an empty set")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    return CalibrationReport(
        nce=nce(c, y),
        ece=ece(c, y, bins),
        auc_roc=auc_roc(c, y),
        auc_prc=auc_prc(c, y),
        auc_npv_tnr=auc_npv_tnr(c, y),
    )


# -- tagging ---------------------------------------------------------------------

ONTOLOGY_GROUPS = {
    "SYM": "Symptoms",
    "MEDS": "Medication",
    "DRUG": "Medication",
    "PROP": "Attributes",
    "CONDITION": "Condition",
    "DIAGS": "Diagnostics",
    "TREAT": "Treatment",
}


def ontology_group(label):
    return ONTOLOGY_GROUPS.get(label.split(":")[0].upper(), "Other")


def _span_key(s):
    return (s.label, s.start, s.end) if hasattr(s, "label") else tuple(s)


def _f1_counts(ref, hyp):
    rc = Counter(map(_span_key, ref))
    hc = Counter(map(_span_key, hyp))
    tp = sum((rc & hc).values())
    return tp, sum(hc.values()), sum(rc.values())


def _f1(tp, n_hyp, n_ref):
    if n_hyp == 0 and n_ref == 0:
        return 1.0
    p = tp / n_hyp if n_hyp else 0.0
    r = tp / n_ref if n_ref else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def tag_prf(ref_spans, hyp_spans):
    tp, nh, nr = _f1_counts(ref_spans, hyp_spans)
    p = tp / nh if nh else (1.0 if nr == 0 else 0.0)
    r = tp / nr if nr else (1.0 if nh == 0 else 0.0)
    return p, r, _f1(tp, nh, nr)


def tag_f1(ref_spans, hyp_spans, mode="exact"):
    """Exact-match span F1, either overall or grouped by top-level ontology."""
    if mode == "exact":
        return _f1(*_f1_counts(ref_spans, hyp_spans))
    if mode != "per-ontology":
        raise ValueError(f"unknown mode {mode!r}")
    groups = sorted({ontology_group(_span_key(s)[0]) for s in list(ref_spans) + list(hyp_spans)})
    out = {}
    for g in groups:
        r = [s for s in ref_spans if ontology_group(_span_key(s)[0]) == g]
        h = [s for s in hyp_spans if ontology_group(_span_key(s)[0]) == g]
        out[g] = _f1(*_f1_counts(r, h))
    return out


def pooled_tag_f1(pairs, mode="exact"):
    """Corpus F1: spans from different sentences never match each other."""
    ref_all, hyp_all = [], []
    for i, (ref, hyp) in enumerate(pairs):
        ref_all += [(i,) + _span_key(s) for s in ref]
        hyp_all += [(i,) + _span_key(s) for s in hyp]
    if mode == "exact":
        return _f1(*_f1_counts(ref_all, hyp_all))
    groups = sorted({ontology_group(s[1]) for s in ref_all + hyp_all})
    return {
        g: _f1(*_f1_counts([s for s in ref_all if ontology_group(s[1]) == g],
                           [s for s in hyp_all if ontology_group(s[1]) == g]))
        for g in groups
    }


# -- corpus report -------------------------------------------------------------


def _or_none(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError:
        return None


def score_report(pairs):
    """Corpus scores for (ref, hyp) transcript pairs; undefined metrics are None."""
    pairs = list(pairs)
    counts = {"wer": {}, "wder": {"wrong": 0, "pairs": 0}, "ser": {}}
    wc = Counter()
    for ref, hyp in pairs:
        wc.update(wer_counts(ref.texts(), hyp.texts()))
        w, n = wder_counts(ref, hyp)
        counts["wder"]["wrong"] += w
        counts["wder"]["pairs"] += n
    counts["wer"] = {k: wc[k] for k in "SDIN"}
    for slot in SLOTS:
        sc = Counter()
        for ref, hyp in pairs:
            sc.update(ser_counts(ref, hyp, slot))
        counts["ser"][slot] = {k: sc[k] for k in "SDIN"}
    return {
        "wer": pooled_wer([(r.texts(), h.texts()) for r, h in pairs]),
        "wder": _or_none(pooled_wder, pairs),
        "ser": {slot: _or_none(pooled_ser, pairs, slot) for slot in SLOTS},
        "counts": counts,
    }
