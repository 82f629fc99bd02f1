"""Compare the numba and pure-numpy trellis and edit-distance kernels.

    python3 benchmarks/bench_trellis.py [--sizes 50x20,200x60] [--repeats 5]

Both backends are timed in-process (the numpy path is forced with
``backend="numpy"``; setting RNNTKIT_DISABLE_NUMBA=1 does the same globally).
Results agree to 1e-9 or the script exits non-zero.
"""
import argparse
import json
import time

import numpy as np

from rnntkit import _accel
from rnntkit.metrics import align_words
from rnntkit.trellis import LogitLattice, forward_backward


def _best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_trellis(T, U, V, repeats, rng):
    lat = LogitLattice(rng.normal(size=(T, U + 1, V + 1)), rng.integers(0, V, size=U))
    row = {"kernel": "forward_backward", "size": f"T={T} U={U} V={V}"}
    results = {}
    for backend in ("numba", "numpy"):
        if backend == "numba" and not _accel.HAVE_NUMBA:
            continue
        forward_backward(lat, backend)  # compile / warm up
        row[f"{backend}_s"], results[backend] = _best_of(lambda: forward_backward(lat, backend), repeats)
    if len(results) == 2:
        a, b = results["numba"], results["numpy"]
        row["max_abs_diff"] = float(max(abs(a[0] - b[0]), np.abs(a[1] - b[1]).max()))
    return row


def bench_alignment(n, repeats, rng):
    ref = [str(w) for w in rng.integers(0, 20, size=n)]
    hyp = [str(w) for w in rng.integers(0, 20, size=n)]
    row = {"kernel": "align_words", "size": f"{n} words"}
    results = {}
    for backend in ("numba", "numpy"):
        if backend == "numba" and not _accel.HAVE_NUMBA:
            continue
        align_words(ref, hyp, backend)
        row[f"{backend}_s"], results[backend] = _best_of(lambda: align_words(ref, hyp, backend), repeats)
    if len(results) == 2:
        row["max_abs_diff"] = 0.0 if results["numba"].ops == results["numpy"].ops else float("inf")
    return row


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="50x20,200x60,400x120", help="comma-separated TxU trellis sizes")
    ap.add_argument("--vocab", type=int, default=30)
    ap.add_argument("--words", default="100,500")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    rows = []
    for size in args.sizes.split(","):
        T, U = map(int, size.split("x"))
        rows.append(bench_trellis(T, U, args.vocab, args.repeats, rng))
    for n in args.words.split(","):
        rows.append(bench_alignment(int(n), args.repeats, rng))
    for r in rows:
        if "numba_s" in r:
            r["speedup"] = r["numpy_s"] / r["numba_s"]
        print(json.dumps(r))
    bad = [r for r in rows if r.get("max_abs_diff", 0.0) > 1e-9]
    return 1 if bad else 0


if __name__ == "__main__":
    raise SystemExit(main())
