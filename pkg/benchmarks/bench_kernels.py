"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel is run on the same inputs through both backends; outputs are
compared before timing so a mismatch fails loudly instead of producing a
meaningless speedup.
"""

from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from crossing_attn import kernels as K
from crossing_attn.flow import _offsets


def cases(rng):
    x = rng.standard_normal((32, 32, 32, 16)).astype(np.float32)
    u = K.numpy_unfold(x, 3, 3, 1, 1)
    a, b = rng.random((48, 64)), rng.random((48, 64))
    zeros = np.zeros((48, 64))
    offs = _offsets(4)
    return {
        "unfold 32x32x32x16 k3": (
            lambda: K.numpy_unfold(x, 3, 3, 1, 1),
            lambda: K.compiled.unfold(x, 3, 3, 1, 1),
        ),
        "fold 32x32x32x16 k3": (
            lambda: K.numpy_fold(u, 32, 32, 3, 3, 1, 1),
            lambda: K.compiled.fold(u, 32, 32, 3, 3, 1, 1),
        ),
        "block match 48x64 r4 b5": (
            lambda: K.numpy_match_candidates(a, b, zeros, zeros, offs, 2, 4.0),
            lambda: K.compiled.match_candidates(a, b, zeros, zeros, offs, 2, 4.0),
        ),
    }


def check(name, ref, fast):
    r, f = ref(), fast()
    r, f = (r,) if isinstance(r, np.ndarray) else r, (f,) if isinstance(f, np.ndarray) else f
    for x, y in zip(r, f):
        if not np.allclose(np.asarray(x), np.asarray(y), atol=1e-5):
            raise SystemExit(f"{name}: backends disagree")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    if K.compiled is None:
        print("compiled kernels unavailable (not built, or CROSSING_ATTN_PURE set)", file=sys.stderr)
        return 1
    rows = []
    print(f"{'kernel':28s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, (ref, fast) in cases(np.random.default_rng(0)).items():
        check(name, ref, fast)
        t_ref = min(timeit.repeat(ref, number=1, repeat=args.repeat)) * 1e3
        t_fast = min(timeit.repeat(fast, number=1, repeat=args.repeat)) * 1e3
        rows.append({"kernel": name, "numpy_ms": t_ref, "cython_ms": t_fast, "speedup": t_ref / t_fast})
        print(f"{name:28s} {t_ref:10.2f} {t_fast:10.2f} {t_ref / t_fast:7.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
