"""Compare the compiled kernels with the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--n 200000] [--repeat 5]

Prints best-of-``repeat`` wall times and the max absolute difference
between the two implementations.
"""

import argparse
import time

import numpy as np

from qsieve.basis import bspline_knots
from qsieve.kernels import implementations


def best_time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=200_000, help="evaluation points")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    impls = implementations()
    if "compiled" not in impls:
        print("compiled extension not built; only the fallback is available")
    rng = np.random.default_rng(0)
    x = rng.random(args.n)
    cases = []
    for m, nderiv in ((8, 0), (16, 0), (16, 1)):
        knots = bspline_knots(0.0, 1.0, m, 3)
        cases.append((f"bspline_design m={m} d={nderiv}", "bspline_design", (x, knots, 3, m, nderiv)))
    A = rng.random((args.n, 8))
    B = rng.random((args.n, 8))
    cases.append(("rowwise_kron 8x8", "rowwise_kron", (A, B)))

    print(f"{'kernel':<28} " + " ".join(f"{name:>12}" for name in impls) + f" {'speedup':>9} {'max diff':>10}")
    for label, fname, fargs in cases:
        times, outs = [], []
        for mod in impls.values():
            t, out = best_time(lambda mod=mod: getattr(mod, fname)(*fargs), args.repeat)
            times.append(t)
            outs.append(out)
        speed = times[0] / times[-1] if len(times) > 1 else float("nan")
        diff = float(np.max(np.abs(outs[0] - outs[-1])))
        print(f"{label:<28} " + " ".join(f"{t * 1e3:>10.2f}ms" for t in times) + f" {speed:>8.1f}x {diff:>10.2e}")


if __name__ == "__main__":
    main()
