#!/usr/bin/env python3
"""Throughput comparison of the numba kernels against the numpy fallback.

Runs each hot kernel on training-shaped inputs with both backends and
prints a table of per-call times and speedups. The numba timings exclude
JIT compilation (kernels are warmed first).

Usage:
    python benchmarks/bench_kernels.py [--reps 50]

The active backend for the package itself is chosen at import time via
HTSR_NUMBA; this script always times both implementations directly.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

os.environ.setdefault("HTSR_NUMBA", "1")  # make sure the jitted path exists

from htdecay import kernels  # noqa: E402


def timeit(fn, *args, reps: int) -> float:
    fn(*args)  # warm (JIT compile / cache touch)
    t0 = time.perf_counter()
    for _ in range(reps):
        fn(*args)
    return (time.perf_counter() - t0) / reps


def bench_softmax(reps: int):
    # attention shape: batch 8 x 4 heads, context 64
    rng = np.random.default_rng(0)
    scores = rng.standard_normal((32, 64, 64))
    t_np = timeit(kernels.softmax_causal_np, scores, reps=reps)
    t_nb = timeit(kernels.softmax_causal_nb, scores, reps=reps)
    return "softmax_causal (32,64,64)", t_np, t_nb


def bench_cross_entropy(reps: int):
    # logits for 512 tokens over a byte vocabulary
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((512, 256))
    targets = rng.integers(0, 256, size=512)
    t_np = timeit(lambda: kernels.cross_entropy_np(logits.copy(), targets), reps=reps)
    t_nb = timeit(lambda: kernels.cross_entropy_nb(logits.copy(), targets), reps=reps)
    return "cross_entropy (512,256)", t_np, t_nb


def bench_adam(reps: int):
    # one fused update over a 128k-parameter tensor
    rng = np.random.default_rng(2)
    n = 128_000

    def run(fn):
        w = rng.standard_normal(n)
        g = rng.standard_normal(n)
        m = np.zeros(n)
        v = np.zeros(n)
        return timeit(lambda: fn(w, g, m, v, 3, 1e-3, 0.9, 0.999, 1e-8, 1e-4, True), reps=reps)

    return "adam_update (128k params)", run(kernels.adam_update_np), run(kernels.adam_update_nb)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--reps", type=int, default=50)
    args = parser.parse_args(argv)

    if kernels.BACKEND != "numba":
        print("numba is not available; nothing to compare", file=sys.stderr)
        return 1

    rows = [bench(args.reps) for bench in (bench_softmax, bench_cross_entropy, bench_adam)]
    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'numpy':>10}  {'numba':>10}  {'speedup':>7}")
    for name, t_np, t_nb in rows:
        print(f"{name:<{width}}  {t_np * 1e6:>8.1f}us  {t_nb * 1e6:>8.1f}us  {t_np / t_nb:>6.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
