"""Benchmark the numba kernels against the pure-NumPy fallback.

Run from the repo root:

    python benchmarks/bench_kernels.py [--repeats 50]

Shapes mirror a training step of the desk-scale model (batch 16,
sequence 64, width 64). The numba path is warmed up first so
compilation time is not counted.
"""

import argparse
import time

import numpy as np

from sysanchor import kernels


def timeit(fn, *args, repeats=50):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_case(name, fn, args, repeats):
    rows = {}
    for backend in ("numpy", "numba") if kernels.NUMBA_AVAILABLE else ("numpy",):
        kernels.set_backend(backend)
        fn(*args)  # warmup / jit compile
        rows[backend] = timeit(fn, *args, repeats=repeats)
    return name, rows


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=50)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    b, t, d, v = 16, 64, 64, 128
    x = rng.normal(size=(b, t, d)).astype(np.float32)
    gain = np.ones(d, dtype=np.float32)
    scores = rng.normal(size=(b, 4, t, t)).astype(np.float32)
    causal = np.zeros((t, t), dtype=np.float32)
    causal[np.triu_indices(t, k=1)] = -np.inf
    gate = rng.normal(size=(b, t, 4 * d)).astype(np.float32)
    up = rng.normal(size=(b, t, 4 * d)).astype(np.float32)
    logits = rng.normal(size=(b * t, v)).astype(np.float32)
    targets = rng.integers(0, v, size=b * t)
    mask = rng.integers(0, 2, size=b * t)

    cases = [
        bench_case("rmsnorm", kernels.rmsnorm, (x, gain, 1e-6), args.repeats),
        bench_case("rmsnorm_backward", kernels.rmsnorm_backward, (x, gain, 1e-6, x), args.repeats),
        bench_case("masked_softmax", kernels.masked_softmax, (scores, causal), args.repeats),
        bench_case("silu_gate", kernels.silu_gate, (gate, up), args.repeats),
        bench_case(
            "silu_gate_backward", kernels.silu_gate_backward, (gate, up, gate), args.repeats
        ),
        bench_case("cross_entropy", kernels.cross_entropy, (logits, targets, mask), args.repeats),
    ]

    print(f"numba available: {kernels.NUMBA_AVAILABLE}")
    print(f"{'kernel':<20} {'numpy (us)':>12} {'numba (us)':>12} {'speedup':>9}")
    for name, rows in cases:
        np_us = rows["numpy"] * 1e6
        if "numba" in rows:
            nb_us = rows["numba"] * 1e6
            print(f"{name:<20} {np_us:>12.1f} {nb_us:>12.1f} {np_us / nb_us:>8.2f}x")
        else:
            print(f"{name:<20} {np_us:>12.1f} {'-':>12} {'-':>9}")
    kernels.set_backend("auto")


if __name__ == "__main__":
    main()
