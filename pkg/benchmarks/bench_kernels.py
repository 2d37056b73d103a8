"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeats 5]

Each kernel is warmed up once (so JIT compilation is excluded), checked for
agreement, then timed as the median of ``--repeats`` runs.
"""

import argparse
import statistics
import time

import numpy as np

from unlearnkit import _kernels as K


def median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def random_tree(rng, depth, p):
    """Complete binary tree in flattened arrays; leaves carry random values."""
    size = 2 ** (depth + 1) - 1
    internal = 2**depth - 1
    feature = np.full(size, -1, np.int64)
    feature[:internal] = rng.integers(0, p, internal)
    threshold = rng.standard_normal(size)
    idx = np.arange(size)
    left = np.where(idx < internal, 2 * idx + 1, -1).astype(np.int64)
    right = np.where(idx < internal, 2 * idx + 2, -1).astype(np.int64)
    return feature, threshold, left, right, rng.random(size)


def cases(rng):
    xs = np.sort(rng.integers(0, 500, 200_000).astype(np.float64))
    ys = rng.integers(0, 2, xs.size).astype(np.int64)
    yield "scan_groups (n=200k)", (xs, ys)
    # per-node calls inside tree building are small
    small = np.sort(rng.integers(0, 20, 64).astype(np.float64))
    yield "scan_groups (n=64)", (small, ys[:64].copy())
    X = rng.standard_normal((100_000, 10))
    yield "traverse (n=100k, depth 10)", (X, *random_tree(rng, 10, 10))
    profile = np.cumsum(rng.standard_normal(1 << 16))
    windows = 4 * 2 ** np.arange(12, dtype=np.int64)
    yield "dfa_fluctuations (n=65536)", (profile, windows)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    if not K._HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return
    rng = np.random.default_rng(0)
    kernels = {"scan_groups": "scan_groups", "traverse": "traverse", "dfa_fluctuations": "dfa_fluctuations"}
    print(f"{'kernel':32s} {'numpy [ms]':>12s} {'numba [ms]':>12s} {'ratio':>8s}")
    for label, argv in cases(rng):
        name = kernels[label.split()[0]]
        f_np, f_nb = getattr(K, name + "_numpy"), getattr(K, name + "_numba")
        a, b = f_np(*argv), f_nb(*argv)
        for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            np.testing.assert_allclose(u, v, rtol=1e-10, atol=1e-12)
        t_np = median_time(lambda: f_np(*argv), args.repeats)
        t_nb = median_time(lambda: f_nb(*argv), args.repeats)
        print(f"{label:32s} {1e3 * t_np:12.2f} {1e3 * t_nb:12.2f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
