"""Compare the numba kernels against the numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Both backends run in-process on identical inputs; outputs are checked for
agreement before timings are reported.  The first numba call (compilation
or cache load) is excluded.
"""
import argparse
import time

import numpy as np

from dporacle import _kernels as K
from dporacle.core import sample_subspace


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def bench_sgd(d, n, steps, repeat):
    rng = np.random.default_rng(0)
    b = rng.standard_normal((n, d)) / np.sqrt(d)
    idx = rng.integers(0, n, steps)
    w0 = np.zeros(d)
    center = np.zeros(d)
    its = np.empty((0, d))
    args = (w0, 0.5, b, idx, 0.01, center, 1.0, its)
    K._sgd_affine_jit(*args)
    t_jit, (a1, l1) = best_of(lambda: K._sgd_affine_jit(*args), repeat)
    t_np, (a2, l2) = best_of(lambda: K._sgd_affine_np(*args), repeat)
    assert np.allclose(a1, a2, atol=1e-10) and np.allclose(l1, l2, atol=1e-10)
    return t_jit, t_np


def bench_nonsmooth(d, kk, m, repeat):
    rng = np.random.default_rng(1)
    V = sample_subspace(d, d // 2, rng=rng)
    X = sample_subspace(d, kk, orthogonal_to=V, rng=rng)
    pts = rng.standard_normal((m, d)) / np.sqrt(d)
    args = (pts, X.vectors, V.vectors, 0.1, 1e-12)
    K._nonsmooth_eval_jit(*args)
    t_jit, r1 = best_of(lambda: K._nonsmooth_eval_jit(*args), repeat)
    t_np, r2 = best_of(lambda: K._nonsmooth_eval_np(*args), repeat)
    assert np.allclose(r1[0], r2[0], atol=1e-12) and np.array_equal(r1[2], r2[2])
    return t_jit, t_np


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rows = []
    for d, steps in [(16, 20_000), (128, 20_000), (1024, 5_000)]:
        rows.append((f"sgd_affine d={d} steps={steps}", *bench_sgd(d, 4096, steps, args.repeat)))
    for d, kk, m in [(64, 6, 16), (256, 6, 256), (1024, 24, 64)]:
        rows.append((f"nonsmooth_eval d={d} K={kk} m={m}",
                     *bench_nonsmooth(d, kk, m, args.repeat)))
    print(f"{'kernel':40s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, tj, tn in rows:
        print(f"{name:40s} {1e3 * tj:10.3f} {1e3 * tn:10.3f} {tn / tj:8.1f}")


if __name__ == "__main__":
    main()
