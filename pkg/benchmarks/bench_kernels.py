"""Time the numba and numpy paths of the hot kernels.

    python benchmarks/bench_kernels.py [--particles 100000] [--repeat 3]

The sizes mirror one SDE step of a production run: ~1e5 particles, a mixture
score with a handful of components, and per-particle kernel scores for a
denoising batch.
"""

import argparse
import time

import numpy as np

from torus_sgm import _kernels
from torus_sgm.heat import DEFAULT_CONFIG as CFG


def best_of(fn, repeat):
    fn()  # warm-up (compilation on the numba path)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(n, rng):
    R = 1.0
    tail = (R, CFG.image_truncation, CFG.spectral_cutoff, CFG.crossover(R))
    x = rng.random((n, 1))
    means = rng.random((3, 1))
    times = np.full(3, 0.05)
    logw = np.log(np.full(3, 1 / 3))
    drift = rng.normal(size=x.shape)
    u = rng.random(2 * ((n + 1) // 2))
    dx = rng.uniform(-0.5, 0.5, size=(n, 1))
    t = rng.uniform(1e-3, 0.5, n)
    return {
        "mixture_eval": lambda jit: _kernels.mixture_eval(x, means, times, logw, *tail, order=1, use_jit=jit),
        "em_step": lambda jit: _kernels.em_step(x.copy(), drift, 1e-3, u, R, use_jit=jit),
        "kernel_score": lambda jit: _kernels.kernel_score(dx, t, *tail, use_jit=jit),
    }


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--particles", type=int, default=100_000)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<14}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}")
    for name, fn in cases(args.particles, rng).items():
        a = best_of(lambda: fn(True), args.repeat)
        b = best_of(lambda: fn(False), args.repeat)
        print(f"{name:<14}{1e3 * a:>12.2f}{1e3 * b:>12.2f}{b / a:>10.1f}")


if __name__ == "__main__":
    main()
