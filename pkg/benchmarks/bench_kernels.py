"""Compiled vs numpy kernel timings.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from dosepred._kernels import compiled, pure


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    x16 = rng.normal(size=(16, 34, 34, 34)).astype(np.float32)       # padded 32^3, 16 ch
    cols = np.empty((16 * 64, 16 * 16 * 16), np.float32)
    up = rng.normal(size=(32, 16, 16, 16)).astype(np.float32)
    upg = rng.normal(size=(32, 32, 32, 32)).astype(np.float32)
    xd = rng.normal(size=(32, 66, 66, 66)).astype(np.float32)
    wd = rng.normal(size=(1, 32, 3, 3, 3)).astype(np.float32)
    rho = rng.uniform(0, 1.5, (64, 64, 64))
    pts = rng.uniform(-100, 100, (4000, 3))
    cols_in = rng.normal(size=cols.shape).astype(np.float32)

    def k(mod):
        return {
            "vol2col k4 s2 (16ch, 32^3)": lambda: mod.vol2col(x16, 4, 2, 0, 16, 16, 16),
            "col2vol k4 s2 (16ch, 32^3)": lambda: mod.col2vol(cols_in, np.zeros_like(x16), 4, 2, 0, 16, 16, 16),
            "upsample x2 (32ch, 16^3)": lambda: mod.upsample2x(up),
            "upsample adjoint (32ch, 32^3)": lambda: mod.upsample2x_adjoint(upg),
            "direct conv 32->1 (64^3)": lambda: mod.direct_conv(xd, wd, np.zeros((1, 64, 64, 64), np.float32)),
            "ray march 4000 rays (64^3)": lambda: mod.radiological_depths(
                rho, (3.0, 3.0, 3.0), (-94.5, -94.5, -94.5), (0.0, -1000.0, 0.0), pts, 1.5),
        }
    return k


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=3)
    a = ap.parse_args()
    make = cases(np.random.default_rng(0))
    ref = make(pure)
    fast = make(compiled) if compiled is not None else {}
    print(f"{'kernel':34s} {'numpy [ms]':>11s} {'cython [ms]':>12s} {'speedup':>8s}")
    for name, fn in ref.items():
        tp = best_of(fn, a.repeat)
        if name in fast:
            tc = best_of(fast[name], a.repeat)
            print(f"{name:34s} {1e3 * tp:11.1f} {1e3 * tc:12.1f} {tp / tc:7.1f}x")
        else:
            print(f"{name:34s} {1e3 * tp:11.1f} {'n/a':>12s}")


if __name__ == "__main__":
    main()
