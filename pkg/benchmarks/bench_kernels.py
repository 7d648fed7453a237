"""Compiled versus numpy kernels: choke rate with partials, and steady-state flags.

    python benchmarks/bench_kernels.py [--n 100000] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from grayvfm import _kernels_py
from grayvfm.physics import PhysicalConstants

try:
    from grayvfm import _ckernels
except ImportError:
    _ckernels = None


def choke_args(n, seed=0):
    rng = np.random.default_rng(seed)
    c = PhysicalConstants()
    p1 = rng.uniform(50, 150, n)
    p2 = p1 * (1 - rng.uniform(0.02, 0.9, n))
    w_g = rng.uniform(0.02, 0.15, n)
    return (p1, p2, rng.uniform(320, 380, n), w_g, rng.uniform(0.3, 0.8, n) * (1 - w_g), rng.uniform(0, 100, n),
            810.0, 1020.0, c.N, c.M_w, c.z_g, c.R, c.x_tp, c.rho_o_st)


def steady_args(n, seed=0):
    rng = np.random.default_rng(seed)
    x = np.repeat(rng.uniform(0.1, 1.0, (2, n // 20 + 1)), 20, axis=1)[:, :n]
    x = x + 1e-4 * rng.standard_normal(x.shape)
    return np.ascontiguousarray(x), 8, np.array([0.004, 0.004])


def best(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    cases = [("choke_partials", choke_args(args.n)), ("steady_flags", steady_args(args.n))]
    print(f"{'kernel':<16}{'n':>9}{'numpy [ms]':>13}{'cython [ms]':>13}{'speedup':>9}")
    for name, a in cases:
        t_py = best(getattr(_kernels_py, name), a, args.repeat)
        if _ckernels is None:
            print(f"{name:<16}{args.n:>9}{1e3 * t_py:>13.2f}{'n/a':>13}{'':>9}")
            continue
        t_c = best(getattr(_ckernels, name), a, args.repeat)
        print(f"{name:<16}{args.n:>9}{1e3 * t_py:>13.2f}{1e3 * t_c:>13.2f}{t_py / t_c:>8.1f}x")


if __name__ == "__main__":
    main()
