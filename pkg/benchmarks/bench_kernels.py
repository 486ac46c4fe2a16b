"""Time the compiled kernels against their numpy fallbacks.

Shapes mirror the MNIST profile: Fisher folding over a 784x400 weight with
256-example chunks, and one Adam step over the parameters of a full path.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import statistics
import sys
import time

import numpy as np

from rpsnet import kernels

try:
    from rpsnet._ext import core
except ImportError:
    core = None


def timed(fn, repeat):
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return statistics.median(out)


def fisher_case(rng, n, na, nb):
    x = rng.random((n, na))
    x[x < 0.8] = 0.0  # MNIST pixels are mostly zero
    d = rng.standard_normal((n, nb))
    return x, d


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if core is None:
        print("compiled core not built; run `pip install -e . --no-build-isolation` first")
        return 1
    rng = np.random.default_rng(args.seed)
    rows = []

    for n, na, nb in [(256, 784, 400), (256, 400, 400), (256, 400, 10)]:
        x, d = fisher_case(rng, n, na, nb)
        a, b = np.zeros((na, nb)), np.zeros((na, nb))
        t_np = timed(lambda: kernels.outer_sq_max_numpy(x, d, a), args.repeat)
        t_c = timed(lambda: core.outer_sq_max(x, d, b), args.repeat)
        assert np.array_equal(a, b)
        rows.append((f"outer_sq_max {n}x{na}x{nb}", t_np, t_c))

    size = 784 * 400 + 3 * 400 * 400 + 400 * 10
    p0, g0 = rng.standard_normal(size), rng.standard_normal(size)

    def adam_state():
        return p0.copy(), g0.copy(), np.zeros(size), np.zeros(size)

    sa, sb = adam_state(), adam_state()

    def step(fn, s):
        s[1][...] = g0
        fn(*s, 1e-3, 0.9, 0.999, 1e-8, 1.0)

    t_np = timed(lambda: step(kernels.adam_update_numpy, sa), args.repeat)
    t_c = timed(lambda: step(core.adam_update, sb), args.repeat)
    assert np.array_equal(sa[0], sb[0])
    rows.append((f"adam_update n={size}", t_np, t_c))

    print(f"{'kernel':<32}{'numpy ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, t_np, t_c in rows:
        print(f"{name:<32}{t_np * 1e3:>12.2f}{t_c * 1e3:>12.2f}{t_np / t_c:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
