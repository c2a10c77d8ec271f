"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--sizes 32 64 172] [--repeat 3]

Prints one line per kernel and size with the best-of-N wall time of each
implementation and the speedup. Exits 1 if the extension is not built.
"""

import argparse
import sys
import time

import numpy as np

from osaq import _pykernels
from osaq.quantizer import damped_inverse_factor

try:
    from osaq import _ckernels
except ImportError:
    _ckernels = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def bench_jacobi(kernels, n, repeat, seed=0):
    a = np.random.default_rng(seed).standard_normal((n, n))
    a = a + a.T
    tol = 1e-12 * np.linalg.norm(a)

    def run():
        kernels.jacobi_sweeps(a.copy(), np.eye(n), tol, 100)

    return best_of(run, repeat)


def bench_compensate(kernels, n, repeat, seed=0, rows=None):
    rng = np.random.default_rng(seed)
    rows = rows or n
    x = rng.standard_normal((4 * n, n))
    u = damped_inverse_factor(2 / (4 * n) * x.T @ x, 0.01)
    w = rng.standard_normal((rows, n))

    def run():
        bufs = [np.zeros((rows, 1)) for _ in range(3)]
        kernels.compensate_columns(w.copy(), u, n, 7, *bufs, np.zeros((rows, n)))

    return best_of(run, repeat)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+", default=[32, 64, 172])
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1
    print(f"{'kernel':<20}{'n':>6}{'cython s':>12}{'python s':>12}{'speedup':>10}")
    for name, bench in (("jacobi_sweeps", bench_jacobi), ("compensate_columns", bench_compensate)):
        for n in args.sizes:
            fast = bench(_ckernels, n, args.repeat)
            slow = bench(_pykernels, n, args.repeat)
            print(f"{name:<20}{n:>6}{fast:>12.4f}{slow:>12.4f}{slow / fast:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
