"""Time the compiled and numpy sampling kernels on the same inputs.

    python3 benchmarks/bench_kernels.py [--size 96] [--repeat 5]

Prints the best wall time per backend and checks that both agree bitwise.
"""

import argparse
import timeit

import numpy as np

from dentatlas import kernels


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=96, help="cubic grid size")
    ap.add_argument("--channels", type=int, default=2)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    n = args.size
    data = rng.random((args.channels, n, n, n))
    # a smooth warp of the identity grid, with some samples leaving the domain
    coords = np.indices((n, n, n), dtype=np.float64) + rng.normal(scale=1.5, size=(3, n, n, n))

    backends = ["python"]
    try:
        from dentatlas import _ckernels  # noqa: F401

        backends.insert(0, "cython")
    except ImportError:
        print("compiled extension not built; timing the numpy backend only")

    results = {}
    for name in ("trilinear", "nearest"):
        fn = getattr(kernels, name)
        for b in backends:
            for clamp in (False, True):
                t = min(timeit.repeat(lambda: fn(data, coords, clamp, backend=b), number=1, repeat=args.repeat))
                results[(name, clamp, b)] = (t, fn(data, coords, clamp, backend=b))

    print(f"{args.channels} channel(s), {n}^3 samples, best of {args.repeat}")
    print(f"{'kernel':<10} {'clamp':<6} " + " ".join(f"{b:>10}" for b in backends) + "   speedup  identical")
    for name in ("trilinear", "nearest"):
        for clamp in (False, True):
            times = [results[(name, clamp, b)][0] for b in backends]
            row = f"{name:<10} {str(clamp):<6} " + " ".join(f"{t * 1e3:8.1f}ms" for t in times)
            if len(backends) == 2:
                same = np.array_equal(results[(name, clamp, "cython")][1], results[(name, clamp, "python")][1])
                row += f"   {times[1] / times[0]:6.1f}x  {same}"
            print(row)


if __name__ == "__main__":
    main()
