"""Time the compiled and pure-Python kernel backends side by side.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from trackcast.kernels import BACKENDS


def random_boxes(rng, n):
    xz = rng.uniform(-15, 15, (n, 2))
    dims = rng.uniform(1.0, 5.0, (n, 3))
    return np.column_stack([xz[:, 0], rng.uniform(0.5, 1.5, n), xz[:, 1], dims, rng.uniform(-np.pi, np.pi, n)])


def cases(rng):
    for n in (5, 20, 50):
        cost = rng.uniform(0, 1, (n, n))
        yield f"assignment n={n}", "solve_assignment", (cost,)
    for n in (10, 30):
        yield f"iou3d {n}x{n}", "iou3d_matrix", (random_boxes(rng, n), random_boxes(rng, n))


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    names = sorted(BACKENDS)
    print(f"{'case':<20}" + "".join(f"{n + ' (ms)':>16}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    for label, fn, inputs in cases(np.random.default_rng(0)):
        ref = None
        times = {}
        for name in names:
            f = getattr(BACKENDS[name], fn)
            out = f(*inputs)
            if ref is None:
                ref = out
            elif not np.array_equal(ref, out):
                raise SystemExit(f"{label}: backends disagree")
            number = 3
            best = min(timeit.repeat(lambda: f(*inputs), number=number, repeat=args.repeat)) / number
            times[name] = best * 1e3
        row = f"{label:<20}" + "".join(f"{times[n]:>16.3f}" for n in names)
        if "compiled" in times:
            row += f"{times['pure'] / times['compiled']:>11.1f}x"
        print(row)
    if "compiled" not in BACKENDS:
        print("compiled extension not built; only the pure backend was timed")


if __name__ == "__main__":
    main()
