"""Time the compiled convolution kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeats N]

Shapes follow the desk-scale denoiser (16 hidden channels, 3x3 kernels) on
batches of 8 images of 16 and 32 pixels per side.
"""

import argparse
import timeit

import numpy as np

from deqei import kernels

SHAPES = [
    # (batch, in, out, size, kernel)
    (8, 1, 16, 16, 3),
    (8, 16, 16, 16, 3),
    (8, 16, 16, 32, 3),
    (8, 2, 16, 32, 3),
]


def bench(backend, fn, args, repeats):
    f = getattr(backend, fn)
    f(*args)  # warm up
    return min(timeit.repeat(lambda: f(*args), number=5, repeat=repeats)) / 5


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    if kernels.compiled_backend is None:
        raise SystemExit("compiled extension is not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'shape (B,C,O,N,k)':<22}{'kernel':<24}{'cython ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for B, C, O, N, k in SHAPES:
        x = rng.standard_normal((B, C, N, N))
        w = rng.standard_normal((O, C, k, k))
        b = rng.standard_normal(O)
        g = rng.standard_normal((B, O, N, N))
        cases = [("conv2d_forward", (x, w, b)), ("conv2d_backward_input", (g, w)),
                 ("conv2d_backward_weight", (x, g, k))]
        for fn, fargs in cases:
            tc = bench(kernels.compiled_backend, fn, fargs, args.repeats)
            tp = bench(kernels.python_backend, fn, fargs, args.repeats)
            print(f"{str((B, C, O, N, k)):<22}{fn:<24}{tc * 1e3:>10.3f}{tp * 1e3:>10.3f}{tp / tc:>8.2f}x")


if __name__ == "__main__":
    main()
