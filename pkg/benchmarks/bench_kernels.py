"""Compiled vs numpy convolution and pooling kernels.

Run with ``python3 benchmarks/bench_kernels.py``. Shapes match the default
trunk on a batch of 32 16x16 patches.
"""

import argparse
import timeit

import numpy as np

from shortcut_probe import _kernels_py as numpy_impl

try:
    from shortcut_probe import _kernels as compiled_impl
except ImportError:
    compiled_impl = None

SHAPES = [(32, 3, 16, 16), (32, 8, 8, 8)]


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def bench(impl, x, repeat, number):
    n, c, h, w = x.shape
    cols = impl.im2col3x3(x)
    pooled = impl.avgpool2x2(x)
    return {
        "im2col3x3": best_of(lambda: impl.im2col3x3(x), repeat, number),
        "col2im3x3": best_of(lambda: impl.col2im3x3(cols, n, c, h, w), repeat, number),
        "avgpool2x2": best_of(lambda: impl.avgpool2x2(x), repeat, number),
        "avgpool2x2_backward": best_of(lambda: impl.avgpool2x2_backward(pooled, h, w), repeat, number),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=200)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'shape':<18}{'numpy us':>10}{'cython us':>11}{'speedup':>9}")
    for shape in SHAPES:
        x = rng.standard_normal(shape)
        ref = bench(numpy_impl, x, args.repeat, args.number)
        fast = bench(compiled_impl, x, args.repeat, args.number) if compiled_impl else {}
        for name, t in ref.items():
            if name in fast:
                print(f"{name:<22}{str(shape):<18}{t * 1e6:>10.1f}{fast[name] * 1e6:>11.1f}"
                      f"{t / fast[name]:>8.2f}x")
            else:
                print(f"{name:<22}{str(shape):<18}{t * 1e6:>10.1f}{'n/a':>11}{'':>9}")
    if compiled_impl is None:
        print("compiled extension not built; only the numpy path was timed")


if __name__ == "__main__":
    main()
