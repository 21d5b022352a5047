"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--shapes 48x16,4096x64] [--repeat 50]

Prints one line per kernel and shape with the median wall time of each
backend and the speedup. The small shape is typical of desk-scale attention
and layer-norm calls, where per-call overhead dominates. Both backends are imported directly, so the environment
variable that forces the fallback has no effect here.
"""
import argparse
import statistics
import time

import numpy as np

from unidial.autograd import _kernels_py as py

try:
    from unidial.autograd import _kernels as cy
except ImportError:
    cy = None


def median_time(fn, args, repeat):
    fn(*args)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cases(rows, cols, dtype):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((rows, cols)).astype(dtype)
    gy = rng.standard_normal((rows, cols)).astype(dtype)
    gain = rng.standard_normal(cols).astype(dtype)
    bias = rng.standard_normal(cols).astype(dtype)
    y = py.softmax_rows(x)
    _, xhat, rstd = py.layer_norm_rows(x, gain, bias, 1e-12)
    return {
        "softmax_rows": (x,),
        "softmax_rows_backward": (y, gy),
        "layer_norm_rows": (x, gain, bias, 1e-12),
        "layer_norm_rows_backward": (gy, xhat, rstd, gain),
        "gelu": (x.ravel(),),
        "gelu_backward": (x.ravel(), gy.ravel()),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--shapes", default="48x16,4096x64")
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    if cy is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    print(f"{'kernel':<26} {'shape':<9} {'dtype':<8} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}")
    for shape in args.shapes.split(","):
        rows, cols = (int(v) for v in shape.split("x"))
        for dtype in (np.float32, np.float64):
            for name, a in cases(rows, cols, dtype).items():
                head = f"{name:<26} {shape:<9} {np.dtype(dtype).name:<8}"
                tp = median_time(getattr(py, name), a, args.repeat) * 1e3
                if cy is None:
                    print(f"{head} {tp:>10.4f} {'-':>10} {'-':>8}")
                    continue
                tc = median_time(getattr(cy, name), a, args.repeat) * 1e3
                print(f"{head} {tp:>10.4f} {tc:>10.4f} {tp / tc:>7.2f}x")


if __name__ == "__main__":
    main()
