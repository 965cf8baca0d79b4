"""Timing comparison of the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeats N]

Covers the two hot loops (direct conv forward, implicit conv row-sum
scan) on shapes from toy through imagenet-ish depthwise stacks.
"""

import argparse
import time

import numpy as np

from qbound import _core_py

try:
    from qbound import _core
except ImportError:
    _core = None

CASES = [
    # label, batch, in_ch, hw, out_ch, kernel, stride, pad, groups
    ("toy 3x3", 8, 4, 8, 8, 8, 3, 1, 1, 1),
    ("cifar-ish 3x3", 8, 16, 32, 32, 32, 3, 1, 1, 1),
    ("stride-2 3x3", 4, 32, 56, 56, 32, 3, 2, 1, 1),
    ("depthwise 3x3", 4, 64, 56, 56, 64, 3, 1, 1, 64),
    ("pointwise 1x1", 4, 96, 28, 28, 96, 1, 1, 0, 1),
]


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    if _core is None:
        print("compiled extension unavailable; timing the fallback only")
    rng = np.random.default_rng(0)
    header = f"{'case':<16} {'kernel':<12} {'numpy':>10} {'compiled':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for label, b, c, h, w, o, p, s, pad, g in CASES:
        x = rng.normal(size=(b, c, h, w))
        wt = rng.normal(size=(o, c // g, p, p))
        rows = [
            ("conv2d", lambda m: lambda: m.conv2d_forward(x, wt, s, pad, g)),
            ("rowsum", lambda m: lambda: m.conv_rowsum_max(wt, h, w, s, pad, g)),
        ]
        for kname, make in rows:
            t_py = _time(make(_core_py), args.repeats)
            if _core is not None:
                t_cy = _time(make(_core), args.repeats)
                print(f"{label:<16} {kname:<12} {t_py * 1e3:>8.2f}ms {t_cy * 1e3:>8.2f}ms {t_py / t_cy:>7.2f}x")
            else:
                print(f"{label:<16} {kname:<12} {t_py * 1e3:>8.2f}ms {'-':>10} {'-':>8}")


if __name__ == "__main__":
    main()
