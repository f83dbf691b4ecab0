"""Time the conv2d paths on the shapes used inside the DMC modules.

Reports ns per multiply-accumulate for the default and im2col paths, and the
relative error of each against the nested-loop oracle on a cropped copy.

    python scripts/bench_conv.py [--size 88] [--channels 32] [--threads 4]
"""
import argparse
import time

import numpy as np

from codnet import tensor as T
from codnet.tensor import ConvSpec

SHAPES = [(3, 3, 1), (1, 5, 1), (5, 1, 1), (1, 7, 1), (7, 1, 1), (3, 3, 5), (3, 3, 7), (1, 1, 1)]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=88)
    ap.add_argument("--channels", type=int, default=32)
    ap.add_argument("--threads", type=int, default=T.get_num_threads())
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    c, n = args.channels, args.size
    print(f"{'kernel':>10s} {'default ns/MAC':>15s} {'im2col ns/MAC':>14s} {'rel err':>9s}")
    for kh, kw, d in SHAPES:
        spec = ConvSpec.same(kh, kw, c, c, dilation=d)
        x = rng.standard_normal((1, c, n, n)).astype(np.float32)
        w = (rng.standard_normal(spec.weight_shape) * 0.1).astype(np.float32)
        b = np.zeros(c, np.float32)
        macs = c * c * kh * kw * n * n
        t_def = best_of(lambda: T.conv2d(x, w, b, spec, threads=args.threads), args.repeat)
        t_col = best_of(lambda: T.conv2d_im2col(x, w, b, spec), args.repeat)
        small = ConvSpec.same(kh, kw, 2, 2, dilation=d)
        xs, ws = x[:, :2, :12, :12].astype(np.float64), w[:2, :2].astype(np.float64)
        ref = T.conv2d_oracle(xs, ws, None, small)
        err = np.abs(T.conv2d(xs, ws, None, small) - ref).max() / max(np.abs(ref).max(), 1e-30)
        label = f"{kh}x{kw}" + (f"@d{d}" if d > 1 else "")
        print(f"{label:>10s} {t_def / macs * 1e9:15.3f} {t_col / macs * 1e9:14.3f} {err:9.1e}")


if __name__ == "__main__":
    main()
