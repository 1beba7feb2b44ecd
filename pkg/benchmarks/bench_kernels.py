"""Compare the compiled and numpy bilinear kernels.

    python benchmarks/bench_kernels.py [--repeat 5]

Times the raw gather/scatter pair and a full deformable-conv forward+backward
at a few feature-map sizes, and checks the two backends agree bit for bit.
"""
import argparse
import time

import numpy as np

from megan import blocks, kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def bench_kernels(N, C, H, W, repeat):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((N, C, H, W))
    P = 9 * H * W
    py = rng.uniform(-1, H, (N, P))
    px = rng.uniform(-1, W, (N, P))
    dv = rng.standard_normal((N, C, P))
    row = {}
    for b in ("python", "cython"):
        def run():
            kernels.bilinear_gather(x, py, px, backend=b)
            kernels.bilinear_scatter(dv, x, py, px, backend=b)
        row[b] = best_of(run, repeat)
    same = np.array_equal(kernels.bilinear_gather(x, py, px, backend="python"),
                          kernels.bilinear_gather(x, py, px, backend="cython"))
    return row, same


def bench_deform(N, C, H, W, repeat):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((N, C, H, W))
    off = rng.uniform(-2, 2, (N, 18, H, W))
    w = rng.standard_normal((C, C, 3, 3)) * 0.1
    row = {}
    for b in ("python", "cython"):
        def run():
            with kernels.use_backend(b):
                out, cache = blocks.deform_conv2d_forward(x, off, None, w)
                blocks.deform_conv2d_backward(np.ones_like(out), cache)
        row[b] = best_of(run, repeat)
    return row


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if "cython" not in _available():
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    print(f"{'case':<34s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for shape in [(1, 16, 16, 16), (1, 16, 32, 32), (2, 16, 64, 64)]:
        row, same = bench_kernels(*shape, args.repeat)
        tag = "gather+scatter N%d C%d %dx%d" % shape
        print(f"{tag:<34s} {row['python'] * 1e3:10.2f} {row['cython'] * 1e3:10.2f} "
              f"{row['python'] / row['cython']:7.1f}x{'' if same else '  MISMATCH'}")
    for shape in [(1, 16, 16, 16), (1, 16, 32, 32)]:
        row = bench_deform(*shape, args.repeat)
        tag = "deform conv fwd+bwd N%d C%d %dx%d" % shape
        print(f"{tag:<34s} {row['python'] * 1e3:10.2f} {row['cython'] * 1e3:10.2f} "
              f"{row['python'] / row['cython']:7.1f}x")


def _available():
    try:
        from megan import _kernels_ext  # noqa: F401
        return ("python", "cython")
    except ImportError:
        return ("python",)


if __name__ == "__main__":
    main()
