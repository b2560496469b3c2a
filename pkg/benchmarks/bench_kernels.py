"""Time the numba and numpy versions of the hot kernels side by side.

    python benchmarks/bench_kernels.py [--repeat 5] [--tsne-n 1000]

Both paths are called directly (``*_nb`` / ``*_np``), so the result does not
depend on ``OCTFEW_DISABLE_NUMBA``.  The first numba call (JIT compile, or a
cache load) is excluded from the timings.
"""
import argparse
import math
import time

import numpy as np

from octfew import kernels
from octfew.augment import SampledParams, inverse_matrix
from octfew.embed import pairwise_sq_dists


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_warp(repeat, size):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (size, size, 1)).astype(np.float64)
    inv = inverse_matrix(SampledParams(dx=0.03, dy=-0.02, theta=17.0, zoom=0.1), size, size)
    np.testing.assert_allclose(kernels._warp_affine_nb(img, inv), kernels._warp_affine_np(img, inv), atol=1e-9)
    batch = 50
    return (best_of(lambda: [kernels._warp_affine_nb(img, inv) for _ in range(batch)], repeat) / batch,
            best_of(lambda: [kernels._warp_affine_np(img, inv) for _ in range(batch)], repeat) / batch)


def bench_affinities(repeat, n):
    rng = np.random.default_rng(1)
    d2 = pairwise_sq_dists(rng.normal(size=(n, 64)))
    args = (d2, math.log(30.0), 1e-10, 200)
    kernels._conditional_p_nb(*args)
    return (best_of(lambda: kernels._conditional_p_nb(*args), repeat),
            best_of(lambda: kernels._conditional_p_np(*args), repeat))


def bench_gradient(repeat, n):
    rng = np.random.default_rng(2)
    Y = rng.normal(size=(n, 3))
    P = rng.random((n, n))
    P = P + P.T
    np.fill_diagonal(P, 0.0)
    P /= P.sum()
    kernels._tsne_grad_nb(Y, P, 1.0)
    return (best_of(lambda: kernels._tsne_grad_nb(Y, P, 1.0), repeat),
            best_of(lambda: kernels._tsne_grad_np(Y, P, 1.0), repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--warp-size", type=int, default=128)
    ap.add_argument("--tsne-n", type=int, default=1000)
    args = ap.parse_args(argv)

    rows = [
        (f"warp_affine {args.warp_size}x{args.warp_size}", *bench_warp(args.repeat, args.warp_size)),
        (f"tsne affinities N={args.tsne_n}", *bench_affinities(args.repeat, args.tsne_n)),
        (f"tsne gradient N={args.tsne_n}", *bench_gradient(args.repeat, args.tsne_n)),
    ]
    print(f"{'kernel':32s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, nb, npy in rows:
        print(f"{name:32s} {nb * 1e3:10.3f} {npy * 1e3:10.3f} {npy / nb:7.1f}x")


if __name__ == "__main__":
    main()
