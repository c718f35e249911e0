"""Time the numba kernels against their numpy fallbacks.

Usage::

    python benchmarks/bench_kernels.py [--spots 4000] [--genes 128] [--repeat 5]

Each kernel is called once per backend for warm-up (numba compiles on the
first call), then timed ``--repeat`` times; the best time is reported.
Outputs are compared so a speed-up never hides a wrong answer.
"""

import argparse
import time

import numpy as np

from spackle import kernels, synth
from spackle.data import HOP_RADIUS_MARGIN
from spackle.preprocess import knn_edges


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(n_spots, n_genes, seed):
    rng = np.random.default_rng(seed)
    side = int(np.ceil(np.sqrt(n_spots)))
    coords, _, _ = synth.hex_grid(side, side, 1.0)
    coords = coords[:n_spots]
    vals = rng.normal(5, 1, (len(coords), n_genes))
    avail = rng.random(vals.shape) > 0.3
    nbr = kernels.radius_knn(coords, 60, 4 * HOP_RADIUS_MARGIN)
    safe = np.where(nbr < 0, 0, nbr)
    dist = np.linalg.norm(coords[safe] - coords[:, None], axis=-1)
    dist[nbr < 0] = np.inf
    radii = np.arange(1, 5) * HOP_RADIUS_MARGIN
    region_end = (dist[:, :, None] <= radii).sum(axis=1).astype(np.int64)
    med = np.median(vals, axis=0)
    src, dst = knn_edges(coords, 6)
    z = vals - vals.mean(0)
    x = rng.standard_normal((256 * 19, 128)).astype(np.float32)
    gamma = np.ones(128, np.float32)
    beta = np.zeros(128, np.float32)
    y, xh, rstd = kernels.layernorm_fwd(x, gamma, beta, 1e-5, backend="numpy")
    dy = rng.standard_normal(x.shape).astype(np.float32)
    return {
        "radius_knn": lambda b: kernels.radius_knn(coords, 60, 4 * HOP_RADIUS_MARGIN, backend=b),
        "median_fill": lambda b: kernels.median_fill(vals, avail, nbr, region_end, med, backend=b)[0],
        "edge_cross_sum": lambda b: kernels.edge_cross_sum(src, dst, z, backend=b),
        "layernorm_fwd": lambda b: kernels.layernorm_fwd(x, gamma, beta, 1e-5, backend=b)[0],
        "layernorm_bwd": lambda b: kernels.layernorm_bwd(dy, gamma, xh, rstd, backend=b)[0],
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--spots", type=int, default=4000)
    ap.add_argument("--genes", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    print(f"{'kernel':<16}{'numpy [ms]':>12}{'numba [ms]':>12}{'speed-up':>10}  agree")
    for name, fn in cases(args.spots, args.genes, args.seed).items():
        a, b = fn("numpy"), fn("numba")
        agree = np.allclose(a, b, rtol=1e-5, atol=1e-5)
        t_np = best_of(lambda: fn("numpy"), args.repeat)
        t_nb = best_of(lambda: fn("numba"), args.repeat)
        print(f"{name:<16}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}{t_np / t_nb:>9.1f}x  {agree}")


if __name__ == "__main__":
    main()
