"""Slow, obviously-correct reference implementations used by several tests."""

import numpy as np


def median_region_oracle(coords, values, avail, global_med, max_hops=4, min_observed=1, margin=1.05):
    """Brute-force adaptive median: enumerate every spot inside each hop radius."""
    n, g = values.shape
    d_all = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    off = d_all.copy()
    np.fill_diagonal(off, np.inf)
    spacing = np.median(off.min(axis=1)) if n > 1 else 1.0
    out = values.astype(np.float64).copy()
    src = np.zeros((n, g), dtype=np.int8)
    for i in range(n):
        for j in range(g):
            if avail[i, j]:
                continue
            for h in range(1, max_hops + 1):
                r = h * spacing * margin
                vals = values[(off[i] <= r) & avail[:, j], j]  # off[i, i] is inf
                if vals.size >= min_observed:
                    out[i, j] = float(np.median(vals))
                    src[i, j] = h
                    break
            else:
                out[i, j] = global_med[j]
                src[i, j] = -1
    return out, src


def global_median_oracle(slides, g):
    return np.array([np.median(np.concatenate([s.expr[s.observed[:, j], j] for s in slides])) for j in range(g)])
