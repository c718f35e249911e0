"""Hot inner loops, each with a numba and a pure-numpy implementation.

Both implementations of a kernel return identical results (bit-for-bit for
the integer and selection kernels, and for the median fill; the Moran edge
sum agrees to rounding). Callers pick one with ``backend="numba"`` or
``backend="numpy"``; ``None`` means the process default, see
:mod:`spackle._accel`.
"""

import numpy as np

from ._accel import njit, resolve_backend

_CHUNK = 512


# ---------------------------------------------------------------------------
# radius-limited k nearest neighbours
# ---------------------------------------------------------------------------


@njit(cache=True)
def _radius_knn_nb(x, y, k, r2):
    n = x.shape[0]
    out = np.full((n, k), -1, dtype=np.int64)
    if k == 0:
        return out
    best_d = np.empty(k, dtype=np.float64)
    best_j = np.empty(k, dtype=np.int64)
    for i in range(n):
        filled = 0
        for j in range(n):
            if j == i:
                continue
            dx = x[j] - x[i]
            dy = y[j] - y[i]
            d2 = dx * dx + dy * dy
            if d2 > r2:
                continue
            d2 = np.float64(np.float32(d2))  # rank on float32 so lattice ties are exact ties
            if filled == k and d2 >= best_d[k - 1]:
                continue
            # insert after any equal distances: j is increasing, so ties keep index order
            pos = filled if filled < k else k - 1
            while pos > 0 and best_d[pos - 1] > d2:
                if pos < k:
                    best_d[pos] = best_d[pos - 1]
                    best_j[pos] = best_j[pos - 1]
                pos -= 1
            best_d[pos] = d2
            best_j[pos] = j
            if filled < k:
                filled += 1
        for m in range(filled):
            out[i, m] = best_j[m]
    return out


def _radius_knn_np(x, y, k, r2):
    n = x.shape[0]
    out = np.full((n, k), -1, dtype=np.int64)
    if k == 0 or n == 0:
        return out
    kk = min(k, n)
    for start in range(0, n, _CHUNK):
        rows = np.arange(start, min(start + _CHUNK, n))
        dx = x[None, :] - x[rows, None]
        dy = y[None, :] - y[rows, None]
        d2 = dx * dx + dy * dy
        d2[np.arange(rows.size), rows] = np.inf
        d2[d2 > r2] = np.inf
        d2 = d2.astype(np.float32)  # rank on float32 so lattice ties are exact ties
        order = np.argsort(d2, axis=1, kind="stable")[:, :kk]
        valid = np.isfinite(np.take_along_axis(d2, order, axis=1))
        block = np.where(valid, order, -1)
        out[rows, :kk] = block
    return out


def radius_knn(coords, k, radius=np.inf, backend=None):
    """Up to ``k`` nearest other points within ``radius`` of every point.

    Returns an ``(n, k)`` int64 array of indices ordered by ascending
    distance, ties broken by index; unused slots hold -1. Distances are
    ranked at float32 precision, so points that are equidistant up to
    rounding (every lattice) count as ties instead of being ordered by
    floating-point noise.
    """
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    x = np.ascontiguousarray(coords[:, 0])
    y = np.ascontiguousarray(coords[:, 1])
    r2 = float(radius) ** 2 if np.isfinite(radius) else np.inf
    if resolve_backend(backend) == "numba":
        return _radius_knn_nb(x, y, int(k), r2)
    return _radius_knn_np(x, y, int(k), r2)


# ---------------------------------------------------------------------------
# Moran's I cross-product over a graph's directed edges
# ---------------------------------------------------------------------------


@njit(cache=True)
def _edge_cross_sum_nb(src, dst, z):
    g = z.shape[1]
    acc = np.zeros(g, dtype=np.float64)
    for e in range(src.shape[0]):
        a = src[e]
        b = dst[e]
        for j in range(g):
            acc[j] += z[a, j] * z[b, j]
    return acc


def _edge_cross_sum_np(src, dst, z):
    acc = np.zeros(z.shape[1], dtype=np.float64)
    for start in range(0, src.shape[0], 8 * _CHUNK):
        s = src[start : start + 8 * _CHUNK]
        d = dst[start : start + 8 * _CHUNK]
        acc += np.einsum("ej,ej->j", z[s], z[d])
    return acc


def edge_cross_sum(src, dst, z, backend=None):
    """``sum_e z[src[e]] * z[dst[e]]`` for every column of ``z``."""
    src = np.ascontiguousarray(src, dtype=np.int64)
    dst = np.ascontiguousarray(dst, dtype=np.int64)
    z = np.ascontiguousarray(z, dtype=np.float64)
    if resolve_backend(backend) == "numba":
        return _edge_cross_sum_nb(src, dst, z)
    return _edge_cross_sum_np(src, dst, z)


# ---------------------------------------------------------------------------
# adaptive local median fill
# ---------------------------------------------------------------------------


@njit(cache=True)
def _median_fill_nb(values, avail, nbr, region_end, global_med, min_observed):
    n, g = values.shape
    n_hops = region_end.shape[1]
    out = values.copy()
    source = np.zeros((n, g), dtype=np.int8)
    buf = np.empty(nbr.shape[1], dtype=np.float64)
    for i in range(n):
        for j in range(g):
            if avail[i, j]:
                continue
            done = False
            for h in range(n_hops):
                m = 0
                for t in range(region_end[i, h]):
                    s = nbr[i, t]
                    if avail[s, j]:
                        buf[m] = values[s, j]
                        m += 1
                if m >= min_observed:
                    srt = np.sort(buf[:m])
                    half = m // 2
                    if m % 2 == 1:
                        out[i, j] = srt[half]
                    else:
                        out[i, j] = (srt[half - 1] + srt[half]) / 2.0
                    source[i, j] = h + 1
                    done = True
                    break
            if not done:
                out[i, j] = global_med[j]
                source[i, j] = -1
    return out, source


def _median_fill_np(values, avail, nbr, region_end, global_med, min_observed):
    n, g = values.shape
    n_hops = region_end.shape[1]
    out = values.copy()
    source = np.zeros((n, g), dtype=np.int8)
    pending = ~avail
    with np.errstate(all="ignore"):
        for start in range(0, n, _CHUNK):
            rows = slice(start, min(start + _CHUNK, n))
            todo = pending[rows].copy()
            if not todo.any():
                continue
            nb = nbr[rows]
            ends = region_end[rows]
            safe = np.where(nb < 0, 0, nb)
            gathered = values[safe]  # (b, K, g)
            ok = avail[safe] & (nb >= 0)[:, :, None]
            slot = np.arange(nb.shape[1])
            o = out[rows]  # views
            src = source[rows]
            for h in range(n_hops):
                in_region = (slot[None, :] < ends[:, h, None])[:, :, None]
                use = ok & in_region
                count = use.sum(axis=1)
                hit = todo & (count >= min_observed)
                if hit.any():
                    med = _nanmedian(np.where(use, gathered, np.nan))
                    o[hit] = med[hit]
                    src[hit] = h + 1
                    todo &= ~hit
            if todo.any():
                idx = np.nonzero(todo)
                o[idx] = global_med[idx[1]]
                src[idx] = -1
    return out, source


def _nanmedian(a):
    # median over axis 1 ignoring NaN; even counts average the two middle values
    # exactly as (lo + hi) / 2 to match the jitted kernel bit for bit
    srt = np.sort(a, axis=1)  # NaN sorts last
    cnt = np.sum(~np.isnan(a), axis=1)
    half = cnt // 2
    lo_idx = np.clip(np.where(cnt % 2 == 1, half, half - 1), 0, a.shape[1] - 1)
    hi_idx = np.clip(half, 0, a.shape[1] - 1)
    lo = np.take_along_axis(srt, lo_idx[:, None, :], axis=1)[:, 0, :]
    hi = np.take_along_axis(srt, hi_idx[:, None, :], axis=1)[:, 0, :]
    return np.where(cnt % 2 == 1, lo, (lo + hi) / 2.0)


def median_fill(values, avail, nbr, region_end, global_med, min_observed=1, backend=None):
    """Fill every unavailable cell with the median of available neighbours.

    Parameters
    ----------
    values : (n, g) float array
    avail : (n, g) bool array
        Cells that may be read and are left untouched.
    nbr : (n, K) int array
        Neighbours sorted by distance, -1 padded.
    region_end : (n, H) int array
        ``region_end[i, h]`` is the number of leading entries of ``nbr[i]``
        lying within ``h + 1`` hops.
    global_med : (g,) float array
        Fallback when no radius reaches ``min_observed`` available values.

    Returns
    -------
    filled : (n, g) float64 array
    source : (n, g) int8 array
        0 for untouched cells, ``h`` for a fill from the ``h``-hop region,
        -1 for a global-median fill.
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    avail = np.ascontiguousarray(avail, dtype=np.bool_)
    nbr = np.ascontiguousarray(nbr, dtype=np.int64)
    region_end = np.ascontiguousarray(region_end, dtype=np.int64)
    global_med = np.ascontiguousarray(global_med, dtype=np.float64)
    if resolve_backend(backend) == "numba":
        return _median_fill_nb(values, avail, nbr, region_end, global_med, int(min_observed))
    return _median_fill_np(values, avail, nbr, region_end, global_med, int(min_observed))


# ---------------------------------------------------------------------------
# layer normalisation over the last axis of a 2-D array
# ---------------------------------------------------------------------------


@njit(cache=True)
def _ln_fwd_nb(x, gamma, beta, eps):
    n, d = x.shape
    y = np.empty_like(x)
    xh = np.empty_like(x)
    rstd = np.empty((n, 1), dtype=x.dtype)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        r = 1.0 / np.sqrt(var / d + eps)
        rstd[i, 0] = r
        for j in range(d):
            v = (x[i, j] - mu) * r
            xh[i, j] = v
            y[i, j] = v * gamma[j] + beta[j]
    return y, xh, rstd


@njit(cache=True)
def _ln_bwd_nb(dy, gamma, xh, rstd):
    n, d = dy.shape
    dx = np.empty_like(dy)
    dgamma = np.zeros(d, dtype=np.float64)
    dbeta = np.zeros(d, dtype=np.float64)
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            g = dy[i, j] * gamma[j]
            s1 += g
            s2 += g * xh[i, j]
            dgamma[j] += dy[i, j] * xh[i, j]
            dbeta[j] += dy[i, j]
        s1 /= d
        s2 /= d
        r = rstd[i, 0]
        for j in range(d):
            dx[i, j] = r * (dy[i, j] * gamma[j] - s1 - xh[i, j] * s2)
    return dx, dgamma.astype(dy.dtype), dbeta.astype(dy.dtype)


def _ln_fwd_np(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xh = xc * rstd
    return xh * gamma + beta, xh, rstd


def _ln_bwd_np(dy, gamma, xh, rstd):
    dxh = dy * gamma
    dx = rstd * (dxh - dxh.mean(axis=-1, keepdims=True) - xh * (dxh * xh).mean(axis=-1, keepdims=True))
    return dx, (dy * xh).sum(axis=0), dy.sum(axis=0)


def layernorm_fwd(x, gamma, beta, eps, backend=None):
    """Returns ``(y, x_hat, rstd)`` for rows of a 2-D ``x``."""
    if resolve_backend(backend) == "numba":
        return _ln_fwd_nb(np.ascontiguousarray(x), gamma, beta, x.dtype.type(eps))
    return _ln_fwd_np(x, gamma, beta, eps)


def layernorm_bwd(dy, gamma, xh, rstd, backend=None):
    """Returns ``(dx, dgamma, dbeta)``."""
    if resolve_backend(backend) == "numba":
        return _ln_bwd_nb(np.ascontiguousarray(dy), gamma, xh, rstd)
    return _ln_bwd_np(dy, gamma, xh, rstd)
