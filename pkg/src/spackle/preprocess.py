"""Curation pipeline: count filters, TPM + log2, Moran ranking, ComBat."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data import Slide, SlideDataset
from .errors import ConfigError, ConsistencyError, DataError

log = logging.getLogger(__name__)

TPM_SCALE = 1e6


@dataclass
class FilterConfig:
    min_counts: int = 10
    max_counts: int = 1_000_000
    min_expr_fraction_slide: float = 0.2
    min_expr_fraction_global: float = 0.6
    min_gene_counts: int = 10
    max_gene_counts: int = 1_000_000

    def __post_init__(self):
        if self.min_counts > self.max_counts or self.min_gene_counts > self.max_gene_counts:
            raise ConfigError("filter thresholds need min <= max")
        for frac in (self.min_expr_fraction_slide, self.min_expr_fraction_global):
            if not 0.0 <= frac <= 1.0:
                raise ConfigError(f"expression fraction {frac} outside [0, 1]")


@dataclass
class MoranScore:
    gene: str
    per_slide_I: list[float]
    mean_I: float


@dataclass
class CombatParams:
    batches: list[str]
    gamma_star: np.ndarray  # (batch, gene)
    delta_star: np.ndarray  # (batch, gene)
    gamma_hat: np.ndarray
    delta_hat: np.ndarray
    grand_mean: np.ndarray  # (gene,)
    var_pooled: np.ndarray  # (gene,)
    iterations: list[int] = field(default_factory=list)


# ---------------------------------------------------------------------------
# filtering
# ---------------------------------------------------------------------------


def _require_counts(ds: SlideDataset) -> None:
    for s in ds.slides:
        if s.counts is None:
            raise DataError(f"slide {s.slide_id} has no raw counts")


def filter_dataset(raw: SlideDataset, cfg: FilterConfig | None = None) -> SlideDataset:
    """Spot count filter, then gene filters, then drop all-zero spots."""
    cfg = cfg or FilterConfig()
    _require_counts(raw)
    slides = []
    for s in raw.slides:
        tot = s.counts.sum(axis=1)
        keep = (tot >= cfg.min_counts) & (tot <= cfg.max_counts)
        slides.append(s.subset_spots(keep))

    g = raw.n_genes
    keep_gene = np.ones(g, dtype=bool)
    expressed = np.zeros(g)
    n_total = 0
    gene_tot = np.zeros(g, dtype=np.int64)
    for s in slides:
        if s.n_spots == 0:
            raise DataError(f"slide {s.slide_id}: every spot failed the count filter")
        pos = (s.counts > 0).sum(axis=0)
        keep_gene &= pos / s.n_spots >= cfg.min_expr_fraction_slide
        expressed += pos
        n_total += s.n_spots
        gene_tot += s.counts.sum(axis=0)
    keep_gene &= expressed / n_total >= cfg.min_expr_fraction_global
    keep_gene &= (gene_tot >= cfg.min_gene_counts) & (gene_tot <= cfg.max_gene_counts)
    if not keep_gene.any():
        raise DataError("all genes were filtered out")
    cols = np.nonzero(keep_gene)[0]
    out = []
    for s in slides:
        s = s.subset_genes(cols)
        s = s.subset_spots(s.counts.sum(axis=1) > 0)
        if s.n_spots == 0:
            raise DataError(f"slide {s.slide_id}: no spots left after gene filtering")
        out.append(s)
    return raw.with_slides(out, genes=[raw.genes[i] for i in cols])


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def tpm_log_normalize(counts) -> np.ndarray:
    """Scale every row to sum to one million, then ``log2(x + 1)``."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim == 1:
        counts = counts[None, :]
    if (counts < 0).any():
        raise DataError("counts must be nonnegative")
    tot = counts.sum(axis=1, keepdims=True)
    if (tot <= 0).any():
        raise DataError("every spot needs a positive total count")
    return np.log2(counts / tot * TPM_SCALE + 1.0)


# ---------------------------------------------------------------------------
# Moran's I
# ---------------------------------------------------------------------------


def knn_edges(coords: np.ndarray, k: int, backend=None):
    """Directed edge list of the symmetrised binary k-NN graph."""
    nbr = kernels.radius_knn(coords, k, backend=backend)
    n = coords.shape[0]
    src = np.repeat(np.arange(n), k)
    dst = nbr.ravel()
    ok = dst >= 0
    src, dst = src[ok], dst[ok]
    key = np.unique(np.concatenate([src * n + dst, dst * n + src]))
    return key // n, key % n


def morans_i(x: np.ndarray, src: np.ndarray, dst: np.ndarray, backend=None) -> np.ndarray:
    """Global Moran's I of every column of ``x`` over binary edges.

    Columns with zero variance give NaN.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    z = x - x.mean(axis=0)
    num = kernels.edge_cross_sum(src, dst, z, backend=backend)
    den = (z * z).sum(axis=0)
    out = np.full(x.shape[1], np.nan)
    varying = np.ptp(x, axis=0) > 0
    out[varying] = (n / src.shape[0]) * num[varying] / den[varying]
    return out


def moran_rank(ds: SlideDataset, k_weights: int = 6, backend=None) -> list[MoranScore]:
    """Genes sorted by mean per-slide Moran's I, highest first."""
    if k_weights < 1:
        raise ConfigError("k_weights must be >= 1")
    per_slide = []
    for s in ds.slides:
        if s.n_spots < k_weights + 1:
            raise DataError(f"slide {s.slide_id}: {s.n_spots} spots is too few for {k_weights}-NN weights")
        src, dst = knn_edges(s.coords, k_weights, backend=backend)
        x = s.expr if s.expr is not None else tpm_log_normalize(s.counts)
        per_slide.append(morans_i(x, src, dst, backend=backend))
    table = np.vstack(per_slide)  # (slides, genes)
    scores = []
    for j, gene in enumerate(ds.genes):
        col = table[:, j]
        fin = col[np.isfinite(col)]
        mean = float(fin.mean()) if fin.size else float("nan")
        scores.append(MoranScore(gene, [float(v) for v in col], mean))
    scores.sort(key=lambda m: (np.isnan(m.mean_I), -m.mean_I if not np.isnan(m.mean_I) else 0.0, m.gene))
    return scores


def select_top_genes(scores: list[MoranScore], k: int) -> list[str]:
    if k < 1 or k > len(scores):
        raise ConfigError(f"cannot select {k} genes from {len(scores)} scored genes")
    return [m.gene for m in scores[:k]]


# ---------------------------------------------------------------------------
# ComBat (parametric empirical Bayes, batch = slide)
# ---------------------------------------------------------------------------


def _masked_mean_var(x, m, axis=0):
    n = m.sum(axis=axis)
    xm = np.where(m, x, 0.0)
    mean = xm.sum(axis=axis) / n
    dev = np.where(m, x - np.expand_dims(mean, axis), 0.0)
    return mean, (dev * dev).sum(axis=axis), n


def _eb_solve(g_hat, d_hat, n, g_bar, t2, a, b, tol, max_iter):
    g_old, d_old = g_hat.copy(), d_hat.copy()
    for it in range(1, max_iter + 1):
        g_new = (n * t2 * g_hat + d_old * g_bar) / (n * t2 + d_old)
        sum2 = (n - 1) * d_hat + n * (g_hat - g_new) ** 2
        d_new = (0.5 * sum2 + b) / (n / 2.0 + a - 1.0)
        # relative change, absolute near zero
        change = max(
            np.max(np.abs(g_new - g_old) / np.maximum(np.abs(g_old), 1.0)),
            np.max(np.abs(d_new - d_old) / np.maximum(np.abs(d_old), 1.0)),
        )
        g_old, d_old = g_new, d_new
        if change < tol:
            return g_new, d_new, it
    return g_old, d_old, max_iter


def combat_correct(ds: SlideDataset, tol: float = 1e-4, max_iter: int = 100):
    """Remove slide-level location/scale effects from ``expr``.

    Parameters are estimated on observed cells only; unobserved cells stay 0.
    """
    if len(ds.slides) < 2:
        raise ConsistencyError("ComBat needs at least two slides")
    x = np.vstack([s.expr for s in ds.slides]).astype(np.float64)
    m = np.vstack([s.observed for s in ds.slides]).astype(bool)
    sizes = [s.n_spots for s in ds.slides]
    bounds = np.cumsum([0] + sizes)
    nb = len(sizes)
    g = x.shape[1]

    means = np.empty((nb, g))
    ss = np.empty((nb, g))
    cnt = np.empty((nb, g))
    for b in range(nb):
        sl = slice(bounds[b], bounds[b + 1])
        means[b], ss[b], cnt[b] = _masked_mean_var(x[sl], m[sl])
    low = np.nonzero((cnt < 2).any(axis=0))[0]
    if low.size:
        raise ConsistencyError(f"gene {ds.genes[low[0]]} has fewer than 2 observed values on some slide")
    n_tot = cnt.sum(axis=0)
    grand = (cnt * means).sum(axis=0) / n_tot
    # pooled within-batch variance, unbiased so identical batches give delta_hat == 1
    var_pooled = ss.sum(axis=0) / (n_tot - nb)
    zero = np.nonzero(var_pooled <= 0)[0]
    if zero.size:
        raise DataError(f"gene {ds.genes[zero[0]]} has zero pooled variance")
    sd = np.sqrt(var_pooled)
    z = (x - grand) / sd

    g_hat = np.empty((nb, g))
    d_hat = np.empty((nb, g))
    for b in range(nb):
        sl = slice(bounds[b], bounds[b + 1])
        mu, s2, n = _masked_mean_var(z[sl], m[sl])
        g_hat[b], d_hat[b] = mu, s2 / (n - 1)

    g_star = g_hat.copy()
    d_star = d_hat.copy()
    iters = []
    for b in range(nb):
        if g < 2:
            iters.append(0)
            continue
        g_bar = g_hat[b].mean()
        t2 = g_hat[b].var(ddof=1)
        dm = d_hat[b].mean()
        ds2 = d_hat[b].var(ddof=1)
        if t2 <= 0 or ds2 <= 0:
            # point-mass prior equal to every estimate: posterior is the estimate itself
            iters.append(0)
            continue
        a = (2 * ds2 + dm**2) / ds2
        bb = (dm * ds2 + dm**3) / ds2
        g_star[b], d_star[b], it = _eb_solve(g_hat[b], d_hat[b], cnt[b], g_bar, t2, a, bb, tol, max_iter)
        iters.append(it)

    out = np.empty_like(z)
    for b in range(nb):
        sl = slice(bounds[b], bounds[b + 1])
        out[sl] = (z[sl] - g_star[b]) / np.sqrt(d_star[b]) * sd + grand
    out[~m] = 0.0
    if not np.all(np.isfinite(out)):
        raise DataError("ComBat produced non-finite values")

    slides = []
    for b, s in enumerate(ds.slides):
        t = Slide(s.slide_id, s.spot_ids, s.coords, s.array_rows, s.array_cols,
                  out[bounds[b] : bounds[b + 1]].copy(), s.observed.copy(), s.counts, s.truth)
        slides.append(t)
    params = CombatParams([s.slide_id for s in ds.slides], g_star, d_star, g_hat, d_hat, grand, var_pooled, iters)
    return ds.with_slides(slides), params


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


def qc_report(raw: SlideDataset, processed: SlideDataset) -> dict:
    """Per-dataset QC counts: spots and genes removed, missing fractions; percentages in [0, 100]."""
    raw_spots = sum(s.n_spots for s in raw.slides)
    raw_cells = sum(s.counts.size for s in raw.slides)
    raw_zero = sum(int((s.counts == 0).sum()) for s in raw.slides)
    spots = sum(s.n_spots for s in processed.slides)
    cells = sum(s.observed.size for s in processed.slides)
    missing = sum(int((~s.observed).sum()) for s in processed.slides)
    corrupt = sum(int((~s.observed).any(axis=1).sum()) for s in processed.slides)
    return {
        "dataset": processed.name,
        "slides": len(processed.slides),
        "genes": processed.n_genes,
        "spots": spots,
        "spots_removed": raw_spots - spots,
        "genes_removed": raw.n_genes - processed.n_genes,
        "corrupt_spots%": 100.0 * corrupt / spots,
        "missing_before%": 100.0 * raw_zero / raw_cells,
        "missing_after%": 100.0 * missing / cells,
    }


def preprocess_pipeline(raw: SlideDataset, cfg: FilterConfig | None = None, k_genes: int = 128,
                        moran_k: int = 6, combat_enabled: bool = True, backend=None):
    """filter -> TPM+log2 -> Moran rank -> top-k genes -> ComBat.

    Returns ``(dataset, qc_report, moran_scores)``. The observed mask marks
    nonzero raw counts of retained genes; unobserved cells hold 0.
    """
    cfg = cfg or FilterConfig()
    filt = filter_dataset(raw, cfg)
    slides = []
    for s in filt.slides:
        t = Slide(s.slide_id, s.spot_ids, s.coords, s.array_rows, s.array_cols,
                  tpm_log_normalize(s.counts), s.counts > 0, s.counts, s.truth)
        slides.append(t)
    normed = filt.with_slides(slides)
    scores = moran_rank(normed, moran_k, backend=backend)
    genes = select_top_genes(scores, k_genes)
    out = normed.subset_genes(genes)
    if combat_enabled:
        out, _ = combat_correct(out)
    return out.validate(), qc_report(raw, out), scores
