"""Synthetic hexagonal-grid datasets with known ground truth.

Latent log-expression of every gene is a smooth Gaussian field (squared
exponential kernel, realised with random Fourier features) built from a few
factors shared across genes plus a gene-specific field, plus i.i.d. noise.
Counts are ``round(exp(latent))``; dropout then zeroes a Bernoulli subset.
The pre-dropout counts are kept as ``truth``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Slide, SlideDataset
from .errors import ConfigError, DataError

KERNEL_DESCRIPTION = (
    "squared-exponential kernel k(r) = exp(-r^2 / (2 l^2)), random Fourier features; "
    "counts = round(exp(latent)); dropout = Bernoulli zeroing"
)


@dataclass
class SynthConfig:
    n_slides: int = 3
    grid_rows: int = 24
    grid_cols: int = 25
    n_genes: int = 32
    correlation_length: float = 4.0  # in spot spacings
    noise_sd: float = 0.2
    dropout_rate: float = 0.1
    batch_shift: tuple = (0.0,)  # per slide, recycled
    batch_scale: tuple = (1.0,)
    seed: int = 42
    n_factors: int = 4
    own_fraction: float = 0.25  # variance share of the gene-specific field
    field_sd: float = 1.0
    mean_log_count: float = 3.5
    spacing: float = 100.0  # pixels between adjacent spots
    n_features: int = 256
    splits: tuple = field(default=("train", "val", "test"))

    def __post_init__(self):
        self.batch_shift = tuple(np.atleast_1d(self.batch_shift).astype(float).tolist())
        self.batch_scale = tuple(np.atleast_1d(self.batch_scale).astype(float).tolist())
        self.splits = tuple(self.splits)
        if self.grid_rows < 2 or self.grid_cols < 2:
            raise ConfigError("grid dimensions must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.correlation_length <= 0:
            raise ConfigError("correlation_length must be positive")
        if min(self.batch_scale) <= 0:
            raise ConfigError("batch_scale must be positive")
        if self.n_slides < 1 or self.n_genes < 1 or self.n_factors < 1:
            raise ConfigError("n_slides, n_genes and n_factors must be positive")
        if not 0.0 <= self.own_fraction <= 1.0:
            raise ConfigError("own_fraction must lie in [0, 1]")


def hex_grid(rows: int, cols: int, spacing: float = 100.0):
    """Visium-style lattice: odd rows shifted by half a spacing.

    Returns ``(coords, array_row, array_col)``.
    """
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    r, c = r.ravel(), c.ravel()
    x = (c + 0.5 * (r % 2)) * spacing
    y = r * spacing * math.sqrt(3) / 2
    return np.column_stack([x, y]), r.astype(np.int64), (2 * c + r % 2).astype(np.int64)


def _fields(rng, coords_units, n_fields, length, n_features):
    omega = rng.standard_normal((n_features, 2)) / length
    phase = rng.uniform(0, 2 * np.pi, n_features)
    amp = rng.standard_normal((n_features, n_fields))
    phi = math.sqrt(2.0 / n_features) * np.cos(coords_units @ omega.T + phase)
    return phi @ amp


def generate(cfg: SynthConfig | None = None) -> SlideDataset:
    """Raw-count dataset with ``truth`` (pre-dropout counts) on every slide."""
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    g, k = cfg.n_genes, cfg.n_factors
    loadings = rng.standard_normal((g, k))
    loadings /= np.linalg.norm(loadings, axis=1, keepdims=True)
    mu = rng.uniform(cfg.mean_log_count - 1.0, cfg.mean_log_count + 1.0, g)
    batch_dir = rng.standard_normal(g)
    coords, arow, acol = hex_grid(cfg.grid_rows, cfg.grid_cols, cfg.spacing)
    units = coords / cfg.spacing
    genes = [f"G{j:04d}" for j in range(g)]

    slides, split_map = [], {}
    for s in range(cfg.n_slides):
        srng = np.random.default_rng([cfg.seed, s])
        f = _fields(srng, units, k + g, cfg.correlation_length, cfg.n_features)
        shared, own = f[:, :k] @ loadings.T, f[:, k:]
        dev = cfg.field_sd * (math.sqrt(1 - cfg.own_fraction) * shared + math.sqrt(cfg.own_fraction) * own)
        dev = dev + cfg.noise_sd * srng.standard_normal(dev.shape)
        scale = cfg.batch_scale[s % len(cfg.batch_scale)]
        shift = cfg.batch_shift[s % len(cfg.batch_shift)]
        latent = mu + scale * dev + shift * batch_dir
        if not np.all(np.isfinite(latent)):
            raise DataError("synthetic latent field is not finite")
        truth = np.rint(np.exp(latent)).astype(np.int64)
        drop = srng.random(truth.shape) < cfg.dropout_rate
        counts = np.where(drop, 0, truth)
        sid = f"slide{s}"
        ids = [f"{sid}_r{r}_c{c}" for r, c in zip(arow, acol)]
        slides.append(Slide(sid, ids, coords.copy(), arow.copy(), acol.copy(), counts=counts, truth=truth))
        split_map[sid] = cfg.splits[s] if s < len(cfg.splits) else "train"
    ds = SlideDataset(f"synth-{cfg.seed}", "synthetic", "hex-grid", genes, slides, split_map)
    return ds.validate()


def describe(cfg: SynthConfig) -> dict:
    """Generator settings and model description written next to the data."""
    return {"generator": "spackle.synth", "kernel": KERNEL_DESCRIPTION, "config": asdict(cfg)}


def inject_corruption(ds: SlideDataset, fraction: float, seed: int = 42):
    """Hide ``round(fraction * n_observed)`` observed cells chosen uniformly.

    Hidden cells become unobserved with value 0 in the returned dataset.
    Returns ``(dataset, hidden_masks)`` with one bool mask per slide.
    """
    if not 0.0 <= fraction < 1.0:
        raise ConfigError("fraction must lie in [0, 1)")
    obs = [s.observed for s in ds.slides]
    sizes = [o.size for o in obs]
    flat = np.concatenate([o.ravel() for o in obs])
    cand = np.nonzero(flat)[0]
    n_hide = int(round(fraction * cand.size))
    if n_hide >= cand.size and cand.size:
        raise DataError("corruption would leave no observed cells")
    rng = np.random.default_rng(seed)
    pick = rng.choice(cand, size=n_hide, replace=False)
    hid = np.zeros(flat.size, dtype=bool)
    hid[pick] = True
    masks, slides, off = [], [], 0
    for s, n in zip(ds.slides, sizes):
        h = hid[off : off + n].reshape(s.observed.shape)
        off += n
        masks.append(h)
        slides.append(replace(s, expr=np.where(h, 0.0, s.expr), observed=s.observed & ~h))
    return ds.with_slides(slides), masks
