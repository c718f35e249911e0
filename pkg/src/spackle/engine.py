"""Neighbourhood assembly, masking, training and completion.

Shapes follow the public matrix convention ``(genes, spots)`` for a single
neighbourhood: column 0 is the centre spot, the rest are its neighbours.
Batched internals use token-major ``(batch, spots, genes)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import NeighborIndex, Slide, SlideDataset, build_neighbor_index
from .errors import ConsistencyError, ModelMismatchError, TrainingError
from .median import MedianConfig, global_gene_medians, median_complete
from .model import Adam, ModelConfig, SpackleModel

log = logging.getLogger(__name__)

DEFAULT_RHO = 0.30
LR_GRID = tuple(float(v) for v in np.logspace(-5, -2, 10))


@dataclass
class ExpressionNeighborhood:
    E_x: np.ndarray  # (g, n+1)
    M_s: np.ndarray  # (g, n+1) bool, True = originally observed
    pad_cols: np.ndarray  # (n+1,) bool


@dataclass
class MaskSet:
    M_rand: np.ndarray
    rho: float
    M_mask: np.ndarray


@dataclass
class CompletionOutput:
    x_hat: np.ndarray
    replaced: np.ndarray
    E_hat: np.ndarray


@dataclass
class TrainConfig:
    batch_size: int = 256
    lr: float = 1e-3
    max_iters: int = 10_000
    seed: int = 42
    mask_rho: float = DEFAULT_RHO
    hops: int = 2
    eval_every: int = 100
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    ff_width: int | None = None
    scored_genes: list[str] | None = None  # None: every gene is masked and scored

    def __post_init__(self):
        if self.max_iters <= 0 or self.batch_size <= 0 or self.eval_every <= 0:
            raise ValueError("max_iters, batch_size and eval_every must be positive")
        if not 0.0 < self.mask_rho < 1.0:
            raise ValueError("mask_rho must lie in (0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    @property
    def lr_grid(self) -> tuple[float, ...]:
        return LR_GRID


@dataclass
class TrainHistory:
    lr: float
    train_loss: list[float] = field(default_factory=list)
    val_mse: list[tuple[int, float]] = field(default_factory=list)
    best_iter: int = 0
    best_val: float = math.inf

    def rows(self):
        val = dict(self.val_mse)
        for it in range(len(self.train_loss) + 1):
            yield it, (self.train_loss[it - 1] if it else None), val.get(it)


# ---------------------------------------------------------------------------
# neighbourhoods and masks
# ---------------------------------------------------------------------------


def assemble_neighborhood(slide: Slide, spot: int, idx: NeighborIndex) -> ExpressionNeighborhood:
    """``E_x = [x | V_x]`` for one centre spot; padded columns are zero."""
    if len(idx) != slide.n_spots:
        raise ConsistencyError("neighbour index was built for a different slide")
    nb = idx.neighbors[spot]
    pad = np.concatenate([[False], idx.pad_mask[spot]])
    cols = np.concatenate([[spot], np.where(nb < 0, 0, nb)])
    E = slide.expr[cols].T.copy()
    M = slide.observed[cols].T.copy()
    E[:, pad] = 0.0
    M[:, pad] = False
    return ExpressionNeighborhood(E, M, pad)


def draw_mask(M_s, rho: float = DEFAULT_RHO, rng=None, allowed_rows=None) -> MaskSet:
    """Bernoulli(rho) candidates intersected with the observed mask.

    ``allowed_rows`` restricts candidates to a subset of gene rows (first
    axis), e.g. the scored panel when extra genes are context only.
    """
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    M_s = np.asarray(M_s, dtype=bool)
    M_rand = rng.random(M_s.shape) < rho
    if allowed_rows is not None:
        allowed = np.asarray(allowed_rows, dtype=bool).reshape((-1,) + (1,) * (M_s.ndim - 1))
        M_rand &= allowed
    return MaskSet(M_rand, rho, M_s & M_rand)


def apply_mask(E_x, M_mask) -> np.ndarray:
    E_x = np.asarray(E_x)
    M_mask = np.asarray(M_mask, dtype=bool)
    if E_x.shape != M_mask.shape:
        raise ValueError(f"shape mismatch: {E_x.shape} vs {M_mask.shape}")
    return np.where(M_mask, np.zeros((), dtype=E_x.dtype), E_x)


def forward(model: SpackleModel, E_m, pad_cols=None) -> np.ndarray:
    """Reconstruct a ``(g, n+1)`` neighbourhood (or a ``(B, g, n+1)`` batch)."""
    E_m = np.asarray(E_m)
    single = E_m.ndim == 2
    x = E_m[None] if single else E_m
    pad = None
    if pad_cols is not None:
        pad = np.asarray(pad_cols, dtype=bool)
        pad = pad[None] if pad.ndim == 1 else pad
        pad = np.broadcast_to(pad, (x.shape[0], x.shape[2]))
    if x.shape[1] != model.cfg.n_genes:
        raise ModelMismatchError(f"model adapters expect {model.cfg.n_genes} genes, input has {x.shape[1]}")
    y = model.forward(x.transpose(0, 2, 1), pad).transpose(0, 2, 1)
    return y[0] if single else y


def loss(E_x, E_hat, pad_cols=None) -> float:
    """Mean squared error over all non-padded entries."""
    E_x = np.asarray(E_x, dtype=np.float64)
    E_hat = np.asarray(E_hat, dtype=np.float64)
    if E_x.shape != E_hat.shape:
        raise ValueError(f"shape mismatch: {E_x.shape} vs {E_hat.shape}")
    w = np.ones(E_x.shape, dtype=bool)
    if pad_cols is not None:
        w &= ~np.broadcast_to(np.asarray(pad_cols, dtype=bool), E_x.shape[-1:])
    d = (E_x - E_hat)[w]
    return float(np.mean(d * d))


class NeighborhoodBank:
    """Neighbourhood gather over one or more slides.

    Values of all slides are stacked with one trailing zero row; padded
    neighbour slots point at it, so gathering is a single fancy index.
    """

    def __init__(self, slides, hops, values=None, observed=None, dtype=np.float32, backend=None):
        values = [s.expr for s in slides] if values is None else values
        observed = [s.observed for s in slides] if observed is None else observed
        g = values[0].shape[1]
        n = sum(v.shape[0] for v in values)
        self.values = np.zeros((n + 1, g), dtype=dtype)
        self.observed = np.zeros((n + 1, g), dtype=bool)
        cols = []
        off = 0
        for s, v, o in zip(slides, values, observed):
            k = v.shape[0]
            self.values[off : off + k] = v
            self.observed[off : off + k] = o
            idx = build_neighbor_index(s, hops, backend=backend)
            nb = np.where(idx.pad_mask, n - off, idx.neighbors) + off  # pad -> zero row
            cols.append(np.concatenate([np.arange(off, off + k)[:, None], nb], axis=1))
            off += k
        self.cols = np.concatenate(cols, axis=0)  # (n, T)
        self.pad = self.cols == n
        self.n = n
        self.n_tokens = self.cols.shape[1]

    def gather(self, centers):
        c = self.cols[centers]
        return self.values[c], self.observed[c], self.pad[centers]


# ---------------------------------------------------------------------------
# pre-completion
# ---------------------------------------------------------------------------


def precomplete_dataset(ds: SlideDataset, median_cfg: MedianConfig | None = None, backend=None):
    """Median-complete every slide using global medians of the training split.

    Returns ``(dataset, global_medians)``; observed flags are unchanged.
    """
    med = global_gene_medians(ds.split("train"))
    slides = [median_complete(s, med, median_cfg, backend=backend)[0] for s in ds.slides]
    return ds.with_slides(slides), med


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _gene_weight(genes, scored):
    if scored is None:
        return np.ones(len(genes), dtype=bool)
    pos = {g: i for i, g in enumerate(genes)}
    missing = [g for g in scored if g not in pos]
    if missing:
        raise ConsistencyError(f"panel is not a superset of the scored genes: {missing[:5]}")
    w = np.zeros(len(genes), dtype=bool)
    w[[pos[g] for g in scored]] = True
    return w


def _standardizer(slides, g):
    vals = np.vstack([s.expr for s in slides]).astype(np.float64)
    obs = np.vstack([s.observed for s in slides])
    shift = np.zeros(g)
    scale = np.ones(g)
    for j in range(g):
        v = vals[obs[:, j], j]
        if v.size:
            shift[j] = v.mean()
            if v.size > 1 and v.std() > 0:
                scale[j] = v.std()
    return {"in.shift": shift, "in.scale": scale, "out.shift": shift, "out.scale": scale}


def _masked_batch(bank, centers, rng, rho, gene_weight):
    E, Ms, pad = bank.gather(centers)
    M_rand = rng.random(E.shape, dtype=np.float32) < rho
    M_rand &= gene_weight[None, None, :]
    M_mask = Ms & M_rand
    return E, np.where(M_mask, np.float32(0), E), M_mask, pad


def validation_mse(model, bank, E, E_m, M_mask, pad, gene_weight, chunk=512) -> float:
    """MSE over masked centre-column cells of scored genes."""
    sq = 0.0
    cnt = 0
    for start in range(0, E.shape[0], chunk):
        sl = slice(start, start + chunk)
        y = model.forward(E_m[sl], pad[sl])
        m = M_mask[sl, 0, :] & gene_weight[None, :]
        d = (y[:, 0, :] - E[sl, 0, :]).astype(np.float64)[m]
        sq += float(np.dot(d, d))
        cnt += int(m.sum())
    return sq / cnt if cnt else math.nan


def train(ds: SlideDataset, cfg: TrainConfig | None = None, backend=None, progress=None):
    """Train on a pre-completed dataset; keep the best-validation snapshot.

    Each step samples ``batch_size`` centre spots from the training slides
    and draws a fresh random mask for every sample. Randomness comes from a
    generator keyed on ``(seed, step)``, so a run is exactly reproducible.

    Returns ``(model, history)``.
    """
    cfg = cfg or TrainConfig()
    train_slides, val_slides = ds.split("train"), ds.split("val")
    if not train_slides:
        raise TrainingError("training split is empty")
    if not val_slides:
        raise TrainingError("validation split is empty")
    g = ds.n_genes
    gene_weight = _gene_weight(ds.genes, cfg.scored_genes)
    mcfg = ModelConfig(g, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.ff_width)
    meta = {"seed": cfg.seed, "hops": cfg.hops, "lr": cfg.lr, "mask_rho": cfg.mask_rho,
            "scored_genes": cfg.scored_genes}
    model = SpackleModel.init(mcfg, cfg.seed, np.float32, buffers=_standardizer(train_slides, g),
                              genes=ds.genes, meta=meta)
    bank = NeighborhoodBank(train_slides, cfg.hops, backend=backend)
    vbank = NeighborhoodBank(val_slides, cfg.hops, backend=backend)
    vrng = np.random.default_rng([cfg.seed, 2])
    val = _masked_batch(vbank, np.arange(vbank.n), vrng, cfg.mask_rho, gene_weight)
    if not (val[2][:, 0, :]).any():
        raise TrainingError("validation split has no maskable cells")

    opt = Adam(cfg.lr)
    hist = TrainHistory(cfg.lr)
    best = model.copy()

    def evaluate(it):
        v = validation_mse(model, vbank, *val, gene_weight)
        hist.val_mse.append((it, v))
        if v < hist.best_val:
            hist.best_val, hist.best_iter = v, it
            best.params = {k: p.copy() for k, p in model.params.items()}
        return v

    evaluate(0)
    inv = None
    for it in range(1, cfg.max_iters + 1):
        rng = np.random.default_rng([cfg.seed, 1, it])
        centers = rng.integers(0, bank.n, size=cfg.batch_size)
        E, E_m, _, pad = _masked_batch(bank, centers, rng, cfg.mask_rho, gene_weight)
        y, cache = model.forward(E_m, pad, keep=True)
        w = (~pad)[:, :, None] & gene_weight[None, None, :]
        if inv is None or inv[0] != w.sum():
            inv = (w.sum(), np.float32(1.0 / w.sum()))
        diff = np.where(w, y - E, np.float32(0))
        cur = float(np.dot(diff.ravel().astype(np.float64), diff.ravel().astype(np.float64))) / inv[0]
        if not math.isfinite(cur):
            raise TrainingError(f"loss diverged at iteration {it} (lr={cfg.lr:g})")
        hist.train_loss.append(cur)
        grads = model.backward(cache, (2 * inv[1]) * diff)
        opt.step(model.params, grads)
        if it % cfg.eval_every == 0 or it == cfg.max_iters:
            v = evaluate(it)
            if not math.isfinite(v):
                raise TrainingError(f"validation loss diverged at iteration {it} (lr={cfg.lr:g})")
            if progress is not None:
                progress(it, cur, v)
            log.debug("iter %d loss %.5f val %.5f", it, cur, v)
    best.meta["best_iter"] = hist.best_iter
    best.meta["best_val_mse"] = hist.best_val
    return best, hist


def lr_sweep(ds: SlideDataset, cfg: TrainConfig | None = None, grid=None, backend=None, progress=None):
    """Train once per learning rate; return the best model by validation MSE.

    Returns ``(best_model, best_history, runs)`` where ``runs`` lists
    ``(lr, history)`` for every grid value. A diverged run counts as +inf.
    """
    cfg = cfg or TrainConfig()
    grid = LR_GRID if grid is None else tuple(grid)
    runs = []
    best = (math.inf, None, None)
    for lr in grid:
        try:
            model, hist = train(ds, replace(cfg, lr=lr), backend=backend, progress=progress)
        except TrainingError as exc:
            log.warning("lr %g diverged: %s", lr, exc)
            hist = TrainHistory(lr)
            runs.append((lr, hist))
            continue
        runs.append((lr, hist))
        if hist.best_val < best[0]:
            best = (hist.best_val, model, hist)
    if best[1] is None:
        raise TrainingError("every learning rate diverged")
    return best[1], best[2], runs


def context_gene_variant(ds: SlideDataset, scored_genes, cfg: TrainConfig | None = None, backend=None):
    """Train on an extended gene panel where extra genes are input-only context.

    Only ``scored_genes`` rows are ever masked, enter the loss, or are
    scored in validation.
    """
    cfg = cfg or TrainConfig()
    _gene_weight(ds.genes, scored_genes)
    return train(ds, replace(cfg, scored_genes=list(scored_genes)), backend=backend)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def _check_panel(model, genes):
    if genes is not None and list(genes) != list(model.genes):
        raise ModelMismatchError("model gene panel differs from the dataset's")


def _predict_centres(model, bank, E_m, pad, chunk=512):
    out = np.empty((E_m.shape[0], E_m.shape[2]), dtype=np.float64)
    for start in range(0, E_m.shape[0], chunk):
        sl = slice(start, start + chunk)
        out[sl] = model.forward(E_m[sl], pad[sl])[:, 0, :]
    return out


def predict_hidden(model: SpackleModel, slide: Slide, hidden, genes=None, backend=None) -> np.ndarray:
    """Centre predictions with ``hidden`` cells zeroed in every neighbourhood.

    ``slide`` is the pre-completed slide, so only the hidden cells are
    removed from the input, exactly as in training.
    """
    _check_panel(model, genes)
    if slide.expr.shape[1] != model.cfg.n_genes:
        raise ModelMismatchError("slide and model have different gene counts")
    bank = NeighborhoodBank([slide], model.meta.get("hops", 2), backend=backend)
    hid = np.zeros_like(bank.observed)
    hid[:-1] = hidden
    c = bank.cols
    E_m = np.where(hid[c], np.float32(0), bank.values[c])
    return _predict_centres(model, bank, E_m, bank.pad)


def infer_complete(model: SpackleModel, slide: Slide, observed=None, genes=None, backend=None):
    """Replace originally-missing centre values with model predictions.

    Every cell with ``observed == False`` is zeroed on input (no random
    mask); observed cells are returned unchanged.

    Returns ``(completed_slide, replaced_mask)``.
    """
    observed = slide.observed if observed is None else np.asarray(observed, dtype=bool)
    pred = predict_hidden(model, slide, ~observed, genes=genes, backend=backend)
    x_hat = np.where(observed, slide.expr, pred)
    return replace(slide, expr=x_hat), ~observed


def complete_neighborhood(model: SpackleModel, nb: ExpressionNeighborhood) -> CompletionOutput:
    """Complete the centre column of one neighbourhood; other columns are context."""
    E_m = apply_mask(nb.E_x, ~nb.M_s & ~nb.pad_cols[None, :])
    E_hat = forward(model, E_m, nb.pad_cols)
    replaced = ~nb.M_s[:, 0]
    x_hat = np.where(replaced, E_hat[:, 0], nb.E_x[:, 0])
    return CompletionOutput(x_hat, replaced, E_hat)
