"""Metrics, the multi-assay masked evaluation and its exports.

Every assay hides a random subset of *observed* cells on the test slides,
hands each method a copy of the slide in which those cells are zeroed and
flagged unobserved, and scores the method only on the hidden cells against
their original values. A method never sees a hidden value.
"""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Slide, SlideDataset, region_index
from .engine import predict_hidden
from .errors import ConfigError, DataError
from .median import MedianConfig, global_gene_medians, median_complete
from .model import SpackleModel

DEFAULT_ASSAYS = 10
DEFAULT_BASE_SEED = 42
SWEEP_FRACTIONS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def mse_metric(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.size == 0 or pred.shape != truth.shape:
        raise DataError("mse needs two non-empty vectors of equal length")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(truth))):
        raise DataError("mse inputs must be finite")
    d = pred - truth
    return float(np.dot(d, d) / d.size)


def _pearson(a, b):
    if a.size < 2 or np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
        return None  # a constant vector has no defined correlation
    a = a - a.mean()
    b = b - b.mean()
    sa, sb = float(np.dot(a, a)), float(np.dot(b, b))
    if sa == 0.0 or sb == 0.0:
        return None
    return float(np.clip(np.dot(a, b) / math.sqrt(sa * sb), -1.0, 1.0))


def pcc_metric(pred_by_gene, truth_by_gene, return_skipped=False):
    """Per-gene Pearson correlation averaged over qualifying genes.

    Parameters
    ----------
    pred_by_gene, truth_by_gene : sequence of 1-D arrays
        Evaluated cells of each gene.
    return_skipped : bool
        Also return the number of genes that were skipped (fewer than two
        cells or zero variance in either vector).
    """
    vals, skipped = [], 0
    for p, t in zip(pred_by_gene, truth_by_gene):
        r = _pearson(np.asarray(p, dtype=np.float64), np.asarray(t, dtype=np.float64))
        if r is None:
            skipped += 1
        else:
            vals.append(r)
    if not vals:
        raise DataError("no gene qualifies for a Pearson correlation")
    out = math.fsum(vals) / len(vals)
    return (out, skipped) if return_skipped else out


def flat_pcc(pred, truth) -> float:
    """Pearson correlation over all evaluated cells at once (NaN if undefined)."""
    r = _pearson(np.asarray(pred, dtype=np.float64).ravel(), np.asarray(truth, dtype=np.float64).ravel())
    return math.nan if r is None else r


def exact_mean(values) -> float:
    """Correctly rounded arithmetic mean (exact rational arithmetic)."""
    values = [float(v) for v in values]
    if not values:
        return math.nan
    if not all(math.isfinite(v) for v in values):
        return math.fsum(values) / len(values)  # NaN/inf propagate
    return float(statistics.mean(values))


# ---------------------------------------------------------------------------
# methods
# ---------------------------------------------------------------------------


class Method:
    """A completion method under evaluation.

    ``fill(visible, hidden)`` receives the slide with hidden cells zeroed
    and unobserved, plus the hidden mask (which cells to predict, never
    their values), and returns a full ``(n_spots, n_genes)`` matrix.
    """

    name = "method"

    def fill(self, visible: Slide, hidden: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class MedianMethod(Method):
    name = "median"

    def __init__(self, global_medians, cfg: MedianConfig | None = None, backend=None):
        self.global_medians = np.asarray(global_medians, dtype=np.float64)
        self.cfg = cfg or MedianConfig()
        self.backend = backend
        self._regions = {}

    def _region(self, slide):
        key = slide.slide_id
        if key not in self._regions:
            self._regions[key] = region_index(slide, self.cfg.max_hops, backend=self.backend)
        return self._regions[key]

    def fill(self, visible, hidden):
        out, _, _ = median_complete(visible, self.global_medians, self.cfg, region=self._region(visible),
                                    backend=self.backend)
        return out.expr


class GlobalMedianMethod(Method):
    name = "global-median"

    def __init__(self, global_medians):
        self.global_medians = np.asarray(global_medians, dtype=np.float64)

    def fill(self, visible, hidden):
        return np.where(visible.observed, visible.expr, self.global_medians[None, :])


class SpackleMethod(Method):
    """Median pre-completion from the visible cells, then the model.

    Hidden cells enter the model as zeros, exactly like masked cells in
    training; originally-missing cells carry their median fill.
    """

    name = "spackle"

    def __init__(self, model: SpackleModel, global_medians, cfg: MedianConfig | None = None, backend=None):
        self.model = model
        self.median = MedianMethod(global_medians, cfg, backend)
        self.backend = backend

    def fill(self, visible, hidden):
        pre = replace(visible, expr=self.median.fill(visible, hidden))
        pred = predict_hidden(self.model, pre, hidden, backend=self.backend)
        return np.where(hidden, pred, pre.expr)


class CallableMethod(Method):
    def __init__(self, name: str, fn: Callable[[Slide, np.ndarray], np.ndarray]):
        self.name = name
        self.fn = fn

    def fill(self, visible, hidden):
        return np.asarray(self.fn(visible, hidden), dtype=np.float64)


def build_method(name: str, ds: SlideDataset, model: SpackleModel | None = None,
                 median_cfg: MedianConfig | None = None, backend=None) -> Method:
    """Method by label, with global medians taken from the training split."""
    med = global_gene_medians(ds.split("train"))
    if name == "median":
        return MedianMethod(med, median_cfg, backend)
    if name == "global-median":
        return GlobalMedianMethod(med)
    if name == "spackle":
        if model is None:
            raise ConfigError("the spackle method needs a trained model")
        return SpackleMethod(model, med, median_cfg, backend)
    raise ConfigError(f"unknown method {name!r}; expected spackle, median or global-median")


# ---------------------------------------------------------------------------
# the masked evaluation protocol
# ---------------------------------------------------------------------------


@dataclass
class AssayResult:
    assay_seed: int
    mse: float
    pcc: float
    n_evaluated_cells: int
    pcc_flat: float = math.nan
    sq_error_sum: float = 0.0
    n_skipped_genes: int = 0


@dataclass
class LeakageAudit:
    """Counters filled by the harness on every assay."""

    scored_cells: int = 0
    scored_unobserved: int = 0  # scored cells with M_s = 0; must stay 0
    hidden_values_visible: int = 0  # hidden cells whose value reached a method; must stay 0

    @property
    def clean(self) -> bool:
        return self.scored_unobserved == 0 and self.hidden_values_visible == 0


@dataclass
class EvalReport:
    method: str
    dataset: str
    masking_fraction: float
    base_seed: int
    per_assay: list[AssayResult] = field(default_factory=list)
    mean_mse: float = math.nan
    mean_pcc: float = math.nan
    mean_pcc_flat: float = math.nan
    pooled_mse: float = math.nan
    audit: LeakageAudit = field(default_factory=LeakageAudit)

    def finalize(self) -> "EvalReport":
        self.mean_mse = exact_mean(a.mse for a in self.per_assay)
        self.mean_pcc = exact_mean(a.pcc for a in self.per_assay)
        self.mean_pcc_flat = exact_mean(a.pcc_flat for a in self.per_assay)
        n = sum(a.n_evaluated_cells for a in self.per_assay)
        self.pooled_mse = math.fsum(a.sq_error_sum for a in self.per_assay) / n if n else math.nan
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def tsv_rows(self):
        yield ("method", "dataset", "fraction", "assay", "assay_seed", "mse", "pcc", "pcc_flat",
               "n_cells", "n_skipped_genes")
        for i, a in enumerate(self.per_assay):
            yield (self.method, self.dataset, self.masking_fraction, i, a.assay_seed, a.mse, a.pcc,
                   a.pcc_flat, a.n_evaluated_cells, a.n_skipped_genes)
        yield (self.method, self.dataset, self.masking_fraction, "mean", "", self.mean_mse, self.mean_pcc,
               self.mean_pcc_flat, sum(a.n_evaluated_cells for a in self.per_assay), "")


def assay_masks(slides, rho: float, assay_seed: int):
    """Hidden cells of one assay: observed cells kept by ``M_rand``."""
    out = []
    for si, s in enumerate(slides):
        rng = np.random.default_rng([assay_seed, si])
        out.append(s.observed & (rng.random(s.observed.shape) < rho))
    return out


def hide(slide: Slide, hidden) -> Slide:
    return replace(slide, expr=np.where(hidden, 0.0, slide.expr), observed=slide.observed & ~hidden)


def eval_slides(ds: SlideDataset) -> list[Slide]:
    slides = ds.split("test")
    if not slides:
        raise DataError("dataset has no test slides to evaluate on")
    return slides


def run_assay(method: Method, slides, rho: float, assay_seed: int, audit: LeakageAudit | None = None):
    """One assay; returns ``(AssayResult, hidden_masks, predictions)``."""
    masks = assay_masks(slides, rho, assay_seed)
    g = slides[0].expr.shape[1]
    preds, truths = [[] for _ in range(g)], [[] for _ in range(g)]
    fills = []
    for s, hid in zip(slides, masks):
        vis = hide(s, hid)
        if audit is not None:
            audit.hidden_values_visible += int(np.count_nonzero(vis.observed & hid))
            audit.hidden_values_visible += int(np.count_nonzero(hid & (vis.expr != 0)))
            audit.scored_unobserved += int(np.count_nonzero(hid & ~s.observed))
            audit.scored_cells += int(np.count_nonzero(hid))
        full = np.asarray(method.fill(vis, hid), dtype=np.float64)
        if full.shape != s.expr.shape:
            raise DataError(f"method {method.name!r} returned shape {full.shape}, expected {s.expr.shape}")
        fills.append(full)
        for j in range(g):
            col = hid[:, j]
            preds[j].append(full[col, j])
            truths[j].append(s.expr[col, j])
    pred_g = [np.concatenate(p) for p in preds]
    truth_g = [np.concatenate(t) for t in truths]
    p_all, t_all = np.concatenate(pred_g), np.concatenate(truth_g)
    if p_all.size == 0:
        raise DataError("assay hid zero cells; nothing to score")
    d = p_all - t_all
    try:
        pcc, skipped = pcc_metric(pred_g, truth_g, return_skipped=True)
    except DataError:
        pcc, skipped = math.nan, g  # e.g. the global median: constant per gene
    res = AssayResult(assay_seed, mse_metric(p_all, t_all), pcc, int(p_all.size), flat_pcc(p_all, t_all),
                      float(np.dot(d, d)), skipped)
    return res, masks, fills


def masked_evaluation(method: Method, ds: SlideDataset, rho: float = 0.3, n_assays: int = DEFAULT_ASSAYS,
                      base_seed: int = DEFAULT_BASE_SEED, slides=None) -> EvalReport:
    """Run ``n_assays`` assays with seeds ``base_seed + i`` on the test slides."""
    if not 0.0 < rho < 1.0:
        raise ConfigError("masking fraction must lie in (0, 1)")
    if n_assays < 1:
        raise ConfigError("n_assays must be at least 1")
    slides = eval_slides(ds) if slides is None else slides
    if not any(s.observed.any() for s in slides):
        raise DataError("no maskable cells: evaluation slides have no observed values")
    rep = EvalReport(method.name, ds.name, float(rho), int(base_seed))
    for i in range(n_assays):
        res, _, _ = run_assay(method, slides, rho, base_seed + i, rep.audit)
        rep.per_assay.append(res)
    return rep.finalize()


def corruption_sweep(ds: SlideDataset, fractions, methods, n_assays: int = DEFAULT_ASSAYS,
                     base_seed: int = DEFAULT_BASE_SEED):
    """``masked_evaluation`` for every (fraction, method) pair.

    Returns ``(reports, rows)``; rows are ``(fraction, method, assay, mse, pcc)``.
    """
    fractions = [float(f) for f in fractions]
    if any(not 0.0 < f < 1.0 for f in fractions):
        raise ConfigError("sweep fractions must lie in (0, 1)")
    reports, rows = [], []
    for f in fractions:
        for m in methods:
            rep = masked_evaluation(m, ds, f, n_assays, base_seed)
            reports.append(rep)
            rows.extend((f, m.name, i, a.mse, a.pcc) for i, a in enumerate(rep.per_assay))
    return reports, rows


def parse_fractions(text: str) -> list[float]:
    """``"0.1..0.7"`` (step 0.1), ``"0.1..0.7:0.2"`` or a comma list."""
    text = text.strip()
    if ".." in text:
        rng, _, step = text.partition(":")
        lo, hi = (float(v) for v in rng.split(".."))
        step = float(step) if step else 0.1
        if step <= 0 or hi < lo:
            raise ConfigError(f"bad fraction range {text!r}")
        n = int(round((hi - lo) / step))
        return [round(lo + i * step, 10) for i in range(n + 1)]
    return [float(v) for v in text.split(",") if v.strip()]


# ---------------------------------------------------------------------------
# file output
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_tsv(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            fh.write("\t".join(_fmt(v) for v in r) + "\n")


def write_reports(reports, outdir) -> None:
    """``report.json`` (list of reports) and ``report.tsv`` (per-assay rows)."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "report.json", "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")
    rows = []
    for i, r in enumerate(reports):
        body = list(r.tsv_rows())
        rows.extend(body if i == 0 else body[1:])
    write_tsv(outdir / "report.tsv", rows)


def write_sweep(rows, path) -> None:
    write_tsv(path, [("fraction", "method", "assay", "mse", "pcc"), *rows])


def scatter_export(method: Method, ds: SlideDataset, rho: float = 0.3, path=None,
                   base_seed: int = DEFAULT_BASE_SEED):
    """Per hidden cell of one assay: ``(truth, prediction, gene, method)``."""
    slides = eval_slides(ds)
    _, masks, fills = run_assay(method, slides, rho, base_seed)
    rows = []
    for s, hid, full in zip(slides, masks, fills):
        sp, gj = np.nonzero(hid)
        rows.extend((float(s.expr[i, j]), float(full[i, j]), ds.genes[j], method.name) for i, j in zip(sp, gj))
    if path is not None:
        write_tsv(path, [("truth", "prediction", "gene", "method"), *rows])
    return rows


def expression_map_export(slide: Slide, gene: str, genes, variants: dict, outdir, png: bool = False):
    """Write ``map_<gene>_<variant>.tsv`` for each variant.

    ``variants`` maps a label to either a full ``(n_spots, n_genes)`` matrix
    or a per-spot vector for ``gene``. The special label ``truth`` may map
    to ``None``, meaning the slide's own values with missing cells flagged.
    Returns the written paths.
    """
    genes = list(genes)
    if gene not in genes:
        raise ConfigError(f"unknown gene {gene!r}")
    j = genes.index(gene)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for label, val in variants.items():
        if val is None:
            vec = slide.expr[:, j]
        else:
            val = np.asarray(val, dtype=np.float64)
            vec = val[:, j] if val.ndim == 2 else val
        if vec.shape != (slide.n_spots,):
            raise DataError(f"variant {label!r} does not have one value per spot")
        rows = [("spot_id", "x", "y", "value", "observed")]
        rows += [(sid, float(x), float(y), float(v), int(o))
                 for sid, (x, y), v, o in zip(slide.spot_ids, slide.coords, vec, slide.observed[:, j])]
        p = outdir / f"map_{gene}_{label}.tsv"
        write_tsv(p, rows)
        written.append(p)
        if png:
            written.append(_render_png(slide, vec, outdir / f"map_{gene}_{label}.png", f"{gene} ({label})"))
    return written


def _render_png(slide, vec, path, title):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:  # optional dependency
        raise ConfigError("PNG output needs matplotlib (pip install 'artifact[plot]')") from exc
    fig, ax = plt.subplots(figsize=(4, 4), dpi=100)
    sc = ax.scatter(slide.coords[:, 0], -slide.coords[:, 1], c=vec, s=12, cmap="viridis")
    fig.colorbar(sc, ax=ax, shrink=0.8)
    ax.set_title(title)
    ax.set_aspect("equal")
    ax.set_axis_off()
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path
