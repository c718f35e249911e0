"""Dataset model, the on-disk directory format and spot neighbourhoods.

A dataset directory looks like::

    manifest.json
    <slide>/spots.tsv      spot_id  x  y  array_row  array_col
    <slide>/expr.tsv       one column per gene, float32 values
    <slide>/observed.tsv   same shape, 0/1
    <slide>/counts.tsv     raw-count variant (replaces expr/observed)
    <slide>/truth.tsv      optional pre-dropout counts (synthetic data)
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConsistencyError, DataError, FormatError

SPLITS = ("train", "val", "test")
HOP_TARGETS = {0: 0, 1: 6, 2: 18, 3: 36}
# ring radii of a hexagonal lattice (in spot spacings) are 1, sqrt3, 2, sqrt7, 3, sqrt12, 4, sqrt19...;
# a 5% margin keeps every h-hop ring inside radius h and every (h+1)-hop ring outside
HOP_RADIUS_MARGIN = 1.05
FLOAT_FMT = "%.9g"  # round-trips float32 exactly


@dataclass(frozen=True)
class Spot:
    spot_id: str
    x: float
    y: float
    array_row: int
    array_col: int


@dataclass
class Slide:
    """One tissue section.

    ``expr`` is the processed (log-space) matrix and may be ``None`` for a
    raw-count slide; ``counts`` is then required. ``observed[i, j]`` is False
    where the value at ``(i, j)`` was not measured.
    """

    slide_id: str
    spot_ids: list[str]
    coords: np.ndarray  # (n, 2) pixel x, y
    array_rows: np.ndarray
    array_cols: np.ndarray
    expr: np.ndarray | None = None
    observed: np.ndarray | None = None
    counts: np.ndarray | None = None
    truth: np.ndarray | None = None

    @property
    def n_spots(self) -> int:
        return len(self.spot_ids)

    @property
    def spots(self) -> list[Spot]:
        return [
            Spot(sid, float(x), float(y), int(r), int(c))
            for sid, (x, y), r, c in zip(self.spot_ids, self.coords, self.array_rows, self.array_cols)
        ]

    def subset_spots(self, keep) -> "Slide":
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.nonzero(keep)[0]

        def take(a):
            return None if a is None else a[keep]

        return Slide(
            self.slide_id,
            [self.spot_ids[i] for i in keep],
            self.coords[keep],
            self.array_rows[keep],
            self.array_cols[keep],
            take(self.expr),
            take(self.observed),
            take(self.counts),
            take(self.truth),
        )

    def subset_genes(self, cols) -> "Slide":
        cols = np.asarray(cols)

        def take(a):
            return None if a is None else a[:, cols]

        return replace(
            self,
            expr=take(self.expr),
            observed=take(self.observed),
            counts=take(self.counts),
            truth=take(self.truth),
        )


@dataclass
class SlideDataset:
    name: str
    organism: str
    tissue: str
    genes: list[str]
    slides: list[Slide]
    split_map: dict[str, str] = field(default_factory=dict)

    @property
    def n_genes(self) -> int:
        return len(self.genes)

    def slide(self, slide_id: str) -> Slide:
        for s in self.slides:
            if s.slide_id == slide_id:
                return s
        raise KeyError(slide_id)

    def split(self, name: str) -> list[Slide]:
        return [s for s in self.slides if self.split_map[s.slide_id] == name]

    def with_slides(self, slides, genes=None) -> "SlideDataset":
        return replace(self, slides=list(slides), genes=list(self.genes if genes is None else genes))

    def subset_genes(self, genes) -> "SlideDataset":
        pos = {g: i for i, g in enumerate(self.genes)}
        missing = [g for g in genes if g not in pos]
        if missing:
            raise ConsistencyError(f"genes not in dataset: {missing[:5]}")
        cols = np.array([pos[g] for g in genes], dtype=np.int64)
        return self.with_slides([s.subset_genes(cols) for s in self.slides], genes=genes)

    def validate(self) -> "SlideDataset":
        if not self.genes:
            raise ConsistencyError("dataset has no genes")
        if len(set(self.genes)) != len(self.genes):
            raise ConsistencyError("gene ids are not unique")
        for gid in self.genes:
            if not gid or any(c in gid for c in "\t\n\r"):
                raise ConsistencyError(f"invalid gene id {gid!r}")
        if not self.slides:
            raise ConsistencyError("dataset has no slides")
        ids = [s.slide_id for s in self.slides]
        if len(set(ids)) != len(ids):
            raise ConsistencyError("slide ids are not unique")
        if set(self.split_map) != set(ids):
            raise ConsistencyError("every slide must appear in exactly one split")
        for sid, sp in self.split_map.items():
            if sp not in SPLITS:
                raise ConsistencyError(f"slide {sid}: unknown split {sp!r}")
        g = self.n_genes
        for s in self.slides:
            _validate_slide(s, g)
        return self


def _validate_slide(s: Slide, g: int) -> None:
    n = s.n_spots
    if n == 0:
        raise DataError(f"slide {s.slide_id} has zero spots")
    if len(set(s.spot_ids)) != n:
        raise ConsistencyError(f"slide {s.slide_id}: duplicate spot ids")
    if s.coords.shape != (n, 2) or not np.all(np.isfinite(s.coords)):
        raise DataError(f"slide {s.slide_id}: spot coordinates must be finite (n, 2)")
    grid = set(zip(s.array_rows.tolist(), s.array_cols.tolist()))
    if len(grid) != n:
        raise ConsistencyError(f"slide {s.slide_id}: duplicate (array_row, array_col)")
    if s.expr is None and s.counts is None:
        raise FormatError(f"slide {s.slide_id}: neither expression nor counts present")
    for label, mat in (("expr", s.expr), ("observed", s.observed), ("counts", s.counts), ("truth", s.truth)):
        if mat is None:
            continue
        if mat.shape != (n, g):
            raise ConsistencyError(f"slide {s.slide_id}: {label} has shape {mat.shape}, expected {(n, g)}")
        if mat.dtype.kind == "f" and not np.all(np.isfinite(mat)):
            raise DataError(f"slide {s.slide_id}: non-finite values in {label}")
    if s.expr is not None and s.observed is None:
        raise FormatError(f"slide {s.slide_id}: expression without an observed mask")
    for label, mat in (("counts", s.counts), ("truth", s.truth)):
        if mat is not None and (mat.dtype.kind not in "iu" or (mat < 0).any()):
            raise DataError(f"slide {s.slide_id}: {label} must be nonnegative integers")


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def _read_header(path: Path) -> list[str]:
    with open(path, newline="") as fh:
        line = fh.readline()
    if not line:
        raise FormatError(f"{path}: empty file")
    return line.rstrip("\r\n").split("\t")


def _read_matrix(path: Path, genes: list[str], dtype) -> np.ndarray:
    if not path.is_file():
        raise FormatError(f"missing file {path}")
    header = _read_header(path)
    if header != genes:
        raise ConsistencyError(f"{path}: gene columns do not match the manifest gene list")
    try:
        mat = np.loadtxt(path, delimiter="\t", skiprows=1, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if mat.size == 0:
        mat = mat.reshape(0, len(genes))
    if mat.shape[1] != len(genes):
        raise ConsistencyError(f"{path}: {mat.shape[1]} columns, expected {len(genes)}")
    if not np.all(np.isfinite(mat)):
        raise DataError(f"{path}: non-finite values")
    if np.dtype(dtype).kind in "iub":
        if not np.all(mat == np.round(mat)):
            raise DataError(f"{path}: expected integer values")
        return mat.astype(dtype)
    return mat.astype(np.float32).astype(np.float64)


def _read_spots(path: Path):
    if not path.is_file():
        raise FormatError(f"missing file {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or rows[0] != ["spot_id", "x", "y", "array_row", "array_col"]:
        raise FormatError(f"{path}: bad header")
    body = rows[1:]
    try:
        ids = [r[0] for r in body]
        coords = np.array([[float(r[1]), float(r[2])] for r in body], dtype=np.float64).reshape(-1, 2)
        arow = np.array([int(r[3]) for r in body], dtype=np.int64)
        acol = np.array([int(r[4]) for r in body], dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return ids, coords, arow, acol


def load_dataset(path) -> SlideDataset:
    """Read and validate a dataset directory."""
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise FormatError(f"missing {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
        genes = list(manifest["genes"])
        entries = manifest["slides"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{mpath}: {exc}") from exc
    slides, split_map = [], {}
    for ent in entries:
        try:
            sid = ent["id"]
            split_map[sid] = ent["split"]
            ids, coords, arow, acol = _read_spots(root / ent["spots_file"])
        except KeyError as exc:
            raise FormatError(f"{mpath}: slide entry lacks {exc}") from exc
        s = Slide(sid, ids, coords, arow, acol)
        if "expr_file" in ent:
            s.expr = _read_matrix(root / ent["expr_file"], genes, np.float64)
            if "observed_file" not in ent:
                raise FormatError(f"slide {sid}: expr_file without observed_file")
            obs = _read_matrix(root / ent["observed_file"], genes, np.int64)
            if not np.isin(obs, (0, 1)).all():
                raise DataError(f"slide {sid}: observed values must be 0 or 1")
            s.observed = obs.astype(bool)
        if "counts_file" in ent:
            s.counts = _read_matrix(root / ent["counts_file"], genes, np.int64)
        if "truth_file" in ent:
            s.truth = _read_matrix(root / ent["truth_file"], genes, np.int64)
        for label, mat in (("expr", s.expr), ("counts", s.counts)):
            if mat is not None and mat.shape[0] != s.n_spots:
                raise ConsistencyError(f"slide {sid}: {label} rows do not match spots.tsv")
        slides.append(s)
    ds = SlideDataset(
        name=manifest.get("name", root.name),
        organism=manifest.get("organism", ""),
        tissue=manifest.get("tissue", ""),
        genes=genes,
        slides=slides,
        split_map=split_map,
    )
    return ds.validate()


def _write_matrix(path: Path, mat: np.ndarray, genes: list[str], fmt: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("\t".join(genes) + "\n")
        if mat.shape[0]:
            np.savetxt(fh, mat, fmt=fmt, delimiter="\t")


def save_dataset(ds: SlideDataset, path) -> None:
    """Write ``ds`` in the directory format; expression is stored as float32."""
    ds.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    if not os.access(root, os.W_OK):
        raise PermissionError(f"{root} is not writable")
    entries = []
    for s in ds.slides:
        sdir = root / s.slide_id
        sdir.mkdir(exist_ok=True)
        with open(sdir / "spots.tsv", "w", newline="") as fh:
            fh.write("spot_id\tx\ty\tarray_row\tarray_col\n")
            for sid, (x, y), r, c in zip(s.spot_ids, s.coords, s.array_rows, s.array_cols):
                fh.write(f"{sid}\t{float(x)!r}\t{float(y)!r}\t{int(r)}\t{int(c)}\n")
        ent = {"id": s.slide_id, "split": ds.split_map[s.slide_id], "spots_file": f"{s.slide_id}/spots.tsv"}
        if s.expr is not None:
            _write_matrix(sdir / "expr.tsv", s.expr.astype(np.float32), ds.genes, FLOAT_FMT)
            _write_matrix(sdir / "observed.tsv", s.observed.astype(np.int64), ds.genes, "%d")
            ent["expr_file"] = f"{s.slide_id}/expr.tsv"
            ent["observed_file"] = f"{s.slide_id}/observed.tsv"
        if s.counts is not None:
            _write_matrix(sdir / "counts.tsv", s.counts, ds.genes, "%d")
            ent["counts_file"] = f"{s.slide_id}/counts.tsv"
        if s.truth is not None:
            _write_matrix(sdir / "truth.tsv", s.truth, ds.genes, "%d")
            ent["truth_file"] = f"{s.slide_id}/truth.tsv"
        entries.append(ent)
    manifest = {
        "name": ds.name,
        "organism": ds.organism,
        "tissue": ds.tissue,
        "genes": ds.genes,
        "slides": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


# ---------------------------------------------------------------------------
# neighbourhoods
# ---------------------------------------------------------------------------


@dataclass
class NeighborIndex:
    """Per-spot neighbour lists, padded to ``target_count`` with -1."""

    hops: int
    target_count: int
    neighbors: np.ndarray  # (n, target_count) int64
    pad_mask: np.ndarray  # (n, target_count) bool

    def __len__(self) -> int:
        return self.neighbors.shape[0]

    def lists(self) -> list[list[int]]:
        return [row[~pad].tolist() for row, pad in zip(self.neighbors, self.pad_mask)]


def hop_target(hops: int) -> int:
    """Number of spots within ``hops`` rings of a hexagonal lattice."""
    return 3 * hops * (hops + 1)


def spot_spacing(coords: np.ndarray, backend=None) -> float:
    """Median nearest-neighbour distance; 1.0 for a single spot."""
    if coords.shape[0] < 2:
        return 1.0
    nn = kernels.radius_knn(coords, 1, backend=backend)[:, 0]
    d = np.hypot(*(coords[nn] - coords).T)
    return float(np.median(d))


def radius_neighbors(coords: np.ndarray, hops: int, spacing: float | None = None, backend=None) -> np.ndarray:
    """Nearest spots inside the ``hops``-ring disk, -1 padded to the lattice count."""
    if spacing is None:
        spacing = spot_spacing(coords, backend=backend)
    k = hop_target(hops)
    return kernels.radius_knn(coords, k, hops * spacing * HOP_RADIUS_MARGIN, backend=backend)


def build_neighbor_index(slide: Slide, hops: int, backend=None) -> NeighborIndex:
    """Neighbours within ``hops`` hexagonal rings of every spot.

    On a regular Visium lattice this yields exactly 6, 18 or 36 neighbours
    for interior spots; edge spots get padded slots.
    """
    if hops not in HOP_TARGETS:
        raise ValueError(f"hops must be one of {sorted(HOP_TARGETS)}, got {hops}")
    if not np.all(np.isfinite(slide.coords)):
        raise DataError(f"slide {slide.slide_id}: non-finite coordinates")
    nbr = radius_neighbors(slide.coords, hops, backend=backend)
    return NeighborIndex(hops, HOP_TARGETS[hops], nbr, nbr < 0)


def region_index(slide: Slide, max_hops: int, backend=None):
    """Sorted neighbours out to ``max_hops`` plus per-hop region sizes.

    Returns ``(nbr, region_end)`` where ``region_end[i, h]`` counts the
    leading entries of ``nbr[i]`` lying within ``h + 1`` hops.
    """
    spacing = spot_spacing(slide.coords, backend=backend)
    nbr = radius_neighbors(slide.coords, max_hops, spacing, backend=backend)
    safe = np.where(nbr < 0, 0, nbr)
    dist = np.hypot(*(slide.coords[safe] - slide.coords[:, None, :]).transpose(2, 0, 1))
    dist[nbr < 0] = np.inf
    radii = np.arange(1, max_hops + 1) * spacing * HOP_RADIUS_MARGIN
    # distances are sorted, so the region is the prefix below each radius
    region_end = (dist[:, :, None] <= radii[None, None, :]).sum(axis=1)
    return nbr, region_end.astype(np.int64)
