import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spackle import synth
from spackle.data import Slide, SlideDataset
from spackle.errors import ConfigError, ConsistencyError, DataError
from spackle.preprocess import (FilterConfig, combat_correct, filter_dataset, knn_edges, moran_rank, morans_i,
                                preprocess_pipeline, qc_report, select_top_genes, tpm_log_normalize)

from conftest import make_slide


def moran_double_sum(x, W):
    """Textbook double sum over a dense weight matrix."""
    n = len(x)
    z = x - x.mean()
    num = 0.0
    for i in range(n):
        for j in range(n):
            num += W[i, j] * z[i] * z[j]
    return n / W.sum() * num / (z @ z)


def dense_knn_weights(coords, k):
    n = coords.shape[0]
    W = np.zeros((n, n))
    for i in range(n):
        diff = coords - coords[i]
        d = (diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1]).astype(np.float32)  # same tie rule as radius_knn
        d[i] = np.inf
        order = sorted(range(n), key=lambda j: (d[j], j))[:k]
        W[i, order] = 1
    return np.maximum(W, W.T)


def test_moran_matches_double_sum_oracle():
    rng = np.random.default_rng(0)
    for n in (30, 120, 400):
        coords = rng.uniform(0, 20, (n, 2))
        x = rng.standard_normal((n, 3)) + coords[:, :1] * np.array([0.0, 0.1, 1.0])
        src, dst = knn_edges(coords, 6)
        got = morans_i(x, src, dst)
        W = dense_knn_weights(coords, 6)
        for j in range(3):
            assert abs(got[j] - moran_double_sum(x[:, j], W)) < 1e-10


def test_checkerboard_on_ring_is_minus_one():
    n = 12
    ang = 2 * np.pi * np.arange(n) / n
    coords = np.column_stack([np.cos(ang), np.sin(ang)])
    x = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    src, dst = knn_edges(coords, 2)
    assert morans_i(x, src, dst)[0] == -1.0


def test_moran_constant_gene_is_nan():
    coords = np.random.default_rng(1).uniform(0, 5, (20, 2))
    src, dst = knn_edges(coords, 4)
    assert math.isnan(morans_i(np.ones(20), src, dst)[0])


def test_moran_rank_orders_smooth_genes_first():
    coords, r, c = synth.hex_grid(12, 12, 1.0)
    rng = np.random.default_rng(2)
    smooth = np.sin(coords[:, 0] / 3)
    expr = np.column_stack([rng.standard_normal(144), smooth, np.ones(144), smooth + 0.5 * rng.standard_normal(144)])
    s = Slide("a", [f"a{i}" for i in range(144)], coords, r, c, expr, np.ones((144, 4), bool))
    ds = SlideDataset("d", "o", "t", ["noise", "smooth", "flat", "mid"], [s], {"a": "train"})
    ranked = [m.gene for m in moran_rank(ds)]
    assert ranked == ["smooth", "mid", "noise", "flat"]
    assert select_top_genes(moran_rank(ds), 2) == ["smooth", "mid"]
    with pytest.raises(ConfigError):
        select_top_genes(moran_rank(ds), 5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(0, 10_000), min_size=3, max_size=3).filter(lambda r: sum(r) > 0),
                min_size=1, max_size=20))
def test_tpm_rows_sum_to_a_million(rows):
    x = tpm_log_normalize(np.array(rows))
    np.testing.assert_allclose((np.exp2(x) - 1).sum(axis=1), 1e6, rtol=1e-9)


def test_tpm_rejects_empty_spot():
    with pytest.raises(DataError):
        tpm_log_normalize(np.array([[0, 0, 0]]))


def test_filter_dataset_thresholds():
    counts = np.array([[5, 0, 0, 1], [20, 3, 0, 0], [30, 4, 0, 2], [40, 0, 0, 3], [2, 0, 0, 0]])
    coords = np.arange(10, dtype=float).reshape(5, 2)
    s = make_slide("a", coords, None, counts=counts)
    ds = SlideDataset("d", "o", "t", ["A", "B", "C", "D"], [s], {"a": "train"})
    out = filter_dataset(ds, FilterConfig(min_counts=6, max_counts=1000, min_expr_fraction_slide=0.5,
                                          min_expr_fraction_global=0.5, min_gene_counts=5, max_gene_counts=10**6))
    # spot 4 (total 2) fails the count filter; C is never expressed; B is in 2 of 4 spots
    assert out.genes == ["A", "B", "D"]
    assert out.slides[0].n_spots == 4


def test_qc_report_fields(small_raw, small_processed):
    qc = qc_report(small_raw, small_processed)
    for key in ("corrupt_spots%", "missing_before%", "missing_after%", "spots_removed", "genes"):
        assert key in qc
    assert 0 <= qc["missing_after%"] <= 100
    assert qc["genes"] == 8


def _two_slides(shift=2.0, scale=3.0, n=300, g=32, seed=0):
    rng = np.random.default_rng(seed)
    coords, r, c = synth.hex_grid(15, 20, 1.0)
    base = rng.normal(8, 1, g)
    a = base + rng.standard_normal((n, g))
    b = base + shift + scale * rng.standard_normal((n, g))
    obs = np.ones((n, g), bool)
    sl = [Slide(f"s{i}", [f"s{i}_{k}" for k in range(n)], coords, r, c, e, obs.copy()) for i, e in enumerate((a, b))]
    return SlideDataset("cb", "o", "t", [f"g{j}" for j in range(g)], sl, {"s0": "train", "s1": "val"})


def test_combat_aligns_batches():
    ds = _two_slides()
    out, params = combat_correct(ds)
    a, b = (s.expr for s in out.slides)
    gap0 = np.abs(ds.slides[1].expr.mean(0) - ds.slides[0].expr.mean(0)).mean()
    gap1 = np.abs(b.mean(0) - a.mean(0)).mean()
    assert gap1 <= 0.1 * gap0
    ratio = b.var(0, ddof=1) / a.var(0, ddof=1)
    assert np.all((ratio > 0.8) & (ratio < 1.25))
    assert params.iterations and all(i > 0 for i in params.iterations)


def test_combat_identical_batches_is_identity():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((200, 6)) + 5
    coords, r, c = synth.hex_grid(10, 20, 1.0)
    slides = [Slide(f"s{i}", [f"s{i}_{k}" for k in range(200)], coords, r, c, x.copy(), np.ones((200, 6), bool))
              for i in range(2)]
    ds = SlideDataset("id", "o", "t", [f"g{j}" for j in range(6)], slides, {"s0": "train", "s1": "val"})
    out, _ = combat_correct(ds)
    for s in out.slides:
        np.testing.assert_allclose(s.expr, x, atol=1e-9)


def test_combat_leaves_unobserved_zero_and_needs_two_slides():
    ds = _two_slides()
    obs = ds.slides[0].observed.copy()
    obs[:5, 0] = False
    s0 = ds.slides[0]
    s0 = Slide(s0.slide_id, s0.spot_ids, s0.coords, s0.array_rows, s0.array_cols,
               np.where(obs, s0.expr, 0.0), obs)
    ds2 = ds.with_slides([s0, ds.slides[1]])
    out, _ = combat_correct(ds2)
    assert np.all(out.slides[0].expr[:5, 0] == 0)
    with pytest.raises(ConsistencyError):
        combat_correct(ds.with_slides(ds.slides[:1]))


def test_pipeline_runs_and_selects_k(small_raw):
    ds, qc, scores = preprocess_pipeline(small_raw, FilterConfig(), k_genes=5)
    assert ds.n_genes == 5 and len(scores) >= 5
    assert ds.genes == [m.gene for m in scores[:5]]
    for s in ds.slides:
        assert np.all(s.expr[~s.observed] == 0)
        np.testing.assert_array_equal(s.observed, s.counts > 0)
