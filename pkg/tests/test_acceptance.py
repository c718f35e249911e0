"""Acceptance criteria, one test per criterion.

Each test records a ``PASS``/``FAIL`` line (shown in the pytest terminal
summary and printed to stdout) and then asserts, so a failing criterion is
reported with its measured values instead of being hidden.

The end-to-end run (criterion 7) trains for 10,000 iterations and takes
roughly ten minutes on one core.
"""

import math
import time
from fractions import Fraction

import numpy as np
import pytest

from spackle import cli, engine, evaluate, synth
from spackle.engine import apply_mask, draw_mask
from spackle.median import MedianConfig, median_complete
from spackle.preprocess import FilterConfig, combat_correct, knn_edges, morans_i, preprocess_pipeline, tpm_log_normalize

from conftest import ACCEPTANCE, make_slide, random_points
from gradcheck import max_rel_grad_error, tiny_problem
from oracles import median_region_oracle
from test_preprocess import _two_slides, dense_knn_weights

FRACTIONS = (0.3, 0.5, 0.7)
AUDITS = []


def record(n, title, ok, detail=""):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {title}" + (f" | {detail}" if detail else "")
    ACCEPTANCE.append(line)
    print(line)
    return ok


@pytest.fixture(scope="module")
def fixture_data():
    """3 slides x 600 spots x 32 genes with a strong spatial correlation."""
    raw = synth.generate(synth.SynthConfig(n_slides=3, grid_rows=24, grid_cols=25, n_genes=32, seed=42))
    ds, _, _ = preprocess_pipeline(raw, FilterConfig(), k_genes=32)
    pre, _ = engine.precomplete_dataset(ds)
    return raw, ds, pre


def test_criterion_01_mask_algebra():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    bad, n_cells, n_rand = 0, 0, 0
    for _ in range(10_000):
        g, n = int(rng.integers(1, 9)), int(rng.integers(1, 20))
        M_s = rng.random((g, n)) < rng.uniform(0.2, 1.0)
        E = np.where(M_s, rng.standard_normal((g, n)), 0.0)
        ms = draw_mask(M_s, 0.3, rng)
        E_m = apply_mask(E, ms.M_mask)
        bad += int((ms.M_mask & ~M_s).any())
        bad += int(not np.array_equal(ms.M_mask, M_s & ms.M_rand))
        bad += int(not np.array_equal(apply_mask(E_m, ms.M_mask), E_m))
        bad += int(not np.array_equal(E_m, E * ~ms.M_mask))
        n_cells += ms.M_rand.size
        n_rand += int(ms.M_rand.sum())
    density = n_rand / n_cells
    dt = time.perf_counter() - t0
    ok = bad == 0 and abs(density - 0.30) <= 0.02 and n_cells >= 10_000 and dt < 10
    record(1, "mask algebra", ok, f"violations {bad}, density {density:.4f} over {n_cells} cells, {dt:.1f} s")
    assert ok


def test_criterion_02_gradient_check():
    t0 = time.perf_counter()
    m, x, t, pad = tiny_problem(0, g=4, d=8, layers=1, heads=1, tokens=3)
    assert all(p.dtype == np.float64 for p in m.params.values())
    err = max_rel_grad_error(m, x, t, pad)
    dt = time.perf_counter() - t0
    ok = err < 1e-4 and dt < 30
    record(2, "gradient check", ok, f"max relative error {err:.2e} over all parameters, {dt:.1f} s")
    assert ok


def test_criterion_03_median_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    mismatched = 0
    sizes = []
    for i in range(50):
        n = int(rng.integers(10, 1001))
        coords = random_points(rng, n) * 100.0
        g = int(rng.integers(1, 4))
        vals = rng.normal(3, 1, (n, g))
        avail = rng.random((n, g)) > rng.uniform(0.1, 0.97)
        s = make_slide(f"r{i}", coords, np.where(avail, vals, 0.0), avail)
        gm = rng.normal(0, 1, g)
        cfg = MedianConfig(max_hops=4, min_observed=int(rng.integers(1, 3)))
        out, _, src = median_complete(s, gm, cfg)
        want, wsrc = median_region_oracle(coords, s.expr, avail, gm, 4, cfg.min_observed)
        mismatched += int(not (np.array_equal(out.expr, want) and np.array_equal(src, wsrc)))
        sizes.append(n)
    dt = time.perf_counter() - t0
    ok = mismatched == 0 and dt < 60
    record(3, "median filter vs region enumeration", ok,
           f"{mismatched}/50 slides differ, sizes {min(sizes)}..{max(sizes)}, {dt:.1f} s")
    assert ok


def test_criterion_04_moran_oracle():
    rng = np.random.default_rng(4)
    worst = 0.0
    for n in (40, 250, 1000):
        for coords in (random_points(rng, n), rng.uniform(0, 30, (n, 2))):
            x = rng.standard_normal((n, 2)) + np.column_stack([np.sin(coords[:, 0] / 4), coords[:, 1] / 10])
            src, dst = knn_edges(coords, 6)
            got = morans_i(x, src, dst)
            W = dense_knn_weights(coords, 6)
            for j in range(x.shape[1]):
                z = x[:, j] - x[:, j].mean()
                want = n / W.sum() * np.einsum("i,ij,j->", z, W, z) / (z @ z)
                worst = max(worst, abs(got[j] - want))
    ang = 2 * np.pi * np.arange(12) / 12
    ring = np.column_stack([np.cos(ang), np.sin(ang)])
    src, dst = knn_edges(ring, 2)
    checker = morans_i(np.where(np.arange(12) % 2 == 0, 1.0, -1.0), src, dst)[0]
    ok = worst < 1e-10 and checker == -1.0
    record(4, "Moran's I vs double sum", ok, f"max abs difference {worst:.1e}, checkerboard ring I = {float(checker)!r}")
    assert ok


def test_criterion_05_tpm(fixture_data):
    raw = fixture_data[0]
    rng = np.random.default_rng(5)
    fixtures = [s.counts for s in raw.slides]
    fixtures += [rng.integers(0, 10 ** int(rng.integers(1, 6)), (50, 20)) for _ in range(20)]
    fixtures.append(np.array([[1, 0, 0], [0, 0, 10 ** 9], [3, 3, 3]]))
    worst = 0.0
    for c in fixtures:
        c = c[c.sum(axis=1) > 0]
        sums = (np.exp2(tpm_log_normalize(c)) - 1).sum(axis=1)
        worst = max(worst, float(np.max(np.abs(sums - 1e6) / 1e6)))
    ok = worst <= 1e-3
    record(5, "TPM row sums", ok, f"max relative deviation {worst:.1e} over {len(fixtures)} fixtures")
    assert ok


def test_criterion_06_combat():
    ds = _two_slides(shift=2.0, scale=3.0)
    out, _ = combat_correct(ds)
    a0, b0 = (s.expr for s in ds.slides)
    a, b = (s.expr for s in out.slides)
    gap = np.abs(b.mean(0) - a.mean(0)).mean() / np.abs(b0.mean(0) - a0.mean(0)).mean()
    # variance ratio of slide 2 to slide 1, pooled over genes like the mean gap
    ratio = b.var(0, ddof=1).mean() / a.var(0, ddof=1).mean()
    per_gene = b.var(0, ddof=1) / a.var(0, ddof=1)
    twice, _ = combat_correct(out)
    drift = max(float(np.abs(x.expr - y.expr).max()) for x, y in zip(out.slides, twice.slides))
    ok = gap <= 0.10 and 0.9 <= ratio <= 1.1 and drift <= 1e-6
    record(6, "ComBat", ok, f"gap {100 * gap:.1f}% of original, variance ratio {ratio:.4f} "
           f"(per gene {per_gene.min():.3f}..{per_gene.max():.3f}), double application changes values by "
           f"up to {drift:.2e}")
    assert ok


def _frac_table(reports):
    return {(r.method, r.masking_fraction): r.mean_mse for r in reports}


def test_criterion_07_end_to_end():
    t0 = time.perf_counter()
    raw = synth.generate(synth.SynthConfig(n_slides=3, grid_rows=24, grid_cols=25, n_genes=32, seed=42))
    ds, _, _ = preprocess_pipeline(raw, FilterConfig(), k_genes=32)
    pre, _ = engine.precomplete_dataset(ds)
    cfg = engine.TrainConfig(lr=1e-3, max_iters=10_000, seed=42, d_model=128, n_layers=1, n_heads=4,
                             ff_width=128)
    model, hist = engine.train(pre, cfg)
    methods = [evaluate.build_method("spackle", ds, model=model), evaluate.build_method("median", ds)]
    reports, _ = evaluate.corruption_sweep(ds, FRACTIONS, methods)
    AUDITS.extend(r.audit for r in reports)
    dt = time.perf_counter() - t0
    mse = _frac_table(reports)
    sp = [mse[("spackle", f)] for f in FRACTIONS]
    md = [mse[("median", f)] for f in FRACTIONS]
    beats = all(s < m for s, m in zip(sp, md))
    widening = (md[-1] - sp[-1]) > (md[0] - sp[0])
    monotone = all(x <= y for x, y in zip(md, md[1:]))
    ok = beats and widening and monotone and dt < 900
    table = ", ".join(f"{f}: spackle {s:.4f} median {m:.4f}" for f, s, m in zip(FRACTIONS, sp, md))
    record(7, "end-to-end direction", ok,
           f"{table}; spackle<median {beats}, gap widens {widening}, median nondecreasing {monotone}; "
           f"best val {hist.best_val:.4f} at iter {hist.best_iter}; {dt:.0f} s")
    assert ok


def test_criterion_08_ten_assays(fixture_data):
    ds = fixture_data[1]
    a = evaluate.masked_evaluation(evaluate.build_method("median", ds), ds, 0.3, 10, base_seed=42)
    b = evaluate.masked_evaluation(evaluate.build_method("median", ds), ds, 0.3, 10, base_seed=42)
    AUDITS.extend([a.audit, b.audit])
    exact = float(sum(Fraction(r.mse) for r in a.per_assay) / 10)
    exact_pcc = float(sum(Fraction(r.pcc) for r in a.per_assay) / 10)
    same = [(r.mse, r.pcc, r.n_evaluated_cells) for r in a.per_assay] == \
        [(r.mse, r.pcc, r.n_evaluated_cells) for r in b.per_assay]
    ok = len(a.per_assay) == 10 and a.mean_mse == exact and a.mean_pcc == exact_pcc and same
    record(8, "10-assay protocol", ok, f"mean mse {a.mean_mse!r} vs exact {exact!r}; rerun identical {same}")
    assert ok


def test_criterion_09_leakage(fixture_data):
    ds, pre = fixture_data[1], fixture_data[2]
    model, _ = engine.train(pre, engine.TrainConfig(max_iters=30, d_model=128, n_layers=1, ff_width=128,
                                                    eval_every=10))
    leaks = 0

    def spy(inner):
        def fn(vis, hid):
            nonlocal leaks
            leaks += int((vis.observed & hid).sum()) + int((vis.expr[hid] != 0).sum())
            return inner.fill(vis, hid)
        return evaluate.CallableMethod(inner.name, fn)

    audits = list(AUDITS)
    for name in ("spackle", "median", "global-median"):
        m = spy(evaluate.build_method(name, ds, model=model))
        for f in (0.1, 0.4, 0.7):
            rep = evaluate.masked_evaluation(m, ds, f, 3)
            audits.append(rep.audit)
            # independent recount: every scored cell must be observed in the original data
            for i in range(3):
                for s, h in zip(evaluate.eval_slides(ds), evaluate.assay_masks(evaluate.eval_slides(ds), f, 42 + i)):
                    leaks += int((h & ~s.observed).sum())
    scored = sum(a.scored_cells for a in audits)
    unobs = sum(a.scored_unobserved for a in audits)
    visible = sum(a.hidden_values_visible for a in audits)
    ok = unobs == 0 and visible == 0 and leaks == 0 and scored > 0
    record(9, "leakage audit", ok, f"{scored} scored cells over {len(audits)} evaluations, "
           f"{unobs} with M_s = 0, {visible + leaks} leaked values")
    assert ok


def _train_eval(data, out):
    assert cli.main(["train", "--input", str(data), "--output", str(out / "train"), "--max-iters", "60",
                     "--eval-every", "20", "--n-layers", "1", "--ff-width", "128"]) == 0
    assert cli.main(["evaluate", "--input", str(data), "--output", str(out / "eval"), "--model",
                     str(out / "train" / "model.ckpt"), "--methods", "spackle,median", "--n-assays", "3"]) == 0
    return (out / "eval" / "report.tsv").read_bytes()


def test_criterion_10_determinism(tmp_path):
    raw = tmp_path / "raw"
    data = tmp_path / "data"
    assert cli.main(["synth", "--output", str(raw), "--grid-rows", "14", "--grid-cols", "14"]) == 0
    assert cli.main(["preprocess", "--input", str(raw), "--output", str(data), "--k-genes", "32"]) == 0
    first = _train_eval(data, tmp_path / "a")
    second = _train_eval(data, tmp_path / "b")
    ok = first == second and len(first) > 0
    record(10, "train + evaluate determinism", ok, f"report.tsv {len(first)} bytes, identical {first == second}")
    assert ok


def test_criterion_11_hops(fixture_data):
    ds, pre = fixture_data[1], fixture_data[2]
    mse = {}
    for hops in (0, 1, 2, 3):
        cfg = engine.TrainConfig(max_iters=400, hops=hops, d_model=128, n_layers=1, ff_width=128)
        model, _ = engine.train(pre, cfg)
        assert model.meta["hops"] == hops
        rep = evaluate.masked_evaluation(evaluate.build_method("spackle", ds, model=model), ds, 0.3, 10)
        AUDITS.append(rep.audit)
        mse[hops] = rep.mean_mse
    ok = all(math.isfinite(v) for v in mse.values()) and mse[2] <= mse[0]
    record(11, "neighbourhood size", ok, ", ".join(f"hops {h}: {v:.4f}" for h, v in mse.items()))
    assert ok
