import numpy as np
import pytest

from spackle import synth
from spackle.data import Slide, SlideDataset
from spackle.preprocess import FilterConfig, preprocess_pipeline


def make_slide(sid, coords, expr, observed=None, counts=None, truth=None):
    n = coords.shape[0]
    rows = np.arange(n, dtype=np.int64)
    cols = np.zeros(n, dtype=np.int64)
    if observed is None and expr is not None:
        observed = np.ones(expr.shape, dtype=bool)
    return Slide(sid, [f"{sid}_{i}" for i in range(n)], np.asarray(coords, float), rows, cols,
                 expr, observed, counts, truth)


def random_points(rng, n, jitter=0.0):
    coords, _, _ = synth.hex_grid(int(np.ceil(np.sqrt(n))), int(np.ceil(np.sqrt(n))), 1.0)
    coords = coords[rng.permutation(coords.shape[0])[:n]]
    return coords + jitter * rng.standard_normal(coords.shape)


@pytest.fixture(scope="session")
def small_raw():
    return synth.generate(synth.SynthConfig(grid_rows=10, grid_cols=10, n_genes=12, seed=3))


@pytest.fixture(scope="session")
def small_processed(small_raw):
    ds, _, _ = preprocess_pipeline(small_raw, FilterConfig(), k_genes=8)
    return ds


@pytest.fixture
def tiny_dataset():
    rng = np.random.default_rng(0)
    coords, r, c = synth.hex_grid(6, 6, 1.0)
    slides, split = [], {}
    for i, sp in enumerate(("train", "val", "test")):
        expr = rng.normal(5, 1, (36, 4))
        obs = rng.random((36, 4)) > 0.1
        expr = np.where(obs, expr, 0.0)
        slides.append(Slide(f"s{i}", [f"s{i}_{k}" for k in range(36)], coords, r, c, expr, obs))
        split[f"s{i}"] = sp
    return SlideDataset("tiny", "none", "none", [f"g{j}" for j in range(4)], slides, split).validate()


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
        terminalreporter.write_line(line)
