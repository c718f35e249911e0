import numpy as np
import pytest

from spackle import cli
from spackle import config as C
from spackle.data import load_dataset
from spackle.errors import ConfigError


def test_defaults_and_precedence(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\nlr = 0.01\nmax-iters = 7\n")
    cfg = C.resolve("train", C.read_config_file(f), {"max_iters": "9"}, env={"SPACKLE_SEED": "5"})
    assert cfg["lr"] == 0.01 and cfg["max_iters"] == 9 and cfg["seed"] == 5
    assert cfg["hops"] == 2 and cfg["d_model"] == 128
    assert C.resolve("train", {"seed": "1"}, env={"SPACKLE_SEED": "5"})["seed"] == 1


def test_unknown_and_bad_keys(tmp_path):
    with pytest.raises(ConfigError, match="unknown key"):
        C.resolve("train", {"learning_rate": "1"}, env={})
    with pytest.raises(ConfigError):
        C.resolve("train", {"max_iters": "many"}, env={})
    f = tmp_path / "dup.cfg"
    f.write_text("lr = 1\nlr = 2\n")
    with pytest.raises(ConfigError, match="duplicate"):
        C.read_config_file(f)
    f.write_text("just words\n")
    with pytest.raises(ConfigError):
        C.read_config_file(f)


def test_snapshot_replays_to_the_same_config(tmp_path):
    cfg = C.resolve("evaluate", {}, {"methods": "median", "rho": "0.45", "input": "x", "output": "y"}, env={})
    p = C.write_snapshot("evaluate", cfg, tmp_path)
    again = C.resolve("evaluate", C.read_config_file(p), env={})
    assert again == cfg


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


def _run(*argv):
    return cli.main([str(a) for a in argv])


def test_cli_end_to_end(workdir):
    raw, pre, run = workdir / "raw", workdir / "pre", workdir / "run"
    assert _run("synth", "--output", raw, "--grid-rows", 8, "--grid-cols", 8, "--n-genes", 12, "--seed", 3) == 0
    assert (raw / "synth_info.json").exists()
    assert _run("preprocess", "--input", raw, "--output", pre, "--k-genes", 8) == 0
    assert load_dataset(pre).n_genes == 8
    assert (pre / "qc_report.json").exists() and (pre / "moran_scores.tsv").exists()
    assert _run("train", "--input", pre, "--output", run, "--max-iters", 20, "--eval-every", 10,
                "--d-model", 16, "--n-layers", 1, "--n-heads", 2, "--batch-size", 32) == 0
    for name in ("model.ckpt", "history.tsv", C.SNAPSHOT_NAME):
        assert (run / name).exists()
    ev = workdir / "eval"
    assert _run("evaluate", "--input", pre, "--output", ev, "--model", run / "model.ckpt",
                "--methods", "spackle,median,global-median", "--n-assays", 2) == 0
    assert len((ev / "report.tsv").read_text().splitlines()) == 1 + 3 * 3
    assert (ev / "scatter.tsv").exists()
    done = workdir / "done"
    assert _run("complete", "--input", pre, "--output", done, "--method", "spackle",
                "--model", run / "model.ckpt") == 0
    ds = load_dataset(done)
    assert all(np.isfinite(s.expr).all() for s in ds.slides)
    sw = workdir / "sweep"
    assert _run("sweep", "--input", pre, "--output", sw, "--method", "median", "--fractions", "0.2,0.4",
                "--n-assays", 2) == 0
    assert len((sw / "sweep.tsv").read_text().splitlines()) == 1 + 2 * 2
    maps = workdir / "maps"
    gene = ds.genes[0]
    assert _run("export-maps", "--input", pre, "--output", maps, "--gene", gene,
                "--model", run / "model.ckpt") == 0
    assert sorted(p.name for p in maps.glob("map_*.tsv")) == sorted(
        f"map_{gene}_{v}.tsv" for v in ("truth", "masked", "median", "spackle"))


def test_train_replay_from_snapshot(workdir):
    run = workdir / "run"
    replay = workdir / "replay"
    cfgfile = run / C.SNAPSHOT_NAME
    assert _run("train", "--config", cfgfile, "--output", replay) == 0
    assert (replay / "history.tsv").read_text() == (run / "history.tsv").read_text()


def test_exit_codes(workdir, capsys):
    assert _run("evaluate", "--input", workdir / "missing", "--output", workdir / "x") == 2
    assert _run("train", "--input", workdir / "pre", "--output", workdir / "x", "--hops", "two") == 2
    # a checkpoint trained on 8 genes applied to a 6-gene panel
    other = workdir / "pre6"
    assert _run("preprocess", "--input", workdir / "raw", "--output", other, "--k-genes", 6) == 0
    code = _run("evaluate", "--input", other, "--output", workdir / "bad", "--model",
                workdir / "run" / "model.ckpt", "--methods", "spackle")
    assert code == 4
    assert "error" in capsys.readouterr().err


def test_unknown_flag_is_rejected():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--learning-rate", "1"])
    assert exc.value.code == 2
