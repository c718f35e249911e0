"""Command-line entry point: ``spackle <command> [--config FILE] [--key value ...]``.

Exit codes: 0 ok, 2 bad input, 3 training failure, 4 model/panel mismatch,
5 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as C
from . import engine, evaluate, synth
from .data import load_dataset, save_dataset
from .errors import ConfigError, SpackleError
from .median import MedianConfig, global_gene_medians
from .model import load_checkpoint, save_checkpoint
from .preprocess import FilterConfig, preprocess_pipeline

log = logging.getLogger("spackle")

EXIT_OK = 0


def _backend(cfg):
    b = cfg.get("backend", "auto")
    if b not in ("auto", "numba", "numpy"):
        raise ConfigError(f"backend must be auto, numba or numpy, not {b!r}")
    return None if b == "auto" else b


def _outdir(cfg) -> Path:
    C.require(cfg, "output")
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _median_cfg(cfg):
    return MedianConfig(max_hops=cfg["max_hops"])


def _load_model(cfg):
    C.require(cfg, "model")
    return load_checkpoint(cfg["model"])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_preprocess(cfg) -> int:
    C.require(cfg, "input")
    raw = load_dataset(cfg["input"])
    fcfg = FilterConfig(cfg["min_counts"], cfg["max_counts"], cfg["frac_slide"], cfg["frac_global"],
                        cfg["min_gene_counts"], cfg["max_gene_counts"])
    ds, qc, scores = preprocess_pipeline(raw, fcfg, k_genes=cfg["k_genes"], moran_k=cfg["moran_k"],
                                         combat_enabled=cfg["combat_enabled"], backend=_backend(cfg))
    out = _outdir(cfg)
    save_dataset(ds, out)
    _write_json(qc, out / "qc_report.json")
    evaluate.write_tsv(out / "moran_scores.tsv",
                       [("gene", "mean_I", *[f"I_{s.slide_id}" for s in raw.slides])]
                       + [(s.gene, s.mean_I, *s.per_slide_I) for s in scores])
    C.write_snapshot("preprocess", cfg, out)
    print(f"kept {qc['genes']} genes and {qc['spots']} spots; missing {qc['missing_after%']:.2f}%")
    return EXIT_OK


def _train_config(cfg):
    return engine.TrainConfig(batch_size=cfg["batch_size"], lr=cfg["lr"], max_iters=cfg["max_iters"],
                              seed=cfg["seed"], mask_rho=cfg["mask_rho"], hops=cfg["hops"],
                              eval_every=cfg["eval_every"], d_model=cfg["d_model"], n_layers=cfg["n_layers"],
                              n_heads=cfg["n_heads"], ff_width=cfg["ff_width"] or None,
                              scored_genes=list(cfg["scored_genes"]) or None)


def cmd_train(cfg) -> int:
    C.require(cfg, "input")
    ds = load_dataset(cfg["input"])
    backend = _backend(cfg)
    try:
        tcfg = _train_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    pre, _ = engine.precomplete_dataset(ds, _median_cfg(cfg), backend=backend)
    out = _outdir(cfg)

    def progress(it, loss, val):
        log.info("iter %d  train %.5f  val %.5f", it, loss, val)

    if cfg["lr_sweep"]:
        model, hist, runs = engine.lr_sweep(pre, tcfg, backend=backend, progress=progress)
        evaluate.write_tsv(out / "lr_sweep.tsv", [("lr", "best_iter", "best_val_mse")]
                           + [(lr, h.best_iter, h.best_val) for lr, h in runs])
    else:
        model, hist = engine.train(pre, tcfg, backend=backend, progress=progress)
    model.meta["max_hops"] = cfg["max_hops"]
    save_checkpoint(model, out / "model.ckpt")
    evaluate.write_tsv(out / "history.tsv", [("iter", "train_loss", "val_mse")]
                       + [(i, "" if t is None else t, "" if v is None else v) for i, t, v in hist.rows()])
    C.write_snapshot("train", cfg, out)
    print(f"best validation mse {hist.best_val:.6g} at iteration {hist.best_iter} (lr {hist.lr:g})")
    return EXIT_OK


def cmd_complete(cfg) -> int:
    C.require(cfg, "input")
    ds = load_dataset(cfg["input"])
    backend = _backend(cfg)
    method = cfg["method"]
    if method not in ("median", "spackle"):
        raise ConfigError(f"complete --method must be median or spackle, not {method!r}")
    pre, _ = engine.precomplete_dataset(ds, _median_cfg(cfg), backend=backend)
    if method == "spackle":
        model = _load_model(cfg)
        slides = [engine.infer_complete(model, s, genes=ds.genes, backend=backend)[0] for s in pre.slides]
        pre = pre.with_slides(slides)
    out = _outdir(cfg)
    save_dataset(pre, out)
    filled = sum(int((~s.observed).sum()) for s in pre.slides)
    C.write_snapshot("complete", cfg, out)
    print(f"completed {filled} cells with the {method} method")
    return EXIT_OK


def _methods(cfg, ds, backend):
    names = cfg["methods"]
    if not names:
        raise ConfigError("no methods given")
    model = _load_model(cfg) if "spackle" in names else None
    return [evaluate.build_method(n, ds, model=model, median_cfg=_median_cfg(cfg), backend=backend)
            for n in names]


def cmd_evaluate(cfg) -> int:
    C.require(cfg, "input")
    ds = load_dataset(cfg["input"])
    methods = _methods(cfg, ds, _backend(cfg))
    out = _outdir(cfg)
    reports = [evaluate.masked_evaluation(m, ds, cfg["rho"], cfg["n_assays"], cfg["seed"]) for m in methods]
    evaluate.write_reports(reports, out)
    if cfg["scatter"]:
        rows = []
        for m in methods:
            rows += evaluate.scatter_export(m, ds, cfg["rho"], base_seed=cfg["seed"])
        evaluate.write_tsv(out / "scatter.tsv", [("truth", "prediction", "gene", "method"), *rows])
    C.write_snapshot("evaluate", cfg, out)
    for r in reports:
        print(f"{r.method}\tmean_mse {r.mean_mse:.6g}\tmean_pcc {r.mean_pcc:.6g}")
    return EXIT_OK


def cmd_sweep(cfg) -> int:
    C.require(cfg, "input")
    ds = load_dataset(cfg["input"])
    methods = _methods(cfg, ds, _backend(cfg))
    fractions = evaluate.parse_fractions(cfg["fractions"])
    out = _outdir(cfg)
    reports, rows = evaluate.corruption_sweep(ds, fractions, methods, cfg["n_assays"], cfg["seed"])
    evaluate.write_sweep(rows, out / "sweep.tsv")
    evaluate.write_reports(reports, out)
    C.write_snapshot("sweep", cfg, out)
    for r in reports:
        print(f"{r.masking_fraction:g}\t{r.method}\t{r.mean_mse:.6g}")
    return EXIT_OK


def cmd_synth(cfg) -> int:
    scfg = synth.SynthConfig(n_slides=cfg["n_slides"], grid_rows=cfg["grid_rows"], grid_cols=cfg["grid_cols"],
                             n_genes=cfg["n_genes"], correlation_length=cfg["correlation_length"],
                             noise_sd=cfg["noise_sd"], dropout_rate=cfg["dropout_rate"],
                             batch_shift=cfg["batch_shift"], batch_scale=cfg["batch_scale"], seed=cfg["seed"])
    ds = synth.generate(scfg)
    out = _outdir(cfg)
    save_dataset(ds, out)
    _write_json(synth.describe(scfg), out / "synth_info.json")
    C.write_snapshot("synth", cfg, out)
    print(f"wrote {len(ds.slides)} slides x {ds.slides[0].n_spots} spots x {ds.n_genes} genes to {out}")
    return EXIT_OK


def cmd_export_maps(cfg) -> int:
    C.require(cfg, "input", "gene")
    ds = load_dataset(cfg["input"])
    backend = _backend(cfg)
    sid = cfg["slide"]
    slides = evaluate.eval_slides(ds)
    slide = ds.slide(sid) if sid else slides[0]
    hidden = evaluate.assay_masks([slide], cfg["rho"], cfg["seed"])[0]
    visible = evaluate.hide(slide, hidden)
    med = global_gene_medians(ds.split("train"))
    variants = {"truth": None, "masked": visible.expr,
                "median": evaluate.MedianMethod(med, _median_cfg(cfg), backend).fill(visible, hidden)}
    if cfg.get("model"):
        sp = evaluate.SpackleMethod(load_checkpoint(cfg["model"]), med, _median_cfg(cfg), backend)
        variants["spackle"] = sp.fill(visible, hidden)
    out = _outdir(cfg)
    paths = evaluate.expression_map_export(slide, cfg["gene"], ds.genes, variants, out, png=cfg["png"])
    C.write_snapshot("export-maps", cfg, out)
    print("\n".join(str(p) for p in paths))
    return EXIT_OK


COMMANDS = {"preprocess": cmd_preprocess, "train": cmd_train, "complete": cmd_complete,
            "evaluate": cmd_evaluate, "sweep": cmd_sweep, "synth": cmd_synth, "export-maps": cmd_export_maps}

HELP = {
    "preprocess": "filter, normalise, rank genes and batch-correct a raw dataset",
    "train": "median pre-complete and train a completion model",
    "complete": "fill missing values with the median method or a trained model",
    "evaluate": "masked multi-assay evaluation",
    "sweep": "evaluation over a range of masking fractions",
    "synth": "generate a synthetic dataset with ground truth",
    "export-maps": "per-spot expression tables of one gene for plotting",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spackle", description="Spatial transcriptomics gene completion.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", help="flat key = value file")
        for key in C.COMMAND_KEYS[name]:
            flag = "--" + key.name.replace("_", "-")
            if key.kind == "bool":
                p.add_argument(flag, dest=key.name, nargs="?", const="true", default=None, metavar="BOOL",
                               help=key.help)
            else:
                p.add_argument(flag, dest=key.name, default=None, help=key.help)
        if name in ("evaluate", "sweep"):
            p.add_argument("--method", dest="methods", default=None, help="alias of --methods")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    overrides = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config", "verbose") and v is not None}
    try:
        file_values = C.read_config_file(args.config) if args.config else {}
        cfg = C.resolve(args.command, file_values, overrides)
        return COMMANDS[args.command](cfg)
    except SpackleError as exc:
        print(f"spackle {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, NotADirectoryError) as exc:
        print(f"spackle {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the internal-error code
        log.debug("internal error", exc_info=True)
        print(f"spackle {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
