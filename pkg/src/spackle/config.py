"""Flat ``key = value`` run configuration.

A config file is UTF-8 text with one ``key = value`` per line; ``#`` starts
a comment. Every subcommand declares the keys it accepts, unknown keys are
an error, and each run writes the fully resolved configuration back out in
the same format so it can be replayed with ``--config``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

SEED_ENV = "SPACKLE_SEED"
SNAPSHOT_NAME = "resolved_config.cfg"


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _strs(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(str(v) for v in text)
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


_PARSERS = {"int": int, "float": float, "bool": _bool, "str": str, "path": str,
            "floats": _floats, "strs": _strs}


@dataclass(frozen=True)
class Key:
    name: str
    kind: str
    default: object
    help: str = ""

    def parse(self, raw):
        if raw is None:
            return None
        try:
            return _PARSERS[self.kind](raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {self.name!r}: {raw!r} ({exc})") from None

    def format(self, value) -> str:
        if value is None:
            return ""
        if self.kind == "bool":
            return "true" if value else "false"
        if self.kind == "float":
            return repr(float(value))
        if self.kind in ("floats", "strs"):
            return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        return str(value)


_COMMON = [
    Key("seed", "int", 42, "random seed (default 42, or $SPACKLE_SEED)"),
    Key("backend", "str", "auto", "kernel backend: auto, numba or numpy"),
]
_IO = [Key("input", "path", None, "input dataset directory"),
       Key("output", "path", None, "output directory")]
_MEDIAN = [Key("max_hops", "int", 4, "largest hop radius tried by the median fill")]
_MODEL = [Key("model", "path", None, "checkpoint file")]

COMMAND_KEYS: dict[str, list[Key]] = {
    "preprocess": _COMMON + _IO + [
        Key("min_counts", "int", 10, "minimum total counts per spot"),
        Key("max_counts", "int", 1_000_000, "maximum total counts per spot"),
        Key("frac_slide", "float", 0.2, "minimum fraction of expressing spots per slide"),
        Key("frac_global", "float", 0.6, "minimum fraction of expressing spots overall"),
        Key("min_gene_counts", "int", 10, "minimum total counts per gene"),
        Key("max_gene_counts", "int", 1_000_000, "maximum total counts per gene"),
        Key("k_genes", "int", 128, "number of genes kept by Moran's I rank"),
        Key("moran_k", "int", 6, "neighbours in the Moran weight graph"),
        Key("combat_enabled", "bool", True, "apply ComBat across slides"),
    ],
    "train": _COMMON + _IO + _MEDIAN + [
        Key("lr", "float", 1e-3, "learning rate of a single run"),
        Key("lr_sweep", "bool", False, "train over the ten-value learning-rate grid"),
        Key("max_iters", "int", 10_000, "training iterations"),
        Key("batch_size", "int", 256, "neighbourhoods per step"),
        Key("hops", "int", 2, "neighbourhood size in hexagonal hops (0..3)"),
        Key("mask_rho", "float", 0.3, "fraction of cells drawn by the random mask"),
        Key("eval_every", "int", 100, "iterations between validation passes"),
        Key("d_model", "int", 128, "transformer width"),
        Key("n_layers", "int", 2, "encoder blocks"),
        Key("n_heads", "int", 4, "attention heads"),
        Key("ff_width", "int", 0, "feed-forward width (0 means 4 * d_model)"),
        Key("scored_genes", "strs", (), "genes that are masked and scored (empty: all)"),
    ],
    "complete": _COMMON + _IO + _MEDIAN + _MODEL + [
        Key("method", "str", "median", "median or spackle"),
    ],
    "evaluate": _COMMON + _IO + _MEDIAN + _MODEL + [
        Key("methods", "strs", ("median", "global-median"), "methods to evaluate"),
        Key("rho", "float", 0.3, "masking fraction"),
        Key("n_assays", "int", 10, "assays per evaluation"),
        Key("scatter", "bool", True, "write scatter.tsv for the first assay"),
    ],
    "sweep": _COMMON + _IO + _MEDIAN + _MODEL + [
        Key("methods", "strs", ("median", "global-median"), "methods to evaluate"),
        Key("fractions", "str", "0.1..0.7", "fractions: lo..hi[:step] or a comma list"),
        Key("n_assays", "int", 10, "assays per (fraction, method)"),
    ],
    "synth": _COMMON + [
        Key("output", "path", None, "output directory"),
        Key("n_slides", "int", 3, "slides"),
        Key("grid_rows", "int", 24, "lattice rows"),
        Key("grid_cols", "int", 25, "lattice columns"),
        Key("n_genes", "int", 32, "genes"),
        Key("correlation_length", "float", 4.0, "kernel length in spot spacings"),
        Key("noise_sd", "float", 0.2, "i.i.d. noise sd in log space"),
        Key("dropout_rate", "float", 0.1, "Bernoulli dropout probability"),
        Key("batch_shift", "floats", (0.0,), "per-slide additive shift, recycled"),
        Key("batch_scale", "floats", (1.0,), "per-slide deviation scale, recycled"),
    ],
    "export-maps": _COMMON + _IO + _MEDIAN + _MODEL + [
        Key("gene", "str", None, "gene to map"),
        Key("slide", "str", "", "slide id (default: first test slide)"),
        Key("rho", "float", 0.3, "masking fraction of the exported assay"),
        Key("png", "bool", False, "also render PNG images (needs matplotlib)"),
    ],
}


def keys_for(command: str) -> dict[str, Key]:
    try:
        return {k.name: k for k in COMMAND_KEYS[command]}
    except KeyError:
        raise ConfigError(f"unknown command {command!r}") from None


def read_config_file(path) -> dict[str, str]:
    """Raw ``key -> string`` pairs; later duplicates are an error."""
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc.strerror}") from None
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise ConfigError(f"{p}:{n}: expected 'key = value'")
        if key in out:
            raise ConfigError(f"{p}:{n}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def resolve(command: str, file_values: dict | None = None, overrides: dict | None = None, env=None) -> dict:
    """Defaults < ``$SPACKLE_SEED`` < config file < explicit overrides."""
    keys = keys_for(command)
    env = os.environ if env is None else env
    for src in (file_values or {}), (overrides or {}):
        unknown = sorted(set(src) - set(keys))
        if unknown:
            raise ConfigError(f"unknown key(s) for {command!r}: {', '.join(unknown)}")
    cfg = {name: k.default for name, k in keys.items()}
    if env.get(SEED_ENV, "").strip():
        cfg["seed"] = keys["seed"].parse(env[SEED_ENV])
    for src in (file_values or {}), (overrides or {}):
        for name, raw in src.items():
            if raw is not None:
                cfg[name] = keys[name].parse(raw)
    return cfg


def format_config(command: str, cfg: dict) -> str:
    keys = keys_for(command)
    lines = [f"# resolved configuration for: {command}"]
    for name, k in keys.items():
        v = cfg.get(name)
        if v is None:
            continue
        lines.append(f"{name} = {k.format(v)}")
    return "\n".join(lines) + "\n"


def write_snapshot(command: str, cfg: dict, outdir) -> Path:
    p = Path(outdir) / SNAPSHOT_NAME
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(format_config(command, cfg), encoding="utf-8")
    return p


def require(cfg: dict, *names) -> None:
    missing = [n for n in names if cfg.get(n) in (None, "")]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join(missing)}")
