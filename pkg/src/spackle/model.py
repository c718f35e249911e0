"""Transformer encoder with linear gene adapters, written directly in numpy.

Tokens are spots: a neighbourhood matrix of shape ``(g, n+1)`` becomes
``n+1`` tokens of width ``g``. Internally everything runs token-major,
``(batch, tokens, genes)``. The forward pass keeps whatever the backward
pass needs; gradients are derived by hand and checked against finite
differences in the test suite.

Encoder blocks are pre-norm::

    h = h + MHA(LN1(h))
    h = h + W2 relu(W1 LN2(h))

with no positional encoding, so neighbour columns are exchangeable.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .errors import FormatError, ModelMismatchError

CHECKPOINT_FORMAT = "spackle-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    n_genes: int
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    ff_width: int | None = None  # None -> 4 * d_model
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.ff_width is None:
            self.ff_width = 4 * self.d_model
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.n_genes, self.d_model, self.n_layers, self.n_heads, self.ff_width) < 1:
            raise ValueError("model dimensions must be positive")


def _layer_names(l):
    p = f"block{l}."
    return [p + n for n in ("ln1.g", "ln1.b", "attn.Wqkv", "attn.bqkv", "attn.Wo", "attn.bo",
                            "ln2.g", "ln2.b", "ff.W1", "ff.b1", "ff.W2", "ff.b2")]


def param_names(cfg: ModelConfig) -> list[str]:
    names = ["in.W", "in.b"]
    for l in range(cfg.n_layers):
        names += _layer_names(l)
    return names + ["out.W", "out.b"]


BUFFER_NAMES = ("in.shift", "in.scale", "out.shift", "out.scale")


def _xavier(rng, fan_in, fan_out, dtype):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)


class SpackleModel:
    """Parameters plus forward/backward.

    ``params`` are trained; ``buffers`` are fixed per-gene affine maps
    applied before ``L_in`` and after ``L_out`` (identity by default). They
    compose with the adapters into a single affine map each way, so they
    only change the conditioning of the optimisation, not the model.
    """

    def __init__(self, cfg: ModelConfig, params: dict, buffers: dict | None = None,
                 genes: list[str] | None = None, meta: dict | None = None):
        self.cfg = cfg
        self.params = params
        g = cfg.n_genes
        dtype = params["in.W"].dtype
        if buffers is None:
            buffers = {"in.shift": np.zeros(g), "in.scale": np.ones(g),
                       "out.shift": np.zeros(g), "out.scale": np.ones(g)}
        self.buffers = {k: np.asarray(v, dtype=dtype) for k, v in buffers.items()}
        self.genes = list(genes) if genes is not None else [f"gene{j}" for j in range(g)]
        self.meta = dict(meta or {})

    @property
    def dtype(self):
        return self.params["in.W"].dtype

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 42, dtype=np.float32, **kw) -> "SpackleModel":
        rng = np.random.default_rng(seed)
        d, g, f = cfg.d_model, cfg.n_genes, cfg.ff_width
        p = {"in.W": _xavier(rng, g, d, dtype), "in.b": np.zeros(d, dtype)}
        for l in range(cfg.n_layers):
            n = _layer_names(l)
            p[n[0]], p[n[1]] = np.ones(d, dtype), np.zeros(d, dtype)
            p[n[2]], p[n[3]] = _xavier(rng, d, 3 * d, dtype), np.zeros(3 * d, dtype)
            p[n[4]], p[n[5]] = _xavier(rng, d, d, dtype), np.zeros(d, dtype)
            p[n[6]], p[n[7]] = np.ones(d, dtype), np.zeros(d, dtype)
            p[n[8]], p[n[9]] = _xavier(rng, d, f, dtype), np.zeros(f, dtype)
            p[n[10]], p[n[11]] = _xavier(rng, f, d, dtype), np.zeros(d, dtype)
        p["out.W"], p["out.b"] = _xavier(rng, d, g, dtype), np.zeros(g, dtype)
        return cls(cfg, p, **kw)

    def copy(self) -> "SpackleModel":
        return SpackleModel(self.cfg, {k: v.copy() for k, v in self.params.items()},
                            {k: v.copy() for k, v in self.buffers.items()}, self.genes, self.meta)

    def astype(self, dtype) -> "SpackleModel":
        m = self.copy()
        m.params = {k: v.astype(dtype) for k, v in m.params.items()}
        m.buffers = {k: v.astype(dtype) for k, v in m.buffers.items()}
        return m

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # ------------------------------------------------------------------
    # forward / backward
    # ------------------------------------------------------------------

    def forward(self, x, pad=None, keep=False):
        """Reconstruct token-major input ``x`` of shape ``(B, T, g)``.

        ``pad`` is a ``(B, T)`` bool array of padded tokens; they are
        excluded as attention keys (their own outputs are computed but
        meaningless). Returns ``y`` or ``(y, cache)`` when ``keep``.
        """
        p, bf, cfg = self.params, self.buffers, self.cfg
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[2] != cfg.n_genes:
            raise ModelMismatchError(f"model expects {cfg.n_genes} genes, got input of shape {x.shape}")
        B, T, g = x.shape
        if pad is None:
            pad = np.zeros((B, T), dtype=bool)
        pad = np.asarray(pad, dtype=bool)
        cache = {"pad": pad, "shape": (B, T)}
        xs = ((x - bf["in.shift"]) / bf["in.scale"]).reshape(B * T, g)
        cache["xs"] = xs
        h = xs @ p["in.W"] + p["in.b"]
        for l in range(cfg.n_layers):
            h = self._block_fwd(l, h, pad, cache if keep else None)
        cache["h_final"] = h
        ys = h @ p["out.W"] + p["out.b"]
        y = (ys * bf["out.scale"] + bf["out.shift"]).reshape(B, T, g)
        return (y, cache) if keep else y

    def _block_fwd(self, l, h, pad, cache):
        p, cfg = self.params, self.cfg
        pre = f"block{l}."
        B, T = pad.shape
        d, H = cfg.d_model, cfg.n_heads
        dk = d // H
        scale = 1.0 / math.sqrt(dk)

        a, ln1 = _ln_fwd(h, p[pre + "ln1.g"], p[pre + "ln1.b"], cfg.ln_eps)
        qkv = (a @ p[pre + "attn.Wqkv"] + p[pre + "attn.bqkv"]).reshape(B, T, 3, H, dk)
        q = qkv[:, :, 0].transpose(0, 2, 1, 3)
        k = qkv[:, :, 1].transpose(0, 2, 1, 3)
        v = qkv[:, :, 2].transpose(0, 2, 1, 3)
        s = (q @ k.transpose(0, 1, 3, 2)) * scale
        att = _masked_softmax(s, pad)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B * T, d)
        h1 = h + o @ p[pre + "attn.Wo"] + p[pre + "attn.bo"]

        f, ln2 = _ln_fwd(h1, p[pre + "ln2.g"], p[pre + "ln2.b"], cfg.ln_eps)
        u = f @ p[pre + "ff.W1"] + p[pre + "ff.b1"]
        r = np.maximum(u, 0)
        h2 = h1 + r @ p[pre + "ff.W2"] + p[pre + "ff.b2"]
        if cache is not None:
            cache[l] = (ln1, a, q, k, v, att, o, ln2, f, u, r)
        return h2

    def backward(self, cache, dy) -> dict:
        """Gradients of a scalar loss w.r.t. every parameter, given dL/dy."""
        p, bf, cfg = self.params, self.buffers, self.cfg
        B, T = cache["shape"]
        g = cfg.n_genes
        grads = {}
        dys = (np.asarray(dy, dtype=self.dtype) * bf["out.scale"]).reshape(B * T, g)
        h = cache["h_final"]
        grads["out.W"] = h.T @ dys
        grads["out.b"] = dys.sum(axis=0)
        dh = dys @ p["out.W"].T
        for l in reversed(range(cfg.n_layers)):
            dh = self._block_bwd(l, dh, cache, grads)
        grads["in.W"] = cache["xs"].T @ dh
        grads["in.b"] = dh.sum(axis=0)
        return grads

    def _block_bwd(self, l, dh2, cache, grads):
        p, cfg = self.params, self.cfg
        pre = f"block{l}."
        B, T = cache["shape"]
        d, H = cfg.d_model, cfg.n_heads
        dk = d // H
        scale = 1.0 / math.sqrt(dk)
        ln1, a, q, k, v, att, o, ln2, f, u, r = cache[l]

        # feed-forward sublayer
        grads[pre + "ff.W2"] = r.T @ dh2
        grads[pre + "ff.b2"] = dh2.sum(axis=0)
        du = (dh2 @ p[pre + "ff.W2"].T) * (u > 0)
        grads[pre + "ff.W1"] = f.T @ du
        grads[pre + "ff.b1"] = du.sum(axis=0)
        df = du @ p[pre + "ff.W1"].T
        dh1 = dh2 + _ln_bwd(df, p[pre + "ln2.g"], ln2, grads, pre + "ln2.")

        # attention sublayer
        grads[pre + "attn.Wo"] = o.T @ dh1
        grads[pre + "attn.bo"] = dh1.sum(axis=0)
        do = (dh1 @ p[pre + "attn.Wo"].T).reshape(B, T, H, dk).transpose(0, 2, 1, 3)
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dkk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.stack([dq, dkk, dv], axis=2)  # (B, H, 3, T, dk)
        dqkv = dqkv.transpose(0, 3, 2, 1, 4).reshape(B * T, 3 * d)
        grads[pre + "attn.Wqkv"] = a.T @ dqkv
        grads[pre + "attn.bqkv"] = dqkv.sum(axis=0)
        da = dqkv @ p[pre + "attn.Wqkv"].T
        return dh1 + _ln_bwd(da, p[pre + "ln1.g"], ln1, grads, pre + "ln1.")

    def attention_weights(self, x, pad=None) -> list[np.ndarray]:
        """Per-layer attention maps ``(B, H, T, T)``, for inspection and tests."""
        _, cache = self.forward(x, pad, keep=True)
        return [cache[l][5] for l in range(self.cfg.n_layers)]


def _ln_fwd(x, gamma, beta, eps, backend=None):
    y, xh, rstd = kernels.layernorm_fwd(x, gamma, beta, eps, backend=backend)
    return y, (xh, rstd)


def _ln_bwd(dy, gamma, cache, grads, prefix, backend=None):
    dx, grads[prefix + "g"], grads[prefix + "b"] = kernels.layernorm_bwd(dy, gamma, *cache, backend=backend)
    return dx


def _masked_softmax(s, pad):
    # padded keys get exactly zero weight; every query has an unpadded centre key
    s = np.where(pad[:, None, None, :], -np.inf, s)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class Adam:
    """Adam with the conventional defaults (betas 0.9/0.999, eps 1e-8)."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# checkpoints: one JSON header line, then little-endian float32 tensors
# ---------------------------------------------------------------------------


def save_checkpoint(model: SpackleModel, path) -> None:
    names = param_names(model.cfg) + list(BUFFER_NAMES)
    tensors = {**model.params, **model.buffers}
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "hyperparams": asdict(model.cfg),
        "genes": model.genes,
        "seed": model.meta.get("seed"),
        "meta": model.meta,
        "dtype": "<f4",
        "tensors": [{"name": n, "shape": list(tensors[n].shape)} for n in names],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(tensors[n], dtype="<f4").tobytes())


def load_checkpoint(path) -> SpackleModel:
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: not a checkpoint") from exc
        if header.get("format") != CHECKPOINT_FORMAT:
            raise FormatError(f"{path}: not a checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')}")
        tensors = {}
        for ent in header["tensors"]:
            shape = tuple(ent["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * count)
            if len(buf) != 4 * count:
                raise FormatError(f"{path}: truncated at tensor {ent['name']}")
            tensors[ent["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after tensors")
    cfg = ModelConfig(**header["hyperparams"])
    params = {n: tensors[n] for n in param_names(cfg)}
    buffers = {n: tensors[n] for n in BUFFER_NAMES}
    return SpackleModel(cfg, params, buffers, header["genes"], header.get("meta"))
