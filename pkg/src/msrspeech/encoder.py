"""Self-attention encoder over frame features, with every layer's hidden
states exposed for probing and exact analytic gradients for training.

Blocks are post-norm: x -> LN(x + attention(x)) -> LN(. + ffn(.)). Sinusoidal
absolute positions are added to the input; hidden state 0 is that input.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import nn


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    positions: str = "sinusoidal"  # or "none"

    def __post_init__(self):
        if self.dim % self.num_heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by {self.num_heads} heads")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.positions not in ("sinusoidal", "none"):
            raise ValueError(f"unknown positional scheme {self.positions!r}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads


_LAYER_TENSORS = (
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln1.g", "ln1.b", "w1", "b1", "w2", "b2", "ln2.g", "ln2.b",
)


def init_encoder_params(cfg: EncoderConfig, seed=0, dtype=np.float32):
    """Xavier-uniform weights, zero biases, identity layer norms."""
    rng = np.random.default_rng(seed)
    d, f = cfg.dim, cfg.ffn_dim
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for i in range(cfg.num_layers):
        p = f"layer{i}."
        for name in ("wq", "wk", "wv", "wo"):
            params[p + name] = nn.xavier_uniform(rng, (d, d), d, d, dtype)
        for name in ("bq", "bk", "bv", "bo"):
            params[p + name] = np.zeros(d, dtype=dtype)
        params[p + "ln1.g"] = np.ones(d, dtype=dtype)
        params[p + "ln1.b"] = np.zeros(d, dtype=dtype)
        params[p + "w1"] = nn.xavier_uniform(rng, (d, f), d, f, dtype)
        params[p + "b1"] = np.zeros(f, dtype=dtype)
        params[p + "w2"] = nn.xavier_uniform(rng, (f, d), f, d, dtype)
        params[p + "b2"] = np.zeros(d, dtype=dtype)
        params[p + "ln2.g"] = np.ones(d, dtype=dtype)
        params[p + "ln2.b"] = np.zeros(d, dtype=dtype)
    return params


def encoder_param_count(cfg: EncoderConfig) -> int:
    d, f = cfg.dim, cfg.ffn_dim
    per_layer = 4 * (d * d + d) + 2 * 2 * d + (d * f + f) + (f * d + d)
    return cfg.num_layers * per_layer


def sinusoidal_positions(t: int, dim: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(t, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    pe = np.zeros((t, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe.astype(dtype)


def _split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    t, d = x.shape
    return x.reshape(t, num_heads, d // num_heads).transpose(1, 0, 2)  # [h, T, dh]


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, t, dh = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * dh)


def _encode_full(cfg: EncoderConfig, params, x: np.ndarray):
    """Forward pass keeping every intermediate needed by the backward pass."""
    t, d = x.shape
    if d != cfg.dim:
        raise ValueError(f"input dim {d} != encoder dim {cfg.dim}")
    x = np.asarray(x)
    if cfg.positions == "sinusoidal":
        x = x + sinusoidal_positions(t, d, dtype=x.dtype)
    hidden = [x]
    caches = []
    scale = 1.0 / np.sqrt(cfg.head_dim)
    for i in range(cfg.num_layers):
        p = f"layer{i}."
        h_in = hidden[-1]
        q = _split_heads(h_in @ params[p + "wq"] + params[p + "bq"], cfg.num_heads)
        k = _split_heads(h_in @ params[p + "wk"] + params[p + "bk"], cfg.num_heads)
        v = _split_heads(h_in @ params[p + "wv"] + params[p + "bv"], cfg.num_heads)
        scores = np.einsum("htd,hsd->hts", q, k) * scale
        probs = nn.softmax(scores, axis=-1)
        ctx = np.einsum("hts,hsd->htd", probs, v)
        merged = _merge_heads(ctx)
        attn_out = merged @ params[p + "wo"] + params[p + "bo"]
        h1, ln1_cache = nn.layer_norm(
            h_in + attn_out, params[p + "ln1.g"], params[p + "ln1.b"]
        )
        z1 = h1 @ params[p + "w1"] + params[p + "b1"]
        a1 = nn.gelu(z1)
        ffn_out = a1 @ params[p + "w2"] + params[p + "b2"]
        h2, ln2_cache = nn.layer_norm(
            h1 + ffn_out, params[p + "ln2.g"], params[p + "ln2.b"]
        )
        hidden.append(h2)
        caches.append(
            dict(h_in=h_in, q=q, k=k, v=v, probs=probs, merged=merged,
                 ln1=ln1_cache, h1=h1, z1=z1, a1=a1, ln2=ln2_cache)
        )
    return hidden, caches


def encode(cfg: EncoderConfig, params, x: np.ndarray, collect_attention: bool = False):
    """Run the encoder; returns the list of num_layers+1 hidden states.

    Index 0 is the encoder input (features plus positions); the last entry is
    the contextual representation. With collect_attention, also returns the
    per-layer attention probability tensors [heads, T, T].
    """
    hidden, caches = _encode_full(cfg, params, x)
    if collect_attention:
        return hidden, [c["probs"] for c in caches]
    return hidden


def encoder_backward(cfg: EncoderConfig, params, x: np.ndarray, upstream):
    """Exact gradients given upstream gradients per hidden state.

    upstream is a sequence of num_layers+1 arrays (entries may be None) whose
    index matches the hidden-state list. Returns (param_grads, input_grad).
    """
    hidden, caches = _encode_full(cfg, params, x)
    if len(upstream) != cfg.num_layers + 1:
        raise ValueError(
            f"expected {cfg.num_layers + 1} upstream entries, got {len(upstream)}"
        )
    grads = OrderedDict((k, np.zeros_like(v)) for k, v in params.items())
    scale = 1.0 / np.sqrt(cfg.head_dim)

    def up(i):
        u = upstream[i]
        return None if u is None else np.asarray(u, dtype=hidden[0].dtype)

    g = up(cfg.num_layers)
    if g is None:
        g = np.zeros_like(hidden[-1])
    for i in reversed(range(cfg.num_layers)):
        p = f"layer{i}."
        c = caches[i]
        # ffn sub-block
        dres2, dg2, db2 = nn.layer_norm_backward(g, c["ln2"])
        grads[p + "ln2.g"] += dg2
        grads[p + "ln2.b"] += db2
        dffn = dres2
        grads[p + "w2"] += c["a1"].T @ dffn
        grads[p + "b2"] += dffn.sum(axis=0)
        da1 = dffn @ params[p + "w2"].T
        dz1 = da1 * nn.gelu_grad(c["z1"])
        grads[p + "w1"] += c["h1"].T @ dz1
        grads[p + "b1"] += dz1.sum(axis=0)
        dh1 = dres2 + dz1 @ params[p + "w1"].T
        # attention sub-block
        dres1, dg1, db1 = nn.layer_norm_backward(dh1, c["ln1"])
        grads[p + "ln1.g"] += dg1
        grads[p + "ln1.b"] += db1
        dattn_out = dres1
        grads[p + "wo"] += c["merged"].T @ dattn_out
        grads[p + "bo"] += dattn_out.sum(axis=0)
        dmerged = dattn_out @ params[p + "wo"].T
        dctx = _split_heads(dmerged, cfg.num_heads)
        dprobs = np.einsum("htd,hsd->hts", dctx, c["v"])
        dv = np.einsum("hts,htd->hsd", c["probs"], dctx)
        # softmax backward per row
        inner = (dprobs * c["probs"]).sum(axis=-1, keepdims=True)
        dscores = c["probs"] * (dprobs - inner)
        dq = np.einsum("hts,hsd->htd", dscores, c["k"]) * scale
        dk = np.einsum("hts,htd->hsd", dscores, c["q"]) * scale
        h_in = c["h_in"]
        dh_in = dres1
        for name, dmat in (("wq", dq), ("wk", dk), ("wv", dv)):
            dflat = _merge_heads(dmat)
            grads[p + name] += h_in.T @ dflat
            grads[p + "b" + name[1]] += dflat.sum(axis=0)
            dh_in = dh_in + dflat @ params[p + name].T
        g = dh_in
        u = up(i)
        if u is not None:
            g = g + u
    return grads, g
