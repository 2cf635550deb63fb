"""Minimal decoder-only transformer with exact reverse-mode gradients.

Pre-norm blocks, tanh-GELU feed-forward, learned absolute position
embeddings, untied input/output embedding matrices. Everything is plain
numpy with an explicit backward pass so gradients are exact, deterministic,
and checkable against finite differences at 64-bit precision.

Parameters live in a flat name -> array dict. Embedding rows split into
old/new groups at ``base_size``; every other tensor is internal. Attention
projections optionally carry mergeable low-rank adapters
(``<name>_lora_a`` / ``<name>_lora_b``).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_NEG_INF = -1e30

ATTN_PROJ_NAMES = ("wq", "wk", "wv", "wo")


class ParamGroup(enum.Enum):
    INPUT_EMBED_OLD = "input_embed_old"
    INPUT_EMBED_NEW = "input_embed_new"
    OUTPUT_EMBED_OLD = "output_embed_old"
    OUTPUT_EMBED_NEW = "output_embed_new"
    INTERNAL = "internal"


@dataclass
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    max_seq_len: int
    vocab_size: int
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size < 257:
            raise ValueError("vocab_size must be >= 257")
        if self.tie_embeddings:
            raise ValueError("tied embeddings are not supported (old/new output rows must be independent)")

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "max_seq_len": self.max_seq_len,
            "vocab_size": self.vocab_size,
            "tie_embeddings": self.tie_embeddings,
        }


@dataclass
class ModelParams:
    """Named parameter tensors plus the old/new embedding row boundary."""

    tensors: dict[str, np.ndarray]
    base_size: int
    lora_scale: float = 0.0

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.base_size, self.lora_scale)

    def names(self) -> list[str]:
        return sorted(self.tensors)

    @property
    def vocab_size(self) -> int:
        return self.tensors["in_embed"].shape[0]


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


def param_group_slices(name: str, base_size: int) -> list[tuple[ParamGroup, slice]]:
    """Row ranges of a tensor per group; non-embedding tensors are internal."""
    if name == "in_embed":
        return [(ParamGroup.INPUT_EMBED_OLD, slice(0, base_size)), (ParamGroup.INPUT_EMBED_NEW, slice(base_size, None))]
    if name == "out_embed":
        return [(ParamGroup.OUTPUT_EMBED_OLD, slice(0, base_size)), (ParamGroup.OUTPUT_EMBED_NEW, slice(base_size, None))]
    return [(ParamGroup.INTERNAL, slice(None))]


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float64) -> ModelParams:
    """Scaled-normal initialization; layernorm gains 1, biases 0."""
    d, ff, V = config.d_model, config.d_ff, config.vocab_size
    std = 0.02

    def normal(*shape):
        return (rng.standard_normal(shape) * std).astype(dtype)

    t: dict[str, np.ndarray] = {
        "in_embed": normal(V, d),
        "out_embed": normal(V, d),
        "pos": normal(config.max_seq_len, d),
        "lnf_g": np.ones(d, dtype=dtype),
        "lnf_b": np.zeros(d, dtype=dtype),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        t[p + "ln1_g"] = np.ones(d, dtype=dtype)
        t[p + "ln1_b"] = np.zeros(d, dtype=dtype)
        t[p + "wq"] = normal(d, d)
        t[p + "wk"] = normal(d, d)
        t[p + "wv"] = normal(d, d)
        t[p + "wo"] = normal(d, d)
        t[p + "ln2_g"] = np.ones(d, dtype=dtype)
        t[p + "ln2_b"] = np.zeros(d, dtype=dtype)
        t[p + "w1"] = normal(d, ff)
        t[p + "b1"] = np.zeros(ff, dtype=dtype)
        t[p + "w2"] = normal(ff, d)
        t[p + "b2"] = np.zeros(d, dtype=dtype)
    return ModelParams(tensors=t, base_size=V)


# -- low-rank adapters -----------------------------------------------------


def attach_adapters(params: ModelParams, config: ModelConfig, rank: int, alpha: float, rng: np.random.Generator) -> ModelParams:
    """Add zero-delta adapters (A random, B zero) to attention projections."""
    out = params.copy()
    dtype = out.tensors["in_embed"].dtype
    d = config.d_model
    for i in range(config.n_layers):
        for proj in ATTN_PROJ_NAMES:
            name = f"layers.{i}.{proj}"
            out.tensors[name + "_lora_a"] = (rng.standard_normal((d, rank)) * 0.02).astype(dtype)
            out.tensors[name + "_lora_b"] = np.zeros((rank, d), dtype=dtype)
    out.lora_scale = alpha / rank
    return out


def merge_adapters(params: ModelParams) -> ModelParams:
    """Fold adapter deltas into base weights and drop the adapter tensors."""
    out = params.copy()
    for name in list(out.tensors):
        if name.endswith("_lora_a"):
            base = name[: -len("_lora_a")]
            a = out.tensors.pop(name)
            b = out.tensors.pop(base + "_lora_b")
            out.tensors[base] = out.tensors[base] + out.lora_scale * (a @ b)
    out.lora_scale = 0.0
    return out


def has_adapters(params: ModelParams) -> bool:
    return any(k.endswith("_lora_a") for k in params.tensors)


# -- primitives ------------------------------------------------------------


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * inv
    return dx, dg, db


def _gelu(x):
    u = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(u)
    return 0.5 * x * (1.0 + th), th


def _gelu_backward(dy, x, th):
    du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return dy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)


def _proj_forward(a, params: ModelParams, name: str):
    w = params.tensors[name]
    out = a @ w
    la = params.tensors.get(name + "_lora_a")
    if la is None:
        return out, None
    u = a @ la
    return out + params.lora_scale * (u @ params.tensors[name + "_lora_b"]), u


def _proj_backward(d_out, a, params: ModelParams, name: str, u, grads):
    w = params.tensors[name]
    axes = a.reshape(-1, a.shape[-1])
    grads[name] += axes.T @ d_out.reshape(-1, d_out.shape[-1])
    da = d_out @ w.T
    if u is not None:
        la = params.tensors[name + "_lora_a"]
        lb = params.tensors[name + "_lora_b"]
        s = params.lora_scale
        d_u = s * (d_out @ lb.T)
        grads[name + "_lora_b"] += s * (u.reshape(-1, u.shape[-1]).T @ d_out.reshape(-1, d_out.shape[-1]))
        grads[name + "_lora_a"] += axes.T @ d_u.reshape(-1, d_u.shape[-1])
        da = da + d_u @ la.T
    return da


def _split_heads(x, n_heads):
    B, T, d = x.shape
    return x.reshape(B, T, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


# -- forward / backward ----------------------------------------------------


_MASK_CACHE: dict = {}


def _causal_mask(T: int, dtype) -> np.ndarray:
    key = (T, np.dtype(dtype).str)
    mask = _MASK_CACHE.get(key)
    if mask is None:
        mask = np.triu(np.full((T, T), _NEG_INF, dtype=dtype), k=1)
        _MASK_CACHE[key] = mask
    return mask


def _check_ids(config: ModelConfig, ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.shape[1] > config.max_seq_len:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError("token id out of range")
    return ids


def forward_batch(params: ModelParams, config: ModelConfig, ids: np.ndarray, want_cache: bool = False):
    """Run the model on an id batch [B, T]; returns logits [B, T, V]."""
    ids = _check_ids(config, ids)
    t = params.tensors
    B, T = ids.shape
    dh = config.d_model // config.n_heads
    mask = _causal_mask(T, t["in_embed"].dtype)

    x = t["in_embed"][ids] + t["pos"][:T]
    cache: dict = {"ids": ids, "x0": x, "layers": []}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        lc: dict = {"x_in": x}
        a, lc["ln1"] = _layernorm(x, t[p + "ln1_g"], t[p + "ln1_b"])
        lc["a"] = a
        q, lc["uq"] = _proj_forward(a, params, p + "wq")
        k, lc["uk"] = _proj_forward(a, params, p + "wk")
        v, lc["uv"] = _proj_forward(a, params, p + "wv")
        qh, kh, vh = (_split_heads(z, config.n_heads) for z in (q, k, v))
        scores = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(dh) + mask
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        probs = e / e.sum(axis=-1, keepdims=True)
        ctx = _merge_heads(probs @ vh)
        lc.update(qh=qh, kh=kh, vh=vh, probs=probs, ctx=ctx)
        attn_out, lc["uo"] = _proj_forward(ctx, params, p + "wo")
        x = x + attn_out

        lc["x_mid"] = x
        a2, lc["ln2"] = _layernorm(x, t[p + "ln2_g"], t[p + "ln2_b"])
        lc["a2"] = a2
        z1 = a2 @ t[p + "w1"] + t[p + "b1"]
        h1, th = _gelu(z1)
        lc.update(z1=z1, th=th, h1=h1)
        x = x + h1 @ t[p + "w2"] + t[p + "b2"]
        cache["layers"].append(lc)

    hf, lnf_cache = _layernorm(x, t["lnf_g"], t["lnf_b"])
    cache.update(x_final=x, lnf=lnf_cache, hf=hf)
    logits = hf @ t["out_embed"].T
    if want_cache:
        return logits, cache
    return logits


def forward(params: ModelParams, config: ModelConfig, ids: Sequence[int]) -> np.ndarray:
    """Single-sequence forward; returns logits [T, V]."""
    return forward_batch(params, config, np.asarray(ids, dtype=np.int64))[0]


def loss_from_logits(logits: np.ndarray, targets: np.ndarray):
    """Mean next-token cross-entropy; also returns dlogits for the backward pass."""
    if logits.ndim == 2:
        logits = logits[None]
    targets = np.asarray(targets)
    if targets.ndim == 1:
        targets = targets[None, :]
    if targets.shape != logits.shape[:2]:
        raise ValueError(f"targets shape {targets.shape} does not match logits positions {logits.shape[:2]}")
    B, T, V = logits.shape
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    se = e.sum(axis=-1, keepdims=True)
    logp = logits - m - np.log(se)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float(-picked.mean())
    dlogits = e / se
    np.add.at(dlogits, (np.arange(B)[:, None], np.arange(T)[None, :], targets), -1.0)
    dlogits /= B * T
    return loss, dlogits


def eval_loss(params: ModelParams, config: ModelConfig, ids: np.ndarray, targets: np.ndarray) -> float:
    """Loss without gradient bookkeeping (finite-difference oracles, eval)."""
    logits = forward_batch(params, config, ids)
    if logits.ndim == 2:
        logits = logits[None]
    targets = np.asarray(targets)
    if targets.ndim == 1:
        targets = targets[None, :]
    m = logits.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(logits - m).sum(axis=-1))
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    return float((lse - picked).mean())


def loss(logits: np.ndarray, targets: Sequence[int]) -> float:
    value, _ = loss_from_logits(logits, np.asarray(targets, dtype=np.int64))
    return value


def backward(params: ModelParams, config: ModelConfig, ids: np.ndarray, targets: np.ndarray):
    """Loss and exact gradients of mean cross-entropy w.r.t. every tensor."""
    ids = _check_ids(config, ids)
    targets = np.asarray(targets)
    if targets.ndim == 1:
        targets = targets[None, :]
    logits, cache = forward_batch(params, config, ids, want_cache=True)
    loss_value, dlogits = loss_from_logits(logits, targets)
    if not np.isfinite(loss_value):
        raise FloatingPointError("non-finite loss")

    t = params.tensors
    grads = zero_grads(params)
    B, T = ids.shape
    dh = config.d_model // config.n_heads

    hf = cache["hf"]
    grads["out_embed"] += dlogits.reshape(-1, dlogits.shape[-1]).T @ hf.reshape(-1, hf.shape[-1])
    dhf = dlogits @ t["out_embed"]
    dx, dg, db = _layernorm_backward(dhf, t["lnf_g"], cache["lnf"])
    grads["lnf_g"] += dg
    grads["lnf_b"] += db

    for i in reversed(range(config.n_layers)):
        p = f"layers.{i}."
        lc = cache["layers"][i]

        # feed-forward branch
        dh1 = dx @ t[p + "w2"].T
        grads[p + "w2"] += lc["h1"].reshape(-1, lc["h1"].shape[-1]).T @ dx.reshape(-1, dx.shape[-1])
        grads[p + "b2"] += dx.sum(axis=(0, 1))
        dz1 = _gelu_backward(dh1, lc["z1"], lc["th"])
        da2 = dz1 @ t[p + "w1"].T
        grads[p + "w1"] += lc["a2"].reshape(-1, lc["a2"].shape[-1]).T @ dz1.reshape(-1, dz1.shape[-1])
        grads[p + "b1"] += dz1.sum(axis=(0, 1))
        dx_mid, dg, db = _layernorm_backward(da2, t[p + "ln2_g"], lc["ln2"])
        grads[p + "ln2_g"] += dg
        grads[p + "ln2_b"] += db
        dx = dx + dx_mid

        # attention branch
        dctx = _proj_backward(dx, lc["ctx"], params, p + "wo", lc["uo"], grads)
        dctx_h = _split_heads(dctx, config.n_heads)
        dprobs = dctx_h @ lc["vh"].transpose(0, 1, 3, 2)
        dvh = lc["probs"].transpose(0, 1, 3, 2) @ dctx_h
        probs = lc["probs"]
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        dqh = dscores @ lc["kh"] / math.sqrt(dh)
        dkh = dscores.transpose(0, 1, 3, 2) @ lc["qh"] / math.sqrt(dh)
        dq, dk, dv = (_merge_heads(z) for z in (dqh, dkh, dvh))
        da = _proj_backward(dq, lc["a"], params, p + "wq", lc["uq"], grads)
        da += _proj_backward(dk, lc["a"], params, p + "wk", lc["uk"], grads)
        da += _proj_backward(dv, lc["a"], params, p + "wv", lc["uv"], grads)
        dx_in, dg, db = _layernorm_backward(da, t[p + "ln1_g"], lc["ln1"])
        grads[p + "ln1_g"] += dg
        grads[p + "ln1_b"] += db
        dx = dx + dx_in

    np.add.at(grads["in_embed"], cache["ids"], dx)
    grads["pos"][:T] += dx.sum(axis=0)
    return loss_value, grads


def greedy_decode(params: ModelParams, config: ModelConfig, prompt_ids: Sequence[int], max_new_tokens: int) -> list[int]:
    """Greedy continuation for smoke tests; argmax ties go to the lower id."""
    ids = list(prompt_ids)
    for _ in range(max_new_tokens):
        window = ids[-config.max_seq_len :]
        logits = forward(params, config, np.asarray(window, dtype=np.int64))
        ids.append(int(np.argmax(logits[-1])))
    return ids
