"""Condition-to-query embedding and the conditional cross-attention layer.

The final encoder layer keeps the pre-norm residual structure of a normal
block but takes its queries from the condition instead of the token
sequence. Keys and values come from the normalized backbone tokens (all
``1+N`` positions, [CLS] included) and can be computed once per image and
reused for every condition.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .backbone import attend, ffn, init_block, init_layernorm, init_linear, layer_norm
from .config import ConfigError, EncoderConfig
from .tensor import Tensor

Params = Mapping[str, Tensor]


class ConditionError(ValueError):
    pass


def check_conditions(conditions, k: int) -> np.ndarray:
    c = np.atleast_1d(np.asarray(conditions))
    if c.dtype.kind not in "iu":
        raise ConditionError(f"conditions must be integers, got dtype {c.dtype}")
    bad = c[(c < 0) | (c >= k)]
    if bad.size:
        raise ConditionError(f"condition {int(bad[0])} out of range [0, {k})")
    return c.astype(np.intp)


def init_mask(rng, k: int, d: int, dtype) -> np.ndarray:
    # CSN-style mask init: mostly positive so ReLU keeps most entries alive.
    return (0.9 + 0.7 * rng.standard_normal((k, d))).astype(dtype)


def init_head(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    dt = cfg.dtype
    k, d = cfg.num_conditions, cfg.dim
    params: dict[str, np.ndarray] = {}
    if cfg.embed_type == "type1":
        init_linear(params, "head.cond.fc", k, d, rng, dt)
    elif cfg.embed_type == "type2":
        params["head.cond.mask"] = init_mask(rng, k, d, dt)
        init_linear(params, "head.cond.fc", d, d, rng, dt)
    elif cfg.embed_type == "mask-baseline":
        params["head.cond.mask"] = init_mask(rng, k, d, dt)
    if cfg.embed_type in ("type1", "type2"):
        init_block(params, "head.cca", cfg, rng, ln1="ln_kv")
        init_layernorm(params, "head.cca.ln_q", cfg.dim, dt)
    init_linear(params, "head.out", d, cfg.embedding_dim, rng, dt)
    return params


def conditional_param_count(params: Mapping[str, object]) -> int:
    """Number of scalars in the condition-to-query module (``head.cond.*``)."""
    return int(sum(np.size(getattr(v, "data", v)) for n, v in params.items() if n.startswith("head.cond.")))


def conditional_param_formula(embed_type: str, k: int, d: int) -> int:
    if embed_type == "type1":
        return k * d + d
    if embed_type == "type2":
        return k * d + d * d + d
    raise ValueError(f"no closed form for embed_type {embed_type!r}")


# -- condition embedding ---------------------------------------------------
def embed_condition_type1(conditions, params: Params, k: int) -> Tensor:
    """``FC(onehot(c))`` -> ``[B, D]``."""
    c = check_conditions(conditions, k)
    w = params["head.cond.fc.w"]
    onehot = np.zeros((c.size, k), dtype=w.dtype)
    onehot[np.arange(c.size), c] = 1.0
    return T.linear(Tensor(onehot), w, params["head.cond.fc.b"])


def embed_condition_type2(conditions, params: Params, k: int) -> Tensor:
    """``FC(relu(M[c, :]))`` -> ``[B, D]``."""
    c = check_conditions(conditions, k)
    rows = T.take_rows(params["head.cond.mask"], c)
    return T.linear(T.relu(rows), params["head.cond.fc.w"], params["head.cond.fc.b"])


def embed_condition(conditions, params: Params, cfg: EncoderConfig) -> Tensor:
    if cfg.embed_type == "type1":
        return embed_condition_type1(conditions, params, cfg.num_conditions)
    if cfg.embed_type == "type2":
        return embed_condition_type2(conditions, params, cfg.num_conditions)
    raise ConfigError(f"embed_type {cfg.embed_type!r} has no condition query")


def tile_query(q: Tensor, count: int) -> Tensor:
    """Repeat each ``[B, D]`` (or ``[1, D]``) query ``count`` times -> ``[B, count, D]``."""
    if count < 1:
        raise ValueError("tile count must be >= 1")
    if q.ndim == 2:
        q = T.reshape(q, (q.shape[0], 1, q.shape[1]))
    return T.broadcast_to(q, (q.shape[0], count, q.shape[2]))


# -- cross attention ---------------------------------------------------------
@dataclass
class KeyValueCache:
    """Projected keys/values of one backbone pass; reusable across conditions."""

    keys: Tensor
    values: Tensor


def project_kv(tokens: Tensor, params: Params, prefix: str = "head.cca") -> KeyValueCache:
    x = layer_norm(tokens, params, f"{prefix}.ln_kv")
    k = T.linear(x, params[f"{prefix}.attn.k.w"], params[f"{prefix}.attn.k.b"])
    v = T.linear(x, params[f"{prefix}.attn.v.w"], params[f"{prefix}.attn.v.b"])
    return KeyValueCache(k, v)


def cross_attention_from_cache(
    query: Tensor,
    cache: KeyValueCache,
    params: Params,
    heads: int,
    prefix: str = "head.cca",
    weights_out: list | None = None,
) -> Tensor:
    if query.shape[-1] != cache.keys.shape[-1]:
        raise ConfigError(f"query width {query.shape[-1]} != token width {cache.keys.shape[-1]}")
    if query.ndim == 3 and query.shape[1] > 1:
        # Query rows never interact here. Running each at the T=1 shape keeps BLAS
        # kernel choice, and so every bit of the output, independent of T.
        rows, ws = [], []
        for t in range(query.shape[1]):
            w = [] if weights_out is not None else None
            rows.append(cross_attention_from_cache(T.slice_axis(query, t, t + 1, axis=1), cache, params, heads, prefix, w))
            if w is not None:
                ws.append(w[0])
        if weights_out is not None:
            weights_out.append(np.concatenate(ws, axis=2))
        return T.concat(rows, axis=1)
    q = T.linear(layer_norm(query, params, f"{prefix}.ln_q"), params[f"{prefix}.attn.q.w"], params[f"{prefix}.attn.q.b"])
    a = attend(q, cache.keys, cache.values, heads, weights_out)
    a = T.linear(a, params[f"{prefix}.attn.o.w"], params[f"{prefix}.attn.o.b"])
    h = T.add(query, a)
    return T.add(h, ffn(layer_norm(h, params, f"{prefix}.ln2"), params, f"{prefix}.ffn"))


def conditional_cross_attention(
    query: Tensor, tokens: Tensor, params: Params, heads: int, weights_out: list | None = None
) -> Tensor:
    """Layer L: ``[B, T, D]`` condition queries against ``[B, 1+N, D]`` tokens."""
    if query.ndim != 3 or tokens.ndim != 3 or query.shape[0] != tokens.shape[0]:
        raise ConfigError(f"query {query.shape} and tokens {tokens.shape} are not batch-aligned")
    return cross_attention_from_cache(query, project_kv(tokens, params), params, heads, weights_out=weights_out)


def final_embedding(x: Tensor, params: Params) -> Tensor:
    """``l2(FC(row 0))`` over ``[B, T, D]`` or ``[B, D]`` input -> ``[B, D_out]``."""
    if x.ndim == 3:
        x = x[:, 0, :]
    return T.l2_normalize(T.linear(x, params["head.out.w"], params["head.out.b"]), axis=-1)


def mask_cls(cls: Tensor, conditions, params: Params, k: int) -> Tensor:
    """Elementwise condition mask on the final [CLS] vector (CSN-style baseline)."""
    c = check_conditions(conditions, k)
    return T.mul(cls, T.take_rows(params["head.cond.mask"], c))
