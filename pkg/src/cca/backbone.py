"""ViT tokenizer and the pre-norm self-attention encoder stack."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np
from scipy.stats import truncnorm

from . import tensor as T
from .config import ConfigError, EncoderConfig
from .tensor import Tensor

Params = Mapping[str, Tensor]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64) -> np.ndarray:
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng).astype(dtype)


def init_linear(params: dict, prefix: str, fan_in: int, fan_out: int, rng, dtype) -> None:
    params[f"{prefix}.w"] = trunc_normal(rng, (fan_in, fan_out), dtype=dtype)
    params[f"{prefix}.b"] = np.zeros(fan_out, dtype=dtype)


def init_layernorm(params: dict, prefix: str, dim: int, dtype) -> None:
    params[f"{prefix}.gamma"] = np.ones(dim, dtype=dtype)
    params[f"{prefix}.beta"] = np.zeros(dim, dtype=dtype)


def init_attention(params: dict, prefix: str, dim: int, rng, dtype) -> None:
    for proj in ("q", "k", "v", "o"):
        init_linear(params, f"{prefix}.{proj}", dim, dim, rng, dtype)


def init_block(params: dict, prefix: str, cfg: EncoderConfig, rng, ln1: str = "ln1") -> None:
    """One transformer block: norm + attention + norm + two-layer FFN."""
    dt = cfg.dtype
    init_layernorm(params, f"{prefix}.{ln1}", cfg.dim, dt)
    init_attention(params, f"{prefix}.attn", cfg.dim, rng, dt)
    init_layernorm(params, f"{prefix}.ln2", cfg.dim, dt)
    init_linear(params, f"{prefix}.ffn.fc1", cfg.dim, cfg.ffn_hidden, rng, dt)
    init_linear(params, f"{prefix}.ffn.fc2", cfg.ffn_hidden, cfg.dim, rng, dt)


def init_backbone(cfg: EncoderConfig, rng: np.random.Generator, layers: int | None = None) -> dict[str, np.ndarray]:
    """Parameters for the tokenizer plus ``layers`` encoder blocks (default L-1)."""
    layers = cfg.depth - 1 if layers is None else layers
    dt = cfg.dtype
    params: dict[str, np.ndarray] = {}
    patch_dim = cfg.channels * cfg.patch_size**2
    init_linear(params, "backbone.patch", patch_dim, cfg.dim, rng, dt)
    params["backbone.cls"] = trunc_normal(rng, (1, cfg.dim), dtype=dt)
    params["backbone.pos"] = trunc_normal(rng, (cfg.seq_len, cfg.dim), dtype=dt)
    for i in range(layers):
        init_block(params, f"backbone.layer{i}", cfg, rng)
    return params


# -- forward pieces --------------------------------------------------------
def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[B, C, H, W] -> [B, N, C*patch*patch]``.

    Patches are visited row-major over the patch grid; within a patch the
    values are flattened in (channel, row, column) order.
    """
    b, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch * patch)


def patch_embed(images: np.ndarray, params: Params, cfg: EncoderConfig) -> Tensor:
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ConfigError(f"image shape {images.shape[1:]} does not match config {expected}")
    patches = Tensor(patchify(images, cfg.patch_size).astype(cfg.dtype, copy=False))
    tokens = T.linear(patches, params["backbone.patch.w"], params["backbone.patch.b"])
    b = images.shape[0]
    cls = T.broadcast_to(T.reshape(params["backbone.cls"], (1, 1, cfg.dim)), (b, 1, cfg.dim))
    x = T.concat([cls, tokens], axis=1)
    return T.add(x, params["backbone.pos"])


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * d))


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int, weights_out: list | None = None) -> Tensor:
    """Scaled dot-product attention on already-projected ``[B, n, D]`` inputs.

    Returns the merged per-head outputs before the output projection. When
    ``weights_out`` is a list the softmax weights ``[B, heads, n_q, n_k]`` are
    appended to it.
    """
    d = q.shape[-1] // heads
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    logits = T.scale(T.matmul(qh, T.swapaxes(kh, -1, -2)), 1.0 / math.sqrt(d))
    w = T.softmax(logits, axis=-1)
    if weights_out is not None:
        weights_out.append(w.data)
    return merge_heads(T.matmul(w, vh))


def msa(x: Tensor, params: Params, prefix: str, heads: int, weights_out: list | None = None) -> Tensor:
    """Multi-head self-attention including the output projection."""
    q = T.linear(x, params[f"{prefix}.q.w"], params[f"{prefix}.q.b"])
    k = T.linear(x, params[f"{prefix}.k.w"], params[f"{prefix}.k.b"])
    v = T.linear(x, params[f"{prefix}.v.w"], params[f"{prefix}.v.b"])
    out = attend(q, k, v, heads, weights_out)
    return T.linear(out, params[f"{prefix}.o.w"], params[f"{prefix}.o.b"])


def ffn(x: Tensor, params: Params, prefix: str) -> Tensor:
    h = T.gelu(T.linear(x, params[f"{prefix}.fc1.w"], params[f"{prefix}.fc1.b"]))
    return T.linear(h, params[f"{prefix}.fc2.w"], params[f"{prefix}.fc2.b"])


def layer_norm(x: Tensor, params: Params, prefix: str) -> Tensor:
    return T.layernorm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"])


def encoder_layer(x: Tensor, params: Params, prefix: str, heads: int, weights_out: list | None = None) -> Tensor:
    h = T.add(x, msa(layer_norm(x, params, f"{prefix}.ln1"), params, f"{prefix}.attn", heads, weights_out))
    return T.add(h, ffn(layer_norm(h, params, f"{prefix}.ln2"), params, f"{prefix}.ffn"))


def backbone_forward(images: np.ndarray, params: Params, cfg: EncoderConfig, layers: int | None = None) -> Tensor:
    """Tokenize and run ``layers`` encoder blocks (default L-1) -> ``[B, 1+N, D]``."""
    layers = cfg.depth - 1 if layers is None else layers
    x = patch_embed(images, params, cfg)
    for i in range(layers):
        x = encoder_layer(x, params, f"backbone.layer{i}", cfg.heads)
    return x
