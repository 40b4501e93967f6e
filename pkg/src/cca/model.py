"""The full conditional embedding network and its baselines.

``embed_type`` selects the arm:

* ``type1`` / ``type2``: L-1 self-attention layers, then the conditional
  cross-attention layer fed by a one-hot or mask-row condition query.
* ``mask-baseline``: L self-attention layers, then an elementwise
  condition mask on the final [CLS] before the output projection.
* ``none``: L self-attention layers with a single, condition-blind
  embedding. Used as the entangled reference.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import backbone as bb
from . import head as hd
from . import tensor as T
from .config import ConfigError, EncoderConfig
from .tensor import Tensor


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator per named purpose, all derived from one seed."""
    tags = {"data": 0, "init": 1, "sampling": 2, "eval": 3}
    return np.random.default_rng([int(seed), tags[name]])


class CCAModel:
    def __init__(self, config: EncoderConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config
        if params is None:
            params = self.init_params(config, substream(seed, "init"))
        self.params: dict[str, Tensor] = {
            name: Tensor(np.array(arr, dtype=config.dtype), requires_grad=True, name=name)
            for name, arr in params.items()
        }
        expected = set(self.init_params(config, np.random.default_rng(0)))
        if set(self.params) != expected:
            missing, extra = expected - set(self.params), set(self.params) - expected
            raise ConfigError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        self.backbone_calls = 0

    @staticmethod
    def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
        conditioned = cfg.embed_type in ("type1", "type2")
        params = bb.init_backbone(cfg, rng, layers=cfg.depth - 1 if conditioned else cfg.depth)
        params.update(hd.init_head(cfg, rng))
        return params

    # -- bookkeeping ---------------------------------------------------------
    @property
    def conditioned(self) -> bool:
        return self.config.embed_type in ("type1", "type2")

    @property
    def backbone_layers(self) -> int:
        return self.config.depth - 1 if self.conditioned else self.config.depth

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def conditional_parameters(self) -> int:
        return hd.conditional_param_count(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward -------------------------------------------------------------
    def backbone(self, images) -> Tensor:
        self.backbone_calls += 1
        return bb.backbone_forward(images, self.params, self.config, layers=self.backbone_layers)

    def head(self, tokens: Tensor, conditions, tile: int = 1, weights_out: list | None = None) -> Tensor:
        """Shared tokens + per-sample conditions -> unit embeddings ``[B, D_out]``."""
        cfg = self.config
        if self.conditioned:
            return self._head_from_cache(hd.project_kv(tokens, self.params), conditions, tile, weights_out)
        cls = tokens[:, 0, :]
        if cfg.embed_type == "mask-baseline":
            cls = hd.mask_cls(cls, self._broadcast_conditions(conditions, tokens.shape[0]), self.params, cfg.num_conditions)
        return hd.final_embedding(cls, self.params)

    def _head_from_cache(self, cache: hd.KeyValueCache, conditions, tile: int, weights_out) -> Tensor:
        cfg = self.config
        conditions = self._broadcast_conditions(conditions, cache.keys.shape[0])
        q = hd.tile_query(hd.embed_condition(conditions, self.params, cfg), tile)
        out = hd.cross_attention_from_cache(q, cache, self.params, cfg.heads, weights_out=weights_out)
        return hd.final_embedding(out, self.params)

    @staticmethod
    def _broadcast_conditions(conditions, batch: int) -> np.ndarray:
        c = np.atleast_1d(np.asarray(conditions))
        if c.size == 1 and batch != 1:
            c = np.full(batch, c[0], dtype=c.dtype)
        if c.size != batch:
            raise hd.ConditionError(f"{c.size} conditions for a batch of {batch}")
        return c

    def forward(self, images, conditions, tile: int = 1) -> Tensor:
        return self.head(self.backbone(images), conditions, tile=tile)

    __call__ = forward

    def embed_all_conditions(self, images, attention: bool = False):
        """Embed ``images`` under every condition with one backbone pass.

        Returns an array ``[K, B, D_out]``; with ``attention=True`` also the
        head-averaged cross-attention rows ``[K, B, 1+N]`` (conditioned arms
        only).
        """
        k = self.config.num_conditions
        with T.no_grad():
            tokens = self.backbone(images)
            b = tokens.shape[0]
            out, weights = [], []
            if self.conditioned:
                cache = hd.project_kv(tokens, self.params)
                for c in range(k):
                    w: list = []
                    out.append(self._head_from_cache(cache, np.full(b, c), 1, w).data)
                    weights.append(w[0][:, :, 0, :].mean(axis=1))
            else:
                out = [self.head(tokens, np.full(b, c)).data for c in range(k)]
        emb = np.stack(out)
        if attention:
            return emb, (np.stack(weights) if weights else None)
        return emb

    def embed(self, images, conditions) -> np.ndarray:
        with T.no_grad():
            return self.forward(images, conditions).data


# -- persistence -------------------------------------------------------------
_INT_FIELDS = ("image_size", "patch_size", "channels", "depth", "dim", "heads", "ffn_hidden", "num_conditions", "precision")


def config_meta(cfg: EncoderConfig) -> dict[str, float]:
    from .config import EMBED_TYPES

    meta = {f"encoder.{f}": float(getattr(cfg, f)) for f in _INT_FIELDS}
    meta["encoder.embed_type"] = float(EMBED_TYPES.index(cfg.embed_type))
    meta["encoder.out_dim"] = float(cfg.out_dim or 0)
    return meta


def config_from_meta(meta: dict[str, float]) -> EncoderConfig:
    from .config import EMBED_TYPES

    kw = {f: int(meta[f"encoder.{f}"]) for f in _INT_FIELDS}
    kw["embed_type"] = EMBED_TYPES[int(meta["encoder.embed_type"])]
    kw["out_dim"] = int(meta["encoder.out_dim"]) or None
    return EncoderConfig(**kw)


def save_model(path, model: CCAModel, adam=None, params: dict[str, np.ndarray] | None = None, **meta) -> None:
    from . import checkpoint

    all_meta = config_meta(model.config)
    all_meta.update(meta)
    precision = 8 if model.config.precision == 64 else 4
    checkpoint.save(path, params if params is not None else model.state_dict(), adam, precision, all_meta)


def load_model(path):
    """Return ``(model, adam_state_or_None, meta)``."""
    from . import checkpoint

    ck = checkpoint.load(path)
    cfg = config_from_meta(ck.meta)
    return CCAModel(cfg, ck.params), ck.adam, ck.meta
