"""scikit-learn style wrapper around the conditional embedding network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import EncoderConfig, TrainConfig
from .data import AttributeSpec, Dataset, DatasetManifest
from .model import CCAModel
from .triplets import embed_items, sample_triplets, train, triplet_accuracy_from_table


def check_images(X, image_size: int | None = None) -> np.ndarray:
    """Validate an ``[n, H, W, 3]`` image stack (uint8, or floats in [0, 255])."""
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images of shape (n, H, W, 3), got {X.shape}")
    if X.shape[1] != X.shape[2]:
        raise ValueError(f"images must be square, got {X.shape[1]}x{X.shape[2]}")
    if image_size is not None and X.shape[1] != image_size:
        raise ValueError(f"expected {image_size}x{image_size} images, got {X.shape[1]}x{X.shape[2]}")
    if X.shape[0] == 0:
        raise ValueError("empty image stack")
    if X.dtype.kind == "f" and not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or inf")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2 or y.shape[0] != n:
        raise ValueError(f"expected labels of shape ({n}, K), got {y.shape}")
    if y.dtype.kind not in "iu":
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integer class ids")
        y = y.astype(np.int64)
    if y.min() < 0:
        raise ValueError("labels must be non-negative")
    return y


def _in_memory_dataset(X, y, splits) -> Dataset:
    k = y.shape[1]
    attrs = [AttributeSpec(c, f"attr{c}", max(2, int(y[:, c].max()) + 1), f"attr{c}") for c in range(k)]
    items = [{"id": i, "labels": [int(v) for v in y[i]], "seed": 0} for i in range(len(y))]
    return Dataset(DatasetManifest(attrs, items, splits, X.shape[1]), X)


class CCAEmbedder(TransformerMixin, BaseEstimator):
    """Attribute-conditioned image embeddings from a single backbone.

    ``fit(X, y)`` takes an ``[n, H, W, 3]`` image stack and an ``[n, K]`` label
    matrix (one column per attribute) and trains with conditioned triplets.
    ``transform(X)`` returns the concatenated per-condition embeddings
    ``[n, K * D_out]``; ``embed(X, condition)`` returns one space.
    """

    def __init__(
        self,
        embed_type="type2",
        patch_size=8,
        depth=4,
        dim=64,
        heads=4,
        ffn_hidden=128,
        margin=0.2,
        lr=1e-4,
        batch_size=64,
        epochs=50,
        triplets_per_epoch=None,
        validation_fraction=0.0,
        random_state=0,
    ):
        self.embed_type = embed_type
        self.patch_size = patch_size
        self.depth = depth
        self.dim = dim
        self.heads = heads
        self.ffn_hidden = ffn_hidden
        self.margin = margin
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.triplets_per_epoch = triplets_per_epoch
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, X.shape[0])
        seed = int(self.random_state or 0)
        order = np.random.default_rng([seed, 5]).permutation(len(y))
        n_val = int(round(self.validation_fraction * len(y)))
        splits = {"train": sorted(order[n_val:].tolist()), "val": sorted(order[:n_val].tolist())}
        ds = _in_memory_dataset(X, y, splits)
        enc = EncoderConfig(
            image_size=X.shape[1],
            patch_size=self.patch_size,
            depth=self.depth,
            dim=self.dim,
            heads=self.heads,
            ffn_hidden=self.ffn_hidden,
            num_conditions=y.shape[1],
            embed_type=self.embed_type,
        )
        tcfg = TrainConfig(
            margin=self.margin,
            lr=self.lr,
            batch_size=self.batch_size,
            epochs=self.epochs,
            triplets_per_epoch=self.triplets_per_epoch,
            seed=seed,
        )
        model = CCAModel(enc, seed=seed)
        result = train(model, ds, tcfg)
        self.model_ = CCAModel(enc, result.params)
        self.history_ = result.history
        self.n_conditions_ = y.shape[1]
        self.image_size_ = X.shape[1]
        return self

    def _table(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.image_size_)
        ds = _in_memory_dataset(X, np.zeros((len(X), self.n_conditions_), int), {})
        return embed_items(self.model_, ds, list(range(len(X))))

    def transform(self, X):
        table = self._table(X)
        return np.concatenate(list(table), axis=1)

    def embed(self, X, condition: int) -> np.ndarray:
        if not 0 <= condition < getattr(self, "n_conditions_", 0):
            check_is_fitted(self, "model_")
            raise ValueError(f"condition {condition} out of range [0, {self.n_conditions_})")
        return self._table(X)[condition]

    def score(self, X, y, n_triplets: int = 1000) -> float:
        """Triplet prediction accuracy on conditioned triplets drawn from ``(X, y)``."""
        table = self._table(X)
        y = check_labels(y, len(table[0]))
        ids = list(range(len(y)))
        rng = np.random.default_rng([int(self.random_state or 0), 6])
        trip = sample_triplets(ids, y, n_triplets, rng, batch_size=1)
        return triplet_accuracy_from_table(table, {i: i for i in ids}, trip)
