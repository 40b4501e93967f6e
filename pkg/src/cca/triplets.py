"""Conditioned triplets, the cosine-distance margin loss, and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .optim import AdamState, adam_step
from .tensor import Tensor

log = logging.getLogger(__name__)


class SamplingError(ValueError):
    pass


class ContractError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class TripletRecord(NamedTuple):
    anchor: int
    positive: int
    negative: int
    condition: int


def is_valid_triplet(t: TripletRecord, label_of: Callable[[int, int], int]) -> bool:
    la = label_of(t.anchor, t.condition)
    return (
        t.anchor != t.positive
        and la == label_of(t.positive, t.condition)
        and la != label_of(t.negative, t.condition)
    )


class _ConditionPool:
    """Per-condition class groups used to draw triplets quickly."""

    def __init__(self, ids: np.ndarray, labels: np.ndarray, condition: int):
        col = labels[:, condition]
        classes = np.unique(col)
        if classes.size < 2:
            raise SamplingError(f"condition {condition}: needs at least 2 classes, found {classes.size}")
        self.members = {int(c): ids[col == c] for c in classes}
        self.anchor_ids = np.concatenate([m for m in self.members.values() if m.size >= 2] or [np.array([], int)])
        if self.anchor_ids.size == 0:
            raise SamplingError(f"condition {condition}: no class has 2 or more items")
        self.label = dict(zip(ids.tolist(), col.tolist()))
        self.condition = condition

    def draw(self, rng: np.random.Generator) -> TripletRecord:
        a = int(self.anchor_ids[rng.integers(self.anchor_ids.size)])
        cls = self.label[a]
        same = self.members[cls]
        p = a
        while p == a:
            p = int(same[rng.integers(same.size)])
        others = [c for c in self.members if c != cls]
        neg_cls = others[rng.integers(len(others))]
        pool = self.members[neg_cls]
        n = int(pool[rng.integers(pool.size)])
        return TripletRecord(a, p, n, self.condition)


def sample_triplets(
    ids: Sequence[int],
    labels: np.ndarray,
    count: int,
    rng: np.random.Generator,
    batch_size: int | None = None,
    conditions: Sequence[int] | None = None,
) -> list[TripletRecord]:
    """Draw ``count`` conditioned triplets.

    ``labels[i, c]`` is the class of ``ids[i]`` under condition ``c``. The
    triplet stream is cut into blocks of ``batch_size`` that share one
    condition, cycling through ``conditions`` round-robin. Negatives always
    come from the same condition as the anchor and positive.
    """
    ids = np.asarray(ids)
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.shape[0] != ids.size:
        raise SamplingError(f"labels shape {labels.shape} does not match {ids.size} ids")
    conditions = list(range(labels.shape[1])) if conditions is None else list(conditions)
    batch_size = batch_size or count or 1
    pools = {c: _ConditionPool(ids, labels, c) for c in conditions}
    out = []
    for j in range(count):
        c = conditions[(j // batch_size) % len(conditions)]
        out.append(pools[c].draw(rng))
    return out


def cosine_distance(u: Tensor, v: Tensor) -> Tensor:
    """``1 - u.v`` row-wise for unit rows."""
    return T.add(T.scale(T.tsum(T.mul(u, v), axis=-1), -1.0), 1.0)


def _check_unit(x: Tensor, name: str, tol: float = 1e-6) -> None:
    norms = np.sqrt((x.data * x.data).sum(axis=-1))
    if np.any(np.abs(norms - 1.0) > tol):
        raise ContractError(f"{name} rows must be unit-norm (max deviation {np.abs(norms - 1).max():.3g})")


def triplet_loss(f_a: Tensor, f_p: Tensor, f_n: Tensor, margin: float = 0.2, reduce: bool = True) -> Tensor:
    """``max(0, d(a,p) - d(a,n) + margin)`` with cosine distance, batch-averaged."""
    f_a, f_p, f_n = (x if isinstance(x, Tensor) else Tensor(x) for x in (f_a, f_p, f_n))
    for x, name in ((f_a, "anchor"), (f_p, "positive"), (f_n, "negative")):
        _check_unit(x, name)
    hinge = T.relu(T.add(T.add(cosine_distance(f_a, f_p), T.scale(cosine_distance(f_a, f_n), -1.0)), margin))
    return T.mean(hinge) if reduce else hinge


def triplet_accuracy_from_table(table: np.ndarray, index: dict[int, int], triplets: Sequence[TripletRecord]) -> float:
    """Fraction with d(a,p) < d(a,n) given ``table[K, M, D]`` unit embeddings."""
    if not triplets:
        raise ContractError("triplet list is empty")
    arr = np.array([(index[t.anchor], index[t.positive], index[t.negative], t.condition) for t in triplets])
    a, p, n, c = arr.T
    sim_p = (table[c, a] * table[c, p]).sum(-1)
    sim_n = (table[c, a] * table[c, n]).sum(-1)
    return float(np.mean((1.0 - sim_p) < (1.0 - sim_n)))


# -- training ------------------------------------------------------------------------
@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    best_epoch: int
    best_accuracy: float
    history: list[tuple[int, float, float]] = field(default_factory=list)
    last_params: dict[str, np.ndarray] | None = None
    adam: AdamState | None = None


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    # per-epoch stream so a resumed run reproduces the uninterrupted one
    return np.random.default_rng([int(seed), 2, int(epoch)])


def embed_items(model, dataset, ids: Sequence[int], chunk: int = 256) -> np.ndarray:
    """``[K, len(ids), D_out]`` embeddings, one backbone pass per image."""
    parts = []
    for s in range(0, len(ids), chunk):
        sub = ids[s : s + chunk]
        parts.append(model.embed_all_conditions(dataset.batch(sub, model.config.dtype)))
    return np.concatenate(parts, axis=1)


def triplet_step_loss(model, dataset, batch: Sequence[TripletRecord], margin: float) -> Tensor:
    """Forward the three members of a single-condition batch through one graph."""
    cond = batch[0].condition
    if any(t.condition != cond for t in batch):
        raise ContractError("a training batch must share one condition")
    b = len(batch)
    ids = [t.anchor for t in batch] + [t.positive for t in batch] + [t.negative for t in batch]
    emb = model(dataset.batch(ids, model.config.dtype), cond)
    return triplet_loss(emb[:b], emb[b : 2 * b], emb[2 * b :], margin)


def validation_triplets(dataset, cfg: TrainConfig) -> list[TripletRecord]:
    ids = dataset.split("val")
    if not ids or cfg.val_triplets <= 0:
        return []
    rng = np.random.default_rng([int(cfg.seed), 3])
    return sample_triplets(ids, dataset.labels_for(ids), cfg.val_triplets, rng, batch_size=1)


def train(
    model,
    dataset,
    cfg: TrainConfig,
    log_path=None,
    adam: AdamState | None = None,
    start_epoch: int = 0,
    on_epoch: Callable | None = None,
) -> TrainResult:
    """Triplet training: one Adam step per single-condition batch.

    The best parameters by validation triplet accuracy are kept (earliest epoch
    wins ties). Epoch ``-1`` in the result means no epoch beat the initial
    parameters. ``start_epoch`` resumes a run: each epoch draws its triplets
    from its own seeded stream, so resuming with the saved Adam state
    reproduces the uninterrupted run.
    """
    train_ids = dataset.split("train")
    labels = dataset.labels_for(train_ids)
    k = model.config.num_conditions
    if labels.shape[1] != k:
        raise TrainingError(f"dataset has {labels.shape[1]} attributes, model expects {k}")
    # fail early on sampling preconditions
    sample_triplets(train_ids, labels, 0, np.random.default_rng(0))
    per_epoch = cfg.triplets_per_epoch or len(train_ids)
    val = validation_triplets(dataset, cfg)
    val_index = {i: n for n, i in enumerate(dataset.split("val"))}
    val_ids = dataset.split("val")

    def val_accuracy() -> float:
        if not val:
            return float("nan")
        return triplet_accuracy_from_table(embed_items(model, dataset, val_ids), val_index, val)

    if adam is None:
        adam = AdamState.for_params(model.params, lr=cfg.lr)
    best_params = model.state_dict()
    best_acc = val_accuracy() if start_epoch == 0 and cfg.epochs > 0 else float("-inf")
    best_epoch = -1
    history = []
    log_fh = open(log_path, "a") if log_path else None
    try:
        for epoch in range(start_epoch, cfg.epochs):
            rng = epoch_rng(cfg.seed, epoch)
            offset = rng.integers(k)
            order = [(offset + i) % k for i in range(k)]
            triplets = sample_triplets(train_ids, labels, per_epoch, rng, cfg.batch_size, order)
            losses = []
            for bi, s in enumerate(range(0, len(triplets), cfg.batch_size)):
                batch = triplets[s : s + cfg.batch_size]
                model.zero_grad()
                loss = triplet_step_loss(model, dataset, batch, cfg.margin)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss {value} at epoch {epoch} batch {bi}")
                loss.backward()
                adam_step(model.params, {n: p.grad for n, p in model.params.items() if p.grad is not None}, adam)
                losses.append(value)
            mean_loss = float(np.mean(losses)) if losses else 0.0
            acc = val_accuracy()
            history.append((epoch, mean_loss, acc))
            log.info("epoch %d loss %.6f val_acc %.4f", epoch, mean_loss, acc)
            if log_fh:
                log_fh.write(f"{epoch}\t{mean_loss:.10g}\t{acc:.10g}\n")
                log_fh.flush()
            # without a validation split the latest epoch is kept
            if acc > best_acc or not val:
                best_acc, best_epoch = acc, epoch
                best_params = model.state_dict()
            if on_epoch:
                on_epoch(epoch, model, adam)
            if cfg.target_accuracy is not None and acc >= cfg.target_accuracy:
                break
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(best_params, best_epoch, best_acc, history, model.state_dict(), adam)
