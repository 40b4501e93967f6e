"""Attribute-wise retrieval metrics: per-condition mAP and triplet accuracy."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


class EmbeddingRecord(NamedTuple):
    item_id: int
    condition: int
    vector: np.ndarray


@dataclass
class RetrievalReport:
    per_attribute_map: dict[int, float]
    overall_map: float
    triplet_accuracy: float | None = None
    skipped_queries: dict[int, int] = field(default_factory=dict)


def _exact_ap(ranked_relevance: Sequence[bool]) -> Fraction:
    hits = np.flatnonzero(np.asarray(ranked_relevance, dtype=bool))
    if hits.size == 0:
        raise MetricError("average precision is undefined without a relevant item")
    return sum((Fraction(i + 1, int(r) + 1) for i, r in enumerate(hits)), Fraction(0)) / hits.size


def average_precision(ranked_relevance: Sequence[bool]) -> float:
    """Mean of precision@r over the ranks r that hold a relevant item.

    Computed in exact rational arithmetic and rounded once, so the value does
    not depend on summation order.
    """
    return float(_exact_ap(ranked_relevance))


def rank_gallery(query: np.ndarray, gallery: np.ndarray, gallery_ids: np.ndarray) -> np.ndarray:
    """Gallery order by descending dot product, ties by ascending item id."""
    scores = gallery @ query
    return np.lexsort((gallery_ids, -scores))


def map_by_attribute(
    queries: Sequence[EmbeddingRecord],
    gallery: Sequence[EmbeddingRecord],
    labels: Mapping[int, Sequence[int]],
) -> RetrievalReport:
    """mAP per condition; a query never retrieves its own item.

    ``labels[item_id][c]`` is the class of the item under condition ``c``.
    Queries with no relevant gallery item are skipped and counted.
    """
    by_cond_g: dict[int, list[EmbeddingRecord]] = defaultdict(list)
    for r in gallery:
        by_cond_g[r.condition].append(r)
    by_cond_q: dict[int, list[EmbeddingRecord]] = defaultdict(list)
    for r in queries:
        by_cond_q[r.condition].append(r)

    per_attr: dict[int, float] = {}
    skipped: dict[int, int] = {}
    for c in sorted(by_cond_q):
        g = by_cond_g.get(c)
        if not g:
            raise MetricError(f"condition {c}: empty gallery")
        g_ids = np.array([r.item_id for r in g])
        g_vecs = np.stack([r.vector for r in g])
        g_cls = np.array([labels[i][c] for i in g_ids])
        aps = []
        skipped[c] = 0
        for q in sorted(by_cond_q[c], key=lambda r: r.item_id):
            keep = g_ids != q.item_id
            order = rank_gallery(q.vector, g_vecs[keep], g_ids[keep])
            rel = g_cls[keep][order] == labels[q.item_id][c]
            if not rel.any():
                skipped[c] += 1
                continue
            aps.append(_exact_ap(rel))
        if skipped[c]:
            log.info("condition %d: skipped %d queries with no relevant gallery item", c, skipped[c])
        if not aps:
            raise MetricError(f"condition {c}: no query has a relevant gallery item")
        per_attr[c] = float(sum(aps, Fraction(0)) / len(aps))
    overall = float(np.mean(list(per_attr.values()))) if per_attr else float("nan")
    return RetrievalReport(per_attr, overall, skipped_queries=skipped)


def records_from_table(table: np.ndarray, item_ids: Sequence[int]) -> list[EmbeddingRecord]:
    """``table[K, M, D]`` -> one record per (condition, item)."""
    return [EmbeddingRecord(int(i), c, table[c, n]) for c in range(table.shape[0]) for n, i in enumerate(item_ids)]


def triplet_prediction_accuracy(embed: Callable[[int, int], np.ndarray], triplets) -> float:
    """Share of triplets with d(a,p) < d(a,n) under their condition; ties fail."""
    if len(triplets) == 0:
        raise MetricError("triplet list is empty")
    correct = 0
    for t in triplets:
        a = embed(t.anchor, t.condition)
        d_p = 1.0 - float(np.dot(a, embed(t.positive, t.condition)))
        d_n = 1.0 - float(np.dot(a, embed(t.negative, t.condition)))
        correct += d_p < d_n
    return correct / len(triplets)


def format_report(rows: Sequence[tuple[str, RetrievalReport]], attribute_names: Sequence[str]) -> str:
    """Table text: method, overall mAP, per-attribute mAP, triplet accuracy (percent)."""
    header = ["method", "overall"] + list(attribute_names) + ["triplet_acc"]
    lines = ["\t".join(header)]
    for name, rep in rows:
        cells = [name, f"{100 * rep.overall_map:.2f}"]
        cells += [f"{100 * rep.per_attribute_map[c]:.2f}" if c in rep.per_attribute_map else "-" for c in range(len(attribute_names))]
        cells.append("-" if rep.triplet_accuracy is None else f"{100 * rep.triplet_accuracy:.2f}")
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> tuple[list[str], list[list[str]]]:
    lines = [ln.split("\t") for ln in text.strip().splitlines()]
    if not lines:
        raise MetricError("empty report")
    header, rows = lines[0], lines[1:]
    for r in rows:
        if len(r) != len(header):
            raise MetricError(f"row {r[0]!r} has {len(r)} cells, header has {len(header)}")
    return header, rows
