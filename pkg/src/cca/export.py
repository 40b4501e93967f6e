"""Text exports for external t-SNE / heat-map tooling.

Both files are newline-delimited ``item_id<TAB>condition<TAB>v0,v1,...``.
Values use 17 significant digits so float64 vectors survive a round trip.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

import numpy as np


def _fmt(vec) -> str:
    return ",".join(format(float(v), ".17g") for v in vec)


def write_rows(path, rows: Iterable[tuple[int, int, np.ndarray]]) -> int:
    n = 0
    with open(path, "w") as fh:
        for item, cond, vec in rows:
            fh.write(f"{item}\t{cond}\t{_fmt(vec)}\n")
            n += 1
    return n


def read_rows(path) -> list[tuple[int, int, np.ndarray]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        out.append((int(parts[0]), int(parts[1]), np.array([float(v) for v in parts[2].split(",")])))
    return out


def table_rows(table: np.ndarray, item_ids) -> Iterable[tuple[int, int, np.ndarray]]:
    """Item-major rows from ``table[K, M, ...]``."""
    for n, item in enumerate(item_ids):
        for c in range(table.shape[0]):
            yield int(item), c, table[c, n]
