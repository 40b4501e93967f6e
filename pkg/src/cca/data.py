"""Procedural multi-attribute image corpus and its on-disk format.

Each image is split into four disjoint regions, one per generative factor:

* ``border_width`` -- the outer ring; frame thickness encodes the class.
* ``stripe_period`` -- a vertical band on the left of the interior crossed by
  one-pixel horizontal lines; the line period encodes the class.
* ``shape_glyph`` -- a dark box in the interior holding a glyph; the glyph
  shape encodes the class, its position jitters per item.
* ``hue_band`` -- everything else in the interior; its hue encodes the class.

Per-item noise and jitter come only from the item seed, so changing one label
with the seed fixed changes pixels in that factor's region only.

Directory layout::

    <root>/manifest.json
    <root>/images/<item_id>.rgb    u32 height, u32 width, u32 channels, then HWC uint8

``manifest.json`` holds ``{"format": "cca-dataset/1", "image_size": S,
"attributes": [{"id", "name", "num_classes", "factor"}...], "items":
[{"id", "labels", "seed"}...], "splits": {"train": [...], "val": [...],
"gallery": [...], "query": [...]}}``.
"""

from __future__ import annotations

import colorsys
import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FACTORS = ("hue_band", "shape_glyph", "stripe_period", "border_width")
SPLITS = ("train", "val", "gallery", "query")
FORMAT = "cca-dataset/1"

# ordered so the first few classes differ in ink area as well as outline
GLYPHS = ("square", "cross", "hbar", "circle", "triangle", "vbar", "diamond", "ring")
STRIPE_PERIODS = (2, 3, 4, 6, 8, 12)
MAX_HUES = 8

_GLYPH_BACKDROP = (20, 20, 20)
_GLYPH_INK = (240, 240, 240)
_RING_FILL = (90, 90, 90)
_FRAME_INK = (230, 230, 230)
_STRIPE_ON = (220, 200, 40)
_STRIPE_OFF = (30, 30, 60)


class DatasetError(ValueError):
    """Malformed or inconsistent dataset."""


@dataclass(frozen=True)
class AttributeSpec:
    id: int
    name: str
    num_classes: int
    factor: str


@dataclass
class DatasetManifest:
    attributes: list[AttributeSpec]
    items: list[dict]
    splits: dict[str, list[int]]
    image_size: int = 32

    def labels(self) -> np.ndarray:
        """``[num_items, K]`` label table, rows in ``items`` order."""
        return np.array([it["labels"] for it in self.items], dtype=np.int64).reshape(len(self.items), len(self.attributes))

    @property
    def item_ids(self) -> list[int]:
        return [it["id"] for it in self.items]


@dataclass
class GenConfig:
    image_size: int = 32
    attributes: list[tuple[str, str, int]] = field(
        default_factory=lambda: [
            ("hue", "hue_band", 3),
            ("shape", "shape_glyph", 3),
            ("stripes", "stripe_period", 3),
            ("border", "border_width", 3),
        ]
    )
    n_items: int = 2000
    splits: dict[str, int] | None = None
    noise: int = 8
    jitter: int = 2
    seed: int = 0

    def split_sizes(self) -> dict[str, int]:
        if self.splits is not None:
            sizes = {s: int(self.splits.get(s, 0)) for s in SPLITS}
            if sum(sizes.values()) > self.n_items:
                raise DatasetError(f"split sizes {sizes} exceed n_items={self.n_items}")
            return sizes
        n = self.n_items
        sizes = {"train": int(n * 0.7), "val": int(n * 0.1), "gallery": int(n * 0.15)}
        sizes["query"] = n - sum(sizes.values())
        return sizes


# -- layout ------------------------------------------------------------------
@dataclass(frozen=True)
class Layout:
    size: int

    @property
    def ring(self) -> int:
        return self.size // 8

    @property
    def stripe_cols(self) -> tuple[int, int]:
        return self.ring, self.ring + self.size // 5

    @property
    def glyph_box(self) -> tuple[int, int, int]:
        """(top, left, side) of the glyph backdrop."""
        side = self.size // 2
        inner_top, inner_bottom = self.ring, self.size - self.ring
        left0, right0 = self.stripe_cols[1], self.size - self.ring
        top = inner_top + (inner_bottom - inner_top - side) // 2
        left = left0 + (right0 - left0 - side) // 2
        return top, left, side

    def region_masks(self) -> dict[str, np.ndarray]:
        s = self.size
        yy, xx = np.mgrid[0:s, 0:s]
        edge = np.minimum(np.minimum(yy, xx), np.minimum(s - 1 - yy, s - 1 - xx))
        border = edge < self.ring
        c0, c1 = self.stripe_cols
        stripes = ~border & (xx >= c0) & (xx < c1)
        top, left, side = self.glyph_box
        glyph = (yy >= top) & (yy < top + side) & (xx >= left) & (xx < left + side)
        hue = ~(border | stripes | glyph)
        return {"border_width": border, "stripe_period": stripes, "shape_glyph": glyph, "hue_band": hue}


def max_classes(factor: str, size: int) -> int:
    lay = Layout(size)
    if factor == "hue_band":
        return MAX_HUES
    if factor == "shape_glyph":
        return len(GLYPHS)
    if factor == "stripe_period":
        inner = size - 2 * lay.ring
        return sum(1 for p in STRIPE_PERIODS if 2 * p <= inner)
    if factor == "border_width":
        return lay.ring
    raise DatasetError(f"unknown factor {factor!r}")


def _glyph_mask(kind: str, n: int) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n]
    c = (n - 1) / 2.0
    dy, dx = yy - c, xx - c
    third = max(1, n // 3)
    if kind == "square":
        return np.ones((n, n), bool)
    if kind == "circle":
        return dy * dy + dx * dx <= (n / 2.0) ** 2
    if kind == "triangle":
        return np.abs(dx) <= (yy + 1) / 2.0
    if kind == "cross":
        return (np.abs(dx) < third / 2 + 0.5) | (np.abs(dy) < third / 2 + 0.5)
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= n / 2.0
    if kind == "hbar":
        return np.abs(dy) < third / 2 + 0.5
    if kind == "vbar":
        return np.abs(dx) < third / 2 + 0.5
    if kind == "ring":
        r2 = dy * dy + dx * dx
        return (r2 <= (n / 2.0) ** 2) & (r2 >= (n / 2.0 - 2) ** 2)
    raise DatasetError(f"unknown glyph {kind!r}")


def _hue_rgb(cls: int, n: int) -> tuple[int, int, int]:
    r, g, b = colorsys.hsv_to_rgb(cls / n, 0.8, 0.85)
    return int(r * 255), int(g * 255), int(b * 255)


def render(attributes: list[AttributeSpec], labels, seed: int, size: int = 32, noise: int = 8, jitter: int = 2) -> np.ndarray:
    """Deterministic ``[size, size, 3]`` uint8 image for one item."""
    lay = Layout(size)
    rng = np.random.default_rng(seed)
    jy, jx = rng.integers(-jitter, jitter + 1, size=2) if jitter else (0, 0)
    pixel_noise = rng.integers(-noise, noise + 1, size=(size, size, 3)) if noise else 0

    masks = lay.region_masks()
    img = np.zeros((size, size, 3), dtype=np.int64)
    # Absent factors keep their region at a neutral fill.
    img[masks["hue_band"]] = (128, 128, 128)
    img[masks["border_width"]] = _RING_FILL
    img[masks["stripe_period"]] = _STRIPE_OFF
    img[masks["shape_glyph"]] = _GLYPH_BACKDROP

    for spec in attributes:
        cls = int(labels[spec.id])
        if spec.factor == "hue_band":
            img[masks["hue_band"]] = _hue_rgb(cls, spec.num_classes)
        elif spec.factor == "border_width":
            yy, xx = np.mgrid[0:size, 0:size]
            edge = np.minimum(np.minimum(yy, xx), np.minimum(size - 1 - yy, size - 1 - xx))
            img[edge < cls + 1] = _FRAME_INK
        elif spec.factor == "stripe_period":
            period = STRIPE_PERIODS[cls]
            rows = np.arange(size)
            on = (rows - lay.ring) % period == 0
            band = masks["stripe_period"] & on[:, None]
            img[band] = _STRIPE_ON
        elif spec.factor == "shape_glyph":
            top, left, side = lay.glyph_box
            n = side - 2 * jitter
            g = _glyph_mask(GLYPHS[cls], n)
            y0, x0 = top + jitter + jy, left + jitter + jx
            patch = img[y0 : y0 + n, x0 : x0 + n]
            patch[g] = _GLYPH_INK
    return np.clip(img + pixel_noise, 0, 255).astype(np.uint8)


# -- generation ----------------------------------------------------------------
def make_attributes(spec: list[tuple[str, str, int]], size: int) -> list[AttributeSpec]:
    attrs = []
    seen = set()
    for i, (name, factor, n) in enumerate(spec):
        if factor not in FACTORS:
            raise DatasetError(f"attribute {name!r}: unknown factor {factor!r}")
        if factor in seen:
            raise DatasetError(f"factor {factor!r} used twice")
        seen.add(factor)
        if n < 2:
            raise DatasetError(f"attribute {name!r}: num_classes must be >= 2, got {n}")
        limit = max_classes(factor, size)
        if n > limit:
            raise DatasetError(f"attribute {name!r}: factor {factor} renders at most {limit} classes at size {size}, got {n}")
        attrs.append(AttributeSpec(i, name, int(n), factor))
    return attrs


def generate(cfg: GenConfig, threads: int = 1) -> tuple[DatasetManifest, np.ndarray]:
    """Return the manifest and a ``[M, S, S, 3]`` uint8 image stack."""
    attrs = make_attributes(cfg.attributes, cfg.image_size)
    sizes = cfg.split_sizes()
    rng = np.random.default_rng([int(cfg.seed), 0])
    m = cfg.n_items
    labels = np.stack([rng.integers(0, a.num_classes, size=m) for a in attrs], axis=1)
    seeds = rng.integers(0, 2**31 - 1, size=m)
    items = [{"id": i, "labels": [int(x) for x in labels[i]], "seed": int(seeds[i])} for i in range(m)]
    order = rng.permutation(m)
    splits, pos = {}, 0
    for s in SPLITS:
        splits[s] = sorted(int(i) for i in order[pos : pos + sizes[s]])
        pos += sizes[s]
    manifest = DatasetManifest(attrs, items, splits, cfg.image_size)

    def one(i):
        return render(attrs, labels[i], int(seeds[i]), cfg.image_size, cfg.noise, cfg.jitter)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            images = list(pool.map(one, range(m)))
    else:
        images = [one(i) for i in range(m)]
    return manifest, np.stack(images) if images else np.zeros((0, cfg.image_size, cfg.image_size, 3), np.uint8)


def validate(manifest: DatasetManifest) -> None:
    """Raise ``DatasetError`` unless labels are complete and splits are sound."""
    k = len(manifest.attributes)
    factors = [a.factor for a in manifest.attributes]
    if len(set(factors)) != len(factors):
        raise DatasetError("duplicate factor tags")
    for pos, a in enumerate(manifest.attributes):
        if a.id != pos:
            raise DatasetError(f"attribute ids must be 0..K-1 in order, got {a.id} at position {pos}")
        if a.num_classes < 2:
            raise DatasetError(f"attribute {a.name!r} has fewer than 2 classes")
    ids = set()
    for it in manifest.items:
        if it["id"] in ids:
            raise DatasetError(f"duplicate item id {it['id']}")
        ids.add(it["id"])
        if len(it["labels"]) != k:
            raise DatasetError(f"item {it['id']}: {len(it['labels'])} labels for {k} attributes")
        for a, lab in zip(manifest.attributes, it["labels"]):
            if not 0 <= lab < a.num_classes:
                raise DatasetError(f"item {it['id']}: label {lab} out of range for attribute {a.name!r}")
    seen: dict[int, str] = {}
    for s, members in manifest.splits.items():
        if s not in SPLITS:
            raise DatasetError(f"unknown split {s!r}")
        for i in members:
            if i not in ids:
                raise DatasetError(f"split {s!r} references unknown item {i}")
            if i in seen:
                raise DatasetError(f"item {i} in both {seen[i]!r} and {s!r}")
            seen[i] = s


# -- persistence -------------------------------------------------------------------
def _manifest_json(manifest: DatasetManifest) -> str:
    doc = {
        "format": FORMAT,
        "image_size": manifest.image_size,
        "attributes": [
            {"id": a.id, "name": a.name, "num_classes": a.num_classes, "factor": a.factor} for a in manifest.attributes
        ],
        "items": manifest.items,
        "splits": {s: list(manifest.splits.get(s, [])) for s in SPLITS},
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def encode_image(img: np.ndarray) -> bytes:
    h, w, c = img.shape
    return struct.pack("<III", h, w, c) + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def decode_image(blob: bytes, where: str = "image") -> np.ndarray:
    if len(blob) < 12:
        raise DatasetError(f"{where}: truncated header")
    h, w, c = struct.unpack_from("<III", blob)
    if len(blob) != 12 + h * w * c:
        raise DatasetError(f"{where}: expected {h * w * c} pixel bytes, found {len(blob) - 12}")
    return np.frombuffer(blob, dtype=np.uint8, offset=12).reshape(h, w, c).copy()


def save(manifest: DatasetManifest, images: np.ndarray, root) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for it, img in zip(manifest.items, images):
        (root / "images" / f"{it['id']}.rgb").write_bytes(encode_image(img))
    (root / "manifest.json").write_text(_manifest_json(manifest))
    return root


def _field(obj: dict, key: str, kind, where: str):
    if key not in obj:
        raise DatasetError(f"{where}: missing field {key!r}")
    val = obj[key]
    if not isinstance(val, kind):
        raise DatasetError(f"{where}.{key}: expected {getattr(kind, '__name__', kind)}, got {type(val).__name__}")
    return val


def parse_manifest(text: str, source: str = "manifest.json") -> DatasetManifest:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise DatasetError(f"{source}: top level must be an object")
    fmt = doc.get("format")
    if fmt != FORMAT:
        raise DatasetError(f"{source}: field 'format' must be {FORMAT!r}, got {fmt!r}")
    size = _field(doc, "image_size", int, source)
    attrs = []
    for i, a in enumerate(_field(doc, "attributes", list, source)):
        where = f"{source}: attributes[{i}]"
        attrs.append(
            AttributeSpec(
                _field(a, "id", int, where),
                _field(a, "name", str, where),
                _field(a, "num_classes", int, where),
                _field(a, "factor", str, where),
            )
        )
    items = []
    for i, it in enumerate(_field(doc, "items", list, source)):
        where = f"{source}: items[{i}]"
        items.append(
            {
                "id": _field(it, "id", int, where),
                "labels": [int(x) for x in _field(it, "labels", list, where)],
                "seed": _field(it, "seed", int, where),
            }
        )
    raw_splits = _field(doc, "splits", dict, source)
    splits = {s: [int(x) for x in raw_splits.get(s, [])] for s in SPLITS}
    manifest = DatasetManifest(attrs, items, splits, size)
    validate(manifest)
    return manifest


def load(root) -> tuple[DatasetManifest, np.ndarray]:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise DatasetError(f"{path}: no such manifest")
    manifest = parse_manifest(path.read_text(), str(path))
    images = []
    for it in manifest.items:
        p = root / "images" / f"{it['id']}.rgb"
        if not p.exists():
            raise DatasetError(f"item {it['id']}: missing image file {p}")
        img = decode_image(p.read_bytes(), f"item {it['id']}")
        if img.shape != (manifest.image_size, manifest.image_size, 3):
            raise DatasetError(f"item {it['id']}: image shape {img.shape} != manifest size {manifest.image_size}")
        images.append(img)
    stack = np.stack(images) if images else np.zeros((0, manifest.image_size, manifest.image_size, 3), np.uint8)
    return manifest, stack


def to_model_input(images: np.ndarray, dtype=np.float64) -> np.ndarray:
    """uint8 ``[B, S, S, 3]`` -> float ``[B, 3, S, S]`` in [-1, 1]."""
    return images.transpose(0, 3, 1, 2).astype(dtype) / 127.5 - 1.0


class Dataset:
    """In-memory view: manifest + images, addressable by item id."""

    def __init__(self, manifest: DatasetManifest, images: np.ndarray):
        self.manifest = manifest
        self.images = images
        self.index = {it["id"]: row for row, it in enumerate(manifest.items)}
        self.label_table = manifest.labels()

    @classmethod
    def load(cls, root) -> "Dataset":
        return cls(*load(root))

    @property
    def num_conditions(self) -> int:
        return len(self.manifest.attributes)

    def split(self, name: str) -> list[int]:
        return list(self.manifest.splits.get(name, []))

    def labels_for(self, ids) -> np.ndarray:
        return self.label_table[[self.index[i] for i in ids]]

    def batch(self, ids, dtype=np.float64) -> np.ndarray:
        """``[B, 3, S, S]`` float images scaled to [-1, 1]."""
        rows = [self.index[i] for i in ids]
        return to_model_input(self.images[rows], dtype)
