"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"CCA1"            magic
    u8                 precision tag: 4 = float32, 8 = float64
    u32                record count
    per record:
      u32              name length in bytes
      bytes            UTF-8 name
      u32              rank
      u32 * rank       dims
      float * prod     values, little-endian, row-major

Optimizer state and run metadata ride along as ordinary records under the
reserved ``adam.`` and ``meta.`` prefixes, so one file restores both model
and optimizer bitwise.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .optim import AdamState

MAGIC = b"CCA1"
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}
_ADAM = "adam."
_META = "meta."


class CheckpointError(ValueError):
    pass


def encode(arrays: Mapping[str, np.ndarray], precision: int = 8) -> bytes:
    if precision not in _DTYPES:
        raise CheckpointError(f"unsupported precision tag {precision}")
    dt = _DTYPES[precision]
    chunks = [MAGIC, struct.pack("<BI", precision, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(chunks)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], int]:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic, not a CCA1 checkpoint")
    precision, count = struct.unpack_from("<BI", blob, 4)
    if precision not in _DTYPES:
        raise CheckpointError(f"unsupported precision tag {precision}")
    dt = _DTYPES[precision]
    pos = 9
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            nbytes = size * dt.itemsize
            if pos + nbytes > len(blob):
                raise CheckpointError(f"truncated record {name!r}")
            arr = np.frombuffer(blob, dtype=dt, count=size, offset=pos).reshape(dims)
            out[name] = arr.astype(dt.newbyteorder("="), copy=True)
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after last record")
    return out, precision


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam: AdamState | None = None
    meta: dict[str, float] = field(default_factory=dict)
    precision: int = 8


def save(
    path,
    params: Mapping[str, np.ndarray],
    adam: AdamState | None = None,
    precision: int = 8,
    meta: Mapping[str, float] | None = None,
) -> None:
    arrays = dict(params)
    if adam is not None:
        arrays[_ADAM + "step"] = np.array([adam.step], dtype=np.float64)
        arrays[_ADAM + "hyper"] = np.array([adam.lr, adam.beta1, adam.beta2, adam.eps])
        for name in params:
            arrays[f"{_ADAM}m.{name}"] = adam.m[name]
            arrays[f"{_ADAM}v.{name}"] = adam.v[name]
    for key, val in (meta or {}).items():
        arrays[_META + key] = np.array([val], dtype=np.float64)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode(arrays, precision))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        arrays, precision = decode(fh.read())
    params = {k: v for k, v in arrays.items() if not k.startswith((_ADAM, _META))}
    meta = {k[len(_META) :]: float(v[0]) for k, v in arrays.items() if k.startswith(_META)}
    state = None
    if _ADAM + "step" in arrays:
        lr, b1, b2, eps = (float(x) for x in arrays[_ADAM + "hyper"])
        state = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=int(arrays[_ADAM + "step"][0]))
        for name in params:
            state.m[name] = arrays[f"{_ADAM}m.{name}"]
            state.v[name] = arrays[f"{_ADAM}v.{name}"]
    return Checkpoint(params, state, meta, precision)
