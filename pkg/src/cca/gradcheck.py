"""Finite-difference verification of every parameter gradient."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .config import TINY, EncoderConfig
from .model import CCAModel
from .tensor import Tensor
from .triplets import triplet_loss

TOLERANCE = {64: 1e-5, 32: 1e-3}
# Denominator floor: below this magnitude the comparison is effectively absolute
# (1e-9 at the 64-bit tolerance), well above central-difference roundoff.
REL_FLOOR = 1e-4
# Jitter added to the initial parameters so normalizations see O(1) inputs;
# at the raw 0.02-std init, l2-normalize curvature makes h=1e-5 truncation
# error dominate.
JITTER = 0.3


@dataclass
class GradcheckReport:
    max_rel_error: float
    tolerance: float
    worst: list[tuple[str, float]] = field(default_factory=list)
    checked: int = 0
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def failing(self) -> list[str]:
        return [name for name, err in self.worst if err >= self.tolerance]

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [
            f"{status} max_rel_error={self.max_rel_error:.3e} tolerance={self.tolerance:.0e} "
            f"coordinates={self.checked} seconds={self.seconds:.1f}"
        ]
        for name, err in self.worst[:5]:
            lines.append(f"  {name}\t{err:.3e}")
        return "\n".join(lines)


def analytic_gradients(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    return {n: (p.grad if p.grad is not None else np.zeros_like(p.data)).astype(np.float64) for n, p in params.items()}


def numeric_gradients(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences, one coordinate at a time."""
    out = {}
    for name, p in params.items():
        g = np.zeros(p.shape)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        out[name] = g
    return out


def relative_error(a: np.ndarray, n: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def compare(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray], tolerance: float) -> GradcheckReport:
    errs = {name: float(relative_error(analytic[name], numeric[name]).max(initial=0.0)) for name in analytic}
    worst = sorted(errs.items(), key=lambda kv: -kv[1])
    return GradcheckReport(
        max_rel_error=worst[0][1] if worst else 0.0,
        tolerance=tolerance,
        worst=worst,
        checked=int(sum(a.size for a in analytic.values())),
    )


def triplet_batch_loss(model: CCAModel, images: np.ndarray, margin: float) -> Tensor:
    """Sum over conditions of the triplet loss on a fixed 6-image batch.

    Rows 0-1 are anchors, 2-3 positives, 4-5 negatives.
    """
    total = None
    for c in range(model.config.num_conditions):
        emb = model(images, c)
        loss = triplet_loss(emb[0:2], emb[2:4], emb[4:6], margin)
        total = loss if total is None else total + loss
    return total


def run_gradcheck(
    embed_type: str = "type2",
    precision: int = 64,
    seed: int = 0,
    config: EncoderConfig = TINY,
    h: float = 1e-5,
    margin: float = 1.0,
) -> GradcheckReport:
    """Check a full model on one batch against central finite differences.

    The numeric side always runs in float64 on an upcast copy, so a 32-bit
    model is judged only by its own rounding, at the looser tolerance. The
    default margin keeps every hinge active at initialization.
    """
    start = time.perf_counter()
    cfg = EncoderConfig(**{**config.__dict__, "embed_type": embed_type, "precision": precision})
    rng = np.random.default_rng([seed, 7])
    base = CCAModel.init_params(cfg, np.random.default_rng([seed, 1]))
    model = CCAModel(cfg, {n: v + JITTER * rng.standard_normal(v.shape) for n, v in sorted(base.items())})
    images = rng.uniform(-1.0, 1.0, size=(6, cfg.channels, cfg.image_size, cfg.image_size))

    analytic = analytic_gradients(lambda: triplet_batch_loss(model, images.astype(cfg.dtype), margin), model.params)
    ref_cfg = EncoderConfig(**{**cfg.__dict__, "precision": 64})
    ref = CCAModel(ref_cfg, {n: p.data.astype(np.float64) for n, p in model.params.items()})
    numeric = numeric_gradients(lambda: triplet_batch_loss(ref, images, margin), ref.params, h)
    report = compare(analytic, numeric, TOLERANCE[precision])
    report.seconds = time.perf_counter() - start
    return report
