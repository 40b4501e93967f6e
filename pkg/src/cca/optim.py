"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


class StateError(ValueError):
    """Optimizer state does not line up with the parameters."""


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], **hyper) -> "AdamState":
        state = cls(**hyper)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """Update ``params`` in place from ``grads``; missing grads count as zero."""
    for name, p in params.items():
        if name not in state.m or state.m[name].shape != p.shape or state.v[name].shape != p.shape:
            raise StateError(f"Adam state for {name!r} does not match parameter shape {p.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise StateError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Adam:
    """Thin stateful wrapper pairing a parameter dict with its ``AdamState``."""

    def __init__(self, params: Mapping[str, Tensor], lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.state = AdamState.for_params(params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, {n: p.grad for n, p in self.params.items() if p.grad is not None}, self.state)
