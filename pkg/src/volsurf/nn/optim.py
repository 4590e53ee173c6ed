"""Adam with bias-corrected moments."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, beta1=BETA1, beta2=BETA2, eps=EPS) -> AdamState:
    """Update ``params`` (list of arrays) in place; ``None`` grads count as zero."""
    if len(params) != len(state.m):
        raise ValueError("optimizer state does not match the parameter list")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = 0.0
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


@dataclass
class Adam:
    """Thin wrapper stepping a list of leaf tensors from their ``.grad``."""

    tensors: list
    lr: float = 1e-3
    state: AdamState = field(init=False)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        self.state = AdamState.zeros_like([t.data for t in self.tensors])

    def step(self):
        adam_step([t.data for t in self.tensors], [t.grad for t in self.tensors], self.state, self.lr)

    def zero_grad(self):
        for t in self.tensors:
            t.grad = None
