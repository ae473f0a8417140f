"""Adam parameter updates with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import UNetParams


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: UNetParams) -> "AdamState":
        names = params.trainable_names()
        return cls(
            m={n: np.zeros_like(params.tensors[n]) for n in names},
            v={n: np.zeros_like(params.tensors[n]) for n in names},
        )


def adam_step(
    params: UNetParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    t: int,
    learning_rate: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> tuple[UNetParams, AdamState]:
    """One update, in place: m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2;
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)."""
    if t < 1:
        raise ValueError("step index t starts at 1")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        step = learning_rate * (m / c1) / (np.sqrt(v / c2) + epsilon)
        params.tensors[name] -= step.astype(params.tensors[name].dtype, copy=False)
    return params, state
