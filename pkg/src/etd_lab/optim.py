"""AdamW with decoupled weight decay, plus global-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor, global_grad_norm


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    decay_mask: Sequence[bool] | None = None,
) -> None:
    """One in-place AdamW update of ``params`` and ``state``.

    Missing gradients count as zero. Weight decay is applied as
    ``p -= lr * wd * p`` before the moment update, only where ``decay_mask``
    is true (all params when it is omitted).
    """
    if len(params) != len(state.m):
        raise ValueError("optimizer state does not match the parameter list")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for i, p in enumerate(params):
        g = grads[i]
        if g is None:
            g = np.zeros_like(p)
        if p.shape != state.m[i].shape:
            raise ValueError(f"state shape {state.m[i].shape} != param shape {p.shape}")
        if weight_decay and (decay_mask is None or decay_mask[i]):
            p -= lr * weight_decay * p
        m, v = state.m[i], state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dataclass
class AdamW:
    params: list[Tensor]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.like([p.data for p in self.params])
        # norm gains and 1-D vectors are not decayed
        self.decay_mask = [p.ndim >= 2 for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        adamw_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.state,
            lr,
            self.beta1,
            self.beta2,
            self.eps,
            self.weight_decay,
            self.decay_mask,
        )


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm
