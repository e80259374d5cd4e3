"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError
from .tensor import Tensor


@dataclass
class AdamWState:
    """Moment buffers and hyperparameters for one parameter group."""

    lr: float = 6e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t_opt: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(state: AdamWState, params: list[Tensor], grads: list[np.ndarray]) -> None:
    """One decoupled-weight-decay update over all parameters in lockstep."""
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t_opt += 1
    t = state.t_opt
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise DimensionError(f"grad shape {g.shape} does not match param {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        p.data -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)


class AdamW:
    """Convenience wrapper binding an AdamWState to a fixed parameter list."""

    def __init__(self, params: list[Tensor], lr: float = 6e-5, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.state = AdamWState(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                                weight_decay=weight_decay)

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adamw_step(self.state, self.params, grads)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
