"""Conv layer with Kaiming fan-in init and named-parameter collection."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


class Conv:
    """2-D convolution layer; weights drawn once from the given generator."""

    def __init__(self, rng: np.random.Generator, cin: int, cout: int, k: int = 3,
                 stride: int = 1, padding: int | None = None, dilation: int = 1):
        fan_in = cin * k * k
        std = float(np.sqrt(2.0 / fan_in))
        self.w = Tensor(rng.normal(0.0, std, (cout, cin, k, k)), requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True)
        self.stride = stride
        self.padding = (k - 1) // 2 * dilation if padding is None else padding
        self.dilation = dilation

    def __call__(self, x: Tensor) -> Tensor:
        return dc.conv2d(x, self.w, self.b, stride=self.stride,
                         padding=self.padding, dilation=self.dilation)

    def named_params(self, prefix: str):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


def relu(x: Tensor) -> Tensor:
    return dc.activation("relu", x)


def sigmoid(x: Tensor) -> Tensor:
    return dc.activation("sigmoid", x)


def param_count(named) -> int:
    return sum(int(t.size) for _, t in named)
