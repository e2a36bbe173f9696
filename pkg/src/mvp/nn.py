"""Parameter containers and initialisers."""
from __future__ import annotations

from typing import Iterator

import numpy as np
from scipy.stats import truncnorm

from . import tensor as T
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std^2) truncated at +-2 std."""
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


class Module:
    """Attribute-walking parameter registry (insertion order is the canonical order)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = T.parameter(trunc_normal(rng, (n_in, n_out), std))
        self.bias = T.parameter(np.zeros(n_out))

    def __call__(self, x):
        return x @ self.weight + self.bias


class Conv2d(Module):
    """Channel-first convolution, square kernel, 'same' padding when ``same``."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 same: bool = False, std: float = 0.02, pad_mode: str = "zeros"):
        self.weight = T.parameter(trunc_normal(rng, (c_out, c_in, k, k), std))
        self.bias = T.parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = k // 2 if same else 0
        self.pad_mode = pad_mode

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding,
                        pad_mode=self.pad_mode)
