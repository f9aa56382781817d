"""Parameter containers and the layers built on the tensor/kernel ops."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import kernels
from .tensor import Tensor, get_default_dtype, layer_norm, linear, gelu


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)


class Module:
    """Minimal container: parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (used to run gradient checks in float64)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(in_features)
        self.weight = parameter(rng.uniform(-bound, bound, size=(in_features, out_features)))
        self.bias = parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    """Two-layer GELU feed-forward block."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, out_dim: int | None = None):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, out_dim or dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


def _he_normal(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Conv(Module):
    """Convolution over 2 or 3 spatial axes (``len(kernel)`` decides which)."""

    def __init__(self, c_in: int, c_out: int, kernel, rng: np.random.Generator, stride=1,
                 padding="same"):
        kernel = tuple(kernel)
        if padding == "same":
            if any(k % 2 == 0 for k in kernel):
                raise ValueError("'same' padding needs odd kernel extents")
            padding = tuple(k // 2 for k in kernel)
        self.stride = stride
        self.padding = padding
        fan_in = c_in * int(np.prod(kernel))
        self.weight = parameter(_he_normal(rng, (c_out, c_in) + kernel, fan_in))
        self.bias = parameter(np.zeros(c_out))

    def forward(self, x: Tensor) -> Tensor:
        op = kernels.conv2d if self.weight.ndim == 4 else kernels.conv3d
        return op(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose(Module):
    def __init__(self, c_in: int, c_out: int, kernel, rng: np.random.Generator, stride, padding=0):
        kernel = tuple(kernel)
        self.stride = stride
        self.padding = padding
        fan_in = c_in * int(np.prod(kernel))
        self.weight = parameter(_he_normal(rng, (c_in, c_out) + kernel, fan_in))
        self.bias = parameter(np.zeros(c_out))

    def forward(self, x: Tensor) -> Tensor:
        op = kernels.conv2d_transpose if self.weight.ndim == 4 else kernels.conv3d_transpose
        return op(x, self.weight, self.bias, self.stride, self.padding)
