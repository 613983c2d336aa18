"""Parameter containers and the small set of layers the network is built from."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensorcore as tc
from .tensorcore import BatchNormState, Tensor


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    limit = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Layer:
    """Base class: discovers parameters, sub-layers and batch-norm state by attribute."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Layer):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Layer):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_states(self, prefix: str = "") -> Iterator[tuple[str, BatchNormState]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, BatchNormState):
                yield name, val
            elif isinstance(val, Layer):
                yield from val.named_states(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Layer):
                        yield from item.named_states(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


class Pointwise(Layer):
    """1x1 convolution with bias."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = True,
                 zero_init: bool = False):
        self.weight = zeros((c_in, c_out)) if zero_init else he_uniform(rng, (c_in, c_out), c_in)
        self.bias = zeros((c_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return tc.pointwise(x, self.weight, self.bias)


class Conv2d(Layer):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1):
        self.kernel = he_uniform(rng, (k, k, c_in, c_out), k * k * c_in)
        self.bias = zeros((c_out,))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return tc.conv2d(x, self.kernel, "same", self.stride, self.bias)


class SeparableConv2d(Layer):
    """Depthwise ``k x k`` filtering followed by a pointwise projection."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator):
        self.depth_kernel = he_uniform(rng, (k, k, c_in), k * k)
        self.point = Pointwise(c_in, c_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return tc.depthwise_separable_conv2d(x, self.depth_kernel, self.point.weight, self.point.bias)


class BatchNorm2d(Layer):
    def __init__(self, channels: int):
        self.gamma = ones((channels,))
        self.beta = zeros((channels,))
        self.state = BatchNormState(channels)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return tc.batch_norm2d(x, self.gamma, self.beta, self.state, mode)
