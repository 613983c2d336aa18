"""Focal modulation for encoder-to-decoder skip paths.

A stack of depthwise-separable convolutions builds hierarchical contexts of
growing receptive field; a global average adds one more level. Sigmoid gates
computed from the input mix the levels into a modulator that multiplies a
1x1 query projection; the result is added back onto the input.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .exceptions import InvalidConfig, ShapeMismatch
from .layers import Layer, Pointwise, SeparableConv2d
from .tensorcore import Tensor


@dataclass
class FocalModConfig:
    channels: int
    focal_levels: int = 2
    level_kernel_sizes: Sequence[int] = field(default_factory=lambda: (3, 5))
    gate_activation: str = "sigmoid"

    def __post_init__(self):
        self.level_kernel_sizes = tuple(int(k) for k in self.level_kernel_sizes)
        if len(self.level_kernel_sizes) != self.focal_levels:
            raise InvalidConfig("need one kernel size per focal level")
        if any(k % 2 == 0 or k < 1 for k in self.level_kernel_sizes):
            raise InvalidConfig("focal kernel sizes must be odd")
        if self.gate_activation != "sigmoid":
            raise InvalidConfig("only sigmoid gates are supported")


def global_context_map(x: Tensor, levels: Sequence[SeparableConv2d],
                       include_global: bool = True) -> list[Tensor]:
    """Contexts ``ctx_1..ctx_L`` (stacked conv + gelu) and optionally the global level."""
    contexts = []
    ctx = x
    for conv in levels:
        ctx = tc.gelu(conv(ctx))
        contexts.append(ctx)
    if include_global:
        contexts.append(tc.global_average_broadcast(contexts[-1]))
    return contexts


def compute_gates(gates_source: Tensor, gate_proj: Pointwise) -> Tensor:
    return tc.sigmoid(gate_proj(gates_source))


def gated_context_aggregation(contexts: Sequence[Tensor], gates: Tensor) -> Tensor:
    """Modulator ``m = sum_l g_l * ctx_l`` with one gate map per context level."""
    if gates.shape[-1] < len(contexts):
        raise ShapeMismatch(f"{gates.shape[-1]} gate maps for {len(contexts)} contexts")
    shape = contexts[0].shape
    m = None
    for level, ctx in enumerate(contexts):
        if ctx.shape != shape:
            raise ShapeMismatch("all contexts must share one shape")
        term = tc.mul(tc.slice_channels(gates, level, level + 1), ctx)
        m = term if m is None else tc.add(m, term)
    return m


class FocalModulation(Layer):
    def __init__(self, cfg: FocalModConfig, rng: np.random.Generator):
        self.cfg = cfg
        c = cfg.channels
        self.levels = [SeparableConv2d(c, c, k, rng) for k in cfg.level_kernel_sizes]
        self.query = Pointwise(c, c, rng)
        self.gate = Pointwise(c, cfg.focal_levels + 1, rng)
        self.out = Pointwise(c, c, rng, zero_init=True)

    def global_context_map(self, x: Tensor, include_global: bool = True) -> list[Tensor]:
        return global_context_map(x, self.levels, include_global)

    def gates(self, x: Tensor) -> Tensor:
        return compute_gates(x, self.gate)

    def modulator(self, x: Tensor, include_global: bool = True) -> Tensor:
        return gated_context_aggregation(self.global_context_map(x, include_global), self.gates(x))

    def __call__(self, x: Tensor, include_global: bool = True) -> Tensor:
        if x.shape[-1] != self.cfg.channels:
            raise ShapeMismatch(f"focal block configured for {self.cfg.channels} channels, "
                                f"got {x.shape[-1]}")
        m = self.modulator(x, include_global)
        return tc.add(x, self.out(tc.mul(self.query(x), m)))


def focal_modulate(x: Tensor, block: FocalModulation, include_global: bool = True) -> Tensor:
    return block(x, include_global)
