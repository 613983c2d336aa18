"""Self-aware attention bottleneck: channel self-attention plus global spatial attention."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .exceptions import InvalidConfig, OddChannels, ShapeMismatch
from .layers import Layer, he_uniform
from .tensorcore import Tensor


@dataclass
class AttentionConfig:
    h: int
    w: int
    c: int
    heads: int = 4
    pos_channels: int | None = None
    enabled: bool = True

    def __post_init__(self):
        if self.c % 2:
            raise OddChannels(f"attention needs an even channel count, got {self.c}")
        if self.heads < 1 or self.c % self.heads:
            raise InvalidConfig(f"{self.c} channels cannot be split into {self.heads} heads")
        if self.pos_channels is None:
            self.pos_channels = max(1, self.c // 4)

    @property
    def c_half(self) -> int:
        return self.c // 2

    @property
    def d_k(self) -> int:
        return self.c // self.heads


def _flatten_spatial(x: Tensor) -> tuple[Tensor, tuple[int, ...], bool]:
    """Return ``n x (h*w) x c`` plus the original spatial shape."""
    squeezed = x.ndim == 3
    if squeezed:
        x = tc.reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ShapeMismatch(f"expected h x w x c or n x h x w x c, got {x.shape}")
    n, h, w, c = x.shape
    return tc.reshape(x, (n, h * w, c)), (n, h, w, c), squeezed


def _restore(flat: Tensor, shape, squeezed: bool) -> Tensor:
    out = tc.reshape(flat, shape)
    return tc.reshape(out, shape[1:]) if squeezed else out


def add_positional_embedding(f_in: Tensor, table: Tensor, projection: Tensor) -> Tensor:
    """Concatenate a learned ``h x w x p`` table to the input, then project back to ``c``."""
    if f_in.shape[-3:-1] != table.shape[:2]:
        raise ShapeMismatch(f"positional table {table.shape} does not fit input {f_in.shape}")
    c = f_in.shape[-1]
    if projection.shape != (c + table.shape[-1], c):
        raise ShapeMismatch(f"projection must be {(c + table.shape[-1], c)}, got {projection.shape}")
    tab = table if f_in.ndim == 3 else tc.broadcast_to(table, f_in.shape[:-1] + table.shape[-1:])
    return tc.pointwise(tc.concat_channels([f_in, tab]), projection)


def tsa_forward(f_prime: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor, heads: int = 1,
                return_attention: bool = False):
    """Channel-similarity multi-head self-attention.

    Per head the ``c_head x c_head`` map ``E = softmax(K Q / sqrt(c_head))`` is
    taken over rows and applied to the values: ``A = E V``.
    """
    x, shape, squeezed = _flatten_spatial(f_prime)
    n, h, w, c = shape
    for wm in (w_q, w_k, w_v):
        if wm.shape != (c, c):
            raise ShapeMismatch(f"projection must be {(c, c)}, got {wm.shape}")
    if c % heads:
        raise ShapeMismatch(f"{c} channels cannot be split into {heads} heads")
    ch = c // heads
    hw = h * w

    def split(t):  # n x hw x c -> n x heads x hw x ch
        return tc.transpose(tc.reshape(t, (n, hw, heads, ch)), (0, 2, 1, 3))

    q = split(tc.matmul(x, w_q))
    k = tc.swap_last(split(tc.matmul(x, w_k)))
    v = tc.swap_last(split(tc.matmul(x, w_v)))
    energy = tc.softmax(tc.mul(tc.matmul(k, q), 1.0 / np.sqrt(ch)), axis=-1)
    att = tc.matmul(energy, v)  # n x heads x ch x hw
    merged = tc.reshape(tc.transpose(att, (0, 3, 1, 2)), (n, hw, c))
    out = _restore(merged, shape, squeezed)
    if return_attention:
        return out, energy
    return out


def gsa_forward(f_in: Tensor, w_c: Tensor, w_c1: Tensor, w_c2: Tensor,
                return_attention: bool = False):
    """Position-by-position attention ``softmax(F1 F2) Fc`` over all ``h*w`` locations."""
    if f_in.shape[-1] % 2:
        raise OddChannels(f"global spatial attention needs even channels, got {f_in.shape[-1]}")
    x, shape, squeezed = _flatten_spatial(f_in)
    c = shape[-1]
    if w_c.shape != (c, c) or w_c1.shape != (c, c // 2) or w_c2.shape != (c, c // 2):
        raise ShapeMismatch("global spatial attention embedding shapes do not match channels")
    fc = tc.matmul(x, w_c)
    f1 = tc.matmul(x, w_c1)
    f2 = tc.swap_last(tc.matmul(x, w_c2))
    energy = tc.softmax(tc.matmul(f1, f2), axis=-1)
    out = _restore(tc.matmul(energy, fc), shape, squeezed)
    if return_attention:
        return out, energy
    return out


def self_aware_fuse(a_tsa: Tensor, a_gsa: Tensor, f_in: Tensor, projection: Tensor,
                    bias: Tensor | None = None) -> Tensor:
    if not (a_tsa.shape == a_gsa.shape == f_in.shape):
        raise ShapeMismatch("fuse inputs must share one shape")
    return tc.pointwise(tc.concat_channels([a_tsa, a_gsa, f_in]), projection, bias)


class SelfAwareAttention(Layer):
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.cfg = cfg
        c, p = cfg.c, cfg.pos_channels
        self.pos_table = Tensor(rng.normal(0.0, 0.02, size=(cfg.h, cfg.w, p)), requires_grad=True)
        self.pos_projection = Tensor(np.vstack([np.eye(c), np.zeros((p, c))]), requires_grad=True)
        self.w_q = he_uniform(rng, (c, c), c)
        self.w_k = he_uniform(rng, (c, c), c)
        self.w_v = he_uniform(rng, (c, c), c)
        self.w_c = he_uniform(rng, (c, c), c)
        self.w_c1 = he_uniform(rng, (c, c // 2), c)
        self.w_c2 = he_uniform(rng, (c, c // 2), c)
        self.w_fuse = he_uniform(rng, (3 * c, c), 3 * c)
        self.b_fuse = Tensor(np.zeros(c), requires_grad=True)

    def __call__(self, f_in: Tensor) -> Tensor:
        if not self.cfg.enabled:
            return f_in
        if f_in.shape[-3:] != (self.cfg.h, self.cfg.w, self.cfg.c):
            raise ShapeMismatch(f"attention configured for {(self.cfg.h, self.cfg.w, self.cfg.c)}, "
                                f"got {f_in.shape}")
        f_prime = add_positional_embedding(f_in, self.pos_table, self.pos_projection)
        a_tsa = tsa_forward(f_prime, self.w_q, self.w_k, self.w_v, self.cfg.heads)
        a_gsa = gsa_forward(f_in, self.w_c, self.w_c1, self.w_c2)
        return self_aware_fuse(a_tsa, a_gsa, f_in, self.w_fuse, self.b_fuse)
