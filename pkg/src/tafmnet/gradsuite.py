"""Finite-difference checks over every differentiable op, loss and a small model.

Each case builds a scalar function of one leaf tensor; the suite compares
tape gradients with central differences in float64.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import tensorcore as tc
from .attention import AttentionConfig, SelfAwareAttention, add_positional_embedding, gsa_forward, tsa_forward
from .distance import level_set
from .focalmod import FocalModConfig, FocalModulation
from .losses import LOSS_KINDS, LossSchedule, compute_loss
from .model import ModelConfig, TAFMNet
from .tensorcore import Tensor, ops

log = logging.getLogger(__name__)

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class CaseResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _leaf(arr) -> Tensor:
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.1):
    # keeps relu / clip kinks out of the finite-difference stencil
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _weighted_sum(y: Tensor, seed: int) -> Tensor:
    w = np.random.default_rng(seed).normal(size=y.shape)
    return tc.tsum(tc.mul(y, w))


def _op_cases(rng) -> Iterator[tuple[str, Callable, Tensor]]:
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    row = rng.normal(size=(4,))
    ws = _weighted_sum

    yield "add", lambda x: ws(tc.add(x, b), 1), _leaf(a)
    yield "add_broadcast", lambda x: ws(tc.add(a, x), 1), _leaf(row)
    yield "sub", lambda x: ws(tc.sub(b, x), 2), _leaf(a)
    yield "mul", lambda x: ws(tc.mul(x, b), 3), _leaf(a)
    yield "mul_broadcast", lambda x: ws(tc.mul(a, x), 3), _leaf(row)
    yield "div_numerator", lambda x: ws(tc.div(x, pos), 4), _leaf(a)
    yield "div_denominator", lambda x: ws(tc.div(a, x), 4), _leaf(pos)
    yield "power", lambda x: ws(tc.power(x, 1.7), 5), _leaf(pos)
    yield "log", lambda x: ws(tc.log(x), 6), _leaf(pos)
    yield "exp", lambda x: ws(tc.exp(x), 7), _leaf(a)
    yield "clip", lambda x: ws(tc.clip(x, -0.05, 0.05), 8), _leaf(_away_from_zero(rng, (3, 4)))
    yield "relu", lambda x: ws(tc.relu(x), 9), _leaf(_away_from_zero(rng, (3, 4)))
    yield "sigmoid", lambda x: ws(tc.sigmoid(x), 10), _leaf(a)
    yield "gelu", lambda x: ws(tc.gelu(x), 11), _leaf(a)
    yield "sum_axis", lambda x: ws(tc.tsum(x, axis=0), 12), _leaf(a)
    yield "mean_axis", lambda x: ws(tc.mean(x, axis=1, keepdims=True), 13), _leaf(a)
    yield "reshape", lambda x: ws(tc.reshape(x, (2, 6)), 14), _leaf(a)
    yield "transpose", lambda x: ws(tc.transpose(x), 15), _leaf(a)
    yield "swap_last", lambda x: ws(tc.swap_last(x), 16), _leaf(rng.normal(size=(2, 3, 4)))
    yield "broadcast_to", lambda x: ws(tc.broadcast_to(x, (3, 4)), 17), _leaf(row)

    img = rng.normal(size=(5, 6, 3))
    other = rng.normal(size=(5, 6, 2))
    yield "concat_channels", lambda x: ws(tc.concat_channels([x, other]), 18), _leaf(img)
    yield "slice_channels", lambda x: ws(tc.slice_channels(x, 1, 3), 19), _leaf(img)

    m1 = rng.normal(size=(2, 3, 4))
    m2 = rng.normal(size=(2, 4, 5))
    yield "matmul_left", lambda x: ws(tc.matmul(x, m2), 20), _leaf(m1)
    yield "matmul_right", lambda x: ws(tc.matmul(m1, x), 20), _leaf(m2)
    yield "softmax_last", lambda x: ws(tc.softmax(x, axis=-1), 21), _leaf(m1)
    yield "softmax_first", lambda x: ws(tc.softmax(x, axis=0), 21), _leaf(m1)

    pw = rng.normal(size=(3, 4))
    bias = rng.normal(size=(4,))
    yield "pointwise_input", lambda x: ws(tc.pointwise(x, pw, bias), 22), _leaf(img)
    yield "pointwise_weight", lambda x: ws(tc.pointwise(img, x, bias), 22), _leaf(pw)
    yield "pointwise_bias", lambda x: ws(tc.pointwise(img, pw, x), 22), _leaf(bias)

    batch = rng.normal(size=(2, 6, 6, 3))
    k3 = rng.normal(size=(3, 3, 3, 2))
    cb = rng.normal(size=(2,))
    yield "conv2d_same_input", lambda x: ws(tc.conv2d(x, k3, "same", 1, cb), 23), _leaf(batch)
    yield "conv2d_same_kernel", lambda x: ws(tc.conv2d(batch, x, "same", 1, cb), 23), _leaf(k3)
    yield "conv2d_valid_input", lambda x: ws(tc.conv2d(x, k3, "valid"), 24), _leaf(batch)
    yield "conv2d_stride2_input", lambda x: ws(tc.conv2d(x, k3, "same", 2, cb), 25), _leaf(batch)
    yield "conv2d_stride2_kernel", lambda x: ws(tc.conv2d(batch, x, "same", 2, cb), 25), _leaf(k3)
    yield "conv2d_bias", lambda x: ws(tc.conv2d(batch, k3, "same", 2, x), 25), _leaf(cb)

    dk = rng.normal(size=(3, 3, 3))
    dk5 = rng.normal(size=(5, 5, 3))
    pk = rng.normal(size=(3, 4))
    for compiled in (True, False):
        tag = "compiled" if compiled else "numpy"

        def depthwise(x, kernel, padding="same", compiled=compiled):
            prev = ops.use_compiled_kernels
            ops.use_compiled_kernels = compiled and prev
            try:
                return ops.depthwise_conv2d(x, kernel, padding)
            finally:
                ops.use_compiled_kernels = prev

        yield f"depthwise_{tag}_input", lambda x, d=depthwise: ws(d(x, dk), 26), _leaf(batch)
        yield f"depthwise_{tag}_kernel", lambda x, d=depthwise: ws(d(batch, x), 26), _leaf(dk)
        yield f"depthwise_{tag}_k5_valid", lambda x, d=depthwise: ws(d(x, dk5, "valid"), 27), _leaf(batch)
    yield "separable_conv_input", lambda x: ws(tc.depthwise_separable_conv2d(x, dk, pk), 28), _leaf(batch)
    yield "separable_conv_point", lambda x: ws(tc.depthwise_separable_conv2d(batch, dk, x), 28), _leaf(pk)

    yield "bilinear_upsample2x", lambda x: ws(tc.bilinear_upsample2x(x), 29), _leaf(batch)
    yield "global_average_broadcast", lambda x: ws(tc.global_average_broadcast(x), 30), _leaf(batch)

    gamma = rng.uniform(0.5, 1.5, size=(3,))
    beta = rng.normal(size=(3,))

    def bn(x, g=gamma, b=beta, mode="train"):
        state = tc.BatchNormState(3)
        state.running_mean = np.full(3, 0.1)
        state.running_var = np.full(3, 1.3)
        return tc.batch_norm2d(x, g, b, state, mode)

    yield "batch_norm_train_input", lambda x: ws(bn(x), 31), _leaf(batch)
    yield "batch_norm_train_gamma", lambda x: ws(bn(batch, g=x), 31), _leaf(gamma)
    yield "batch_norm_train_beta", lambda x: ws(bn(batch, b=x), 31), _leaf(beta)
    yield "batch_norm_infer_input", lambda x: ws(bn(x, mode="infer"), 32), _leaf(batch)
    yield "dropout_train", lambda x: ws(tc.dropout(x, 0.4, "train", np.random.default_rng(5)), 33), _leaf(batch)


def _attention_cases(rng) -> Iterator[tuple[str, Callable, Tensor]]:
    cfg = AttentionConfig(3, 3, 8, heads=2)
    block = SelfAwareAttention(cfg, np.random.default_rng(1))
    f_in = rng.normal(size=(2, 3, 3, 8))
    ws = _weighted_sum
    proj = rng.normal(size=block.pos_projection.shape)
    yield "positional_embedding_table", lambda t: ws(add_positional_embedding(f_in, t, proj), 40), \
        _leaf(block.pos_table.data)
    yield "positional_embedding_projection", lambda w: ws(add_positional_embedding(f_in, block.pos_table, w), 40), \
        _leaf(proj)
    yield "tsa_input", lambda x: ws(tsa_forward(x, block.w_q, block.w_k, block.w_v, 2), 41), _leaf(f_in)
    yield "tsa_query_weight", lambda w: ws(tsa_forward(f_in, w, block.w_k, block.w_v, 2), 41), _leaf(block.w_q.data)
    yield "tsa_key_weight", lambda w: ws(tsa_forward(f_in, block.w_q, w, block.w_v, 2), 41), _leaf(block.w_k.data)
    yield "gsa_input", lambda x: ws(gsa_forward(x, block.w_c, block.w_c1, block.w_c2), 42), _leaf(f_in)
    yield "gsa_embedding_weight", lambda w: ws(gsa_forward(f_in, block.w_c, w, block.w_c2), 42), _leaf(block.w_c1.data)
    yield "self_aware_attention_block", lambda x: ws(block(x), 43), _leaf(f_in)

    fcfg = FocalModConfig(4, 2, (3, 5))
    focal = FocalModulation(fcfg, np.random.default_rng(2))
    # nonzero output projection so the modulation path carries gradient
    focal.out.weight.data = np.random.default_rng(3).normal(size=(4, 4))
    s_k = rng.normal(size=(2, 6, 6, 4))
    yield "focal_modulation_input", lambda x: ws(focal(x), 44), _leaf(s_k)
    yield "focal_modulation_local_only", lambda x: ws(focal(x, include_global=False), 45), _leaf(s_k)


def _loss_cases(rng) -> Iterator[tuple[str, Callable, Tensor]]:
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:6, 1:5] = True
    mask[5, 5] = True
    g = mask[..., None].astype(np.float64)
    phi = level_set(mask).phi[..., None]
    p0 = rng.uniform(0.05, 0.95, size=(8, 8, 1))
    for kind in LOSS_KINDS:
        # an interior alpha so both terms of the fused losses are exercised
        sch = LossSchedule(kind=kind, fusion_alpha=0.6, ft_gamma=0.75 if kind in ("FT", "L2", "L5") else 1.0)
        yield f"loss_{kind}", lambda x, s=sch: compute_loss(x, g, phi, s), _leaf(p0)
    yield "loss_FT_gamma1", lambda x: compute_loss(x, g, phi, LossSchedule(kind="FT")), _leaf(p0)


def small_model(seed: int = 0, stages: int = 2, connection_mode: str = "residual") -> TAFMNet:
    """Network on 16x16 inputs used by the model-level checks."""
    cfg = ModelConfig(input_size=16, stage_widths=(4, 8, 8)[:stages], connection_mode=connection_mode,
                      dropout_rate=0.0, heads=2, seed=seed)
    net = TAFMNet(cfg)
    # zero-initialised paths would make some checks vacuous; give them random weights
    wrng = np.random.default_rng(seed + 100)
    net.attention.pos_projection.data = wrng.normal(size=net.attention.pos_projection.shape)
    # an unsaturated channel softmax keeps query/key gradients above round-off
    net.attention.w_q.data *= 0.1
    net.attention.w_k.data *= 0.1
    for block in net.decoder:
        if block.focal is not None:
            block.focal.out.weight.data = wrng.normal(0.0, 0.5, size=block.focal.out.weight.shape)
    return net


def _model_cases(rng, max_coords: int) -> Iterator[tuple[str, Callable, Tensor, int | None]]:
    net = small_model()
    images = rng.uniform(0.0, 1.0, size=(2, 16, 16, 3))
    mask = np.zeros((2, 16, 16), dtype=bool)
    mask[0, 4:11, 3:9] = True
    mask[1, 8:14, 6:15] = True
    g = mask[..., None].astype(np.float64)
    phi = np.stack([level_set(m).phi for m in mask])[..., None]
    sch = LossSchedule(kind="L4", fusion_alpha=0.7)

    def loss_of(x):
        return compute_loss(net(x, "train"), g, phi, sch)

    yield "model_input", loss_of, _leaf(images), max_coords
    params = dict(net.named_parameters())
    for name in ("encoder.0.conv1.depth_kernel", "encoder.1.down.kernel", "attention.w_q",
                 "attention.w_c1", "attention.pos_table", "decoder.0.focal.levels.0.depth_kernel",
                 "decoder.0.focal.gate.weight", "decoder.1.conv.point.weight",
                 "decoder.1.reshape_bn.gamma", "head.weight"):
        # parameters are leaves already; the checker perturbs them in place
        yield f"model_param[{name}]", lambda _: loss_of(images), params[name], max_coords

    # dense priors first appear in the third decoder block
    dense = small_model(stages=3, connection_mode="dense")
    dparams = dict(dense.named_parameters())

    def dense_loss(_):
        return compute_loss(dense(images, "train"), g, phi, sch)

    for name in ("decoder.2.dense.0.weight", "decoder.2.dense_bn.0.beta", "encoder.2.conv1.depth_kernel"):
        yield f"dense_model_param[{name}]", dense_loss, dparams[name], max_coords


def iter_cases(seed: int = 0, include_model: bool = True, max_coords: int = 40):
    rng = np.random.default_rng(seed)
    for name, f, x in _op_cases(rng):
        yield name, f, x, None
    for name, f, x in _attention_cases(rng):
        yield name, f, x, None
    for name, f, x in _loss_cases(rng):
        yield name, f, x, None
    if include_model:
        yield from _model_cases(rng, max_coords)


def run_suite(seed: int = 0, include_model: bool = True, max_coords: int = 40) -> list[CaseResult]:
    """Run every case in float64 and return one result per case."""
    results = []
    with tc.use_dtype(np.float64):
        for name, f, x, coords in iter_cases(seed, include_model, max_coords):
            start = time.perf_counter()
            err = tc.finite_difference_check(f, x, step=STEP, max_coords=coords, seed=seed)
            results.append(CaseResult(name, err, time.perf_counter() - start))
            log.debug("%s %.3e", name, err)
    return results
