"""Regional, boundary and fused segmentation losses with the fusion-weight schedule."""
from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from . import tensorcore as tc
from .distance import LevelSetMap
from .exceptions import InvalidConfig, InvalidGamma, MissingLevelSet, ShapeMismatch
from .tensorcore import Tensor

LOSS_KINDS = ("BCE", "DSC", "JSC", "FT", "B", "L1", "L2", "L3", "L4", "L5", "L6")


@dataclass
class LossSchedule:
    kind: str = "L4"
    tversky_alpha: float = 0.3
    tversky_beta: float = 0.7
    ft_gamma: float = 1.0
    epsilon: float = 1e-5
    fusion_alpha: float = 1.0
    delta_alpha: float = 0.005
    alpha_min: float = 0.01
    boundary_reduction: str = "mean"

    def __post_init__(self):
        self.kind = self.kind.upper()
        if self.kind not in LOSS_KINDS:
            raise InvalidConfig(f"unknown loss kind {self.kind!r}")
        if not self.alpha_min <= self.fusion_alpha <= 1.0:
            raise InvalidConfig(f"fusion_alpha {self.fusion_alpha} outside [{self.alpha_min}, 1]")
        if self.boundary_reduction not in ("mean", "sum"):
            raise InvalidConfig("boundary_reduction must be 'mean' or 'sum'")

    @property
    def needs_level_set(self) -> bool:
        return self.kind in ("B", "L4", "L5", "L6")


def _pair(p, g) -> tuple[Tensor, Tensor]:
    p, g = tc.as_tensor(p), tc.as_tensor(g)
    if p.shape != g.shape:
        raise ShapeMismatch(f"prediction {p.shape} and target {g.shape} differ")
    return p, g


def bce_loss(p, g, eps: float = 1e-5) -> Tensor:
    """Pixel-mean binary cross-entropy with probabilities clipped to ``[eps, 1-eps]``."""
    p, g = _pair(p, g)
    pc = tc.clip(p, eps, 1.0 - eps)
    gd = g.data
    # g * log p + (1 - g) * log(1 - p)
    ll = tc.add(tc.mul(tc.log(pc), gd), tc.mul(tc.log(tc.sub(1.0, pc)), 1.0 - gd))
    return tc.mul(tc.mean(ll), -1.0)


def dice_loss(p, g, eps: float = 1e-5) -> Tensor:
    p, g = _pair(p, g)
    inter = tc.tsum(tc.mul(p, g))
    denom = tc.add(tc.add(tc.tsum(p), tc.tsum(g)), eps)
    return tc.sub(1.0, tc.div(tc.add(tc.mul(inter, 2.0), eps), denom))


def jaccard_loss(p, g, eps: float = 1e-5) -> Tensor:
    p, g = _pair(p, g)
    inter = tc.tsum(tc.mul(p, g))
    union = tc.sub(tc.add(tc.tsum(p), tc.tsum(g)), inter)
    return tc.sub(1.0, tc.div(tc.add(inter, eps), tc.add(union, eps)))


def tversky_index(p, g, alpha: float, beta: float, eps: float) -> Tensor:
    p, g = _pair(p, g)
    tp = tc.tsum(tc.mul(p, g))
    fn = tc.tsum(tc.mul(tc.sub(1.0, p), g))
    fp = tc.tsum(tc.mul(p, tc.sub(1.0, g)))
    denom = tc.add(tc.add(tc.add(tp, tc.mul(fn, alpha)), tc.mul(fp, beta)), eps)
    return tc.div(tc.add(tp, eps), denom)


def focal_tversky_loss(p, g, schedule: LossSchedule | None = None) -> Tensor:
    """``(1 - TI)^(1/gamma)``; false negatives weighted by alpha, false positives by beta."""
    s = schedule or LossSchedule()
    if s.ft_gamma <= 0:
        raise InvalidGamma(f"gamma must be positive, got {s.ft_gamma}")
    loss = tc.sub(1.0, tversky_index(p, g, s.tversky_alpha, s.tversky_beta, s.epsilon))
    if s.ft_gamma == 1.0:
        return loss
    # keep the base strictly positive so the fractional power stays differentiable
    return tc.power(tc.clip(loss, 1e-12, 2.0), 1.0 / s.ft_gamma)


def boundary_loss(p, phi: LevelSetMap | np.ndarray, reduction: str = "mean") -> Tensor:
    """Level-set weighted probability mass ``mean(phi * p)``; negative when p sits inside."""
    p = tc.as_tensor(p)
    phi_arr = phi.phi if isinstance(phi, LevelSetMap) else np.asarray(phi)
    if phi_arr.shape != p.shape:
        try:
            phi_arr = phi_arr.reshape(p.shape)
        except ValueError:
            raise ShapeMismatch(f"level set {phi_arr.shape} does not match {p.shape}") from None
    weighted = tc.tsum(tc.mul(p, phi_arr.astype(p.data.dtype)))
    if reduction == "sum":
        return weighted
    return tc.mul(weighted, 1.0 / p.size)


def _regional(kind: str, p, g, s: LossSchedule) -> Tensor:
    if kind == "BCE":
        return bce_loss(p, g, s.epsilon)
    if kind == "DSC":
        return dice_loss(p, g, s.epsilon)
    if kind == "JSC":
        return jaccard_loss(p, g, s.epsilon)
    if kind == "FT":
        return focal_tversky_loss(p, g, s)
    raise InvalidConfig(kind)


_PAIRS = {"L1": "JSC", "L2": "FT", "L3": "DSC"}
_FUSED = {"L4": "L1", "L5": "L2", "L6": "L3"}


def fused_loss(p, g, phi, schedule: LossSchedule) -> Tensor:
    """BCE plus a regional term (L1-L3), blended with the boundary loss for L4-L6."""
    kind = schedule.kind
    if kind in _PAIRS:
        return tc.add(bce_loss(p, g, schedule.epsilon), _regional(_PAIRS[kind], p, g, schedule))
    if kind in _FUSED:
        if phi is None:
            raise MissingLevelSet(f"{kind} needs a level-set map")
        a = schedule.fusion_alpha
        base = fused_loss(p, g, None, replace(schedule, kind=_FUSED[kind]))
        if a == 1.0:
            return base
        lb = boundary_loss(p, phi, schedule.boundary_reduction)
        return tc.add(tc.mul(base, a), tc.mul(lb, 1.0 - a))
    raise InvalidConfig(f"{kind} is not a fused loss")


def compute_loss(p, g, phi, schedule: LossSchedule) -> Tensor:
    """Dispatch on ``schedule.kind`` over every supported loss."""
    kind = schedule.kind
    if kind == "B":
        if phi is None:
            raise MissingLevelSet("boundary loss needs a level-set map")
        return boundary_loss(p, phi, schedule.boundary_reduction)
    if kind in ("BCE", "DSC", "JSC", "FT"):
        return _regional(kind, p, g, schedule)
    return fused_loss(p, g, phi, schedule)


def fusion_alpha_at(completed_epochs: int, delta: float = 0.005, alpha_min: float = 0.01) -> float:
    """``clamp(1 - delta * e, alpha_min, 1)`` evaluated in exact decimal arithmetic."""
    if completed_epochs < 0:
        raise ValueError("epoch count must be nonnegative")
    d = Fraction(str(delta))
    lo = Fraction(str(alpha_min))
    a = Fraction(1) - d * completed_epochs
    return float(min(Fraction(1), max(lo, a)))


def update_fusion_alpha(schedule: LossSchedule, completed_epoch: int) -> LossSchedule:
    return replace(schedule, fusion_alpha=fusion_alpha_at(
        completed_epoch, schedule.delta_alpha, schedule.alpha_min))
