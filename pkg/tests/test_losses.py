import math

import numpy as np
import pytest

from tafmnet import tensorcore as tc
from tafmnet.distance import level_set
from tafmnet.exceptions import InvalidConfig, InvalidGamma, MissingLevelSet, ShapeMismatch
from tafmnet.losses import (
    LossSchedule,
    bce_loss,
    boundary_loss,
    compute_loss,
    dice_loss,
    focal_tversky_loss,
    fused_loss,
    fusion_alpha_at,
    jaccard_loss,
    update_fusion_alpha,
)

EPS = 1e-5


def val(t):
    return float(t.data)


def test_bce_examples():
    assert val(bce_loss(np.array([0.9, 0.2]), np.array([1.0, 0.0]))) == pytest.approx(
        -(math.log(0.9) + math.log(0.8)) / 2, abs=1e-12)
    assert val(bce_loss(np.full(7, 0.5), np.array([0, 1, 0, 1, 1, 0, 1.0]))) == pytest.approx(math.log(2))
    g = np.array([0.0, 1.0, 1.0])
    assert 0 <= val(bce_loss(g, g)) < 2e-5


def test_dice_and_jaccard_examples():
    p = np.array([1.0, 1, 0, 0])
    g = np.array([1.0, 0, 1, 0])
    assert val(dice_loss(p, g)) == pytest.approx(1 - (2 + EPS) / (4 + EPS), abs=1e-15)
    assert val(jaccard_loss(p, g)) == pytest.approx(1 - (1 + EPS) / (3 + EPS), abs=1e-15)
    disjoint = np.array([0.0, 0, 1, 1])
    assert val(dice_loss(p, disjoint)) == pytest.approx(1 - EPS / (4 + EPS))


def test_perfect_overlap_near_zero_on_16x16():
    rng = np.random.default_rng(0)
    g = (rng.random((16, 16)) < 0.3).astype(float)
    for f in (dice_loss, jaccard_loss):
        assert 0 <= val(f(g, g)) < 1e-4
    assert val(focal_tversky_loss(g, g)) < 1e-4
    assert val(fused_loss(g, g, None, LossSchedule(kind="L3"))) < 1e-4


def test_focal_tversky_worked_example():
    loss = val(focal_tversky_loss(np.array([1.0, 0.0]), np.array([1.0, 1.0])))
    assert loss == pytest.approx(1 - (1 + EPS) / (1.3 + EPS), abs=1e-15)
    assert abs(loss - 0.2308) < 1e-4


def test_focal_tversky_gamma_checks():
    with pytest.raises(InvalidGamma):
        focal_tversky_loss(np.ones(3), np.ones(3), LossSchedule(kind="FT", ft_gamma=0.0))
    p, g = np.array([0.7, 0.2, 0.9]), np.array([1.0, 0.0, 1.0])
    base = val(focal_tversky_loss(p, g))
    powered = val(focal_tversky_loss(p, g, LossSchedule(kind="FT", ft_gamma=2.0)))
    assert powered == pytest.approx(base ** 0.5)


@pytest.mark.parametrize("seed", range(10))
def test_soft_identities(seed):
    rng = np.random.default_rng(seed)
    p = rng.random((8, 8))
    g = rng.random((8, 8))
    d = 1 - val(dice_loss(p, g, 1e-12))
    j = 1 - val(jaccard_loss(p, g, 1e-12))
    assert abs(d - 2 * j / (1 + j)) < 1e-9
    # the two smoothing terms enter differently, so the identity needs a tiny epsilon
    half = LossSchedule(kind="FT", tversky_alpha=0.5, tversky_beta=0.5, epsilon=1e-12)
    assert abs(val(focal_tversky_loss(p, g, half)) - val(dice_loss(p, g, 1e-12))) < 1e-9


def test_regional_losses_in_range():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = rng.random(50)
        g = (rng.random(50) < 0.4).astype(float)
        for f in (dice_loss, jaccard_loss, focal_tversky_loss):
            assert 0 <= val(f(p, g)) <= 1 + 1e-4
        assert val(bce_loss(p, g)) >= 0


def test_monotone_in_foreground_probability():
    rng = np.random.default_rng(4)
    p = rng.uniform(0.1, 0.9, 30)
    g = (rng.random(30) < 0.5).astype(float)
    g[0] = 1.0
    bumped = p.copy()
    bumped[0] += 1e-4
    for f in (dice_loss, jaccard_loss, focal_tversky_loss):
        assert val(f(bumped, g)) <= val(f(p, g))


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        dice_loss(np.ones(3), np.ones(4))


def test_boundary_loss():
    m = np.zeros((6, 6), dtype=bool)
    m[1:5, 1:5] = True
    ls = level_set(m)
    assert val(boundary_loss(np.zeros((6, 6)), ls)) == 0.0
    inside = val(boundary_loss(m.astype(float), ls))
    assert inside == pytest.approx(ls.phi[m].sum() / 36)
    assert inside < 0
    p = tc.Tensor(np.full((6, 6), 0.3), requires_grad=True)
    tc.backward(boundary_loss(p, ls))
    np.testing.assert_allclose(p.grad, ls.phi / 36, rtol=0, atol=1e-15)
    assert val(boundary_loss(m.astype(float), ls, "sum")) == pytest.approx(ls.phi[m].sum())


def test_fused_relations():
    rng = np.random.default_rng(5)
    m = np.zeros((8, 8), dtype=bool)
    m[2:6, 3:7] = True
    g = m.astype(float)
    phi = level_set(m).phi
    p = rng.uniform(0.05, 0.95, (8, 8))
    l1 = val(compute_loss(p, g, None, LossSchedule(kind="L1")))
    assert l1 == pytest.approx(val(bce_loss(p, g)) + val(jaccard_loss(p, g)))
    assert val(compute_loss(p, g, phi, LossSchedule(kind="L4"))) == l1
    lb = val(boundary_loss(p, phi))
    for kind, base in (("L4", "L1"), ("L5", "L2"), ("L6", "L3")):
        mixed = val(compute_loss(p, g, phi, LossSchedule(kind=kind, fusion_alpha=0.25)))
        b = val(compute_loss(p, g, None, LossSchedule(kind=base)))
        assert mixed == pytest.approx(0.25 * b + 0.75 * lb, abs=1e-12)
    with pytest.raises(MissingLevelSet):
        compute_loss(p, g, None, LossSchedule(kind="L5"))
    with pytest.raises(MissingLevelSet):
        compute_loss(p, g, None, LossSchedule(kind="B"))


def test_schedule_validation():
    with pytest.raises(InvalidConfig):
        LossSchedule(kind="nope")
    with pytest.raises(InvalidConfig):
        LossSchedule(fusion_alpha=0.001)
    assert LossSchedule(kind="l4").kind == "L4"
    assert not LossSchedule(kind="BCE").needs_level_set


def test_fusion_alpha_schedule():
    assert fusion_alpha_at(0) == 1.0
    assert fusion_alpha_at(10) == 0.95
    assert fusion_alpha_at(197) == 0.015
    assert fusion_alpha_at(198) == 0.01
    assert fusion_alpha_at(500) == 0.01
    values = [fusion_alpha_at(e) for e in range(400)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    s = update_fusion_alpha(LossSchedule(), 1)
    assert s.fusion_alpha == 0.995
    with pytest.raises(ValueError):
        fusion_alpha_at(-1)
