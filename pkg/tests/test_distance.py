import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tafmnet.distance import LevelSetCache, edt, level_set, mask_digest, squared_edt
from tafmnet.exceptions import DegenerateMask, ShapeMismatch


def brute_force_sq(mask):
    """All-pairs minimum squared distance to a foreground pixel (None when empty)."""
    fg = np.argwhere(mask)
    h, w = mask.shape
    if len(fg) == 0:
        return None
    yy, xx = np.mgrid[0:h, 0:w]
    d = (yy[..., None] - fg[:, 0]) ** 2 + (xx[..., None] - fg[:, 1]) ** 2
    return d.min(axis=-1)


def test_single_centre_pixel():
    m = np.zeros((3, 3), dtype=np.uint8)
    m[1, 1] = 1
    r2 = math.sqrt(2)
    np.testing.assert_array_equal(edt(m), [[r2, 1, r2], [1, 0, 1], [r2, 1, r2]])


def test_all_foreground_is_zero():
    assert not edt(np.ones((4, 5))).any()


def test_empty_mask_is_infinite():
    d = edt(np.zeros((3, 4)))
    assert np.isinf(d).all()


def test_rejects_non_2d():
    with pytest.raises(ShapeMismatch):
        edt(np.zeros((2, 2, 2)))


@pytest.mark.parametrize("seed", range(20))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 33, size=2)
    mask = rng.random((h, w)) < rng.uniform(0.01, 0.5)
    mask.flat[rng.integers(mask.size)] = True
    np.testing.assert_array_equal(squared_edt(mask), brute_force_sq(mask))


@settings(max_examples=60, deadline=None)
@given(arrays(np.bool_, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_property_matches_brute_force(mask):
    oracle = brute_force_sq(mask)
    sq = squared_edt(mask)
    if oracle is None:
        assert (sq >= 1 << 62).all()
    else:
        np.testing.assert_array_equal(sq, oracle)


def test_checkerboard_level_set():
    m = np.array([[1, 0], [0, 1]])
    phi = level_set(m).phi
    np.testing.assert_array_equal(phi, [[-1, 1], [1, -1]])


@settings(max_examples=40, deadline=None)
@given(arrays(np.bool_, st.tuples(st.integers(2, 10), st.integers(2, 10))))
def test_level_set_signs_and_symmetry(mask):
    if mask.all() or not mask.any():
        return
    phi = level_set(mask).phi
    assert (phi[mask] < 0).all()
    assert (phi[~mask] > 0).all()
    np.testing.assert_array_equal(level_set(~mask).phi, -phi)


def test_degenerate_mask_warns_and_zeros(caplog):
    with caplog.at_level(logging.WARNING):
        ls = level_set(np.ones((4, 4)))
    assert not ls.phi.any()
    assert "degenerate" in caplog.text
    with pytest.raises(DegenerateMask):
        level_set(np.zeros((4, 4)), strict=True)


def test_level_set_digest_binds_mask():
    m = np.zeros((5, 5), dtype=bool)
    m[1:3, 1:3] = True
    assert level_set(m).source_mask_digest == mask_digest(m)
    m2 = m.copy()
    m2[4, 4] = True
    assert mask_digest(m2) != mask_digest(m)


def test_cache_reuses_maps():
    cache = LevelSetCache()
    m = np.zeros((6, 6), dtype=np.uint8)
    m[2:4, 2:5] = 1
    a = cache.get(m)
    b = cache.get(m.astype(bool))
    assert a is b
    assert len(cache) == 1
