"""Exact Euclidean distance transform and signed level-set maps."""
from __future__ import annotations

import hashlib
import logging
import threading
from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateMask, ShapeMismatch

log = logging.getLogger(__name__)

# larger than any squared distance on images below ~10^9 pixels per side
_INF = np.int64(1) << 62


def _lower_envelope_1d(f: np.ndarray) -> np.ndarray:
    """Squared-distance transform of one line: ``min_q (p - q)^2 + f[q]``.

    Lower envelope of parabolas; exact for integer input because every
    breakpoint comparison is done on cross-multiplied integers.
    """
    n = f.shape[0]
    out = np.empty(n, dtype=np.int64)
    finite = np.flatnonzero(f < _INF)
    if finite.size == 0:
        out[:] = _INF
        return out
    v = np.empty(finite.size, dtype=np.int64)
    k = -1
    for q in finite:
        fq = int(f[q]) + q * q
        while k >= 0:
            p = int(v[k])
            fp = int(f[p]) + p * p
            if k == 0:
                break
            r = int(v[k - 1])
            fr = int(f[r]) + r * r
            # intersection of parabolas (r, p) is at or beyond that of (p, q): drop p
            if (fp - fr) * (q - p) >= (fq - fp) * (p - r):
                k -= 1
            else:
                break
        k += 1
        v[k] = q
    hull = v[: k + 1]
    j = 0
    m = hull.size
    for p in range(n):
        while j + 1 < m:
            a, b = int(hull[j]), int(hull[j + 1])
            da = (p - a) * (p - a) + int(f[a])
            db = (p - b) * (p - b) + int(f[b])
            if db <= da:
                j += 1
            else:
                break
        a = int(hull[j])
        out[p] = (p - a) * (p - a) + int(f[a])
    return out


def squared_edt(mask: np.ndarray) -> np.ndarray:
    """Integer squared distance from every pixel to the nearest foreground pixel.

    Two separable passes: columns first, then rows. Pixels with no foreground
    anywhere in the image get the sentinel ``2**62``.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeMismatch(f"edt expects a 2-D mask, got {mask.shape}")
    fg = mask.astype(bool)
    h, w = fg.shape
    cols = np.where(fg, 0, _INF).astype(np.int64)
    for x in range(w):
        cols[:, x] = _lower_envelope_1d(cols[:, x])
    out = np.empty_like(cols)
    for y in range(h):
        out[y] = _lower_envelope_1d(cols[y])
    return out


def edt(mask: np.ndarray) -> np.ndarray:
    """Euclidean distance to the nearest foreground pixel; ``inf`` for an empty mask."""
    sq = squared_edt(mask)
    out = np.sqrt(sq.astype(np.float64))
    out[sq >= _INF] = np.inf
    return out


def mask_digest(mask: np.ndarray) -> str:
    m = np.ascontiguousarray(np.asarray(mask).astype(np.uint8))
    h = hashlib.sha256()
    h.update(np.asarray(m.shape, dtype=np.int64).tobytes())
    h.update(m.tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class LevelSetMap:
    phi: np.ndarray
    source_mask_digest: str

    @property
    def shape(self):
        return self.phi.shape


def level_set(mask: np.ndarray, strict: bool = False) -> LevelSetMap:
    """Signed distance map: negative inside the mask, positive outside.

    Foreground pixels carry minus the distance to the nearest background
    pixel; background pixels carry the distance to the nearest foreground
    pixel. All-foreground or all-background masks give ``phi == 0`` with a
    warning, or raise ``DegenerateMask`` when ``strict``.
    """
    m = np.asarray(mask).astype(bool)
    digest = mask_digest(m)
    if m.all() or not m.any():
        if strict:
            raise DegenerateMask("mask has no boundary")
        log.warning("degenerate mask (no boundary); level set set to zero")
        return LevelSetMap(np.zeros(m.shape), digest)
    phi = np.where(m, -edt(~m), edt(m))
    return LevelSetMap(phi, digest)


class LevelSetCache:
    """Level-set maps keyed by mask digest, shared between readers."""

    def __init__(self):
        self._maps: dict[str, LevelSetMap] = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._maps)

    def get(self, mask: np.ndarray) -> LevelSetMap:
        key = mask_digest(np.asarray(mask).astype(bool))
        found = self._maps.get(key)
        if found is not None:
            return found
        made = level_set(mask)
        with self._lock:
            return self._maps.setdefault(key, made)
