"""Compiled inner loops for the depthwise convolution.

Loop order is fixed, so results are bit-reproducible for a given dtype.
When numba is missing the numpy implementations in ``ops`` are used.
"""
from __future__ import annotations

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

HAVE_NUMBA = numba is not None

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def depthwise_forward(xp, k, out):
        n, h, w, c = out.shape
        kh, kw, _ = k.shape
        for b in range(n):
            for y in range(h):
                for x in range(w):
                    for i in range(kh):
                        for j in range(kw):
                            for ch in range(c):
                                out[b, y, x, ch] += xp[b, y + i, x + j, ch] * k[i, j, ch]

    @numba.njit(cache=True)
    def depthwise_backward_input(g, k, gxp):
        n, h, w, c = g.shape
        kh, kw, _ = k.shape
        for b in range(n):
            for y in range(h):
                for x in range(w):
                    for i in range(kh):
                        for j in range(kw):
                            for ch in range(c):
                                gxp[b, y + i, x + j, ch] += g[b, y, x, ch] * k[i, j, ch]

    @numba.njit(cache=True)
    def depthwise_backward_kernel(xp, g, gk):
        n, h, w, c = g.shape
        kh, kw, _ = gk.shape
        for b in range(n):
            for y in range(h):
                for x in range(w):
                    for i in range(kh):
                        for j in range(kw):
                            for ch in range(c):
                                gk[i, j, ch] += g[b, y, x, ch] * xp[b, y + i, x + j, ch]
