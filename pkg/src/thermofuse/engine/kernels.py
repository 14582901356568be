"""Compiled convolution loops (stride 1, input already zero-padded).

Summation order is fixed by the loop nest, so results are reproducible
run to run and independent of array sizes elsewhere in the batch.
"""

import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def conv_forward(xp, w, out):
    """out[b, o] += sum_{c,i,j} w[o, c, i, j] * xp[b, c, y + i, x + j]."""
    B, O, H, W = out.shape
    C = xp.shape[1]
    k = w.shape[2]
    acc = np.empty(W, out.dtype)
    for b in range(B):
        for o in range(O):
            for y in range(H):
                acc[:] = 0.0
                for c in range(C):
                    for i in range(k):
                        for j in range(k):
                            wv = w[o, c, i, j]
                            for x in range(W):
                                acc[x] += wv * xp[b, c, y + i, x + j]
                for x in range(W):
                    out[b, o, y, x] += acc[x]


@numba.njit(cache=True, nogil=True)
def conv_backward_weight(g, xp, dw):
    """dw[o, c, i, j] += sum_{b,y,x} g[b, o, y, x] * xp[b, c, y + i, x + j]."""
    B, O, H, W = g.shape
    C = xp.shape[1]
    k = dw.shape[2]
    row = np.empty(W, dw.dtype)
    for o in range(O):
        for c in range(C):
            for i in range(k):
                for j in range(k):
                    row[:] = 0.0
                    for b in range(B):
                        for y in range(H):
                            for x in range(W):
                                row[x] += g[b, o, y, x] * xp[b, c, y + i, x + j]
                    acc = 0.0
                    for x in range(W):
                        acc += row[x]
                    dw[o, c, i, j] += acc


def warmup():
    """Compile every kernel once (cheap when the on-disk cache is warm)."""
    x = np.zeros((1, 1, 3, 3))
    w = np.zeros((1, 1, 3, 3))
    g = np.zeros((1, 1, 1, 1))
    conv_forward(x, w, np.zeros((1, 1, 1, 1)))
    conv_backward_weight(g, x, np.zeros_like(w))
