"""Compiled loops for the depthwise 3x3 convolution (the hot spot of training)."""

import numba


@numba.njit(cache=True)
def depthwise3x3_forward(xp, w, out):
    """out[b, c] += sum_ij xp[b, c, h+i, w+j] * w[c, i, j]; xp is zero-padded by 1."""
    nb, nc, nh, nw = out.shape
    for b in range(nb):
        for c in range(nc):
            for i in range(3):
                for j in range(3):
                    wij = w[c, i, j]
                    for h in range(nh):
                        for x in range(nw):
                            out[b, c, h, x] += xp[b, c, h + i, x + j] * wij


@numba.njit(cache=True)
def depthwise3x3_grad_input(g, w, gxp):
    nb, nc, nh, nw = g.shape
    for b in range(nb):
        for c in range(nc):
            for i in range(3):
                for j in range(3):
                    wij = w[c, i, j]
                    for h in range(nh):
                        for x in range(nw):
                            gxp[b, c, h + i, x + j] += g[b, c, h, x] * wij


@numba.njit(cache=True, fastmath=True)
def depthwise3x3_grad_weight(xp, g, gw):
    nb, nc, nh, nw = g.shape
    for c in range(nc):
        for i in range(3):
            for j in range(3):
                acc = 0.0
                for b in range(nb):
                    for h in range(nh):
                        row = 0.0
                        for x in range(nw):
                            row += g[b, c, h, x] * xp[b, c, h + i, x + j]
                        acc += row
                gw[c, i, j] = acc
