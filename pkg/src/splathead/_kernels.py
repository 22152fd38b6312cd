"""Numba kernels for the tiled splatting rasterizer.

Tiles own disjoint pixel ranges, so kernels may run concurrently over tile
ranges (nogil) and still produce bitwise-identical images for any thread
count. The backward kernel writes per-(tile, gaussian) gradient slabs that the
caller reduces in a fixed order.
"""

import numpy as np
from numba import njit

TILE = 16
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.999
T_CUTOFF = 1e-4


@njit(cache=True, nogil=True)
def forward_tiles(tile_lo, tile_hi, tiles_x, width, height,
                  mean2d, conic, rgb, opacity,
                  tile_gauss, tile_offsets, out_rgb, out_T):
    for t in range(tile_lo, tile_hi):
        tx = t % tiles_x
        ty = t // tiles_x
        x0 = tx * TILE
        y0 = ty * TILE
        x1 = min(x0 + TILE, width)
        y1 = min(y0 + TILE, height)
        g0 = tile_offsets[t]
        g1 = tile_offsets[t + 1]
        for py in range(y0, y1):
            for px in range(x0, x1):
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                for kk in range(g0, g1):
                    gi = tile_gauss[kk]
                    dx = px - mean2d[gi, 0]
                    dy = py - mean2d[gi, 1]
                    p = -0.5 * (conic[gi, 0] * dx * dx + conic[gi, 2] * dy * dy) \
                        - conic[gi, 1] * dx * dy
                    if p < -15.0:
                        continue
                    alpha = opacity[gi] * np.exp(p)
                    if alpha < ALPHA_MIN:
                        continue
                    if alpha > ALPHA_MAX:
                        alpha = ALPHA_MAX
                    w = T * alpha
                    r += w * rgb[gi, 0]
                    g += w * rgb[gi, 1]
                    b += w * rgb[gi, 2]
                    T *= 1.0 - alpha
                    if T < T_CUTOFF:
                        break
                out_rgb[py, px, 0] = r
                out_rgb[py, px, 1] = g
                out_rgb[py, px, 2] = b
                out_T[py, px] = T


@njit(cache=True, nogil=True)
def backward_tiles(tile_lo, tile_hi, tiles_x, width, height,
                   mean2d, conic, rgb, opacity, background,
                   tile_gauss, tile_offsets, d_img, d_alpha_img,
                   pair_d_mean, pair_d_conic, pair_d_rgb, pair_d_op):
    for t in range(tile_lo, tile_hi):
        tx = t % tiles_x
        ty = t // tiles_x
        x0 = tx * TILE
        y0 = ty * TILE
        x1 = min(x0 + TILE, width)
        y1 = min(y0 + TILE, height)
        g0 = tile_offsets[t]
        g1 = tile_offsets[t + 1]
        n = g1 - g0
        if n == 0:
            continue
        alpha_buf = np.empty(n)
        tbef_buf = np.empty(n)
        clamped = np.empty(n, dtype=np.uint8)
        for py in range(y0, y1):
            for px in range(x0, x1):
                gr = d_img[py, px, 0]
                gg_ = d_img[py, px, 1]
                gb = d_img[py, px, 2]
                ga = d_alpha_img[py, px]
                # forward replay for this pixel
                T = 1.0
                m = 0
                for kk in range(g0, g1):
                    gi = tile_gauss[kk]
                    dx = px - mean2d[gi, 0]
                    dy = py - mean2d[gi, 1]
                    p = -0.5 * (conic[gi, 0] * dx * dx + conic[gi, 2] * dy * dy) \
                        - conic[gi, 1] * dx * dy
                    alpha = 0.0
                    cl = np.uint8(0)
                    if p >= -15.0:
                        alpha = opacity[gi] * np.exp(p)
                        if alpha < ALPHA_MIN:
                            alpha = 0.0
                        elif alpha > ALPHA_MAX:
                            alpha = ALPHA_MAX
                            cl = np.uint8(1)
                    alpha_buf[m] = alpha
                    tbef_buf[m] = T
                    clamped[m] = cl
                    m += 1
                    T *= 1.0 - alpha
                    if T < T_CUTOFF:
                        break
                T_fin = T
                # reverse sweep: S = suffix contribution (incl. background)
                Sr = T_fin * background[0]
                Sg = T_fin * background[1]
                Sb = T_fin * background[2]
                for j in range(m - 1, -1, -1):
                    alpha = alpha_buf[j]
                    if alpha == 0.0:
                        continue
                    kk = g0 + j
                    gi = tile_gauss[kk]
                    Tb = tbef_buf[j]
                    w = Tb * alpha
                    # color gradient
                    pair_d_rgb[kk, 0] += w * gr
                    pair_d_rgb[kk, 1] += w * gg_
                    pair_d_rgb[kk, 2] += w * gb
                    # alpha gradient through the compositing chain
                    om = 1.0 - alpha
                    d_alpha = (gr * (Tb * rgb[gi, 0] - Sr / om)
                               + gg_ * (Tb * rgb[gi, 1] - Sg / om)
                               + gb * (Tb * rgb[gi, 2] - Sb / om))
                    d_alpha += ga * T_fin / om
                    Sr += w * rgb[gi, 0]
                    Sg += w * rgb[gi, 1]
                    Sb += w * rgb[gi, 2]
                    if clamped[j]:
                        continue
                    dx = px - mean2d[gi, 0]
                    dy = py - mean2d[gi, 1]
                    pair_d_op[kk] += d_alpha * alpha / opacity[gi]
                    d_p = d_alpha * alpha
                    # p = -1/2 (a dx^2 + 2 b dx dy + c dy^2)
                    pair_d_conic[kk, 0] += -0.5 * dx * dx * d_p
                    pair_d_conic[kk, 1] += -dx * dy * d_p
                    pair_d_conic[kk, 2] += -0.5 * dy * dy * d_p
                    pair_d_mean[kk, 0] += d_p * (conic[gi, 0] * dx + conic[gi, 1] * dy)
                    pair_d_mean[kk, 1] += d_p * (conic[gi, 1] * dx + conic[gi, 2] * dy)
