"""Numba tile kernels for splat blending and its reverse pass.

Splats arrive packed in front-to-back order, one row each:
``mx, my, conic_a, conic_b, conic_c, opacity, q_cut, r, g, b, depth``.
``q_cut`` is a conservative bound: any pixel with a larger quadratic form is
certainly below the minimum alpha, so the exponential can be skipped. Tile
lists (CSR via ``tile_offsets``) hold row indices into the packed array.
"""

import math

import numpy as np
from numba import njit, prange

MX, MY, CA, CB, CC, OP, QCUT, R, G, B, DEPTH = range(11)
PACKED_WIDTH = 11


@njit(cache=True)
def bin_splats(packed_xy, extent, height, width, tile):
    """Assign each packed splat to the tiles its axis-aligned extent touches."""
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    n_tiles = tiles_x * tiles_y
    n = packed_xy.shape[0]
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    rects = np.empty((n, 4), dtype=np.int64)
    for k in range(n):
        mx = packed_xy[k, 0]
        my = packed_xy[k, 1]
        x0 = max(int(math.floor((mx - extent[k, 0]) / tile)), 0)
        x1 = min(int(math.floor((mx + extent[k, 0]) / tile)), tiles_x - 1)
        y0 = max(int(math.floor((my - extent[k, 1]) / tile)), 0)
        y1 = min(int(math.floor((my + extent[k, 1]) / tile)), tiles_y - 1)
        rects[k, 0] = x0
        rects[k, 1] = x1
        rects[k, 2] = y0
        rects[k, 3] = y1
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                counts[ty * tiles_x + tx + 1] += 1
    for t in range(n_tiles):
        counts[t + 1] += counts[t]
    fill = counts[:-1].copy()
    ids = np.empty(counts[n_tiles], dtype=np.int64)
    for k in range(n):
        for ty in range(rects[k, 2], rects[k, 3] + 1):
            for tx in range(rects[k, 0], rects[k, 1] + 1):
                t = ty * tiles_x + tx
                ids[fill[t]] = k
                fill[t] += 1
    return counts, ids


@njit(parallel=True, cache=True)
def forward_tiles(
    tile_offsets, tile_ids, splats, background,
    height, width, tile, alpha_min, alpha_max, t_min,
    out_color, out_depth, out_trans, out_last,
):
    tiles_x = (width + tile - 1) // tile
    n_tiles = tile_offsets.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = tile_offsets[t]
        end = tile_offsets[t + 1]
        for py in range(ty * tile, min(height, (ty + 1) * tile)):
            for px in range(tx * tile, min(width, (tx + 1) * tile)):
                trans = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                d = 0.0
                last = start
                for j in range(start, end):
                    s = splats[tile_ids[j]]
                    dx = px - s[MX]
                    dy = py - s[MY]
                    q = s[CA] * dx * dx + 2.0 * s[CB] * dx * dy + s[CC] * dy * dy
                    if q > s[QCUT]:
                        continue
                    a = s[OP] * math.exp(-0.5 * q)
                    if a < alpha_min:
                        continue
                    if a > alpha_max:
                        a = alpha_max
                    w = a * trans
                    c0 += w * s[R]
                    c1 += w * s[G]
                    c2 += w * s[B]
                    d += w * s[DEPTH]
                    trans *= 1.0 - a
                    last = j + 1
                    if trans < t_min:
                        break
                out_color[py, px, 0] = c0 + trans * background[0]
                out_color[py, px, 1] = c1 + trans * background[1]
                out_color[py, px, 2] = c2 + trans * background[2]
                out_depth[py, px] = d
                out_trans[py, px] = trans
                out_last[py, px] = last


@njit(parallel=True, cache=True)
def backward_tiles(
    tile_offsets, tile_ids, splats, background,
    height, width, tile, alpha_min, alpha_max,
    out_trans, out_last, g_color, g_depth, g_alpha,
    d_mean2d, d_conic, d_colors, d_opacity, d_depth,
):
    """Accumulates into per-chunk buffers (leading axis); chunks partition the tiles.

    Gradient buffers are indexed by packed row.
    """
    tiles_x = (width + tile - 1) // tile
    n_tiles = tile_offsets.shape[0] - 1
    n_chunks = d_mean2d.shape[0]
    for ch in prange(n_chunks):
        t_begin = ch * n_tiles // n_chunks
        t_end = (ch + 1) * n_tiles // n_chunks
        for t in range(t_begin, t_end):
            ty = t // tiles_x
            tx = t - ty * tiles_x
            start = tile_offsets[t]
            for py in range(ty * tile, min(height, (ty + 1) * tile)):
                for px in range(tx * tile, min(width, (tx + 1) * tile)):
                    t_final = out_trans[py, px]
                    trans = t_final
                    s0 = t_final * background[0]
                    s1 = t_final * background[1]
                    s2 = t_final * background[2]
                    sd = 0.0
                    gc0 = g_color[py, px, 0]
                    gc1 = g_color[py, px, 1]
                    gc2 = g_color[py, px, 2]
                    gd = g_depth[py, px]
                    ga = g_alpha[py, px]
                    for j in range(out_last[py, px] - 1, start - 1, -1):
                        g = tile_ids[j]
                        s = splats[g]
                        dx = px - s[MX]
                        dy = py - s[MY]
                        ca = s[CA]
                        cb = s[CB]
                        cc = s[CC]
                        q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                        if q > s[QCUT]:
                            continue
                        gauss = math.exp(-0.5 * q)
                        a = s[OP] * gauss
                        if a < alpha_min:
                            continue
                        clamped = a > alpha_max
                        if clamped:
                            a = alpha_max
                        inv = 1.0 / (1.0 - a)
                        trans = trans * inv
                        w = a * trans
                        d_colors[ch, g, 0] += gc0 * w
                        d_colors[ch, g, 1] += gc1 * w
                        d_colors[ch, g, 2] += gc2 * w
                        d_depth[ch, g] += gd * w
                        dl_da = (
                            gc0 * (s[R] * trans - s0 * inv)
                            + gc1 * (s[G] * trans - s1 * inv)
                            + gc2 * (s[B] * trans - s2 * inv)
                            + gd * (s[DEPTH] * trans - sd * inv)
                            + ga * t_final * inv
                        )
                        s0 += s[R] * w
                        s1 += s[G] * w
                        s2 += s[B] * w
                        sd += s[DEPTH] * w
                        if clamped:
                            continue
                        d_opacity[ch, g] += dl_da * gauss
                        dl_dq = -0.5 * a * dl_da
                        d_conic[ch, g, 0] += dl_dq * dx * dx
                        d_conic[ch, g, 1] += dl_dq * 2.0 * dx * dy
                        d_conic[ch, g, 2] += dl_dq * dy * dy
                        d_mean2d[ch, g, 0] -= dl_dq * 2.0 * (ca * dx + cb * dy)
                        d_mean2d[ch, g, 1] -= dl_dq * 2.0 * (cb * dx + cc * dy)
