"""numba kernels for tile-based forward blending and its adjoint.

Per-pixel work runs in parallel over tiles/pixels; every per-Gaussian
reduction walks a counting-sorted entry list so results do not depend on
thread scheduling.
"""

import math

import numpy as np
from numba import njit, prange

TILE = 16
T_MIN = 1e-4


@njit(cache=True)
def _bin_tiles(means2d, radii, order, W, H, tile):
    ntx = (W + tile - 1) // tile
    nty = (H + tile - 1) // tile
    counts = np.zeros(ntx * nty + 1, dtype=np.int64)
    rects = np.empty((order.shape[0], 4), dtype=np.int64)
    for k in range(order.shape[0]):
        s = order[k]
        r = radii[s]
        x0 = max(0, int(math.floor((means2d[s, 0] - r) / tile)))
        x1 = min(ntx - 1, int(math.floor((means2d[s, 0] + r) / tile)))
        y0 = max(0, int(math.floor((means2d[s, 1] - r) / tile)))
        y1 = min(nty - 1, int(math.floor((means2d[s, 1] + r) / tile)))
        rects[k, 0] = x0
        rects[k, 1] = x1
        rects[k, 2] = y0
        rects[k, 3] = y1
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                counts[ty * ntx + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    lists = np.empty(offsets[-1], dtype=np.int64)
    for k in range(order.shape[0]):
        for ty in range(rects[k, 2], rects[k, 3] + 1):
            for tx in range(rects[k, 0], rects[k, 1] + 1):
                t = ty * ntx + tx
                lists[fill[t]] = order[k]
                fill[t] += 1
    return offsets, lists, ntx, nty


@njit(cache=True, parallel=True)
def _count_pass(means2d, conics, alphas, va, vp, radii, t_offsets, t_lists, ntx, nty,
                W, H, tile, use_fif, floor):
    counts = np.zeros(W * H, dtype=np.int64)
    for t in prange(ntx * nty):
        tx = t % ntx
        ty = t // ntx
        for py in range(ty * tile, min(H, (ty + 1) * tile)):
            for px in range(tx * tile, min(W, (tx + 1) * tile)):
                T = 1.0
                n = 0
                for j in range(t_offsets[t], t_offsets[t + 1]):
                    s = t_lists[j]
                    dx = px + 0.5 - means2d[s, 0]
                    dy = py + 0.5 - means2d[s, 1]
                    if dx * dx + dy * dy > radii[s] * radii[s]:
                        continue
                    g = math.exp(-0.5 * (conics[s, 0] * dx * dx + 2.0 * conics[s, 1] * dx * dy
                                         + conics[s, 2] * dy * dy))
                    if g < floor:
                        continue
                    gh = g
                    ah = alphas[s]
                    if use_fif:
                        if g < vp[s]:
                            gh = 0.0
                        if ah < va:
                            ah = 0.0
                    n += 1
                    T = T * (1.0 - gh * ah)
                    if T < T_MIN:
                        break
                counts[py * W + px] = n
    return counts


@njit(cache=True, parallel=True)
def _fill_pass(means2d, conics, alphas, va, vp, radii, colors, depths, normals, bg,
               t_offsets, t_lists, ntx, nty, W, H, tile, use_fif, floor, offsets):
    E = offsets[-1]
    ent_splat = np.empty(E, dtype=np.int64)
    ent_pix = np.empty(E, dtype=np.int64)
    ent_g = np.empty(E)
    ent_w = np.empty(E)
    ent_t = np.empty(E)
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    acc = np.zeros((H, W))
    nraw = np.zeros((H, W, 3))
    for t in prange(ntx * nty):
        tx = t % ntx
        ty = t // ntx
        for py in range(ty * tile, min(H, (ty + 1) * tile)):
            for px in range(tx * tile, min(W, (tx + 1) * tile)):
                p = py * W + px
                e = offsets[p]
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                d = 0.0
                n0 = 0.0
                n1 = 0.0
                n2 = 0.0
                for j in range(t_offsets[t], t_offsets[t + 1]):
                    s = t_lists[j]
                    dx = px + 0.5 - means2d[s, 0]
                    dy = py + 0.5 - means2d[s, 1]
                    if dx * dx + dy * dy > radii[s] * radii[s]:
                        continue
                    g = math.exp(-0.5 * (conics[s, 0] * dx * dx + 2.0 * conics[s, 1] * dx * dy
                                         + conics[s, 2] * dy * dy))
                    if g < floor:
                        continue
                    gh = g
                    ah = alphas[s]
                    if use_fif:
                        if g < vp[s]:
                            gh = 0.0
                        if ah < va:
                            ah = 0.0
                    w = gh * ah
                    ent_splat[e] = s
                    ent_pix[e] = p
                    ent_g[e] = g
                    ent_w[e] = w
                    ent_t[e] = T
                    e += 1
                    wt = T * w
                    c0 += wt * colors[s, 0]
                    c1 += wt * colors[s, 1]
                    c2 += wt * colors[s, 2]
                    d += wt * depths[s]
                    n0 += wt * normals[s, 0]
                    n1 += wt * normals[s, 1]
                    n2 += wt * normals[s, 2]
                    T = T * (1.0 - w)
                    if T < T_MIN:
                        break
                color[py, px, 0] = c0 + T * bg[0]
                color[py, px, 1] = c1 + T * bg[1]
                color[py, px, 2] = c2 + T * bg[2]
                depth[py, px] = d
                acc[py, px] = 1.0 - T
                nraw[py, px, 0] = n0
                nraw[py, px, 1] = n1
                nraw[py, px, 2] = n2
    return color, depth, acc, nraw, ent_splat, ent_pix, ent_g, ent_w, ent_t


def forward(means2d, conics, alphas, va, vp, radii, order, colors, depths, normals, bg,
            W, H, use_fif, floor, tile=TILE):
    t_offsets, t_lists, ntx, nty = _bin_tiles(means2d, radii, order, W, H, tile)
    counts = _count_pass(means2d, conics, alphas, va, vp, radii, t_offsets, t_lists, ntx, nty,
                         W, H, tile, use_fif, floor)
    offsets = np.zeros(W * H + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    out = _fill_pass(means2d, conics, alphas, va, vp, radii, colors, depths, normals, bg,
                     t_offsets, t_lists, ntx, nty, W, H, tile, use_fif, floor, offsets)
    return (offsets,) + out


@njit(cache=True, parallel=True)
def _weight_grads(offsets, ent_splat, ent_w, ent_t, colors, depths, normals, bg,
                  g_color, g_depth, g_acc, g_nraw, g_went):
    """dL/d(omega) for every entry via the back-to-front 'behind' recursion."""
    P = offsets.shape[0] - 1
    d_w = np.zeros(ent_w.shape[0])
    for p in prange(P):
        gc0 = g_color[p, 0]
        gc1 = g_color[p, 1]
        gc2 = g_color[p, 2]
        behind = gc0 * bg[0] + gc1 * bg[1] + gc2 * bg[2]
        for e in range(offsets[p + 1] - 1, offsets[p] - 1, -1):
            s = ent_splat[e]
            feat = (gc0 * colors[s, 0] + gc1 * colors[s, 1] + gc2 * colors[s, 2]
                    + g_depth[p] * depths[s] + g_acc[p]
                    + g_nraw[p, 0] * normals[s, 0] + g_nraw[p, 1] * normals[s, 1]
                    + g_nraw[p, 2] * normals[s, 2] + g_went[e])
            w = ent_w[e]
            d_w[e] = ent_t[e] * (feat - behind)
            behind = w * feat + (1.0 - w) * behind
    return d_w


@njit(cache=True)
def _group_by_splat(ent_splat, N):
    counts = np.zeros(N + 1, dtype=np.int64)
    for e in range(ent_splat.shape[0]):
        counts[ent_splat[e] + 1] += 1
    starts = np.cumsum(counts)
    fill = starts[:-1].copy()
    perm = np.empty(ent_splat.shape[0], dtype=np.int64)
    for e in range(ent_splat.shape[0]):
        s = ent_splat[e]
        perm[fill[s]] = e
        fill[s] += 1
    return starts, perm


@njit(cache=True, parallel=True)
def _splat_grads(starts, perm, ent_pix, ent_g, ent_w, ent_t, d_w, means2d, conics, alphas,
                 va, vp, W, g_color, g_depth, g_nraw, g_tent, use_fif, k, lam):
    N = starts.shape[0] - 1
    g_mean2d = np.zeros((N, 2))
    g_conic = np.zeros((N, 3))
    g_col = np.zeros((N, 3))
    g_dep = np.zeros(N)
    g_nrm = np.zeros((N, 3))
    g_alpha_hat = np.zeros(N)
    g_vp = np.zeros(N)
    for s in prange(N):
        a = alphas[s]
        ah = a
        if use_fif and a < va:
            ah = 0.0
        for j in range(starts[s], starts[s + 1]):
            e = perm[j]
            p = ent_pix[e]
            px = p % W
            py = p // W
            dx = px + 0.5 - means2d[s, 0]
            dy = py + 0.5 - means2d[s, 1]
            g = ent_g[e]
            gh = g
            if use_fif and g < vp[s]:
                gh = 0.0
            dwe = d_w[e]
            d_gh = ah * dwe
            g_alpha_hat[s] += gh * dwe
            if use_fif:
                g_vp[s] += d_gh * lam * g * max(0.0, (k - abs(g - vp[s])) / (k * k))
                d_g = d_gh if g >= vp[s] else 0.0
            else:
                d_g = d_gh
            dpow = g * d_g
            g_conic[s, 0] += -0.5 * dx * dx * dpow
            g_conic[s, 1] += -dx * dy * dpow
            g_conic[s, 2] += -0.5 * dy * dy * dpow
            g_mean2d[s, 0] += dpow * (conics[s, 0] * dx + conics[s, 1] * dy)
            g_mean2d[s, 1] += dpow * (conics[s, 1] * dx + conics[s, 2] * dy)
            wt = ent_t[e] * ent_w[e]
            g_col[s, 0] += wt * g_color[p, 0]
            g_col[s, 1] += wt * g_color[p, 1]
            g_col[s, 2] += wt * g_color[p, 2]
            g_dep[s] += wt * g_depth[p] + g_tent[e]
            g_nrm[s, 0] += wt * g_nraw[p, 0]
            g_nrm[s, 1] += wt * g_nraw[p, 1]
            g_nrm[s, 2] += wt * g_nraw[p, 2]
    return g_mean2d, g_conic, g_col, g_dep, g_nrm, g_alpha_hat, g_vp


def backward(offsets, ent_splat, ent_pix, ent_g, ent_w, ent_t, means2d, conics, alphas, va, vp,
             colors, depths, normals, bg, W, g_color, g_depth, g_acc, g_nraw, g_went, g_tent,
             use_fif, k, lam):
    d_w = _weight_grads(offsets, ent_splat, ent_w, ent_t, colors, depths, normals, bg,
                        g_color, g_depth, g_acc, g_nraw, g_went)
    starts, perm = _group_by_splat(ent_splat, means2d.shape[0])
    return _splat_grads(starts, perm, ent_pix, ent_g, ent_w, ent_t, d_w, means2d, conics,
                        alphas, va, vp, W, g_color, g_depth, g_nraw, g_tent, use_fif, k, lam)
