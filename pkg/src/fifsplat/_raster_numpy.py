"""Vectorized numpy fallback for the raster kernels.

Same entry layout as the numba path (pixel-major, depth order within a pixel)
but built splat-by-splat and composited on a dense (pixels x layers) array.
"""

import numpy as np

T_MIN = 1e-4


def _entries(means2d, conics, radii, order, W, H, floor):
    pix, rank, gval = [], [], []
    for r, s in enumerate(order):
        rad = radii[s]
        x0 = max(0, int(np.ceil(means2d[s, 0] - rad - 0.5)))
        x1 = min(W - 1, int(np.floor(means2d[s, 0] + rad - 0.5)))
        y0 = max(0, int(np.ceil(means2d[s, 1] - rad - 0.5)))
        y1 = min(H - 1, int(np.floor(means2d[s, 1] + rad - 0.5)))
        if x1 < x0 or y1 < y0:
            continue
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        dx = xs + 0.5 - means2d[s, 0]
        dy = ys + 0.5 - means2d[s, 1]
        g = np.exp(-0.5 * (conics[s, 0] * dx * dx + 2.0 * conics[s, 1] * dx * dy
                           + conics[s, 2] * dy * dy))
        m = (dx * dx + dy * dy <= rad * rad) & (g >= floor)
        pix.append((ys * W + xs)[m])
        rank.append(np.full(m.sum(), r))
        gval.append(g[m])
    if not pix:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    pix = np.concatenate(pix).astype(np.int64)
    rank = np.concatenate(rank).astype(np.int64)
    gval = np.concatenate(gval)
    idx = np.lexsort((rank, pix))
    return pix[idx], np.asarray(order, dtype=np.int64)[rank[idx]], gval[idx]


def _dense_positions(pix, P):
    counts = np.bincount(pix, minlength=P)
    offsets = np.zeros(P + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    pos = np.arange(pix.shape[0]) - offsets[pix]
    return counts, offsets, pos


def forward(means2d, conics, alphas, va, vp, radii, order, colors, depths, normals, bg,
            W, H, use_fif, floor):
    P = W * H
    pix, splat, g = _entries(means2d, conics, radii, order, W, H, floor)
    gh = g.copy()
    ah = alphas[splat].copy()
    if use_fif:
        gh[g < vp[splat]] = 0.0
        ah[ah < va] = 0.0
    w = gh * ah

    counts, _, pos = _dense_positions(pix, P)
    K = int(counts.max()) if counts.size and pix.size else 0
    om = np.zeros((P, max(K, 1)))
    om[pix, pos] = w
    t_after = np.cumprod(1.0 - om, axis=1)
    t_before = np.ones_like(om)
    t_before[:, 1:] = t_after[:, :-1]
    valid = np.arange(om.shape[1])[None, :] < counts[:, None]
    term = (t_after < T_MIN) & valid
    earlier = np.zeros_like(term)
    earlier[:, 1:] = np.cumsum(term, axis=1)[:, :-1] > 0
    keep_dense = valid & ~earlier
    keep = keep_dense[pix, pos]

    pix, splat, g, w = pix[keep], splat[keep], g[keep], w[keep]
    ent_t = t_before[pix, pos[keep]]
    counts = np.bincount(pix, minlength=P)
    offsets = np.zeros(P + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    # final transmittance = t_after at the last kept layer
    last = np.where(counts > 0, counts - 1, 0)
    t_final = np.where(counts > 0, t_after[np.arange(P), last], 1.0)

    wt = ent_t * w
    color = np.stack([np.bincount(pix, wt * colors[splat, c], minlength=P) for c in range(3)], -1)
    color += t_final[:, None] * bg[None, :]
    depth = np.bincount(pix, wt * depths[splat], minlength=P)
    nraw = np.stack([np.bincount(pix, wt * normals[splat, c], minlength=P) for c in range(3)], -1)
    acc = 1.0 - t_final
    return (offsets, color.reshape(H, W, 3), depth.reshape(H, W), acc.reshape(H, W),
            nraw.reshape(H, W, 3), splat, pix, g, w, ent_t)


def backward(offsets, ent_splat, ent_pix, ent_g, ent_w, ent_t, means2d, conics, alphas, va, vp,
             colors, depths, normals, bg, W, g_color, g_depth, g_acc, g_nraw, g_went, g_tent,
             use_fif, k, lam):
    N = means2d.shape[0]
    P = offsets.shape[0] - 1
    E = ent_splat.shape[0]
    s, p = ent_splat, ent_pix
    feat = (np.sum(g_color[p] * colors[s], 1) + g_depth[p] * depths[s] + g_acc[p]
            + np.sum(g_nraw[p] * normals[s], 1) + g_went)

    counts = np.diff(offsets)
    pos = np.arange(E) - offsets[p]
    K = int(counts.max()) if E else 0
    d_w = np.zeros(E)
    if E:
        fd = np.zeros((P, K))
        wd = np.zeros((P, K))
        td = np.zeros((P, K))
        fd[p, pos] = feat
        wd[p, pos] = ent_w
        td[p, pos] = ent_t
        dd = np.zeros((P, K))
        behind = g_color @ bg
        for j in range(K - 1, -1, -1):
            live = counts > j
            dd[:, j] = np.where(live, td[:, j] * (fd[:, j] - behind), 0.0)
            behind = np.where(live, wd[:, j] * fd[:, j] + (1.0 - wd[:, j]) * behind, behind)
        d_w = dd[p, pos]

    ah_s = alphas.copy()
    if use_fif:
        ah_s[alphas < va] = 0.0
    gh = ent_g.copy()
    if use_fif:
        gh[ent_g < vp[s]] = 0.0
    d_gh = ah_s[s] * d_w
    g_alpha_hat = np.bincount(s, gh * d_w, minlength=N)
    if use_fif:
        win = lam * ent_g * np.maximum(0.0, (k - np.abs(ent_g - vp[s])) / (k * k))
        g_vp = np.bincount(s, d_gh * win, minlength=N)
        d_g = np.where(ent_g >= vp[s], d_gh, 0.0)
    else:
        g_vp = np.zeros(N)
        d_g = d_gh
    dpow = ent_g * d_g
    px = p % W
    py = p // W
    dx = px + 0.5 - means2d[s, 0]
    dy = py + 0.5 - means2d[s, 1]
    bc = lambda v: np.bincount(s, v, minlength=N)  # noqa: E731
    g_conic = np.stack([bc(-0.5 * dx * dx * dpow), bc(-dx * dy * dpow), bc(-0.5 * dy * dy * dpow)], 1)
    g_mean2d = np.stack([
        bc(dpow * (conics[s, 0] * dx + conics[s, 1] * dy)),
        bc(dpow * (conics[s, 1] * dx + conics[s, 2] * dy)),
    ], 1)
    wt = ent_t * ent_w
    g_col = np.stack([bc(wt * g_color[p, c]) for c in range(3)], 1)
    g_dep = bc(wt * g_depth[p] + g_tent)
    g_nrm = np.stack([bc(wt * g_nraw[p, c]) for c in range(3)], 1)
    return g_mean2d, g_conic, g_col, g_dep, g_nrm, g_alpha_hat, g_vp
