"""Vectorized numpy versions of the hot kernels.

Every function here has a twin in ``_numba`` with the same signature; the two
are cross-checked in the test suite.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def tile_index(p, n):
    """Half-open tile index of normalized positions ``p`` on an ``n``-tile axis."""
    return np.clip(np.floor(p * n).astype(np.int64), 0, n - 1)


def _pin_net(net_ptr):
    counts = np.diff(net_ptr)
    return np.repeat(np.arange(len(counts), dtype=np.int64), counts)


def _seg_argext(v, ext, pin_net, starts, n_pins):
    # lowest pin index attaining the extremum of each net
    idx = np.arange(n_pins, dtype=np.int64)
    cand = np.where(v == ext[pin_net], idx, n_pins)
    return np.minimum.reduceat(cand, starts)


def net_bboxes(px, py, net_ptr):
    n_nets = len(net_ptr) - 1
    if n_nets == 0:
        z = np.zeros(0)
        zi = np.zeros(0, dtype=np.int64)
        return z, z, z, z, zi, zi, zi, zi
    starts = net_ptr[:-1]
    pin_net = _pin_net(net_ptr)
    n_pins = len(px)
    lx = np.minimum.reduceat(px, starts)
    hx = np.maximum.reduceat(px, starts)
    ly = np.minimum.reduceat(py, starts)
    hy = np.maximum.reduceat(py, starts)
    return (
        lx, hx, ly, hy,
        _seg_argext(px, lx, pin_net, starts, n_pins),
        _seg_argext(px, hx, pin_net, starts, n_pins),
        _seg_argext(py, ly, pin_net, starts, n_pins),
        _seg_argext(py, hy, pin_net, starts, n_pins),
    )


def _coverage(lo, hi, n):
    # (n_nets, n) fraction of each tile's extent covered by [lo, hi]
    g = np.arange(n, dtype=np.float64)
    return np.clip(hi[:, None] * n - g, 0.0, 1.0) - np.clip(lo[:, None] * n - g, 0.0, 1.0)


def _density(lx, hx, ly, hy, W, H):
    return 1.0 / np.maximum(hx - lx, 1.0 / W) + 1.0 / np.maximum(hy - ly, 1.0 / H)


def rudy_maps(px, py, net_ptr, W, H):
    """Return (rudy, pin_rudy, density) for all nets."""
    lx, hx, ly, hy = net_bboxes(px, py, net_ptr)[:4]
    d = _density(lx, hx, ly, hy, W, H)
    fx = _coverage(lx, hx, W)
    fy = _coverage(ly, hy, H)
    rudy = (d[:, None] * fx).T @ fy
    pin_d = d[_pin_net(net_ptr)]
    flat = tile_index(px, W) * H + tile_index(py, H)
    pin_rudy = np.bincount(flat, weights=pin_d, minlength=W * H).reshape(W, H)
    return rudy, pin_rudy, d


def rudy_vjp(px, py, net_ptr, W, H, g_rudy, g_pin):
    """Pullback of (g_rudy, g_pin) through ``rudy_maps`` onto pin coordinates."""
    n_pins = len(px)
    gpx = np.zeros(n_pins)
    gpy = np.zeros(n_pins)
    n_nets = len(net_ptr) - 1
    if n_nets == 0:
        return gpx, gpy
    lx, hx, ly, hy, alx, ahx, aly, ahy = net_bboxes(px, py, net_ptr)
    sx = hx - lx
    sy = hy - ly
    d = _density(lx, hx, ly, hy, W, H)
    fx = _coverage(lx, hx, W)
    fy = _coverage(ly, hy, H)

    # d(loss)/d(density) from both channels
    row = fx @ g_rudy                      # (n_nets, H): sum over gx
    col = fy @ g_rudy.T                    # (n_nets, W): sum over gy
    dd = np.sum(row * fy, axis=1)
    flat = tile_index(px, W) * H + tile_index(py, H)
    dd += np.add.reduceat(g_pin.ravel()[flat], net_ptr[:-1])

    ddx = np.where(sx > 1.0 / W, -1.0 / np.maximum(sx, 1e-300) ** 2, 0.0) * dd
    ddy = np.where(sy > 1.0 / H, -1.0 / np.maximum(sy, 1e-300) ** 2, 0.0) * dd

    # right-derivative of the coverage ramps: only the tile holding the edge
    e = np.arange(n_nets)

    def edge_grad(t, n, proj):
        g = np.floor(t * n).astype(np.int64)
        ok = (g >= 0) & (g < n)
        out = np.zeros(n_nets)
        out[ok] = proj[e[ok], g[ok]] * n
        return out

    g_hx = d * edge_grad(hx, W, col) + ddx
    g_lx = -d * edge_grad(lx, W, col) - ddx
    g_hy = d * edge_grad(hy, H, row) + ddy
    g_ly = -d * edge_grad(ly, H, row) - ddy

    gpx += np.bincount(ahx, weights=g_hx, minlength=n_pins)
    gpx += np.bincount(alx, weights=g_lx, minlength=n_pins)
    gpy += np.bincount(ahy, weights=g_hy, minlength=n_pins)
    gpy += np.bincount(aly, weights=g_ly, minlength=n_pins)
    return gpx, gpy


def mst_segments(keys, H):
    """Prim MST over sorted unique tile keys (key = gx*H + gy), Manhattan metric.

    Returns a list of (parent_key, child_key) pairs.
    """
    m = len(keys)
    if m < 2:
        return []
    gx = keys // H
    gy = keys % H
    in_tree = np.zeros(m, dtype=bool)
    in_tree[0] = True
    dist = np.abs(gx - gx[0]) + np.abs(gy - gy[0])
    parent = np.zeros(m, dtype=np.int64)
    segs = []
    for _ in range(m - 1):
        cand = np.where(in_tree, np.iinfo(np.int64).max, dist)
        v = int(np.argmin(cand))  # first minimum -> smallest key on ties
        in_tree[v] = True
        segs.append((int(keys[parent[v]]), int(keys[v])))
        dv = np.abs(gx - gx[v]) + np.abs(gy - gy[v])
        better = (~in_tree) & ((dv < dist) | ((dv == dist) & (v < parent)))
        dist = np.where(better, dv, dist)
        parent = np.where(better, v, parent)
    return segs


def add_lshape(h, v, ax, ay, bx, by):
    """Accumulate the two L-shaped routes between tiles a and b."""
    if ax == bx and ay == by:
        raise ValueError("zero-length segment")
    x0, x1 = min(ax, bx), max(ax, bx)
    y0, y1 = min(ay, by), max(ay, by)
    if ay == by:
        h[x0:x1, ay] += 1.0
    elif ax == bx:
        v[ax, y0:y1] += 1.0
    else:
        # horizontal first: row ay, then column bx; vertical first: column ax, then row by
        h[x0:x1, ay] += 0.5
        v[bx, y0:y1] += 0.5
        v[ax, y0:y1] += 0.5
        h[x0:x1, by] += 0.5


def route_demand(pin_gx, pin_gy, net_ptr, W, H):
    h = np.zeros((max(W - 1, 0), H))
    v = np.zeros((W, max(H - 1, 0)))
    keys_all = pin_gx * H + pin_gy
    for e in range(len(net_ptr) - 1):
        keys = np.unique(keys_all[net_ptr[e]:net_ptr[e + 1]])
        for a, b in mst_segments(keys, H):
            add_lshape(h, v, a // H, a % H, b // H, b % H)
    return h, v


def im2col(xp, k, s, xo, yo):
    """(N, Xp, Yp, C) padded input -> (N*xo*yo, k*k*C) patches, column order (ki, kj, c)."""
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, :s * (xo - 1) + 1:s, :s * (yo - 1) + 1:s]
    n, c = xp.shape[0], xp.shape[3]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * xo * yo, k * k * c)


def col2im(cols, n, xp_, yp_, c, k, s, xo, yo):
    """Adjoint of im2col: scatter-add patches back into an (N, Xp, Yp, C) array."""
    out = np.zeros((n, xp_, yp_, c))
    c6 = cols.reshape(n, xo, yo, k, k, c)
    for i in range(k):
        for j in range(k):
            out[:, i:i + s * xo:s, j:j + s * yo:s, :] += c6[:, :, :, i, j, :]
    return out
