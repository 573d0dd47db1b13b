"""numba-compiled versions of the hot kernels (serial, net-index order)."""

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True)


@njit(**_JIT)
def _tile(p, n):
    g = int(np.floor(p * n))
    if g < 0:
        return 0
    if g > n - 1:
        return n - 1
    return g


@njit(**_JIT)
def tile_index(p, n):
    out = np.empty(p.shape[0], dtype=np.int64)
    for i in range(p.shape[0]):
        out[i] = _tile(p[i], n)
    return out


@njit(**_JIT)
def net_bboxes(px, py, net_ptr):
    n_nets = net_ptr.shape[0] - 1
    lx = np.empty(n_nets)
    hx = np.empty(n_nets)
    ly = np.empty(n_nets)
    hy = np.empty(n_nets)
    alx = np.empty(n_nets, dtype=np.int64)
    ahx = np.empty(n_nets, dtype=np.int64)
    aly = np.empty(n_nets, dtype=np.int64)
    ahy = np.empty(n_nets, dtype=np.int64)
    for e in range(n_nets):
        s = net_ptr[e]
        lx[e] = hx[e] = px[s]
        ly[e] = hy[e] = py[s]
        alx[e] = ahx[e] = aly[e] = ahy[e] = s
        for p in range(s + 1, net_ptr[e + 1]):
            # strict comparisons keep the lowest pin index on ties
            if px[p] < lx[e]:
                lx[e] = px[p]
                alx[e] = p
            if px[p] > hx[e]:
                hx[e] = px[p]
                ahx[e] = p
            if py[p] < ly[e]:
                ly[e] = py[p]
                aly[e] = p
            if py[p] > hy[e]:
                hy[e] = py[p]
                ahy[e] = p
    return lx, hx, ly, hy, alx, ahx, aly, ahy


@njit(**_JIT)
def _clip01(t):
    if t < 0.0:
        return 0.0
    if t > 1.0:
        return 1.0
    return t


@njit(**_JIT)
def _cov(lo, hi, g, n):
    return _clip01(hi * n - g) - _clip01(lo * n - g)


@njit(**_JIT)
def rudy_maps(px, py, net_ptr, W, H):
    lx, hx, ly, hy, _a, _b, _c, _d = net_bboxes(px, py, net_ptr)
    n_nets = net_ptr.shape[0] - 1
    rudy = np.zeros((W, H))
    pin_rudy = np.zeros((W, H))
    dens = np.empty(n_nets)
    for e in range(n_nets):
        d = 1.0 / max(hx[e] - lx[e], 1.0 / W) + 1.0 / max(hy[e] - ly[e], 1.0 / H)
        dens[e] = d
        gx0 = _tile(lx[e], W)
        gx1 = _tile(hx[e], W)
        gy0 = _tile(ly[e], H)
        gy1 = _tile(hy[e], H)
        for gx in range(gx0, gx1 + 1):
            fx = _cov(lx[e], hx[e], gx, W)
            if fx == 0.0:
                continue
            for gy in range(gy0, gy1 + 1):
                fy = _cov(ly[e], hy[e], gy, H)
                rudy[gx, gy] += d * fx * fy
        for p in range(net_ptr[e], net_ptr[e + 1]):
            pin_rudy[_tile(px[p], W), _tile(py[p], H)] += d
    return rudy, pin_rudy, dens


@njit(**_JIT)
def rudy_vjp(px, py, net_ptr, W, H, g_rudy, g_pin):
    n_pins = px.shape[0]
    gpx = np.zeros(n_pins)
    gpy = np.zeros(n_pins)
    lx, hx, ly, hy, alx, ahx, aly, ahy = net_bboxes(px, py, net_ptr)
    n_nets = net_ptr.shape[0] - 1
    col_buf = np.zeros(W)
    row_buf = np.zeros(H)
    for e in range(n_nets):
        sx = hx[e] - lx[e]
        sy = hy[e] - ly[e]
        d = 1.0 / max(sx, 1.0 / W) + 1.0 / max(sy, 1.0 / H)
        gx0 = _tile(lx[e], W)
        gx1 = _tile(hx[e], W)
        gy0 = _tile(ly[e], H)
        gy1 = _tile(hy[e], H)
        # col[gx] = sum_gy g*fy, row[gy] = sum_gx g*fx over the bbox window
        col = col_buf[:gx1 - gx0 + 1]
        row = row_buf[:gy1 - gy0 + 1]
        col[:] = 0.0
        row[:] = 0.0
        dd = 0.0
        for gx in range(gx0, gx1 + 1):
            fx = _cov(lx[e], hx[e], gx, W)
            for gy in range(gy0, gy1 + 1):
                fy = _cov(ly[e], hy[e], gy, H)
                g = g_rudy[gx, gy]
                col[gx - gx0] += g * fy
                row[gy - gy0] += g * fx
                dd += g * fx * fy
        for p in range(net_ptr[e], net_ptr[e + 1]):
            dd += g_pin[_tile(px[p], W), _tile(py[p], H)]
        ddx = -dd / (sx * sx) if sx > 1.0 / W else 0.0
        ddy = -dd / (sy * sy) if sy > 1.0 / H else 0.0

        g_hx = ddx
        g_lx = -ddx
        g_hy = ddy
        g_ly = -ddy
        t = int(np.floor(hx[e] * W))
        if 0 <= t < W:
            g_hx += d * W * col[t - gx0]
        t = int(np.floor(lx[e] * W))
        if 0 <= t < W:
            g_lx -= d * W * col[t - gx0]
        t = int(np.floor(hy[e] * H))
        if 0 <= t < H:
            g_hy += d * H * row[t - gy0]
        t = int(np.floor(ly[e] * H))
        if 0 <= t < H:
            g_ly -= d * H * row[t - gy0]
        gpx[ahx[e]] += g_hx
        gpx[alx[e]] += g_lx
        gpy[ahy[e]] += g_hy
        gpy[aly[e]] += g_ly
    return gpx, gpy


@njit(**_JIT)
def _add_lshape(h, v, ax, ay, bx, by):
    x0 = min(ax, bx)
    x1 = max(ax, bx)
    y0 = min(ay, by)
    y1 = max(ay, by)
    if ay == by:
        for x in range(x0, x1):
            h[x, ay] += 1.0
    elif ax == bx:
        for y in range(y0, y1):
            v[ax, y] += 1.0
    else:
        for x in range(x0, x1):
            h[x, ay] += 0.5
            h[x, by] += 0.5
        for y in range(y0, y1):
            v[bx, y] += 0.5
            v[ax, y] += 0.5


@njit(**_JIT)
def route_demand(pin_gx, pin_gy, net_ptr, W, H):
    h = np.zeros((max(W - 1, 0), H))
    v = np.zeros((W, max(H - 1, 0)))
    big = np.iinfo(np.int64).max
    for e in range(net_ptr.shape[0] - 1):
        s = net_ptr[e]
        k = net_ptr[e + 1] - s
        keys = np.sort(pin_gx[s:s + k] * H + pin_gy[s:s + k])
        # dedupe in place
        m = 0
        for i in range(k):
            if m == 0 or keys[i] != keys[m - 1]:
                keys[m] = keys[i]
                m += 1
        if m < 2:
            continue
        in_tree = np.zeros(m, dtype=np.bool_)
        dist = np.empty(m, dtype=np.int64)
        parent = np.zeros(m, dtype=np.int64)
        x0 = keys[0] // H
        y0 = keys[0] % H
        for i in range(m):
            dist[i] = abs(keys[i] // H - x0) + abs(keys[i] % H - y0)
        in_tree[0] = True
        for _ in range(m - 1):
            best = big
            v_sel = -1
            for i in range(m):
                if not in_tree[i] and dist[i] < best:
                    best = dist[i]
                    v_sel = i
            in_tree[v_sel] = True
            a = keys[parent[v_sel]]
            b = keys[v_sel]
            _add_lshape(h, v, a // H, a % H, b // H, b % H)
            vx = b // H
            vy = b % H
            for i in range(m):
                if not in_tree[i]:
                    dv = abs(keys[i] // H - vx) + abs(keys[i] % H - vy)
                    if dv < dist[i] or (dv == dist[i] and v_sel < parent[i]):
                        dist[i] = dv
                        parent[i] = v_sel
    return h, v


@njit(**_JIT)
def im2col(xp, k, s, xo, yo):
    n = xp.shape[0]
    c = xp.shape[3]
    out = np.empty((n * xo * yo, k * k * c))
    r = 0
    for b in range(n):
        for ox in range(xo):
            for oy in range(yo):
                col = 0
                for i in range(k):
                    for j in range(k):
                        for ch in range(c):
                            out[r, col] = xp[b, ox * s + i, oy * s + j, ch]
                            col += 1
                r += 1
    return out


@njit(**_JIT)
def col2im(cols, n, xp_, yp_, c, k, s, xo, yo):
    out = np.zeros((n, xp_, yp_, c))
    r = 0
    for b in range(n):
        for ox in range(xo):
            for oy in range(yo):
                col = 0
                for i in range(k):
                    for j in range(k):
                        for ch in range(c):
                            out[b, ox * s + i, oy * s + j, ch] += cols[r, col]
                            col += 1
                r += 1
    return out
