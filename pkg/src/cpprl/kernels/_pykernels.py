"""Pure-Python/numpy versions of the compiled grid kernels.

The arithmetic mirrors ``_ckernels.pyx`` operation for operation so that the
two backends agree bit for bit.
"""
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _blocked(grid, ix, iy):
    h, w = grid.shape
    if ix < 0 or iy < 0 or iy >= h or ix >= w:
        return True
    return grid[iy, ix] != 0


def _dda_init(g, i, d):
    if d > 0:
        return 1, ((i + 1.0) - g) / d, 1.0 / d
    if d < 0:
        return -1, (g - i) / (-d), 1.0 / (-d)
    return 0, math.inf, math.inf


def raycast(obst, res, ox, oy, x, y, dirx, diry, max_range):
    """Distance to the first obstacle cell along each direction."""
    n = len(dirx)
    out = np.empty(n, dtype=np.float64)
    gx = (x - ox) / res
    gy = (y - oy) / res
    ix0 = math.floor(gx)
    iy0 = math.floor(gy)
    for k in range(n):
        if _blocked(obst, ix0, iy0):
            out[k] = 0.0
            continue
        dx = float(dirx[k])
        dy = float(diry[k])
        ix, iy = ix0, iy0
        sx, tmx, tdx = _dda_init(gx, ix, dx)
        sy, tmy, tdy = _dda_init(gy, iy, dy)
        while True:
            if tmx < tmy:
                t = tmx
                tmx = tmx + tdx
                ix += sx
            else:
                t = tmy
                tmy = tmy + tdy
                iy += sy
            if t * res >= max_range:
                out[k] = max_range
                break
            if _blocked(obst, ix, iy):
                out[k] = t * res
                break
    return out


def mark_rays(known, res, ox, oy, x, y, dirx, diry, ranges, max_range):
    """Mark traversed cells free and hit cells obstacle (0 unknown, 1 free, 2 obstacle)."""
    h, w = known.shape
    gx = (x - ox) / res
    gy = (y - oy) / res
    ix0 = math.floor(gx)
    iy0 = math.floor(gy)
    new_free = []
    new_obst = []
    for k in range(len(dirx)):
        dx = float(dirx[k])
        dy = float(diry[k])
        rng = float(ranges[k])
        hit = rng < max_range
        ix, iy = ix0, iy0
        sx, tmx, tdx = _dda_init(gx, ix, dx)
        sy, tmy, tdy = _dda_init(gy, iy, dy)
        t = 0.0
        while True:
            if ix < 0 or iy < 0 or ix >= w or iy >= h:
                break
            # a hit ray ends in the cell holding its endpoint; a miss frees everything it enters
            if (min(tmx, tmy) * res <= rng) if hit else (t * res < rng):
                if known[iy, ix] == 0:
                    known[iy, ix] = 1
                    new_free.append(iy * w + ix)
            else:
                if hit and known[iy, ix] != 2:
                    known[iy, ix] = 2
                    new_obst.append(iy * w + ix)
                break
            if tmx < tmy:
                t = tmx
                tmx = tmx + tdx
                ix += sx
            else:
                t = tmy
                tmy = tmy + tdy
                iy += sy
    free = np.asarray(new_free, dtype=np.int64)
    if free.size:
        free = free[known.ravel()[free] == 1]
    return free, np.asarray(new_obst, dtype=np.int64)


def cover(obst, covered, res, ox, oy, x, y, hx, hy, radius, cos_half_fov):
    """Flip to covered every visible free cell within ``radius`` and the field of view.

    Line of sight is traced for all candidate cells at once: every iteration
    advances each still-active segment by one grid cell.
    """
    h, w = obst.shape
    jx0 = max(math.floor((x - radius - ox) / res), 0)
    jx1 = min(math.floor((x + radius - ox) / res), w - 1)
    jy0 = max(math.floor((y - radius - oy) / res), 0)
    jy1 = min(math.floor((y + radius - oy) / res), h - 1)
    if jx1 < jx0 or jy1 < jy0:
        return np.empty(0, dtype=np.int64)
    jy, jx = np.mgrid[jy0:jy1 + 1, jx0:jx1 + 1]
    jy = jy.ravel()
    jx = jx.ravel()
    keep = (covered[jy, jx] == 0) & (obst[jy, jx] == 0)
    jy = jy[keep]
    jx = jx[keep]
    cx = ox + (jx + 0.5) * res
    cy = oy + (jy + 0.5) * res
    ddx = cx - x
    ddy = cy - y
    dist = np.sqrt(ddx * ddx + ddy * ddy)
    keep = (dist < radius) & (ddx * hx + ddy * hy >= cos_half_fov * dist)
    jy, jx, ddx, ddy = jy[keep], jx[keep], ddx[keep], ddy[keep]
    n = jx.size
    if n == 0:
        return np.empty(0, dtype=np.int64)

    gx = (x - ox) / res
    gy = (y - oy) / res
    gdx = ddx / res
    gdy = ddy / res
    ix = np.full(n, math.floor(gx), dtype=np.int64)
    iy = np.full(n, math.floor(gy), dtype=np.int64)
    sx, tmx, tdx = _dda_init_vec(gx, ix, gdx)
    sy, tmy, tdy = _dda_init_vec(gy, iy, gdy)

    visible = np.ones(n, dtype=bool)
    active = np.arange(n)
    while active.size:
        a_tmx, a_tmy = tmx[active], tmy[active]
        step_x = a_tmx < a_tmy
        t_next = np.where(step_x, a_tmx, a_tmy)
        cont = t_next < 1.0
        active = active[cont]
        step_x = step_x[cont]
        ax = active[step_x]
        ay = active[~step_x]
        tmx[ax] = tmx[ax] + tdx[ax]
        ix[ax] += sx[ax]
        tmy[ay] = tmy[ay] + tdy[ay]
        iy[ay] += sy[ay]
        bx, by = ix[active], iy[active]
        oob = (bx < 0) | (by < 0) | (bx >= w) | (by >= h)
        blocked = oob.copy()
        inb = ~oob
        blocked[inb] = obst[by[inb], bx[inb]] != 0
        visible[active[blocked]] = False
        active = active[~blocked]

    flat = jy[visible] * w + jx[visible]
    covered.ravel()[flat] = 1
    return np.sort(flat).astype(np.int64)


def _dda_init_vec(g, i, d):
    n = d.size
    s = np.zeros(n, dtype=np.int64)
    tm = np.full(n, np.inf)
    td = np.full(n, np.inf)
    pos = d > 0
    neg = d < 0
    s[pos] = 1
    s[neg] = -1
    tm[pos] = ((i[pos] + 1.0) - g) / d[pos]
    td[pos] = 1.0 / d[pos]
    tm[neg] = (g - i[neg]) / (-d[neg])
    td[neg] = 1.0 / (-d[neg])
    return s, tm, td


def disk_collides(obst, res, ox, oy, x, y, r):
    """True if a disk of radius ``r`` at (x, y) overlaps an obstacle cell or leaves the grid."""
    h, w = obst.shape
    jx0 = math.floor((x - r - ox) / res)
    jx1 = math.floor((x + r - ox) / res)
    jy0 = math.floor((y - r - oy) / res)
    jy1 = math.floor((y + r - oy) / res)
    jy, jx = np.mgrid[jy0:jy1 + 1, jx0:jx1 + 1]
    jy = jy.ravel()
    jx = jx.ravel()
    oob = (jx < 0) | (jy < 0) | (jx >= w) | (jy >= h)
    blocked = oob.copy()
    blocked[~oob] = obst[jy[~oob], jx[~oob]] != 0
    if not blocked.any():
        return False
    jx = jx[blocked]
    jy = jy[blocked]
    x0 = ox + jx * res
    x1 = ox + (jx + 1) * res
    y0 = oy + jy * res
    y1 = oy + (jy + 1) * res
    ex = np.where(x < x0, x0 - x, np.where(x > x1, x - x1, 0.0))
    ey = np.where(y < y0, y0 - y, np.where(y > y1, y - y1, 0.0))
    return bool(np.any(ex * ex + ey * ey < r * r))


def im2col(x, k, stride, out):
    """out[g, (b, ho, wo), (i, j, c)] = x[g, b, ho*stride + i, wo*stride + j, c]."""
    g, b, h, w, c = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    # windows along the flattened (W, C) axis keep k*C contiguous values together
    win = sliding_window_view(x.reshape(g, b, h, w * c), k * c, axis=3)[..., ::c * stride, :][..., :wo, :]
    view = out.reshape(g, b, ho, wo, k, k * c)
    for i in range(k):
        view[:, :, :, :, i, :] = win[:, :, i:i + (ho - 1) * stride + 1:stride]
    return out


def col2im(cols, k, stride, gx):
    """Scatter-add the transpose of ``im2col`` into ``gx`` (accumulated in (i, j) order)."""
    g, b, h, w, c = gx.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    cv = cols.reshape(g, b, ho, wo, k, k, c)
    for i in range(k):
        for j in range(k):
            gx[:, :, i:i + (ho - 1) * stride + 1:stride, j:j + (wo - 1) * stride + 1:stride, :] += cv[:, :, :, :, i, j, :]
    return gx


def two_opt(tour, W, max_passes):
    """In-place 2-opt on an open path with fixed first node; best move per position."""
    n = tour.shape[0]
    if n < 3:
        return 0
    passes = 0
    for _ in range(max_passes):
        improved = False
        for i in range(1, n - 1):
            a, b = tour[i - 1], tour[i]
            js = np.arange(i + 1, n)
            c = tour[js]
            has_next = js + 1 < n
            d = tour[np.minimum(js + 1, n - 1)]
            nxt = np.where(has_next, W[b, d] - W[c, d], 0.0)
            delta = W[a, c] - W[a, b] + nxt
            k = int(np.argmin(delta))
            if delta[k] < -1e-9:
                j = int(js[k])
                tour[i:j + 1] = tour[i:j + 1][::-1].copy()
                improved = True
        if not improved:
            break
        passes += 1
    return passes
