# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled grid kernels.

Every routine here has a numpy twin in ``_pykernels`` that performs the same
floating point operations in the same order, so both backends return
bit-identical results.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, sqrt, INFINITY

cnp.import_array()

ctypedef unsigned char u8


cdef inline bint _blocked(const u8[:, :] grid, long ix, long iy) nogil:
    if ix < 0 or iy < 0 or iy >= grid.shape[0] or ix >= grid.shape[1]:
        return True
    return grid[iy, ix] != 0


def raycast(const u8[:, :] obst, double res, double ox, double oy,
            double x, double y, const double[:] dirx, const double[:] diry,
            double max_range):
    """Distance to the first obstacle cell along each direction."""
    cdef Py_ssize_t n = dirx.shape[0], k
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double gx = (x - ox) / res
    cdef double gy = (y - oy) / res
    cdef long ix0 = <long>floor(gx)
    cdef long iy0 = <long>floor(gy)
    cdef long ix, iy, sx, sy
    cdef double dx, dy, tmx, tmy, tdx, tdy, t
    for k in range(n):
        if _blocked(obst, ix0, iy0):
            out[k] = 0.0
            continue
        dx = dirx[k]
        dy = diry[k]
        ix = ix0
        iy = iy0
        if dx > 0:
            sx = 1
            tmx = ((ix + 1.0) - gx) / dx
            tdx = 1.0 / dx
        elif dx < 0:
            sx = -1
            tmx = (gx - ix) / (-dx)
            tdx = 1.0 / (-dx)
        else:
            sx = 0
            tmx = INFINITY
            tdx = INFINITY
        if dy > 0:
            sy = 1
            tmy = ((iy + 1.0) - gy) / dy
            tdy = 1.0 / dy
        elif dy < 0:
            sy = -1
            tmy = (gy - iy) / (-dy)
            tdy = 1.0 / (-dy)
        else:
            sy = 0
            tmy = INFINITY
            tdy = INFINITY
        while True:
            if tmx < tmy:
                t = tmx
                tmx = tmx + tdx
                ix = ix + sx
            else:
                t = tmy
                tmy = tmy + tdy
                iy = iy + sy
            if t * res >= max_range:
                out[k] = max_range
                break
            if _blocked(obst, ix, iy):
                out[k] = t * res
                break
    return out


def mark_rays(u8[:, :] known, double res, double ox, double oy,
              double x, double y, const double[:] dirx, const double[:] diry,
              const double[:] ranges, double max_range):
    """Mark traversed cells free and hit cells obstacle (0 unknown, 1 free, 2 obstacle).

    Returns flat indices of cells that became free and cells that became obstacle.
    """
    cdef Py_ssize_t n = dirx.shape[0], k
    cdef long H = known.shape[0], W = known.shape[1]
    cdef double gx = (x - ox) / res
    cdef double gy = (y - oy) / res
    cdef long ix0 = <long>floor(gx)
    cdef long iy0 = <long>floor(gy)
    cdef long ix, iy, sx, sy
    cdef double dx, dy, tmx, tmy, tdx, tdy, t, rng
    cdef bint hit, inside
    new_free = []
    new_obst = []
    for k in range(n):
        dx = dirx[k]
        dy = diry[k]
        rng = ranges[k]
        hit = rng < max_range
        ix = ix0
        iy = iy0
        if dx > 0:
            sx = 1
            tmx = ((ix + 1.0) - gx) / dx
            tdx = 1.0 / dx
        elif dx < 0:
            sx = -1
            tmx = (gx - ix) / (-dx)
            tdx = 1.0 / (-dx)
        else:
            sx = 0
            tmx = INFINITY
            tdx = INFINITY
        if dy > 0:
            sy = 1
            tmy = ((iy + 1.0) - gy) / dy
            tdy = 1.0 / dy
        elif dy < 0:
            sy = -1
            tmy = (gy - iy) / (-dy)
            tdy = 1.0 / (-dy)
        else:
            sy = 0
            tmy = INFINITY
            tdy = INFINITY
        t = 0.0
        while True:
            if ix < 0 or iy < 0 or ix >= W or iy >= H:
                break
            # a hit ray ends in the cell holding its endpoint; a miss frees everything it enters
            if hit:
                inside = (tmx if tmx < tmy else tmy) * res <= rng
            else:
                inside = t * res < rng
            if inside:
                if known[iy, ix] == 0:
                    known[iy, ix] = 1
                    new_free.append(iy * W + ix)
            else:
                if hit and known[iy, ix] != 2:
                    known[iy, ix] = 2
                    new_obst.append(iy * W + ix)
                break
            if tmx < tmy:
                t = tmx
                tmx = tmx + tdx
                ix = ix + sx
            else:
                t = tmy
                tmy = tmy + tdy
                iy = iy + sy
    free = np.asarray(new_free, dtype=np.int64)
    # a cell can turn free and then obstacle within one scan
    if free.size:
        free = free[np.asarray(known).ravel()[free] == 1]
    return free, np.asarray(new_obst, dtype=np.int64)


def cover(const u8[:, :] obst, u8[:, :] covered, double res, double ox, double oy,
          double x, double y, double hx, double hy, double radius, double cos_half_fov):
    """Flip to covered every visible free cell within ``radius`` and the field of view."""
    cdef long H = obst.shape[0], W = obst.shape[1]
    cdef long jx0 = <long>floor((x - radius - ox) / res)
    cdef long jx1 = <long>floor((x + radius - ox) / res)
    cdef long jy0 = <long>floor((y - radius - oy) / res)
    cdef long jy1 = <long>floor((y + radius - oy) / res)
    cdef long jx, jy, ix, iy, sx, sy
    cdef double cx, cy, ddx, ddy, dist, gx, gy, gdx, gdy, tmx, tmy, tdx, tdy
    cdef bint visible
    if jx0 < 0:
        jx0 = 0
    if jy0 < 0:
        jy0 = 0
    if jx1 > W - 1:
        jx1 = W - 1
    if jy1 > H - 1:
        jy1 = H - 1
    gx = (x - ox) / res
    gy = (y - oy) / res
    out = []
    for jy in range(jy0, jy1 + 1):
        for jx in range(jx0, jx1 + 1):
            if covered[jy, jx] or obst[jy, jx]:
                continue
            cx = ox + (jx + 0.5) * res
            cy = oy + (jy + 0.5) * res
            ddx = cx - x
            ddy = cy - y
            dist = sqrt(ddx * ddx + ddy * ddy)
            if not dist < radius:
                continue
            if not (ddx * hx + ddy * hy >= cos_half_fov * dist):
                continue
            gdx = ddx / res
            gdy = ddy / res
            ix = <long>floor(gx)
            iy = <long>floor(gy)
            if gdx > 0:
                sx = 1
                tmx = ((ix + 1.0) - gx) / gdx
                tdx = 1.0 / gdx
            elif gdx < 0:
                sx = -1
                tmx = (gx - ix) / (-gdx)
                tdx = 1.0 / (-gdx)
            else:
                sx = 0
                tmx = INFINITY
                tdx = INFINITY
            if gdy > 0:
                sy = 1
                tmy = ((iy + 1.0) - gy) / gdy
                tdy = 1.0 / gdy
            elif gdy < 0:
                sy = -1
                tmy = (gy - iy) / (-gdy)
                tdy = 1.0 / (-gdy)
            else:
                sy = 0
                tmy = INFINITY
                tdy = INFINITY
            visible = True
            while True:
                if tmx < tmy:
                    if tmx >= 1.0:
                        break
                    tmx = tmx + tdx
                    ix = ix + sx
                else:
                    if tmy >= 1.0:
                        break
                    tmy = tmy + tdy
                    iy = iy + sy
                if _blocked(obst, ix, iy):
                    visible = False
                    break
            if visible:
                covered[jy, jx] = 1
                out.append(jy * W + jx)
    return np.asarray(out, dtype=np.int64)


def disk_collides(const u8[:, :] obst, double res, double ox, double oy,
                  double x, double y, double r):
    """True if a disk of radius ``r`` at (x, y) overlaps an obstacle cell or leaves the grid."""
    cdef long jx0 = <long>floor((x - r - ox) / res)
    cdef long jx1 = <long>floor((x + r - ox) / res)
    cdef long jy0 = <long>floor((y - r - oy) / res)
    cdef long jy1 = <long>floor((y + r - oy) / res)
    cdef long jx, jy
    cdef double x0, x1, y0, y1, ex, ey
    for jy in range(jy0, jy1 + 1):
        for jx in range(jx0, jx1 + 1):
            if not _blocked(obst, jx, jy):
                continue
            x0 = ox + jx * res
            x1 = ox + (jx + 1) * res
            y0 = oy + jy * res
            y1 = oy + (jy + 1) * res
            ex = 0.0
            if x < x0:
                ex = x0 - x
            elif x > x1:
                ex = x - x1
            ey = 0.0
            if y < y0:
                ey = y0 - y
            elif y > y1:
                ey = y - y1
            if ex * ex + ey * ey < r * r:
                return True
    return False


# ---------------------------------------------------------------------------
# convolution lowering for (groups, batch, H, W, C) tensors

ctypedef fused real:
    float
    double


def im2col(const real[:, :, :, :, ::1] x, int k, int stride, real[:, :, ::1] out):
    """out[g, (b, ho, wo), (i, j, c)] = x[g, b, ho*stride + i, wo*stride + j, c]."""
    cdef Py_ssize_t G = x.shape[0], B = x.shape[1], C = x.shape[4]
    cdef Py_ssize_t Ho = (x.shape[2] - k) // stride + 1
    cdef Py_ssize_t Wo = (x.shape[3] - k) // stride + 1
    cdef Py_ssize_t g, b, ho, wo, i, q, row
    cdef Py_ssize_t run = k * C
    cdef const real* src
    cdef real* dst
    with nogil:
        for g in range(G):
            for b in range(B):
                for ho in range(Ho):
                    for wo in range(Wo):
                        row = (b * Ho + ho) * Wo + wo
                        for i in range(k):
                            # (j, c) is one contiguous run of k*C values in x
                            src = &x[g, b, ho * stride + i, wo * stride, 0]
                            dst = &out[g, row, i * run]
                            for q in range(run):
                                dst[q] = src[q]
    return np.asarray(out)


def col2im(const real[:, :, ::1] cols, int k, int stride, real[:, :, :, :, ::1] gx):
    """Scatter-add the transpose of ``im2col`` into ``gx`` (accumulated in (i, j) order)."""
    cdef Py_ssize_t G = gx.shape[0], B = gx.shape[1], C = gx.shape[4]
    cdef Py_ssize_t Ho = (gx.shape[2] - k) // stride + 1
    cdef Py_ssize_t Wo = (gx.shape[3] - k) // stride + 1
    cdef Py_ssize_t g, b, ho, wo, i, j, c, row, col0
    cdef const real* src
    cdef real* dst
    with nogil:
        for g in range(G):
            for b in range(B):
                for i in range(k):
                    for j in range(k):
                        col0 = (i * k + j) * C
                        for ho in range(Ho):
                            for wo in range(Wo):
                                row = (b * Ho + ho) * Wo + wo
                                dst = &gx[g, b, ho * stride + i, wo * stride + j, 0]
                                src = &cols[g, row, col0]
                                for c in range(C):
                                    dst[c] += src[c]
    return np.asarray(gx)


def two_opt(long long[::1] tour, const double[:, ::1] W, int max_passes):
    """In-place 2-opt on an open path with fixed first node; best move per position.

    Returns the number of passes that improved the tour.
    """
    cdef Py_ssize_t n = tour.shape[0], i, j, best_j, lo, hi
    cdef long long a, b, c, d, t
    cdef double delta, best, nxt
    cdef int p, improved_passes = 0
    cdef bint improved
    if n < 3:
        return 0
    with nogil:
        for p in range(max_passes):
            improved = False
            for i in range(1, n - 1):
                a = tour[i - 1]
                b = tour[i]
                best = INFINITY
                best_j = -1
                for j in range(i + 1, n):
                    c = tour[j]
                    if j + 1 < n:
                        d = tour[j + 1]
                        nxt = W[b, d] - W[c, d]
                    else:
                        nxt = 0.0
                    delta = W[a, c] - W[a, b] + nxt
                    if delta < best:
                        best = delta
                        best_j = j
                if best < -1e-9:
                    lo = i
                    hi = best_j
                    while lo < hi:
                        t = tour[lo]
                        tour[lo] = tour[hi]
                        tour[hi] = t
                        lo += 1
                        hi -= 1
                    improved = True
            if not improved:
                break
            improved_passes += 1
    return improved_passes
