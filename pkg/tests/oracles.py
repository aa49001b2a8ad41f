"""Independent slow reimplementations used as test oracles."""
import math

import numpy as np


def tv_bruteforce(x, resolution=1.0):
    """Isotropic TV by explicit double loop; replicated edges give zero differences."""
    x = np.asarray(x, dtype=np.float64).tolist()
    h = len(x)
    w = len(x[0])
    terms = []
    for i in range(h):
        row = x[i]
        nxt = x[i + 1] if i + 1 < h else row
        for j in range(w):
            a = nxt[j] - row[j]
            b = (row[j + 1] - row[j]) if j + 1 < w else 0.0
            terms.append(math.sqrt(a * a + b * b))
    return resolution * math.fsum(terms)


def pixel_of(px, py, x, y, theta, pixel, grid):
    """Agent-frame pixel (row, col) of a world point, computed one point at a time."""
    dx, dy = px - x, py - y
    # rotate so that the heading maps to +y ("up")
    rot = math.pi / 2 - theta
    ux = dx * math.cos(rot) - dy * math.sin(rot)
    uy = dx * math.sin(rot) + dy * math.cos(rot)
    col = math.floor(ux / pixel + grid / 2)
    row = math.floor(grid / 2 - uy / pixel)
    return row, col


def block_pool(grid, f):
    h, w = grid.shape
    hh, ww = -(-h // f), -(-w // f)
    pad = np.zeros((hh * f, ww * f))
    pad[:h, :w] = grid
    return pad.reshape(hh, f, ww, f).mean(axis=(1, 3))


def astar_dijkstra(mask, a, b):
    """Plain Dijkstra on the 8-connected grid without corner cutting."""
    import heapq
    h, w = mask.shape
    dist = {a: 0.0}
    pq = [(0.0, a)]
    done = set()
    while pq:
        d, u = heapq.heappop(pq)
        if u in done:
            continue
        done.add(u)
        if u == b:
            return d
        ux, uy = u
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                if not (dx or dy):
                    continue
                vx, vy = ux + dx, uy + dy
                if not (0 <= vx < w and 0 <= vy < h) or not mask[vy, vx]:
                    continue
                if dx and dy and not (mask[uy, vx] and mask[vy, ux]):
                    continue
                nd = d + (math.sqrt(2.0) if dx and dy else 1.0)
                if nd < dist.get((vx, vy), math.inf):
                    dist[(vx, vy)] = nd
                    heapq.heappush(pq, (nd, (vx, vy)))
    return None


def wall_gap(base_obstacle, res, cx, cy, r):
    """Smallest distance from a disk surface to any obstacle cell square of ``base_obstacle``."""
    iy, ix = np.nonzero(base_obstacle)
    dx = np.maximum(np.abs((ix + 0.5) * res - cx) - res / 2, 0.0)
    dy = np.maximum(np.abs((iy + 0.5) * res - cy) - res / 2, 0.0)
    return float(np.sqrt(dx * dx + dy * dy).min()) - r


def base_of(world, task="mow"):
    """Regenerate the obstacle-free base (floor plan or empty box) a random map was built on."""
    from cpprl.gridworld import WorldMap
    from cpprl.mapgen import TASK_RADIUS, GenParams, generate_floorplan
    p = GenParams.for_task(task)
    m = world.meta
    if m["floorplan"]:
        return generate_floorplan(m["floorplan_seed"], p, m["side"], radius=TASK_RADIUS.get(task, 0.15))
    return WorldMap.empty(m["side"], p.resolution)


def segment_hits_cells(ax, ay, bx, by, boxes, res):
    """Whether segment a->b passes through the interior of any ``res`` box with lower-left corners ``boxes``.

    Slab test against every box; touching an edge or a corner does not count.
    """
    if len(boxes) == 0:
        return False
    lo = np.asarray(boxes, dtype=np.float64) * res
    hi = lo + res
    p = np.array([ax, ay])
    d = np.array([bx - ax, by - ay])
    t0 = np.zeros(len(lo))
    t1 = np.ones(len(lo))
    for k in range(2):
        if d[k] == 0.0:
            inside = (lo[:, k] < p[k]) & (p[k] < hi[:, k])
            t1 = np.where(inside, t1, -1.0)
            continue
        ta = (lo[:, k] - p[k]) / d[k]
        tb = (hi[:, k] - p[k]) / d[k]
        t0 = np.maximum(t0, np.minimum(ta, tb))
        t1 = np.minimum(t1, np.maximum(ta, tb))
    return bool(np.any(t1 - t0 > 1e-12))
