"""Classical comparison planners: BSA, offline/online A* + TSP, and a nearest-frontier explorer.

All planners work on a cell graph of squares with side sqrt(2)*r over the
disk-clear space; motion between nodes follows 8-connected fine-grid paths.
"""
from __future__ import annotations

import heapq
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse import csgraph

from . import kernels
from .env import CoverageEnv, EnvConfig, EpisodeLog
from .gridworld import Action, Pose, TaskProfile, WorldMap, wrap_angle
from .mapping import FREE, OBSTACLE, UNKNOWN, clearance_mask, frontier_mask
from .rewards import RUNNING

log = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
D_MAX = 16  # Chebyshev node distance beyond which the supremum weight is used
_NB = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)]


# ---------------------------------------------------------------------------
# grid search

def astar(grid: np.ndarray, a: tuple[int, int], b: tuple[int, int]):
    """Shortest 8-connected path on a traversable mask (no corner cutting), cells as ``(ix, iy)``.

    Returns ``(path, cost)`` or ``None`` when ``b`` cannot be reached.
    """
    h, w = grid.shape
    if not (grid[a[1], a[0]] and grid[b[1], b[0]]):
        return None
    if a == b:
        return [a], 0.0

    def heur(c):
        dx, dy = abs(c[0] - b[0]), abs(c[1] - b[1])
        return (SQRT2 - 1.0) * min(dx, dy) + max(dx, dy)

    g = {a: (0, 0)}  # cost as (unit steps, diagonal steps)
    parent = {a: None}
    pq = [(heur(a), 0.0, a)]
    closed = set()
    while pq:
        _, gc, u = heapq.heappop(pq)
        if u in closed:
            continue
        if u == b:
            break
        closed.add(u)
        n1, n2 = g[u]
        ux, uy = u
        for dx, dy in _NB:
            vx, vy = ux + dx, uy + dy
            if not (0 <= vx < w and 0 <= vy < h) or not grid[vy, vx]:
                continue
            diag = dx != 0 and dy != 0
            if diag and not (grid[uy, vx] and grid[vy, ux]):
                continue
            cand = (n1, n2 + 1) if diag else (n1 + 1, n2)
            v = (vx, vy)
            if v in closed:
                continue
            old = g.get(v)
            cv = cand[0] + cand[1] * SQRT2
            if old is None or cv < old[0] + old[1] * SQRT2 - 1e-12:
                g[v] = cand
                parent[v] = u
                heapq.heappush(pq, (cv + heur(v), cv, v))
    if b not in parent:
        return None
    path = [b]
    while path[-1] != a:
        path.append(parent[path[-1]])
    path.reverse()
    n1, n2 = g[b]
    return path, n1 + n2 * SQRT2


def grid_graph(mask: np.ndarray) -> sparse.csr_matrix:
    """8-connected graph over the cells of ``mask`` (flat index iy*W+ix), no corner cutting."""
    h, w = mask.shape
    idx = np.arange(h * w).reshape(h, w)
    rows, cols, vals = [], [], []
    for dx, dy, cost in ((1, 0, 1.0), (0, 1, 1.0), (1, 1, SQRT2), (1, -1, SQRT2)):
        ys = slice(max(0, -dy), h - max(0, dy))
        ys2 = slice(ys.start + dy, ys.stop + dy)
        xs = slice(max(0, -dx), w - max(0, dx))
        xs2 = slice(xs.start + dx, xs.stop + dx)
        ok = mask[ys, xs] & mask[ys2, xs2]
        if dx and dy:
            ok &= mask[ys2, xs] & mask[ys, xs2]
        a = idx[ys, xs][ok]
        b = idx[ys2, xs2][ok]
        rows += [a, b]
        cols += [b, a]
        vals += [np.full(a.size, cost), np.full(a.size, cost)]
    r = np.concatenate(rows)
    return sparse.csr_matrix((np.concatenate(vals), (r, np.concatenate(cols))), shape=(h * w, h * w))


def line_clear(mask: np.ndarray, res: float, p: tuple[float, float], q: tuple[float, float]) -> bool:
    """All cells sampled every half cell along segment p-q are set in ``mask``."""
    d = math.hypot(q[0] - p[0], q[1] - p[1])
    n = max(2, int(math.ceil(d / (0.5 * res))) + 1)
    t = np.linspace(0.0, 1.0, n)
    xs = np.floor((p[0] + t * (q[0] - p[0])) / res).astype(int)
    ys = np.floor((p[1] + t * (q[1] - p[1])) / res).astype(int)
    h, w = mask.shape
    if (xs < 0).any() or (ys < 0).any() or (xs >= w).any() or (ys >= h).any():
        return False
    return bool(mask[ys, xs].all())


def smooth_path(mask: np.ndarray, res: float, pts: list[tuple[float, float]]) -> list[tuple[float, float]]:
    """Greedy line-of-sight shortcutting of a waypoint list."""
    if len(pts) <= 2:
        return list(pts)
    out = [pts[0]]
    i = 0
    while i < len(pts) - 1:
        j = len(pts) - 1
        while j > i + 1 and not line_clear(mask, res, pts[i], pts[j]):
            j -= 1
        out.append(pts[j])
        i = j
    return out


# ---------------------------------------------------------------------------
# cell graph

@dataclass
class CellGraph:
    """Square cells of side sqrt(2)*r; one node per cell that contains disk-clear space.

    A node sits at its cell centre when that is clear, otherwise at the clear
    fine cell closest to the centre.
    """
    side: float
    nx: int
    ny: int
    node_cell: np.ndarray  # (N, 2) node (cx, cy) in the cell lattice
    node_fine: np.ndarray  # (N, 2) fine (ix, iy) of the node position
    node_xy: np.ndarray  # (N, 2) world coordinates
    clear: np.ndarray  # fine disk-clear mask
    resolution: float
    lookup: dict = field(default_factory=dict)

    @classmethod
    def build(cls, clear: np.ndarray, resolution: float, radius: float) -> "CellGraph":
        side = SQRT2 * radius
        h, w = clear.shape
        nx = int(math.ceil(w * resolution / side))
        ny = int(math.ceil(h * resolution / side))
        fy, fx = np.nonzero(clear)
        px, py = (fx + 0.5) * resolution, (fy + 0.5) * resolution
        cx = np.minimum((px // side).astype(int), nx - 1)
        cy = np.minimum((py // side).astype(int), ny - 1)
        ccx, ccy = (cx + 0.5) * side, (cy + 0.5) * side
        d2 = (px - ccx) ** 2 + (py - ccy) ** 2
        key = cy * nx + cx
        order = np.lexsort((fx, fy, d2, key))  # closest to centre first, ties by fine index
        key_s = key[order]
        first = np.ones(key_s.size, dtype=bool)
        first[1:] = key_s[1:] != key_s[:-1]
        pick = order[first]
        node_cell = np.stack([cx[pick], cy[pick]], axis=1)
        node_fine = np.stack([fx[pick], fy[pick]], axis=1)
        node_xy = np.stack([px[pick], py[pick]], axis=1)
        g = cls(side, nx, ny, node_cell, node_fine, node_xy, clear, resolution)
        g.lookup = {(int(a), int(b)): i for i, (a, b) in enumerate(node_cell)}
        return g

    @classmethod
    def from_world(cls, world: WorldMap, radius: float) -> "CellGraph":
        return cls.build(clearance_mask(world.obstacle, radius, world.spec.resolution), world.spec.resolution, radius)

    def __len__(self) -> int:
        return len(self.node_cell)

    def nearest(self, x: float, y: float, among=None) -> int:
        cand = np.arange(len(self)) if among is None else np.asarray(among)
        d = np.hypot(self.node_xy[cand, 0] - x, self.node_xy[cand, 1] - y)
        return int(cand[int(np.argmin(d))])

    def reachable_from(self, fine_start: tuple[int, int]) -> np.ndarray:
        """Nodes whose fine cell lies in the clear component of ``fine_start``."""
        labels, _ = ndimage.label(self.clear, structure=ndimage.generate_binary_structure(2, 1))
        lab = labels[fine_start[1], fine_start[0]]
        if lab == 0:
            return np.zeros(len(self), dtype=bool)
        return labels[self.node_fine[:, 1], self.node_fine[:, 0]] == lab

    def neighbours4(self, i: int) -> list[int]:
        cx, cy = self.node_cell[i]
        out = []
        for dx, dy in ((1, 0), (0, 1), (-1, 0), (0, -1)):
            j = self.lookup.get((int(cx + dx), int(cy + dy)))
            if j is not None and line_clear(self.clear, self.resolution, tuple(self.node_xy[i]), tuple(self.node_xy[j])):
                out.append(j)
        return out

    def fine_path(self, a: tuple[int, int], b: tuple[int, int], mask=None) -> tuple[list, float] | None:
        return astar(self.clear if mask is None else mask, a, b)

    def to_world(self, cells) -> list[tuple[float, float]]:
        r = self.resolution
        return [((ix + 0.5) * r, (iy + 0.5) * r) for ix, iy in cells]


def pairwise_weights(graph: CellGraph, nodes: np.ndarray, d_max: int = D_MAX, mask=None,
                     chunk: int = 64) -> np.ndarray:
    """Shortest fine-grid path lengths between ``nodes``; pairs farther than ``d_max`` lattice cells
    (Chebyshev) get the supremum weight (the traversable cell count times sqrt 2)."""
    mask = graph.clear if mask is None else mask
    h, w = mask.shape
    G = grid_graph(mask)
    sup = float(np.count_nonzero(mask)) * graph.resolution * SQRT2
    nodes = np.asarray(nodes)
    n = nodes.size
    W = np.full((n, n), sup, dtype=np.float64)
    fine = graph.node_fine[nodes, 1] * w + graph.node_fine[nodes, 0]
    cells = graph.node_cell[nodes]
    near = np.maximum(np.abs(cells[:, None, 0] - cells[None, :, 0]),
                      np.abs(cells[:, None, 1] - cells[None, :, 1])) <= d_max
    limit = (d_max + 2) * graph.side * SQRT2 / graph.resolution * 2.0
    for s in range(0, n, chunk):
        src = fine[s:s + chunk]
        D = csgraph.dijkstra(G, directed=False, indices=src, limit=limit)
        sub = D[:, fine] * graph.resolution
        m = near[s:s + chunk] & np.isfinite(sub)
        W[s:s + chunk][m] = sub[m]
    np.fill_diagonal(W, 0.0)
    return W


# ---------------------------------------------------------------------------
# TSP

def tour_length(order, weights: np.ndarray) -> float:
    order = list(order)
    return math.fsum(float(weights[a, b]) for a, b in zip(order[:-1], order[1:]))


def tsp_plan(weights: np.ndarray, start: int = 0) -> list[int]:
    """Open tour from ``start``: nearest-neighbour construction, then 2-opt until no improving move."""
    W = np.asarray(weights, dtype=np.float64)
    n = W.shape[0]
    if n == 0:
        return []
    if n == 1:
        return [0]
    unvisited = np.ones(n, dtype=bool)
    order = [start]
    unvisited[start] = False
    cur = start
    for _ in range(n - 1):
        d = np.where(unvisited, W[cur], np.inf)
        nxt = int(np.argmin(d))
        order.append(nxt)
        unvisited[nxt] = False
        cur = nxt
    return two_opt(order, W)


def two_opt(order: list[int], W: np.ndarray, max_passes: int = 10_000) -> list[int]:
    """2-opt on an open path with a fixed first node (segment reversal, best move per position)."""
    tour = np.ascontiguousarray(order, dtype=np.int64)
    kernels.two_opt(tour, np.ascontiguousarray(W, dtype=np.float64), max_passes)
    return tour.tolist()


# ---------------------------------------------------------------------------
# plans and execution

@dataclass
class Plan:
    planner: str
    nodes: list  # node ids in visiting order
    waypoints: list  # world (x, y) positions to drive through
    planned_length: float
    reachable: int  # reachable node count
    visited: int  # nodes visited by the plan
    backtracks: int = 0
    revisits: int = 0
    solver_time: float = 0.0

    @property
    def node_coverage(self) -> float:
        return 1.0 if self.reachable == 0 else self.visited / self.reachable


def _fine(world: WorldMap, x: float, y: float) -> tuple[int, int]:
    return world.spec.world_to_cell(x, y)


def _nearest_clear(clear: np.ndarray, cell: tuple[int, int]) -> tuple[int, int]:
    if clear[cell[1], cell[0]]:
        return cell
    ys, xs = np.nonzero(clear)
    k = int(np.argmin((xs - cell[0]) ** 2 + (ys - cell[1]) ** 2))
    return int(xs[k]), int(ys[k])


def _expand(graph: CellGraph, order: list[int], start_fine: tuple[int, int], mask=None):
    """Fine-grid waypoints through the nodes in ``order`` starting at ``start_fine``."""
    mask = graph.clear if mask is None else mask
    pts = []
    length = 0.0
    cur = start_fine
    for node in order:
        tgt = tuple(int(v) for v in graph.node_fine[node])
        res = astar(mask, cur, tgt)
        if res is None:
            continue
        cells, cost = res
        seg = graph.to_world(cells)
        seg[-1] = tuple(graph.node_xy[node])
        seg = smooth_path(mask, graph.resolution, seg)
        pts.extend(seg if not pts else seg[1:])
        length += cost * graph.resolution
        cur = tgt
    return pts, length


def _cleanup(graph: CellGraph, waypoints: list, start_fine: tuple[int, int], radius: float,
             margin: float = 0.01) -> tuple[list, float, int]:
    """Add out-and-back detours to reachable fine cells the path does not pass within ``radius - margin``.

    Returns ``(waypoints, added_length, n_detours)``.
    """
    from scipy.spatial import cKDTree
    res = graph.resolution
    labels, _ = ndimage.label(graph.clear, structure=ndimage.generate_binary_structure(2, 1))
    fy, fx = np.nonzero(labels == labels[start_fine[1], start_fine[0]])
    cells = np.stack([(fx + 0.5) * res, (fy + 0.5) * res], axis=1)
    pts = np.asarray(waypoints, dtype=np.float64).reshape(-1, 2)
    samples = [pts[:1]]
    for p, q in zip(pts[:-1], pts[1:]):
        n = max(1, int(math.ceil(math.hypot(*(q - p)) / (0.25 * margin))))
        samples.append(p + np.outer(np.arange(1, n + 1) / n, q - p))
    d, _ = cKDTree(np.concatenate(samples)).query(cells)
    reach = radius - margin
    missed = np.flatnonzero(d >= reach)
    if missed.size == 0:
        return waypoints, 0.0, 0
    tree = cKDTree(cells[missed])
    done = np.zeros(missed.size, dtype=bool)
    targets = []
    for k in range(missed.size):
        if done[k]:
            continue
        done[tree.query_ball_point(cells[missed[k]], reach)] = True
        targets.append(int(missed[k]))
    wtree = cKDTree(pts)
    inserts: dict[int, list] = {}
    added = 0.0
    for t in targets:
        goal = (int(fx[t]), int(fy[t]))
        for _, k in zip(*wtree.query(cells[t], k=min(4, len(pts)))):
            src = _nearest_clear(graph.clear, (int(pts[k][0] // res), int(pts[k][1] // res)))
            r = astar(graph.clear, src, goal)
            if r is not None:
                break
        else:
            continue
        seg = smooth_path(graph.clear, res, [tuple(pts[k])] + graph.to_world(r[0])[1:])
        inserts.setdefault(int(k), []).extend(seg[1:] + seg[-2::-1])
        added += 2 * r[1] * res
    out = []
    for i, p in enumerate(waypoints):
        out.append(p)
        out.extend(inserts.get(i, ()))
    return out, added, len(targets)


def tsp_offline(world: WorldMap, profile: TaskProfile, start: Pose, d_max: int = D_MAX) -> Plan:
    t0 = time.perf_counter()
    graph = CellGraph.from_world(world, profile.agent_radius)
    sf = _nearest_clear(graph.clear, _fine(world, start.x, start.y))
    reach = np.flatnonzero(graph.reachable_from(sf))
    s_node = graph.nearest(start.x, start.y, reach)
    nodes = np.concatenate([[s_node], reach[reach != s_node]])
    W = pairwise_weights(graph, nodes, d_max)
    order_local = tsp_plan(W, 0)
    order = [int(nodes[i]) for i in order_local]
    solve = time.perf_counter() - t0
    waypoints, length = _expand(graph, order, sf)
    waypoints, extra, _ = _cleanup(graph, waypoints, sf, min(profile.coverage_radius, profile.agent_radius))
    return Plan("tsp-offline", order, waypoints, length + extra, int(reach.size), len(set(order)), solver_time=solve)


_DIRS = [(1, 0), (0, 1), (-1, 0), (0, -1)]  # E, N, W, S (counterclockwise)


def bsa_plan(world: WorldMap, profile: TaskProfile, start: Pose) -> Plan:
    """Backtracking spiral: keep covered or blocked cells on the right, prefer right, straight, left;
    when boxed in, backtrack to the nearest unvisited cell."""
    t0 = time.perf_counter()
    graph = CellGraph.from_world(world, profile.agent_radius)
    sf = _nearest_clear(graph.clear, _fine(world, start.x, start.y))
    reach_mask = graph.reachable_from(sf)
    reach = set(np.flatnonzero(reach_mask).tolist())
    cur = graph.nearest(start.x, start.y, sorted(reach))
    visited = {cur}
    order = [cur]
    backtracks = 0
    nbr_cache: dict[int, dict] = {}

    def nbrs(i):
        if i not in nbr_cache:
            cx, cy = graph.node_cell[i]
            m = {}
            for j in graph.neighbours4(i):
                d = (int(graph.node_cell[j][0] - cx), int(graph.node_cell[j][1] - cy))
                m[d] = j
            nbr_cache[i] = m
        return nbr_cache[i]

    def free_dir(i, d):
        j = nbrs(i).get(d)
        return j if j is not None and j not in visited else None

    def seed_heading(i):
        for k, d in enumerate(_DIRS):
            right = _DIRS[(k - 1) % 4]
            if free_dir(i, d) is not None and free_dir(i, right) is None:
                return k
        for k, d in enumerate(_DIRS):
            if free_dir(i, d) is not None:
                return k
        return 0

    heading = seed_heading(cur)
    while True:
        moved = False
        for turn in (-1, 0, 1):  # right, straight, left
            k = (heading + turn) % 4
            j = free_dir(cur, _DIRS[k])
            if j is not None:
                heading = k
                cur = j
                visited.add(j)
                order.append(j)
                moved = True
                break
        if moved:
            continue
        # backtrack: Dijkstra over visited cells to the closest one with an unvisited neighbour
        target = _backtrack_target(graph, cur, visited, nbrs)
        if target is None:
            left = reach - visited
            if not left:
                break
            # remaining cells not linked through the cell lattice: go there along the fine grid
            nxt = graph.nearest(*graph.node_xy[cur], sorted(left))
            visited.add(nxt)
            order.append(nxt)
            cur = nxt
        else:
            path, nxt = target
            order.extend(path[1:])
            cur = path[-1]
            visited.add(nxt)
            order.append(nxt)
            cur = nxt
        backtracks += 1
        heading = seed_heading(cur)
    solve = time.perf_counter() - t0
    waypoints, length = _expand(graph, order, sf)
    waypoints, extra, _ = _cleanup(graph, waypoints, sf, min(profile.coverage_radius, profile.agent_radius))
    revisits = len(order) - len(set(order))
    return Plan("bsa", order, waypoints, length + extra, len(reach), len(visited & reach), backtracks, revisits, solve)


def _backtrack_target(graph: CellGraph, cur: int, visited: set, nbrs):
    dist = {cur: 0.0}
    parent = {cur: None}
    pq = [(0.0, cur)]
    done = set()
    while pq:
        d, u = heapq.heappop(pq)
        if u in done:
            continue
        done.add(u)
        for _, v in sorted(nbrs(u).items()):
            if v not in visited:
                path = [u]
                while parent[path[-1]] is not None:
                    path.append(parent[path[-1]])
                return path[::-1], v
        for _, v in sorted(nbrs(u).items()):
            nd = d + graph.side
            if v in visited and nd < dist.get(v, math.inf):
                dist[v] = nd
                parent[v] = u
                heapq.heappush(pq, (nd, v))
    return None


# ---------------------------------------------------------------------------
# frontier exploration

@dataclass
class FrontierTarget:
    cell: tuple[int, int] | None
    path: list
    cost: float
    complete: bool


def traversable_known(known_cells: np.ndarray, radius: float, resolution: float, unknown_free: bool = True):
    """Disk-clear cells of the known map; unknown space counts as free when ``unknown_free``."""
    obst = (known_cells == OBSTACLE) if unknown_free else (known_cells != FREE)
    return clearance_mask(obst.astype(np.uint8), radius, resolution)


def frontier_explore_step(known_cells: np.ndarray, covered: np.ndarray, pose_cell: tuple[int, int],
                          traversable: np.ndarray, min_cost: float = 0.0) -> FrontierTarget:
    """Nearest frontier cluster by path distance; its target is the reachable cell nearest its centroid.

    Frontier cells closer than ``min_cost`` (in cells) are ignored, so an agent whose
    coverage disk already reaches them is sent further out.
    """
    fr = frontier_mask(covered, known_cells)
    if not fr.any():
        return FrontierTarget(None, [], 0.0, True)
    labels, n = ndimage.label(fr, structure=ndimage.generate_binary_structure(2, 2))
    h, w = traversable.shape
    start = _nearest_clear(traversable, pose_cell) if traversable.any() else pose_cell
    G = grid_graph(traversable)
    dist = csgraph.dijkstra(G, directed=False, indices=start[1] * w + start[0]).reshape(h, w)
    best = None
    for lab in range(1, n + 1):
        ys, xs = np.nonzero(labels == lab)
        ok = np.isfinite(dist[ys, xs]) & (dist[ys, xs] >= min_cost)
        if not ok.any():
            continue
        ys, xs = ys[ok], xs[ok]
        cy, cx = ys.mean(), xs.mean()
        d2 = (xs - cx) ** 2 + (ys - cy) ** 2
        k = np.lexsort((ys * w + xs, d2))[0]
        cell = (int(xs[k]), int(ys[k]))
        cost = float(dist[cell[1], cell[0]])
        key = (cost, cell[1] * w + cell[0])
        if best is None or key < best[0]:
            best = (key, cell)
    if best is None:
        return FrontierTarget(None, [], 0.0, True)
    res = astar(traversable, start, best[1])
    path, cost = res
    return FrontierTarget(best[1], path, cost, False)


# ---------------------------------------------------------------------------
# waypoint execution in the simulator

class WaypointFollower:
    """Turn in place at full rate, then drive straight at up to full speed."""

    def __init__(self, profile: TaskProfile, pos_tol: float = 1e-3, ang_tol: float = 0.02):
        self.p = profile
        self.pos_tol = pos_tol
        self.ang_tol = ang_tol

    def action(self, pose: Pose, target: tuple[float, float]) -> Action | None:
        p = self.p
        dx, dy = target[0] - pose.x, target[1] - pose.y
        dist = math.hypot(dx, dy)
        if dist <= self.pos_tol:
            return None
        err = wrap_angle(math.atan2(dy, dx) - pose.theta)
        turn = max(-1.0, min(1.0, err / (p.omega_max * p.dt)))
        if abs(err) > self.ang_tol:
            return Action(0.0, turn)
        return Action(min(1.0, dist / (p.v_max * p.dt)), turn)


@dataclass
class Execution:
    log: EpisodeLog
    env: CoverageEnv
    reached_all: bool


def execute_waypoints(env: CoverageEnv, waypoints, log: EpisodeLog, max_steps: int | None = None,
                      solver_time: float = 0.0, stuck_steps: int = 20, on_step=None) -> bool:
    """Drive through ``waypoints``; returns False when the episode ended first."""
    fol = WaypointFollower(env.profile)
    pts = list(waypoints)
    i = 0
    stuck = 0
    while i < len(pts):
        a = fol.action(env.pose, pts[i])
        if a is None:
            i += 1
            stuck = 0
            continue
        before = env.pose
        res = env.step(a)
        log.record(env, a, res, solver_time)
        if on_step is not None and on_step(res):
            return True
        if res.info["collided"] and before == env.pose:
            stuck += 1
            if stuck >= stuck_steps:
                log.header["skipped_waypoints"] = log.header.get("skipped_waypoints", 0) + 1
                i += 1
                stuck = 0
        if res.done or (max_steps is not None and env.t >= max_steps):
            return False
    return True


def initial_scan(env: CoverageEnv, log: EpisodeLog, solver_time: float = 0.0) -> None:
    """Turn in place until the coverage sector has swept the full circle around the start."""
    p = env.profile
    if p.view_fov >= 2 * math.pi - 1e-9:
        return
    for _ in range(math.ceil((2 * math.pi - p.view_fov) / (p.omega_max * p.dt) - 1e-9)):
        a = Action(0.0, 1.0)
        res = env.step(a)
        log.record(env, a, res, solver_time)
        if res.done:
            return


def _baseline_env(profile: TaskProfile, noise_level: int, seed: int, goal: float) -> CoverageEnv:
    cfg = EnvConfig(profile=profile, noise_level=noise_level, observe=False, goal_coverage=goal, tau=10 ** 9)
    return CoverageEnv(cfg, seed=seed)


def run_plan(plan: Plan, world: WorldMap, profile: TaskProfile, start: Pose, seed: int = 0, noise_level: int = 0,
             goal: float = 1.0 + 1e-9, max_steps: int | None = None, header: dict | None = None) -> Execution:
    env = _baseline_env(profile, noise_level, seed, goal)
    env.reset(world, start)
    log = EpisodeLog(dict(header or {}, policy=plan.planner, planned_length=plan.planned_length,
                          solver_time_s=plan.solver_time))
    log.record_start(start, env.covered_fraction)
    initial_scan(env, log)
    ok = execute_waypoints(env, plan.waypoints, log, max_steps)
    return Execution(log, env, ok)


def tsp_online(world: WorldMap, profile: TaskProfile, start: Pose, seed: int = 0, noise_level: int = 0,
               max_steps: int | None = None, d_max: int = D_MAX, count_solver_time: bool = True,
               header: dict | None = None) -> tuple[Plan, Execution]:
    """Plan a tour over the currently known nodes, drive it, and re-plan when the queue empties
    or the next leg turns out blocked, until no known unvisited node remains.

    Unknown space is treated as traversable while planning; nodes are lattice
    cells whose position is known free.
    """
    env = _baseline_env(profile, noise_level, seed, 1.0 + 1e-9)
    env.reset(world, start)
    log = EpisodeLog(dict(header or {}, policy="tsp-online"))
    log.record_start(start, env.covered_fraction)
    initial_scan(env, log)
    res_m = world.spec.resolution
    r = profile.agent_radius
    visited: set = set()  # lattice cells
    solver = 0.0
    replans = 0
    order_all: list = []
    tol = SQRT2 * r / 2
    side = SQRT2 * r

    def mark(res):
        p = res.info["pose"]
        visited_candidates = ((int(p.x // side), int(p.y // side)),)
        for c in visited_candidates:
            cx, cy = (c[0] + 0.5) * side, (c[1] + 0.5) * side
            if math.hypot(cx - p.x, cy - p.y) <= tol:
                visited.add(c)
        return False

    done = False
    while not done:
        t0 = time.perf_counter()
        trav = traversable_known(env.known.cells, r, res_m)
        graph = CellGraph.build(trav, res_m, r)
        here_f = _nearest_clear(trav, _fine(world, env.pose.x, env.pose.y))
        known_free = env.known.cells[graph.node_fine[:, 1], graph.node_fine[:, 0]] == FREE
        reach = graph.reachable_from(here_f)
        vis = np.array([(int(a), int(b)) in visited for a, b in graph.node_cell], dtype=bool)
        cand = np.flatnonzero(known_free & reach & ~vis)
        if cand.size == 0:
            solver += time.perf_counter() - t0
            break
        here = graph.nearest(env.pose.x, env.pose.y, np.flatnonzero(reach))
        nodes = np.concatenate([[here], cand[cand != here]])
        order = [int(nodes[i]) for i in tsp_plan(pairwise_weights(graph, nodes, d_max, mask=trav), 0)]
        if here not in cand:
            order = order[1:]
        solver += time.perf_counter() - t0
        replans += 1
        queue = [(tuple(int(v) for v in graph.node_cell[n]), tuple(int(v) for v in graph.node_fine[n]),
                  tuple(graph.node_xy[n])) for n in order]
        for cell, fine, xy in queue:
            if cell in visited:
                continue
            t1 = time.perf_counter()
            trav = traversable_known(env.known.cells, r, res_m)
            cur = _nearest_clear(trav, _fine(world, env.pose.x, env.pose.y))
            leg = astar(trav, cur, fine) if trav[fine[1], fine[0]] else None
            solver += time.perf_counter() - t1
            if leg is None:
                # newly seen obstacles block this node: re-plan over what is known now
                visited.add(cell)
                break
            pts = graph.to_world(leg[0])
            pts[-1] = xy
            ok = execute_waypoints(env, smooth_path(trav, res_m, pts), log, max_steps,
                                   solver if count_solver_time else 0.0, on_step=mark)
            visited.add(cell)
            order_all.append(cell)
            if not ok or (max_steps is not None and env.t >= max_steps):
                done = True
                break
    if not done:
        solver = _sweep_leftovers(env, log, max_steps, solver, count_solver_time)
    plan = Plan("tsp-online", order_all, [], env.total_distance, 0, len(order_all), solver_time=solver)
    log.header["solver_time_s"] = solver
    log.header["replans"] = replans
    return plan, Execution(log, env, True)


def _face(env: CoverageEnv, log: EpisodeLog, target, solver_time: float, max_turns: int = 8) -> bool:
    p = env.profile
    for _ in range(max_turns):
        err = wrap_angle(math.atan2(target[1] - env.pose.y, target[0] - env.pose.x) - env.pose.theta)
        if abs(err) <= 0.02:
            break
        a = Action(0.0, max(-1.0, min(1.0, err / (p.omega_max * p.dt))))
        res = env.step(a)
        log.record(env, a, res, solver_time)
        if res.done:
            return False
    return True


def _sweep_leftovers(env: CoverageEnv, log: EpisodeLog, max_steps, solver: float, count_solver_time: bool) -> float:
    """After the node tour, visit known-free cells the agent's own coverage record still misses.

    Each leftover cell is tried once: drive to the closest traversable cell, then face it.
    """
    p = env.profile
    res_m = env.world.spec.resolution
    tried = np.zeros(env.known.cells.shape, dtype=bool)
    struct = ndimage.generate_binary_structure(2, 1)
    while max_steps is None or env.t < max_steps:
        t0 = time.perf_counter()
        trav = traversable_known(env.known.cells, p.agent_radius, res_m)
        here = _nearest_clear(trav, _fine(env.world, env.pose.x, env.pose.y))
        labels, _ = ndimage.label(trav, structure=struct)
        comp = labels == labels[here[1], here[0]]
        near = ndimage.distance_transform_edt(~comp) * res_m <= p.coverage_radius
        left = (env.known.cells == FREE) & ~env.coverage.cells.astype(bool) & near & ~tried
        if not left.any():
            solver += time.perf_counter() - t0
            break
        ys, xs = np.nonzero(left)
        k = int(np.argmin((xs - here[0]) ** 2 + (ys - here[1]) ** 2))
        cell = (int(xs[k]), int(ys[k]))
        tried[cell[1], cell[0]] = True
        goal = _nearest_clear(comp, cell)
        leg = astar(trav, here, goal)
        solver += time.perf_counter() - t0
        if leg is None:
            continue
        clock = solver if count_solver_time else 0.0
        ok = execute_waypoints(env, smooth_path(trav, res_m, _leg_world(leg[0], res_m)),
                               log, max_steps, clock)
        if not ok:
            break
        if not env.coverage.cells[cell[1], cell[0]]:
            if not _face(env, log, ((cell[0] + 0.5) * res_m, (cell[1] + 0.5) * res_m), clock):
                break
    return solver


def _leg_world(cells, res):
    return [((ix + 0.5) * res, (iy + 0.5) * res) for ix, iy in cells]


def frontier_explore(world: WorldMap, profile: TaskProfile, start: Pose, seed: int = 0, noise_level: int = 0,
                     goal: float = 0.99, max_steps: int | None = 20_000, header: dict | None = None) -> Execution:
    """Repeatedly drive to the nearest frontier cluster until none is reachable or the goal is met."""
    env = _baseline_env(profile, noise_level, seed, goal)
    env.reset(world, start)
    log = EpisodeLog(dict(header or {}, policy="frontier"))
    log.record_start(start, env.covered_fraction)
    initial_scan(env, log)
    res_m = world.spec.resolution
    reach = profile.coverage_radius / res_m
    while True:
        trav = traversable_known(env.known.cells, profile.agent_radius, res_m)
        tgt = frontier_explore_step(env.known.cells, env.coverage.cells, _fine(world, env.pose.x, env.pose.y), trav,
                                    min_cost=reach)
        if tgt.complete:
            break
        pts = smooth_path(trav, res_m, [((ix + 0.5) * res_m, (iy + 0.5) * res_m) for ix, iy in tgt.path])
        if len(pts) <= 1:
            # already on the target: turn once around to sweep the surroundings
            before = env.covered_fraction
            for _ in range(int(math.ceil(2 * math.pi / (profile.omega_max * profile.dt)))):
                a = Action(0.0, 1.0)
                res = env.step(a)
                log.record(env, a, res)
                if res.done:
                    break
            if env.covered_fraction <= before or res.done:
                break
            continue
        # replan after a short horizon so newly seen space is used
        ok = execute_waypoints(env, pts[:3], log, max_steps)
        if not ok or env.status.done_reason != RUNNING or (max_steps is not None and env.t >= max_steps):
            break
    return Execution(log, env, True)


__all__ = ["astar", "grid_graph", "CellGraph", "pairwise_weights", "tsp_plan", "two_opt", "tour_length",
           "tsp_offline", "tsp_online", "bsa_plan", "frontier_explore_step", "frontier_explore", "Plan",
           "run_plan", "WaypointFollower", "execute_waypoints", "D_MAX"]
