"""Agent knowledge: known occupancy, coverage mask, frontier, reachable area."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import kernels
from .gridworld import GridSpec, LidarScan, Pose, TaskProfile, WorldMap

UNKNOWN, FREE, OBSTACLE = 0, 1, 2


class KnownMap:
    """Ternary occupancy built only from lidar; obstacle marks are never revoked."""

    def __init__(self, spec: GridSpec):
        self.spec = spec
        self.cells = np.zeros(spec.shape, dtype=np.uint8)

    @property
    def obstacle(self) -> np.ndarray:
        return self.cells == OBSTACLE

    def copy(self) -> "KnownMap":
        k = KnownMap(self.spec)
        k.cells = self.cells.copy()
        return k


def update_known_map(known: KnownMap, scan: LidarScan, pose: Pose, max_range: float):
    """Integrate one scan taken at ``pose`` (possibly the noisy pose).

    Ray directions are taken relative to the scan heading and re-anchored at
    ``pose.theta``. Returns flat indices of cells that became free and of
    cells that became obstacle.
    """
    s = known.spec
    angles = pose.theta + np.asarray(scan.rel_angles)
    return kernels.mark_rays(known.cells, s.resolution, s.origin[0], s.origin[1], float(pose.x),
                             float(pose.y), np.cos(angles), np.sin(angles),
                             np.asarray(scan.ranges, dtype=np.float64), float(max_range))


class CoverageGrid:
    def __init__(self, spec: GridSpec):
        self.spec = spec
        self.cells = np.zeros(spec.shape, dtype=np.uint8)
        self.count = 0

    @property
    def covered_area(self) -> float:
        return self.count * self.spec.resolution ** 2

    def recount(self) -> int:
        return int(np.count_nonzero(self.cells))

    def copy(self) -> "CoverageGrid":
        c = CoverageGrid(self.spec)
        c.cells = self.cells.copy()
        c.count = self.count
        return c


def cover_at(coverage: CoverageGrid, world: WorldMap, x: float, y: float, theta: float,
             radius: float, fov: float) -> np.ndarray:
    """Cover visible cells around (x, y); returns the newly covered flat indices."""
    s = coverage.spec
    cos_half = -1.0 if fov >= 2 * math.pi - 1e-12 else math.cos(fov / 2.0)
    new = kernels.cover(world.obstacle, coverage.cells, s.resolution, s.origin[0], s.origin[1],
                        float(x), float(y), math.cos(theta), math.sin(theta), float(radius), cos_half)
    coverage.count += int(new.size)
    return new


def apply_coverage(coverage: CoverageGrid, pose: Pose, profile: TaskProfile, world: WorldMap):
    """Cover every free cell whose centre is closer than the coverage radius, inside the
    field of view and in line of sight. Returns ``(coverage, newly_covered_area)``."""
    new = cover_at(coverage, world, pose.x, pose.y, pose.theta, profile.coverage_radius, profile.view_fov)
    return coverage, new.size * coverage.spec.resolution ** 2


def frontier_mask(covered: np.ndarray, known_cells: np.ndarray) -> np.ndarray:
    """Uncovered, not known-obstacle cells with at least one covered 8-neighbour."""
    cov = covered.astype(bool)
    near = ndimage.maximum_filter(cov.astype(np.uint8), size=3, mode="constant", cval=0).astype(bool)
    return near & ~cov & (known_cells != OBSTACLE)


def compute_frontier(coverage: CoverageGrid, known: KnownMap) -> np.ndarray:
    if coverage.spec != known.spec:
        raise ValueError("coverage and known map must share a grid spec")
    return frontier_mask(coverage.cells, known.cells)


def update_frontier(frontier: np.ndarray, covered: np.ndarray, known_cells: np.ndarray,
                    changed: np.ndarray):
    """Re-evaluate the frontier predicate around ``changed`` flat indices in place.

    Returns ``(added, removed)`` flat indices.
    """
    if changed.size == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    h, w = frontier.shape
    cy, cx = np.divmod(changed, w)
    oy, ox = np.mgrid[-1:2, -1:2]
    ny = (cy[:, None] + oy.ravel()[None, :]).ravel()
    nx = (cx[:, None] + ox.ravel()[None, :]).ravel()
    ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
    cand = np.unique(ny[ok] * w + nx[ok])
    py, px = np.divmod(cand, w)
    # covered-neighbour test on the 3x3 window of each candidate
    any_cov = np.zeros(cand.size, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            qy, qx = py + dy, px + dx
            inb = (qy >= 0) & (qy < h) & (qx >= 0) & (qx < w)
            hit = np.zeros(cand.size, dtype=bool)
            hit[inb] = covered[qy[inb], qx[inb]] != 0
            any_cov |= hit
    new_val = any_cov & (covered[py, px] == 0) & (known_cells[py, px] != OBSTACLE)
    flat = frontier.ravel()
    old_val = flat[cand]
    added = cand[new_val & ~old_val]
    removed = cand[~new_val & old_val]
    flat[cand] = new_val
    return added, removed


def disk_footprint(radius: float, resolution: float) -> np.ndarray:
    """Offsets (as a boolean kernel) of cells whose square lies closer than ``radius`` to a cell centre."""
    k = int(math.ceil(radius / resolution + 0.5))
    o = np.arange(-k, k + 1)
    dy, dx = np.meshgrid(o, o, indexing="ij")
    ex = np.maximum(np.abs(dx) - 0.5, 0.0) * resolution
    ey = np.maximum(np.abs(dy) - 0.5, 0.0) * resolution
    return ex * ex + ey * ey < radius * radius


def clearance_mask(obstacle: np.ndarray, radius: float, resolution: float) -> np.ndarray:
    """Cells whose centre can host the agent disk without touching an obstacle cell."""
    blocked = ndimage.binary_dilation(obstacle.astype(bool), structure=disk_footprint(radius, resolution),
                                      border_value=1)
    return ~blocked


def reachable_mask(world: WorldMap, radius: float, start_cell: tuple[int, int],
                   clearance: np.ndarray | None = None) -> np.ndarray:
    """4-connected flood fill of disk-clear cells from ``start_cell`` = (ix, iy)."""
    if clearance is None:
        clearance = clearance_mask(world.obstacle, radius, world.spec.resolution)
    ix, iy = start_cell
    if not (0 <= iy < clearance.shape[0] and 0 <= ix < clearance.shape[1]) or not clearance[iy, ix]:
        raise ValueError("start position is not in collision-free space")
    labels, _ = ndimage.label(clearance, structure=ndimage.generate_binary_structure(2, 1))
    return labels == labels[iy, ix]


def reachable_free_area(world: WorldMap, start: Pose, radius: float) -> float:
    cell = world.spec.world_to_cell(start.x, start.y)
    return float(reachable_mask(world, radius, cell).sum()) * world.spec.resolution ** 2


@dataclass
class CoverageStats:
    reachable_free_area: float
    covered_fraction: float
    steps_since_new_coverage: int


def covered_fraction(coverage: CoverageGrid, reachable: np.ndarray) -> float:
    total = int(reachable.sum())
    if total == 0:
        return 1.0
    return float(np.count_nonzero(coverage.cells.astype(bool) & reachable)) / total
