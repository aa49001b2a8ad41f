"""Egocentric multi-scale observations backed by incrementally pooled pyramids.

Scale ``i`` (1-based) crops a square of side ``grid_size * fine_resolution * s**(i-1)``
centred on the agent with the heading pointing up (row 0 is straight ahead).
Coverage and obstacle channels read the pyramid level whose cell size equals
the output pixel size; the frontier channel forward-maps every fine frontier
point so that a coarse pixel is set exactly when it contains one.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gridworld import FINE_RESOLUTION, GridSpec, LidarScan, Pose

CHANNELS = ("coverage", "obstacle", "frontier")


@dataclass(frozen=True)
class EncoderConfig:
    m: int = 4
    s: int = 4
    grid_size: int = 32
    fine_resolution: float = FINE_RESOLUTION
    coarse_reducer: str = "mean"  # coverage/obstacle pooling: "mean" or "max"

    def __post_init__(self):
        if self.m < 1 or self.s < 1 or self.grid_size < 1:
            raise ValueError("m, s and grid_size must be positive")
        if self.coarse_reducer not in ("mean", "max"):
            raise ValueError("coarse_reducer must be 'mean' or 'max'")

    def factor(self, scale: int) -> int:
        """Fine cells per output pixel side at ``scale`` (1-based)."""
        return self.s ** (scale - 1)

    def side(self, scale: int) -> float:
        return self.grid_size * self.fine_resolution * self.factor(scale)

    def pixel_size(self, scale: int) -> float:
        return self.fine_resolution * self.factor(scale)

    @property
    def span(self) -> float:
        return self.side(self.m)

    @property
    def cells_per_observation(self) -> int:
        return len(CHANNELS) * self.m * self.grid_size ** 2


class PooledPyramid:
    """Per-level block counts of a binary fine grid.

    Level ``l`` (1-based) sums non-overlapping ``s**(l-1)`` blocks aligned
    with the grid origin. Counts are integers, so incremental updates are
    exact; ``mean`` divides by the full block area (outside the grid is 0).
    """

    def __init__(self, spec: GridSpec, m: int, s: int):
        self.spec = spec
        self.m = m
        self.s = s
        h, w = spec.shape
        self.levels = []
        for lvl in range(1, m + 1):
            f = s ** (lvl - 1)
            self.levels.append(np.zeros((-(-h // f), -(-w // f)), dtype=np.int32))
        # for max pooling of binary data a positive count means "any"

    def factor(self, level: int) -> int:
        return self.s ** (level - 1)

    def update(self, flat: np.ndarray, delta: int) -> None:
        """Add ``delta`` at every fine cell in ``flat`` (repeats accumulate)."""
        if flat.size == 0:
            return
        w = self.spec.width
        iy, ix = np.divmod(np.asarray(flat, dtype=np.int64), w)
        for lvl, arr in enumerate(self.levels, start=1):
            f = self.factor(lvl)
            np.add.at(arr, (iy // f, ix // f), delta)

    @classmethod
    def from_grid(cls, grid: np.ndarray, spec: GridSpec, m: int, s: int) -> "PooledPyramid":
        p = cls(spec, m, s)
        p.recompute(grid)
        return p

    def recompute(self, grid: np.ndarray) -> None:
        g = (np.asarray(grid) != 0).astype(np.int32)
        h, w = g.shape
        for lvl in range(1, self.m + 1):
            f = self.factor(lvl)
            hh, ww = -(-h // f), -(-w // f)
            pad = np.zeros((hh * f, ww * f), dtype=np.int32)
            pad[:h, :w] = g
            self.levels[lvl - 1][...] = pad.reshape(hh, f, ww, f).sum(axis=(1, 3))

    def mean(self, level: int) -> np.ndarray:
        f = self.factor(level)
        return self.levels[level - 1] / float(f * f)

    def equals(self, other: "PooledPyramid") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.levels, other.levels))


def update_pyramid(pyramid: PooledPyramid, added: np.ndarray, removed: np.ndarray | None = None) -> PooledPyramid:
    pyramid.update(np.asarray(added, dtype=np.int64), +1)
    if removed is not None:
        pyramid.update(np.asarray(removed, dtype=np.int64), -1)
    return pyramid


# ---------------------------------------------------------------------------
# agent-frame geometry

def _pixel_offsets(config: EncoderConfig, scale: int):
    """Agent-frame (forward, lateral) coordinates of every output pixel centre."""
    g = config.grid_size
    p = config.pixel_size(scale)
    rows, cols = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    forward = (g / 2.0 - rows - 0.5) * p
    lateral = (cols - g / 2.0 + 0.5) * p
    return forward, lateral


def world_to_pixel(px, py, pose: Pose, config: EncoderConfig, scale: int):
    """Map world points to (row, col) pixel indices at ``scale``; may fall outside [0, grid)."""
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    dx = np.asarray(px) - pose.x
    dy = np.asarray(py) - pose.y
    forward = dx * c + dy * s
    lateral = dx * s - dy * c
    p = config.pixel_size(scale)
    g = config.grid_size
    col = np.floor(lateral / p + g / 2.0).astype(np.int64)
    row = np.floor(g / 2.0 - forward / p).astype(np.int64)
    return row, col


def extract_egocentric(global_grid: np.ndarray, spec: GridSpec, pose: Pose, scale: int,
                       config: EncoderConfig, reducer: str = "mean") -> np.ndarray:
    """Reference crop: reduce all fine cells whose centres fall in each rotated pixel.

    With ``mean``, a pixel that contains no cell centre takes the value of
    the cell under the pixel centre; ``max`` is pure existence, so such a
    pixel stays 0.
    Cells beyond the allocated grid count as 0. Cost grows with the crop
    area, so this is meant for verification, not for stepping episodes.
    """
    g = config.grid_size
    res = spec.resolution
    half = config.side(scale) * math.sqrt(0.5) + res
    ox, oy = spec.origin
    ix = np.arange(math.floor((pose.x - half - ox) / res), math.floor((pose.x + half - ox) / res) + 1)
    iy = np.arange(math.floor((pose.y - half - oy) / res), math.floor((pose.y + half - oy) / res) + 1)
    IY, IX = np.meshgrid(iy, ix, indexing="ij")
    IX = IX.ravel()
    IY = IY.ravel()
    cx = ox + (IX + 0.5) * res
    cy = oy + (IY + 0.5) * res
    row, col = world_to_pixel(cx, cy, pose, config, scale)
    inside = (row >= 0) & (row < g) & (col >= 0) & (col < g)
    IX, IY, row, col = IX[inside], IY[inside], row[inside], col[inside]
    h, w = global_grid.shape
    inb = (IX >= 0) & (IX < w) & (IY >= 0) & (IY < h)
    vals = np.zeros(IX.size, dtype=np.float64)
    vals[inb] = global_grid[IY[inb], IX[inb]]
    pix = row * g + col
    counts = np.bincount(pix, minlength=g * g)
    if reducer == "mean":
        sums = np.bincount(pix, weights=vals, minlength=g * g)
        out = np.divide(sums, counts, out=np.zeros(g * g), where=counts > 0)
    elif reducer == "max":
        out = np.zeros(g * g)
        np.maximum.at(out, pix, vals)
    else:
        raise ValueError("reducer must be 'mean' or 'max'")
    empty = np.flatnonzero(counts == 0)
    if empty.size and reducer == "mean":
        # a rotated pixel smaller than a cell may hold no cell centre: read the cell under its centre
        fwd, lat = _pixel_offsets(config, scale)
        c, s = math.cos(pose.theta), math.sin(pose.theta)
        wx = pose.x + fwd.ravel()[empty] * c + lat.ravel()[empty] * s
        wy = pose.y + fwd.ravel()[empty] * s - lat.ravel()[empty] * c
        jx = np.floor((wx - ox) / res).astype(np.int64)
        jy = np.floor((wy - oy) / res).astype(np.int64)
        ok = (jx >= 0) & (jx < w) & (jy >= 0) & (jy < h)
        out[empty[ok]] = global_grid[jy[ok], jx[ok]]
    return out.reshape(g, g)


def sample_pyramid(pyramid: PooledPyramid, pose: Pose, scale: int, config: EncoderConfig,
                   reducer: str = "mean", offsets=None) -> np.ndarray:
    """Nearest-cell sampling of pyramid level ``scale`` at the rotated pixel centres."""
    forward, lateral = offsets if offsets is not None else _pixel_offsets(config, scale)
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    wx = pose.x + forward * c + lateral * s
    wy = pose.y + forward * s - lateral * c
    spec = pyramid.spec
    f = pyramid.factor(scale)
    level = pyramid.levels[scale - 1]
    kx = np.floor((wx - spec.origin[0]) / spec.resolution / f).astype(np.int64)
    ky = np.floor((wy - spec.origin[1]) / spec.resolution / f).astype(np.int64)
    hh, ww = level.shape
    ok = (kx >= 0) & (kx < ww) & (ky >= 0) & (ky < hh)
    out = np.zeros(kx.shape, dtype=np.float64)
    vals = level[ky[ok], kx[ok]]
    if reducer == "mean":
        out[ok] = vals / float(f * f)
    else:
        out[ok] = (vals > 0).astype(np.float64)
    return out


def forward_map_points(points_xy: tuple[np.ndarray, np.ndarray], pose: Pose, scale: int,
                       config: EncoderConfig) -> np.ndarray:
    """Binary grid with a 1 wherever at least one point lands."""
    g = config.grid_size
    out = np.zeros((g, g), dtype=np.float64)
    px, py = points_xy
    if np.size(px) == 0:
        return out
    row, col = world_to_pixel(px, py, pose, config, scale)
    ok = (row >= 0) & (row < g) & (col >= 0) & (col < g)
    out[row[ok], col[ok]] = 1.0
    return out


@dataclass
class Observation:
    coverage: np.ndarray  # (m, g, g)
    obstacle: np.ndarray  # (m, g, g)
    frontier: np.ndarray  # (m, g, g)
    lidar: np.ndarray     # (n_rays,)

    @property
    def maps(self) -> np.ndarray:
        """Channel-major stack: coverage 1..m, obstacle 1..m, frontier 1..m."""
        return np.concatenate([self.coverage, self.obstacle, self.frontier], axis=0)

    def to_flat(self) -> np.ndarray:
        return np.concatenate([self.maps.ravel(), self.lidar.ravel()])

    def shape_header(self) -> dict:
        m, g, _ = self.coverage.shape
        return {"format": "cpprl-observation/1", "m": m, "grid_size": g, "lidar_rays": int(self.lidar.size),
                "order": ["coverage", "obstacle", "frontier", "lidar"], "dtype": "<f4"}

    @classmethod
    def from_flat(cls, flat: np.ndarray, m: int, grid_size: int, lidar_rays: int) -> "Observation":
        flat = np.asarray(flat)
        n_map = 3 * m * grid_size * grid_size
        if flat.size != n_map + lidar_rays:
            raise ValueError(f"expected {n_map + lidar_rays} values, got {flat.size}")
        maps = flat[:n_map].reshape(3, m, grid_size, grid_size)
        return cls(maps[0].copy(), maps[1].copy(), maps[2].copy(), flat[n_map:].copy())

    def save(self, path) -> None:
        header = json.dumps(self.shape_header()).encode()
        with open(path, "wb") as f:
            f.write(header + b"\n")
            f.write(self.to_flat().astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "Observation":
        data = Path(path).read_bytes()
        line, _, body = data.partition(b"\n")
        head = json.loads(line)
        flat = np.frombuffer(body, dtype=head["dtype"]).astype(np.float64)
        return cls.from_flat(flat, head["m"], head["grid_size"], head["lidar_rays"])


class EncoderState:
    """Pyramids and frontier point set for one episode (single writer)."""

    def __init__(self, spec: GridSpec, config: EncoderConfig):
        if not math.isclose(spec.resolution, config.fine_resolution):
            raise ValueError("world resolution must equal the encoder's fine resolution")
        self.spec = spec
        self.config = config
        self.coverage = PooledPyramid(spec, config.m, config.s)
        self.obstacle = PooledPyramid(spec, config.m, config.s)
        self.frontier = PooledPyramid(spec, config.m, config.s)
        self.frontier_points: set[int] = set()
        self._offsets = [_pixel_offsets(config, i) for i in range(1, config.m + 1)]

    def add_coverage(self, flat: np.ndarray) -> None:
        self.coverage.update(flat, +1)

    def add_obstacles(self, flat: np.ndarray) -> None:
        self.obstacle.update(flat, +1)

    def change_frontier(self, added: np.ndarray, removed: np.ndarray) -> None:
        self.frontier.update(added, +1)
        self.frontier.update(removed, -1)
        self.frontier_points.update(added.tolist())
        self.frontier_points.difference_update(removed.tolist())

    def frontier_xy(self):
        if not self.frontier_points:
            return np.empty(0), np.empty(0)
        flat = np.fromiter(self.frontier_points, dtype=np.int64, count=len(self.frontier_points))
        iy, ix = np.divmod(flat, self.spec.width)
        return self.spec.cell_center(ix, iy)


def build_observation(state: EncoderState, pose: Pose, scan: LidarScan, lidar_range: float) -> Observation:
    cfg = state.config
    g = cfg.grid_size
    cov = np.empty((cfg.m, g, g))
    obs = np.empty((cfg.m, g, g))
    fro = np.empty((cfg.m, g, g))
    pts = state.frontier_xy()
    for i in range(1, cfg.m + 1):
        off = state._offsets[i - 1]
        cov[i - 1] = sample_pyramid(state.coverage, pose, i, cfg, cfg.coarse_reducer, off)
        obs[i - 1] = sample_pyramid(state.obstacle, pose, i, cfg, cfg.coarse_reducer, off)
        fro[i - 1] = forward_map_points(pts, pose, i, cfg)
    lidar = np.clip(np.asarray(scan.ranges, dtype=np.float64) / lidar_range, 0.0, 1.0)
    return Observation(cov, obs, fro, lidar)
