"""Procedural maps (floor plans, circular obstacles), difficulty tiers and the training curriculum."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import ndimage

from .gridworld import FINE_RESOLUTION, GridSpec, Pose, WorldMap, add_border
from .mapping import clearance_mask

log = logging.getLogger(__name__)

TASK_SIDES = {"mow": (2.4, 7.5), "explore": (9.6, 15.0)}
# agent radius used for the connectivity check, per task (largest radius among its profiles)
TASK_RADIUS = {"mow": 0.15, "explore": 0.15}


def task_of(profile_name: str) -> str:
    return "mow" if profile_name.startswith("mow") else "explore"


@dataclass(frozen=True)
class GenParams:
    side_range: tuple[float, float] = TASK_SIDES["mow"]
    floorplan_prob: float = 0.7
    obstacle_prob: float = 0.7
    wall_keep_prob: float = 0.9
    room_side: tuple[float, float] = (1.5, 4.8)
    wall_thickness: tuple[float, float] = (0.075, 0.3)
    door_width: tuple[float, float] = (0.6, 1.2)
    obstacle_radius: float = 0.25
    obstacle_area: float = 4.0  # one candidate obstacle per this many square meters
    min_gap: float = 0.6
    resolution: float = FINE_RESOLUTION

    @classmethod
    def for_task(cls, task: str, **kw) -> "GenParams":
        if task not in TASK_SIDES:
            raise ValueError(f"unknown task {task!r}; expected one of {sorted(TASK_SIDES)}")
        return cls(side_range=TASK_SIDES[task], **kw)


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _cells(side: float, res: float) -> int:
    return max(3, int(round(side / res)))


def is_connected(world: WorldMap, radius: float) -> bool:
    """True when the disk-clear cells form one 4-connected component."""
    clear = clearance_mask(world.obstacle, radius, world.spec.resolution)
    _, n = ndimage.label(clear, structure=ndimage.generate_binary_structure(2, 1))
    return n == 1


# ---------------------------------------------------------------------------
# floor plans

@dataclass
class _Plan:
    n: int
    pitch: float
    thickness: float
    door: float
    vertical: list[bool]  # wall k between room columns k-1 and k, k = 1..n-1
    horizontal: list[bool]
    doors_v: dict = field(default_factory=dict)  # (k, row) -> door centre along y
    doors_h: dict = field(default_factory=dict)  # (k, col) -> door centre along x
    closed: set = field(default_factory=set)


def _draw_doors(plan: _Plan, rng: np.random.Generator) -> None:
    half = plan.thickness / 2
    plan.doors_v.clear()
    plan.doors_h.clear()
    for doors in (plan.doors_v, plan.doors_h):
        for k in range(1, plan.n):
            for j in range(plan.n):
                lo = j * plan.pitch + (half if j > 0 else 0.0)
                hi = (j + 1) * plan.pitch - (half if j < plan.n - 1 else 0.0)
                if hi - lo <= plan.door:
                    doors[(k, j)] = (lo + hi) / 2
                else:
                    doors[(k, j)] = float(rng.uniform(lo + plan.door / 2, hi - plan.door / 2))


def _rasterize(plan: _Plan, side: float, res: float) -> np.ndarray:
    n_cells = _cells(side, res)
    grid = np.zeros((n_cells, n_cells), dtype=np.uint8)
    centers = (np.arange(n_cells) + 0.5) * res
    half = plan.thickness / 2
    for k in range(1, plan.n):
        pos = k * plan.pitch
        band = np.abs(centers - pos) <= half
        if plan.vertical[k - 1]:
            grid[:, band] = 1
            for j in range(plan.n):
                if ("v", k, j) in plan.closed:
                    continue
                c = plan.doors_v[(k, j)]
                rows = np.abs(centers - c) <= plan.door / 2
                grid[np.ix_(rows, band)] = 0
        if plan.horizontal[k - 1]:
            grid[band, :] = 1
            for j in range(plan.n):
                if ("h", k, j) in plan.closed:
                    continue
                c = plan.doors_h[(k, j)]
                cols = np.abs(centers - c) <= plan.door / 2
                grid[np.ix_(band, cols)] = 0
    # keep wall crossings solid where both walls exist
    for kv in range(1, plan.n):
        for kh in range(1, plan.n):
            if plan.vertical[kv - 1] and plan.horizontal[kh - 1]:
                bx = np.abs(centers - kv * plan.pitch) <= half
                by = np.abs(centers - kh * plan.pitch) <= half
                grid[np.ix_(by, bx)] = 1
    add_border(grid)
    return grid


def generate_floorplan(seed, params: GenParams | None = None, side: float | None = None,
                       radius: float = 0.15) -> WorldMap:
    """Grid of equal square rooms joined by doors; some walls dropped, one door per wall of one
    orientation closed. Connectivity is checked by flood fill and repaired if needed."""
    params = params or GenParams()
    rng = _rng(seed)
    if side is None:
        side = float(rng.uniform(*params.side_range))
    res = params.resolution
    room = float(rng.uniform(*params.room_side))
    thick = float(rng.uniform(*params.wall_thickness))
    door = float(rng.uniform(*params.door_width))
    n = int(side // room)
    n_cells = _cells(side, res)
    meta = {"generator": "floorplan", "seed": _seed_json(seed), "side": side, "room_side": room,
            "wall_thickness": thick, "door_width": door, "floorplan": True, "obstacles": False}
    if n < 2:
        grid = np.zeros((n_cells, n_cells), dtype=np.uint8)
        add_border(grid)
        return WorldMap(GridSpec(res, n_cells, n_cells), grid, name=f"floorplan-{_seed_json(seed)}", meta=meta)
    plan = _Plan(n, side / n, thick, door,
                 [bool(rng.random() < params.wall_keep_prob) for _ in range(n - 1)],
                 [bool(rng.random() < params.wall_keep_prob) for _ in range(n - 1)])
    orient = "v" if rng.random() < 0.5 else "h"
    walls = plan.vertical if orient == "v" else plan.horizontal
    close_rows = [int(rng.integers(n)) for _ in range(n - 1)]
    spec = GridSpec(res, n_cells, n_cells)
    world = None
    for attempt in range(11):
        _draw_doors(plan, rng)
        plan.closed = {(orient, k, close_rows[k - 1]) for k in range(1, n) if walls[k - 1]}
        if attempt == 10:
            # doors redrawn ten times without success: reopen the closed openings
            plan.closed = set()
        world = WorldMap(spec, _rasterize(plan, side, res), name=f"floorplan-{_seed_json(seed)}", meta=meta)
        if is_connected(world, radius):
            break
        log.debug("floorplan seed %s attempt %d not connected", seed, attempt)
    meta.update({"rooms": n, "vertical_walls": plan.vertical, "horizontal_walls": plan.horizontal,
                 "closed_openings": sorted([list(c) for c in plan.closed])})
    return world


# ---------------------------------------------------------------------------
# circular obstacles

def scatter_obstacles(seed, world: WorldMap, params: GenParams | None = None) -> WorldMap:
    """Drop ``floor(area / 4 m^2)`` disk candidates; keep those whose surface is at least
    ``min_gap`` from every wall and earlier disk."""
    params = params or GenParams()
    rng = _rng(seed)
    spec = world.spec
    res = spec.resolution
    w_m, h_m = spec.size_m
    n_cand = int(math.floor(w_m * h_m / params.obstacle_area + 1e-9))
    r = params.obstacle_radius
    # distance from each cell centre to the nearest wall cell boundary (conservative by half a diagonal)
    edt = ndimage.distance_transform_edt(world.obstacle == 0) * res - res * math.sqrt(2) / 2
    grid = world.obstacle.copy()
    centers: list[tuple[float, float]] = []
    ys = (np.arange(spec.height) + 0.5) * res
    xs = (np.arange(spec.width) + 0.5) * res
    for _ in range(n_cand):
        x, y = float(rng.uniform(0, w_m)), float(rng.uniform(0, h_m))
        ix, iy = spec.world_to_cell(x, y)
        # bilinear-safe: use the worst (min) clearance of the 2x2 neighbourhood around the point
        nb = edt[max(iy - 1, 0):iy + 2, max(ix - 1, 0):ix + 2]
        wall_gap = float(nb.min()) - res - r
        if wall_gap < params.min_gap:
            continue
        if any(math.hypot(x - cx, y - cy) - 2 * r < params.min_gap for cx, cy in centers):
            continue
        centers.append((x, y))
        my = np.abs(ys - y) <= r + res
        mx = np.abs(xs - x) <= r + res
        sub_y, sub_x = np.nonzero(my)[0], np.nonzero(mx)[0]
        yy, xx = np.meshgrid(ys[sub_y], xs[sub_x], indexing="ij")
        disk = (yy - y) ** 2 + (xx - x) ** 2 <= r * r
        grid[np.ix_(sub_y, sub_x)] |= disk.astype(np.uint8)
    meta = dict(world.meta)
    meta.update({"obstacles": bool(centers) or meta.get("obstacles", False), "obstacle_centers": centers,
                 "obstacle_radius": r, "obstacle_candidates": n_cand})
    return WorldMap(spec, grid, name=world.name, meta=meta)


def _seed_json(seed):
    return list(seed) if isinstance(seed, (tuple, list)) else int(seed)


def generate_random_map(seed, task: str = "mow", params: GenParams | None = None) -> WorldMap:
    """Random side from the task range; floor plan and obstacles each with their own probability."""
    params = params or GenParams.for_task(task)
    rng = _rng(seed)
    side = float(rng.uniform(*params.side_range))
    side = min(max(side, params.side_range[0]), params.side_range[1])
    use_plan = bool(rng.random() < params.floorplan_prob)
    use_obst = bool(rng.random() < params.obstacle_prob)
    sub = rng.integers(0, 2 ** 63, size=2)
    radius = TASK_RADIUS.get(task, 0.15)
    if use_plan:
        world = generate_floorplan(int(sub[0]), params, side, radius=radius)
    else:
        world = WorldMap.empty(side, params.resolution)
        world.meta = {"generator": "empty", "side": side, "floorplan": False, "obstacles": False}
    world.meta["floorplan"] = use_plan
    if use_obst:
        world = scatter_obstacles(int(sub[1]), world, params)
    world.meta.update({"task": task, "seed": _seed_json(seed), "side": side, "floorplan": use_plan,
                       "obstacles_drawn": use_obst, "floorplan_seed": int(sub[0]), "obstacle_seed": int(sub[1])})
    tag = "-".join(str(v) for v in seed) if isinstance(seed, (tuple, list)) else str(int(seed))
    world.name = f"random-{task}-{tag}"
    return world


# ---------------------------------------------------------------------------
# tiers and levels

@lru_cache(maxsize=1)
def load_tables() -> dict:
    """Tier presets and curriculum level tables shipped with the package."""
    text = resources.files("cpprl").joinpath("data/tiers.json").read_text()
    return json.loads(text)


@dataclass(frozen=True)
class MapTier:
    tier: int
    size: tuple[float, float]
    features: str
    seeds: tuple[int, ...]

    @property
    def clutter(self) -> int:
        return load_tables()["clutter_order"].index(self.features)


@dataclass(frozen=True)
class CurriculumLevel:
    level: int
    tiers: tuple[int, ...]
    random_maps: bool
    goal_coverage: float


def tiers(task: str) -> list[MapTier]:
    t = load_tables()["tiers"][task]
    return [MapTier(e["tier"], tuple(e["size"]), e["features"], tuple(e["seeds"])) for e in t]


def levels(task: str) -> list[CurriculumLevel]:
    return [CurriculumLevel(e["level"], tuple(e["tiers"]), bool(e["random_maps"]), float(e["goal_coverage"]))
            for e in load_tables()["levels"][task]]


def tier_map(task: str, tier: int, index: int) -> WorldMap:
    """Fixed training map ``index`` of ``tier``; a pure function of the pinned seed."""
    t = tiers(task)[tier]
    seed = t.seeds[index]
    rng = _rng(seed)
    side = float(rng.uniform(*t.size))
    base = GenParams.for_task(task)
    radius = TASK_RADIUS[task]
    sub = rng.integers(0, 2 ** 63, size=2)
    feat = t.features
    if feat in ("empty", "obstacles"):
        world = WorldMap.empty(side, base.resolution)
        world.meta = {"generator": "empty", "side": side, "floorplan": False, "obstacles": False}
    elif feat == "simple_walls":
        world = generate_floorplan(int(sub[0]), replace(base, room_side=(side / 2.0, side / 2.0)), side, radius)
    else:
        world = generate_floorplan(int(sub[0]), replace(base, room_side=(1.5, max(1.5, side / 2.0))), side, radius)
    if feat in ("obstacles", "cluttered"):
        world = scatter_obstacles(int(sub[1]), world, base)
    world.name = f"{task}-tier{tier}-{index}"
    world.meta.update({"task": task, "tier": tier, "index": index, "seed": seed, "features": feat})
    return world


# ---------------------------------------------------------------------------
# curriculum

RANDOM_FLOORPLAN, RANDOM_OBSTACLES = "random:floorplan", "random:obstacles"


@dataclass
class CurriculumState:
    task: str = "mow"
    level: int = 1
    # best goal coverage reached per map id; persisted over the whole run
    completed: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"task": self.task, "level": self.level, "completed": self.completed}


def level_maps(task: str, level: int) -> list[str]:
    lv = levels(task)[level - 1]
    out = []
    for t in lv.tiers:
        out += [f"{task}-tier{t}-{i}" for i in range(len(tiers(task)[t].seeds))]
    return out


def _done(state: CurriculumState, key: str, goal: float) -> bool:
    return state.completed.get(key, 0.0) >= goal - 1e-12


def level_complete(state: CurriculumState) -> bool:
    lv = levels(state.task)[state.level - 1]
    if not all(_done(state, m, lv.goal_coverage) for m in level_maps(state.task, state.level)):
        return False
    if lv.random_maps:
        return _done(state, RANDOM_FLOORPLAN, lv.goal_coverage) and _done(state, RANDOM_OBSTACLES, lv.goal_coverage)
    return True


def curriculum_step(state: CurriculumState, result: dict) -> CurriculumLevel:
    """Record ``{"map_id", "reached_goal", "goal_coverage"?, "floorplan"?, "obstacles"?}``; maybe advance."""
    lv_table = levels(state.task)
    lv = lv_table[state.level - 1]
    if result.get("reached_goal"):
        goal = float(result.get("goal_coverage", lv.goal_coverage))
        keys = [result["map_id"]]
        if str(result["map_id"]).startswith("random"):
            keys = []
            if result.get("floorplan"):
                keys.append(RANDOM_FLOORPLAN)
            if result.get("obstacles"):
                keys.append(RANDOM_OBSTACLES)
        for k in keys:
            state.completed[k] = max(state.completed.get(k, 0.0), goal)
    while state.level < len(lv_table) and level_complete(state):
        state.level += 1
    return lv_table[state.level - 1]


class Curriculum:
    """Episode source for training: picks maps per level and advances on completion."""

    def __init__(self, task: str = "mow", state: CurriculumState | None = None, seed: int = 0):
        self.task = task
        self.state = state or CurriculumState(task)
        self._cache: dict[str, WorldMap] = {}
        self._seed = seed
        self._n_random = 0

    @property
    def level(self) -> CurriculumLevel:
        return levels(self.task)[self.state.level - 1]

    def fixed_map(self, map_id: str) -> WorldMap:
        if map_id not in self._cache:
            _, tier, idx = map_id.rsplit("-", 2)
            self._cache[map_id] = tier_map(self.task, int(tier[4:]), int(idx))
        return self._cache[map_id]

    def select(self, rng: np.random.Generator) -> tuple[str, WorldMap]:
        lv = self.level
        if lv.random_maps and rng.random() < 0.5:
            seed = (self._seed, self._n_random, int(rng.integers(2 ** 31)))
            self._n_random += 1
            world = generate_random_map(seed, self.task)
            return world.name, world
        ids = level_maps(self.task, self.state.level)
        mid = ids[int(rng.integers(len(ids)))]
        return mid, self.fixed_map(mid)

    def next_episode(self, rng: np.random.Generator, radius: float):
        from .env import random_start
        from .sac import EpisodeSpec
        mid, world = self.select(rng)
        lv = self.level
        return EpisodeSpec(world, random_start(world, radius, rng), lv.goal_coverage, mid, lv.level)

    def report(self, spec, reached_goal: bool) -> None:
        meta = spec.world.meta
        curriculum_step(self.state, {"map_id": spec.map_id, "reached_goal": reached_goal,
                                     "goal_coverage": spec.goal_coverage,
                                     "floorplan": meta.get("floorplan", False),
                                     "obstacles": bool(meta.get("obstacle_centers"))})


def select_episode_map(level: int, seed, task: str = "mow", radius: float = 0.15,
                       curriculum: Curriculum | None = None) -> tuple[WorldMap, Pose, str]:
    """Map for one episode at ``level`` plus a collision-free start pose."""
    from .env import random_start
    cur = curriculum or Curriculum(task, CurriculumState(task, level))
    rng = _rng(seed)
    mid, world = cur.select(rng)
    return world, random_start(world, radius, rng), mid


def export_maps(out_dir, worlds, profile: str | None = None) -> list[Path]:
    from .gridworld import save_world
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for w in worlds:
        pgm, _ = save_world(w, out / w.name, profile=profile)
        paths.append(pgm)
    return paths


__all__ = ["GenParams", "MapTier", "CurriculumLevel", "CurriculumState", "Curriculum", "generate_floorplan",
           "scatter_obstacles", "generate_random_map", "tiers", "levels", "tier_map", "curriculum_step",
           "select_episode_map", "is_connected", "level_maps", "load_tables", "export_maps"]
