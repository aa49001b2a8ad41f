"""Coverage environment: motion, sensing, mapping, observation and reward in one step."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gridworld import (Action, NoiseModel, Pose, TaskProfile, WorldMap, get_profile, integrate_motion,
                        noise_level, perturb_pose, simulate_lidar)
from .mapping import (CoverageGrid, KnownMap, clearance_mask, cover_at, frontier_mask, reachable_mask,
                      update_frontier, update_known_map)
from .obs_encoder import EncoderConfig, EncoderState, Observation, build_observation
from .rewards import (GOAL, RUNNING, TRUNCATED, EpisodeStatus, RewardBreakdown, RewardParams, TVTracker,
                      check_termination, step_reward)

MAX_STEPS = "max_steps"


@dataclass
class EnvConfig:
    profile: TaskProfile = field(default_factory=lambda: get_profile("mow"))
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    rewards: RewardParams | None = None
    goal_coverage: float = 0.99
    tau: int = 1000
    max_steps: int | None = None
    noise_level: int = 0
    use_frontier: bool = True  # ablation switch: zero the frontier channel
    observe: bool = True  # planners that ignore observations can skip building them

    def reward_params(self) -> RewardParams:
        return self.rewards if self.rewards is not None else RewardParams.for_profile(self.profile)


@dataclass
class StepResult:
    obs: Observation
    reward: RewardBreakdown
    done: bool
    reason: str
    info: dict


def random_start(world: WorldMap, radius: float, rng: np.random.Generator, clearance=None) -> Pose:
    """Uniform over disk-clear cells of the largest clear component, random heading."""
    from scipy import ndimage
    if clearance is None:
        clearance = clearance_mask(world.obstacle, radius, world.spec.resolution)
    labels, n = ndimage.label(clearance, structure=ndimage.generate_binary_structure(2, 1))
    if n == 0:
        raise ValueError("world has no collision-free cell for this agent radius")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    cells = np.flatnonzero(labels.ravel() == int(np.argmax(sizes)))
    c = int(cells[rng.integers(cells.size)])
    iy, ix = divmod(c, world.spec.width)
    x, y = world.spec.cell_center(ix, iy)
    return Pose(x, y, float(rng.uniform(-math.pi, math.pi)))


class CoverageEnv:
    """One episode at a time on a given world.

    Coverage and collisions use the true pose; the lidar carries range
    noise and mapping plus the egocentric crops use the perturbed pose.
    """

    def __init__(self, config: EnvConfig | None = None, seed: int = 0):
        self.config = config or EnvConfig()
        self.profile = self.config.profile
        self.params = self.config.reward_params()
        self.seed = seed
        self.noise: NoiseModel = noise_level(self.config.noise_level, seed)
        self.world = None

    # -- episode lifecycle -------------------------------------------------
    def reset(self, world: WorldMap, start: Pose, goal_coverage: float | None = None) -> Observation:
        prof = self.profile
        self.world = world
        spec = world.spec
        self.pose = start
        self.t = 0
        self.known = KnownMap(spec)
        self.coverage = CoverageGrid(spec)
        self.enc = EncoderState(spec, self.config.encoder)
        clear = clearance_mask(world.obstacle, prof.agent_radius, spec.resolution)
        self.reachable = reachable_mask(world, prof.agent_radius, spec.world_to_cell(start.x, start.y), clear)
        self.reachable_flat = self.reachable.ravel()
        self.n_reachable = int(self.reachable.sum())
        self.n_reached = 0
        self.status = EpisodeStatus(goal_coverage=self.config.goal_coverage if goal_coverage is None else goal_coverage,
                                    tau=self.config.tau)
        self.frontier = np.zeros(spec.shape, dtype=bool)
        new = cover_at(self.coverage, world, start.x, start.y, start.theta, prof.coverage_radius, prof.view_fov)
        self.tv = TVTracker(self.coverage.cells, spec.resolution)
        self.total_distance = 0.0
        self.collisions = 0
        self._absorb(new, start)
        self.frontier[:] = frontier_mask(self.coverage.cells, self.known.cells)
        self.enc.frontier.recompute(self.frontier)
        self.enc.frontier_points = set(np.flatnonzero(self.frontier).tolist())
        self.last_obs = self._observe()
        return self.last_obs

    @property
    def covered_fraction(self) -> float:
        return 1.0 if self.n_reachable == 0 else self.n_reached / self.n_reachable

    def _absorb(self, new_cov: np.ndarray, true_pose: Pose):
        """Sense at ``true_pose`` and fold new coverage and map cells into the encoder state."""
        prof = self.profile
        self.scan = simulate_lidar(self.world, true_pose, prof, self.noise)
        self.perceived = perturb_pose(true_pose, self.noise)
        free_new, obst_new = update_known_map(self.known, self.scan, self.perceived, prof.lidar_range)
        self.enc.add_coverage(new_cov)
        self.enc.add_obstacles(obst_new)
        self.n_reached += int(np.count_nonzero(self.reachable_flat[new_cov]))
        return obst_new

    def _observe(self) -> Observation | None:
        if not self.config.observe:
            return None
        obs = build_observation(self.enc, self.perceived, self.scan, self.profile.lidar_range)
        if not self.config.use_frontier:
            obs.frontier[:] = 0.0
        return obs

    def step(self, action: Action | np.ndarray) -> StepResult:
        if self.world is None:
            raise RuntimeError("call reset() before step()")
        if not isinstance(action, Action):
            action = Action(float(action[0]), float(action[1]))
        prof = self.profile
        world = self.world
        pieces = []

        def visit(x, y, th):
            pieces.append(cover_at(self.coverage, world, x, y, th, prof.coverage_radius, prof.view_fov))

        v_prev = self.tv.value
        pose, collided, dist = integrate_motion(self.pose, action, prof, world, visit=visit)
        self.pose = pose
        self.t += 1
        new = np.concatenate(pieces) if pieces else np.empty(0, dtype=np.int64)
        obst_new = self._absorb(new, pose)
        changed = np.concatenate([new, obst_new])
        added, removed = update_frontier(self.frontier, self.coverage.cells, self.known.cells, changed)
        self.enc.change_frontier(added, removed)
        v_t = self.tv.update(self.coverage.cells, new)
        a_new = new.size * world.spec.resolution ** 2
        reward = step_reward(a_new, v_t, v_prev, self.coverage.covered_area, collided, self.params, prof)
        self.total_distance += dist
        self.collisions += int(collided)
        self.status.record(new.size)
        reason = check_termination(self.status, self.covered_fraction)
        if reason == RUNNING and self.config.max_steps is not None and self.t >= self.config.max_steps:
            reason = MAX_STEPS
        obs = self._observe()
        self.last_obs = obs
        info = {"collided": collided, "distance": dist, "a_new": a_new, "coverage": self.covered_fraction,
                "tv": v_t, "pose": pose, "perceived": self.perceived}
        return StepResult(obs, reward, reason != RUNNING, reason, info)


EPISODE_FORMAT = "cpprl-episode/1"
STEP_COLUMNS = ["step", "t", "x", "y", "theta", "v", "omega", "coverage", "r_area", "r_tv_global",
                "r_tv_incremental", "r_collision", "r_constant", "r_total", "collided", "distance", "solver_time"]


@dataclass
class EpisodeLog:
    """Per-step trace of one episode plus a header (map id, seed, profile, policy id, ...).

    ``solver_time`` is the cumulative planner compute time in seconds up to that step.
    """
    header: dict = field(default_factory=dict)
    steps: list = field(default_factory=list)

    def record_start(self, pose: Pose, coverage: float) -> None:
        self.header["start"] = [pose.x, pose.y, pose.theta]
        self.header["start_coverage"] = coverage

    def record(self, env: "CoverageEnv", action: Action, res: StepResult, solver_time: float = 0.0) -> None:
        r = res.reward
        p = res.info["pose"]
        self.steps.append({"step": env.t, "t": env.t * env.profile.dt, "x": p.x, "y": p.y, "theta": p.theta,
                           "v": action.v_norm, "omega": action.omega_norm, "coverage": res.info["coverage"],
                           "r_area": r.area, "r_tv_global": r.tv_global, "r_tv_incremental": r.tv_incremental,
                           "r_collision": r.collision, "r_constant": r.constant, "r_total": r.total,
                           "collided": int(res.info["collided"]), "distance": res.info["distance"],
                           "solver_time": solver_time})

    def __len__(self) -> int:
        return len(self.steps)

    def column(self, name: str) -> np.ndarray:
        return np.array([s[name] for s in self.steps], dtype=np.float64)

    @property
    def final_coverage(self) -> float:
        if self.steps:
            return float(self.steps[-1]["coverage"])
        return float(self.header.get("start_coverage", 0.0))

    @property
    def duration(self) -> float:
        return float(self.steps[-1]["t"]) if self.steps else 0.0

    @property
    def path_length(self) -> float:
        return math.fsum(s["distance"] for s in self.steps)

    @property
    def collisions(self) -> int:
        return int(sum(s["collided"] for s in self.steps))

    @property
    def total_return(self) -> float:
        return math.fsum(s["r_total"] for s in self.steps)

    def to_csv(self, path) -> None:
        import csv
        import json
        with open(path, "w", newline="") as f:
            f.write(f"# format: {EPISODE_FORMAT}\n")
            for k in sorted(self.header):
                f.write(f"# {k}: {json.dumps(self.header[k], sort_keys=True)}\n")
            w = csv.writer(f)
            w.writerow(STEP_COLUMNS)
            for s in self.steps:
                w.writerow([repr(float(s[c])) if c not in ("step", "collided") else int(s[c]) for c in STEP_COLUMNS])

    @classmethod
    def from_csv(cls, path) -> "EpisodeLog":
        import csv
        import json
        header, lines = {}, []
        with open(path, newline="") as f:
            for line in f:
                if line.startswith("#"):
                    key, _, val = line[1:].strip().partition(": ")
                    if key != "format":
                        header[key] = json.loads(val)
                    elif val != EPISODE_FORMAT:
                        raise ValueError(f"{path}: unsupported episode format {val!r}")
                else:
                    lines.append(line)
        rows = list(csv.DictReader(lines))
        steps = [{c: (int(r[c]) if c in ("step", "collided") else float(r[c])) for c in STEP_COLUMNS} for r in rows]
        return cls(header, steps)


__all__ = ["CoverageEnv", "EnvConfig", "StepResult", "EpisodeLog", "STEP_COLUMNS", "random_start", "GOAL",
           "TRUNCATED", "RUNNING", "MAX_STEPS"]
