"""Ground-truth world, unicycle kinematics, lidar and perception noise."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels

FINE_RESOLUTION = 0.0375
MOTION_SUBSTEPS = 5


@dataclass(frozen=True)
class GridSpec:
    """Regular grid: cell (ix, iy) spans [ox + ix*res, ox + (ix+1)*res) in x, likewise in y.

    Arrays built on a spec are indexed ``[iy, ix]`` with row 0 at the bottom.
    """

    resolution: float
    width: int
    height: int
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("grid must have at least one cell per side")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def size_m(self) -> tuple[float, float]:
        return (self.width * self.resolution, self.height * self.resolution)

    def world_to_cell(self, x, y):
        ix = np.floor((np.asarray(x) - self.origin[0]) / self.resolution).astype(np.int64)
        iy = np.floor((np.asarray(y) - self.origin[1]) / self.resolution).astype(np.int64)
        if ix.ndim == 0:
            return int(ix), int(iy)
        return ix, iy

    def cell_center(self, ix, iy):
        x = self.origin[0] + (np.asarray(ix) + 0.5) * self.resolution
        y = self.origin[1] + (np.asarray(iy) + 0.5) * self.resolution
        if np.ndim(x) == 0:
            return float(x), float(y)
        return x, y

    def contains(self, x: float, y: float) -> bool:
        ix, iy = self.world_to_cell(x, y)
        return 0 <= ix < self.width and 0 <= iy < self.height

    def to_json(self) -> dict:
        return {"resolution": self.resolution, "width": self.width, "height": self.height,
                "origin": list(self.origin)}


@dataclass
class WorldMap:
    spec: GridSpec
    obstacle: np.ndarray  # uint8 [H, W], 1 = obstacle
    name: str = "world"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.obstacle = np.ascontiguousarray(self.obstacle, dtype=np.uint8)
        if self.obstacle.shape != self.spec.shape:
            raise ValueError(f"obstacle array {self.obstacle.shape} does not match spec {self.spec.shape}")

    @classmethod
    def empty(cls, side_m: float, resolution: float = FINE_RESOLUTION, name: str = "empty") -> "WorldMap":
        """Square bounded world of side ``side_m`` with a one-cell obstacle border."""
        n = max(3, int(round(side_m / resolution)))
        grid = np.zeros((n, n), dtype=np.uint8)
        add_border(grid)
        return cls(GridSpec(resolution, n, n), grid, name=name)

    @property
    def free(self) -> np.ndarray:
        return self.obstacle == 0

    def is_bounded(self) -> bool:
        g = self.obstacle
        return bool(g[0, :].all() and g[-1, :].all() and g[:, 0].all() and g[:, -1].all())

    def copy(self) -> "WorldMap":
        return WorldMap(self.spec, self.obstacle.copy(), self.name, dict(self.meta))


def add_border(grid: np.ndarray) -> None:
    grid[0, :] = 1
    grid[-1, :] = 1
    grid[:, 0] = 1
    grid[:, -1] = 1


def wrap_angle(theta: float) -> float:
    """Map an angle to (-pi, pi]."""
    t = math.fmod(theta, 2.0 * math.pi)
    if t <= -math.pi:
        t += 2.0 * math.pi
    elif t > math.pi:
        t -= 2.0 * math.pi
    return t


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))


@dataclass(frozen=True)
class TaskProfile:
    name: str
    coverage_radius: float
    agent_radius: float
    v_max: float
    omega_max: float
    dt: float
    lidar_rays: int
    lidar_range: float
    lidar_fov: float
    coverage_fov: float | None = None  # defaults to the lidar field of view

    def __post_init__(self):
        for key in ("coverage_radius", "agent_radius", "v_max", "omega_max", "dt", "lidar_range"):
            if not getattr(self, key) > 0:
                raise ValueError(f"{key} must be positive")
        if self.lidar_rays < 1:
            raise ValueError("lidar_rays must be positive")
        if not 0 < self.lidar_fov <= 2 * math.pi + 1e-12:
            raise ValueError("lidar_fov must lie in (0, 2*pi]")

    @property
    def view_fov(self) -> float:
        return self.lidar_fov if self.coverage_fov is None else self.coverage_fov

    def with_overrides(self, **kw) -> "TaskProfile":
        return replace(self, **kw)


PROFILES = {
    "explore-omni": TaskProfile("explore-omni", 7.0, 0.08, 0.5, 1.0, 0.5, 20, 7.0, 2 * math.pi),
    "explore-dir": TaskProfile("explore-dir", 3.5, 0.15, 0.26, 1.0, 0.5, 24, 3.5, math.pi),
    "mow": TaskProfile("mow", 0.15, 0.15, 0.26, 1.0, 0.5, 24, 3.5, math.pi),
}


def get_profile(name: str) -> TaskProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


@dataclass(frozen=True)
class Action:
    v_norm: float
    omega_norm: float

    def __post_init__(self):
        object.__setattr__(self, "v_norm", float(np.clip(self.v_norm, -1.0, 1.0)))
        object.__setattr__(self, "omega_norm", float(np.clip(self.omega_norm, -1.0, 1.0)))


class NoiseModel:
    """Gaussian perception noise on position, heading and lidar ranges.

    Each model owns a counter-based (Philox) generator, so two models built
    with the same seed produce the same noise sequence.
    """

    def __init__(self, sigma_pos=0.0, sigma_heading=0.0, sigma_lidar=0.0, seed=0):
        if min(sigma_pos, sigma_heading, sigma_lidar) < 0:
            raise ValueError("noise sigmas must be non-negative")
        self.sigma_pos = float(sigma_pos)
        self.sigma_heading = float(sigma_heading)
        self.sigma_lidar = float(sigma_lidar)
        self.seed = seed
        self.rng = np.random.Generator(np.random.Philox(seed))

    @property
    def is_zero(self) -> bool:
        return self.sigma_pos == 0 and self.sigma_heading == 0 and self.sigma_lidar == 0

    def __repr__(self):
        return (f"NoiseModel(sigma_pos={self.sigma_pos}, sigma_heading={self.sigma_heading}, "
                f"sigma_lidar={self.sigma_lidar}, seed={self.seed})")


# (position m, heading rad, lidar m); level 0 is noise-free
NOISE_LEVELS = {
    0: (0.0, 0.0, 0.0),
    1: (0.01, 0.05, 0.05),
    2: (0.02, 0.1, 0.1),
    3: (0.05, 0.2, 0.2),
}


def noise_level(level: int, seed: int = 0) -> NoiseModel:
    if level not in NOISE_LEVELS:
        raise ValueError(f"noise level must be one of {sorted(NOISE_LEVELS)}")
    return NoiseModel(*NOISE_LEVELS[level], seed=seed)


@dataclass
class LidarScan:
    ranges: np.ndarray
    rel_angles: np.ndarray  # ray angles relative to the heading
    heading: float

    @property
    def angles(self) -> np.ndarray:
        return self.heading + self.rel_angles


def relative_ray_angles(n: int, fov: float) -> np.ndarray:
    """Ray offsets centred on the heading; a full circle is split into n gaps, not n-1."""
    if n == 1:
        return np.zeros(1)
    k = np.arange(n)
    if fov >= 2 * math.pi - 1e-12:
        return fov * (k / n - 0.5)
    return fov * (k / (n - 1) - 0.5)


def ray_angles(theta: float, n: int, fov: float) -> np.ndarray:
    return theta + relative_ray_angles(n, fov)


def cast_ray(world: WorldMap, x: float, y: float, angle: float, max_range: float) -> float:
    """Distance from (x, y) to the first obstacle cell boundary along ``angle``."""
    s = world.spec
    d = kernels.raycast(world.obstacle, s.resolution, s.origin[0], s.origin[1], float(x), float(y),
                        np.array([math.cos(angle)]), np.array([math.sin(angle)]), float(max_range))
    return float(d[0])


def simulate_lidar(world: WorldMap, pose: Pose, profile: TaskProfile,
                   noise: NoiseModel | None = None) -> LidarScan:
    rel = relative_ray_angles(profile.lidar_rays, profile.lidar_fov)
    angles = pose.theta + rel
    s = world.spec
    ranges = kernels.raycast(world.obstacle, s.resolution, s.origin[0], s.origin[1], pose.x, pose.y,
                             np.cos(angles), np.sin(angles), profile.lidar_range)
    if noise is not None and noise.sigma_lidar > 0:
        ranges = ranges + noise.rng.normal(0.0, noise.sigma_lidar, size=ranges.shape)
        ranges = np.clip(ranges, 0.0, profile.lidar_range)
    return LidarScan(ranges, rel, pose.theta)


def collides(world: WorldMap, x: float, y: float, radius: float) -> bool:
    s = world.spec
    return bool(kernels.disk_collides(world.obstacle, s.resolution, s.origin[0], s.origin[1],
                                      float(x), float(y), float(radius)))


def integrate_motion(pose: Pose, action: Action, profile: TaskProfile, world: WorldMap,
                     substeps: int = MOTION_SUBSTEPS, visit=None):
    """Advance the unicycle over one time step with forward-Euler substeps.

    A substep whose translation would make the agent disk overlap an obstacle
    keeps only its rotation. ``visit(x, y, theta)`` is called after every
    substep (used to sweep coverage along the path).

    Returns ``(new_pose, collided, distance)``.
    """
    v = action.v_norm * profile.v_max
    w = action.omega_norm * profile.omega_max
    h = profile.dt / substeps
    x, y, th = pose.x, pose.y, pose.theta
    collided = False
    dist = 0.0
    for _ in range(substeps):
        nx = x + v * math.cos(th) * h
        ny = y + v * math.sin(th) * h
        if v != 0.0:
            if collides(world, nx, ny, profile.agent_radius):
                collided = True
            else:
                dist += math.hypot(nx - x, ny - y)
                x, y = nx, ny
        th = th + w * h
        if visit is not None:
            visit(x, y, th)
    return Pose(x, y, th), collided, dist


def perturb_pose(pose: Pose, noise: NoiseModel | None) -> Pose:
    """Pose as perceived by the agent; ground-truth dynamics never see this."""
    if noise is None or (noise.sigma_pos == 0 and noise.sigma_heading == 0):
        return pose
    dx, dy = noise.rng.normal(0.0, noise.sigma_pos, size=2) if noise.sigma_pos > 0 else (0.0, 0.0)
    dth = noise.rng.normal(0.0, noise.sigma_heading) if noise.sigma_heading > 0 else 0.0
    return Pose(pose.x + float(dx), pose.y + float(dy), pose.theta + float(dth))


# ---------------------------------------------------------------------------
# portable graymap IO

def write_pgm(path, image: np.ndarray, binary: bool = True) -> None:
    """Write an 8-bit graymap; ``image`` rows are stored top to bottom as given."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    path = Path(path)
    if binary:
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            f.write(image.tobytes())
    else:
        lines = [f"P2\n{w} {h}\n255"]
        lines += [" ".join(str(int(v)) for v in row) for row in image]
        path.write_text("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise ValueError(f"{path}: not a P2/P5 graymap")
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(data[start:pos]))
    w, h, maxval = tokens
    if magic == b"P5":
        pos += 1
        img = np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w)
    else:
        body = data[pos:].split(b"#")[0] if b"#" in data[pos:] else data[pos:]
        img = np.array(body.split(), dtype=np.int64)[: w * h].reshape(h, w)
    if maxval != 255:
        img = (img.astype(np.float64) * 255.0 / maxval).round()
    return img.astype(np.uint8)


def save_world(world: WorldMap, path, profile: str | None = None, start_poses=None) -> tuple[Path, Path]:
    """Store a world as ``<path>.pgm`` (0 obstacle, 255 free) plus a JSON sidecar."""
    path = Path(path)
    pgm = path.with_suffix(".pgm")
    image = np.where(world.obstacle[::-1] != 0, 0, 255).astype(np.uint8)
    write_pgm(pgm, image)
    side = {
        "meters_per_pixel": world.spec.resolution,
        "profile": profile,
        "start_poses": [[p.x, p.y, p.theta] if isinstance(p, Pose) else list(p) for p in (start_poses or [])],
        "name": world.name,
    }
    side.update({k: v for k, v in world.meta.items() if k not in side})
    js = path.with_suffix(".json")
    js.write_text(json.dumps(side, indent=2))
    return pgm, js


def load_world(path) -> tuple[WorldMap, dict]:
    """Load a graymap world (dark pixels are obstacles) and its optional JSON sidecar."""
    path = Path(path)
    pgm = path if path.suffix == ".pgm" else path.with_suffix(".pgm")
    if not pgm.exists():
        raise FileNotFoundError(pgm)
    img = read_pgm(pgm)
    js = pgm.with_suffix(".json")
    side = json.loads(js.read_text()) if js.exists() else {}
    res = float(side.get("meters_per_pixel", FINE_RESOLUTION))
    obstacle = (img[::-1] < 128).astype(np.uint8)
    h, w = obstacle.shape
    world = WorldMap(GridSpec(res, w, h), obstacle, name=side.get("name", pgm.stem), meta=side)
    return world, side
