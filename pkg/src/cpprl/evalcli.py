"""Episode orchestration, metrics (T90/T99, collision rates), trajectory images and the command line."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .env import CoverageEnv, EnvConfig, EpisodeLog, random_start
from .gridworld import PROFILES, Action, Pose, WorldMap, get_profile, load_world
from .mapping import CoverageGrid, cover_at

log = logging.getLogger("cpprl")

SUMMARY_FORMAT = "cpprl-summary/1"
SUMMARY_COLUMNS = ["map", "episodes", "T90", "T99", "final_coverage", "collisions", "collisions_per_100s",
                   "collisions_per_100m", "path_length", "duration"]
TOTAL_COLUMNS = ("T90", "T99", "collisions", "path_length", "duration")
PLANNERS = ("bsa", "tsp-offline", "tsp-online", "frontier")


# ---------------------------------------------------------------------------
# metrics

@dataclass
class Metrics:
    T90: float | None
    T99: float | None
    collisions_per_100s: float
    collisions_per_100m: float | None
    final_coverage: float
    collisions: int = 0
    duration: float = 0.0
    path_length: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def time_to_coverage(log: EpisodeLog, x: float) -> float | None:
    """First time the coverage reaches ``x``, linear between the bracketing steps.

    The clock is ``t`` plus the cumulative planner time recorded with each step.
    """
    t_prev = 0.0
    c_prev = float(log.header.get("start_coverage", 0.0))
    if c_prev >= x:
        return 0.0
    for s in log.steps:
        t = s["t"] + s.get("solver_time", 0.0)
        c = s["coverage"]
        if c >= x:
            if c == c_prev:
                return t
            return t_prev + (x - c_prev) / (c - c_prev) * (t - t_prev)
        t_prev, c_prev = t, c
    return None


def compute_metrics(log: EpisodeLog) -> Metrics:
    dur = log.duration
    if log.steps:
        dur += log.steps[-1].get("solver_time", 0.0)
    n = log.collisions
    dist = log.path_length
    return Metrics(time_to_coverage(log, 0.90), time_to_coverage(log, 0.99),
                   100.0 * n / dur if dur > 0 else 0.0,
                   100.0 * n / dist if dist > 0 else None,
                   log.final_coverage, n, dur, dist)


# ---------------------------------------------------------------------------
# episodes

class RandomPolicy:
    name = "random"

    def __init__(self, seed: int = 0):
        self.rng = np.random.Generator(np.random.Philox(seed))

    def __call__(self, obs) -> np.ndarray:
        return self.rng.uniform(-1.0, 1.0, size=2)


class ActorPolicy:
    """Deterministic (mean) actions of a trained actor network."""

    def __init__(self, actor, name: str = "checkpoint"):
        self.actor = actor
        self.name = name

    @classmethod
    def from_checkpoint(cls, path) -> "ActorPolicy":
        from .neuralnet import load_checkpoint
        nets, _ = load_checkpoint(path)
        if "actor" not in nets:
            raise ValueError(f"{path}: checkpoint holds no actor network")
        return cls(nets["actor"], name=str(path))

    def check(self, config: EnvConfig) -> None:
        s = self.actor.spec
        enc, prof = config.encoder, config.profile
        if (s.m, s.grid_size, s.lidar_rays) != (enc.m, enc.grid_size, prof.lidar_rays):
            raise ValueError(f"checkpoint expects m={s.m}, grid={s.grid_size}, rays={s.lidar_rays} but the "
                             f"environment provides m={enc.m}, grid={enc.grid_size}, rays={prof.lidar_rays}")

    def __call__(self, obs) -> np.ndarray:
        from .neuralnet import forward_actor
        s = forward_actor(self.actor, obs.maps[None], obs.lidar[None], deterministic=True)
        return s.action[0].astype(np.float64)


def run_episode(policy, world: WorldMap, profile="mow", noise_level: int = 0, seed: int = 0,
                start: Pose | None = None, max_steps: int | None = None, goal_coverage: float = 0.99,
                tau: int = 1000, map_id: str | None = None) -> EpisodeLog:
    """Run one episode to goal, truncation or ``max_steps``.

    ``policy`` is a planner name, ``"random"``, a checkpoint path or a callable ``obs -> action``.
    """
    from . import baselines
    prof = get_profile(profile) if isinstance(profile, str) else profile
    rng = np.random.Generator(np.random.Philox(seed))
    if start is None:
        start = random_start(world, prof.agent_radius, rng)
    header = {"map": map_id or world.name, "seed": seed, "profile": prof.name, "noise_level": noise_level,
              "goal_coverage": goal_coverage}
    if isinstance(policy, str) and policy in PLANNERS:
        header["policy"] = policy
        if policy == "bsa":
            plan = baselines.bsa_plan(world, prof, start)
        elif policy == "tsp-offline":
            plan = baselines.tsp_offline(world, prof, start)
        elif policy == "tsp-online":
            _, ex = baselines.tsp_online(world, prof, start, seed, noise_level, max_steps, header=header)
            return ex.log
        else:
            return baselines.frontier_explore(world, prof, start, seed, noise_level, goal_coverage,
                                              max_steps, header=header).log
        return baselines.run_plan(plan, world, prof, start, seed, noise_level, max_steps=max_steps,
                                  header=header).log
    if isinstance(policy, str) and policy == "random":
        policy = RandomPolicy(seed)
    elif isinstance(policy, (str, Path)):
        policy = ActorPolicy.from_checkpoint(policy)
    cfg = EnvConfig(profile=prof, noise_level=noise_level, goal_coverage=goal_coverage, tau=tau,
                    max_steps=max_steps)
    if hasattr(policy, "check"):
        policy.check(cfg)
    header["policy"] = getattr(policy, "name", type(policy).__name__)
    env = CoverageEnv(cfg, seed=seed)
    obs = env.reset(world, start)
    ep = EpisodeLog(header)
    ep.record_start(start, env.covered_fraction)
    while True:
        a = policy(obs)
        act = a if isinstance(a, Action) else Action(float(a[0]), float(a[1]))
        res = env.step(act)
        ep.record(env, act, res)
        obs = res.obs
        if res.done:
            ep.header["end_reason"] = res.reason
            break
    return ep


# ---------------------------------------------------------------------------
# rendering

def _sweep_coverage(log: EpisodeLog, world: WorldMap, profile) -> np.ndarray:
    prof = get_profile(profile) if isinstance(profile, str) else profile
    cov = CoverageGrid(world.spec)
    pts = []
    if "start" in log.header:
        pts.append(tuple(log.header["start"]))
    pts += [(s["x"], s["y"], s["theta"]) for s in log.steps]
    res = world.spec.resolution
    for (x0, y0, t0), (x1, y1, t1) in zip(pts, pts[1:]):
        n = max(1, int(math.ceil(math.hypot(x1 - x0, y1 - y0) / res)))
        for k in range(1, n + 1):
            f = k / n
            cover_at(cov, world, x0 + f * (x1 - x0), y0 + f * (y1 - y0), t1, prof.coverage_radius, prof.view_fov)
    if pts:
        cover_at(cov, world, pts[0][0], pts[0][1], pts[0][2], prof.coverage_radius, prof.view_fov)
    return cov.cells.astype(bool)


def _line(img: np.ndarray, r0: int, c0: int, r1: int, c1: int, color) -> None:
    n = max(abs(r1 - r0), abs(c1 - c0), 1)
    rr = np.rint(np.linspace(r0, r1, n + 1)).astype(int)
    cc = np.rint(np.linspace(c0, c1, n + 1)).astype(int)
    ok = (rr >= 0) & (rr < img.shape[0]) & (cc >= 0) & (cc < img.shape[1])
    img[rr[ok], cc[ok]] = color


def render_trajectory(log: EpisodeLog, world: WorldMap, path=None, scale: int = 4, profile=None,
                      coverage: np.ndarray | None = None) -> np.ndarray:
    """RGB raster (row 0 = top) of free space, obstacles, covered cells, the path and start/end markers.

    Written as a binary portable pixmap when ``path`` is given.
    """
    scale = int(scale)
    if scale < 1:
        raise ValueError("scale must be a positive integer")
    prof = profile or log.header.get("profile", "mow")
    if coverage is None:
        coverage = _sweep_coverage(log, world, prof) if log.steps else np.zeros(world.spec.shape, bool)
    base = np.full(world.spec.shape + (3,), 255, dtype=np.uint8)
    base[coverage.astype(bool)] = (170, 220, 170)
    base[world.obstacle != 0] = (0, 0, 0)
    img = np.repeat(np.repeat(base[::-1], scale, axis=0), scale, axis=1)
    H = img.shape[0]
    res = world.spec.resolution

    def px(x, y):
        return int(H - 1 - math.floor(y / res * scale)), int(math.floor(x / res * scale))

    pts = []
    if "start" in log.header:
        pts.append(tuple(log.header["start"][:2]))
    pts += [(s["x"], s["y"]) for s in log.steps]
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        _line(img, *px(x0, y0), *px(x1, y1), (200, 30, 30))
    m = max(1, scale)
    for (x, y), color in zip((pts[0], pts[-1]) if pts else (), ((0, 120, 255), (255, 140, 0))):
        r, c = px(x, y)
        img[max(r - m, 0):r + m + 1, max(c - m, 0):c + m + 1] = color
    if path is not None:
        write_ppm(path, img)
    return img


def write_ppm(path, img: np.ndarray) -> None:
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, _ = int(parts[1]), int(parts[2]), int(parts[3])
    return np.frombuffer(parts[4][:w * h * 3], dtype=np.uint8).reshape(h, w, 3)


# ---------------------------------------------------------------------------
# summaries

def summarize(per_map: dict[str, list[Metrics]]) -> list[dict]:
    """One row per map (means over episodes) plus a ``total`` row summing the per-map values.

    A total is left empty when any map lacks that value (e.g. T99 never reached).
    """
    rows = []
    for name, ms in per_map.items():
        def mean(key):
            vals = [getattr(m, key) for m in ms]
            if any(v is None for v in vals):
                return None
            return float(np.mean(vals))
        rows.append({"map": name, "episodes": len(ms), "T90": mean("T90"), "T99": mean("T99"),
                     "final_coverage": mean("final_coverage"), "collisions": mean("collisions"),
                     "collisions_per_100s": mean("collisions_per_100s"),
                     "collisions_per_100m": mean("collisions_per_100m"),
                     "path_length": mean("path_length"), "duration": mean("duration")})
    total = {c: None for c in SUMMARY_COLUMNS}
    total["map"] = "total"
    total["episodes"] = sum(r["episodes"] for r in rows)
    for c in TOTAL_COLUMNS:
        vals = [r[c] for r in rows]
        total[c] = None if any(v is None for v in vals) else math.fsum(vals)
    rows.append(total)
    return rows


def write_summary(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# format: {SUMMARY_FORMAT}\n# times in seconds\n")
        w = csv.DictWriter(f, SUMMARY_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k]))
                        for k in SUMMARY_COLUMNS})


def read_summary(path) -> list[dict]:
    with open(path, newline="") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# ---------------------------------------------------------------------------
# configuration

def config_schema() -> dict:
    return json.loads(resources.files("cpprl").joinpath("data/config.schema.json").read_text())


def load_config(path) -> dict:
    import jsonschema
    cfg = json.loads(Path(path).read_text())
    jsonschema.validate(cfg, config_schema())
    return cfg


def shipped_config(name: str) -> dict:
    return json.loads(resources.files("cpprl").joinpath(f"data/{name}.json").read_text())


# ---------------------------------------------------------------------------
# command line

class CLIError(Exception):
    pass


def _load_map(path) -> tuple[WorldMap, dict]:
    p = Path(path)
    pgm = p if p.suffix == ".pgm" else p.with_suffix(".pgm")
    if not pgm.exists():
        raise CLIError(f"map file not found: {pgm}")
    return load_world(pgm)


def _start_of(side: dict) -> Pose | None:
    sp = side.get("start_poses") or []
    return Pose(*sp[0]) if sp else None


def _global_parent() -> argparse.ArgumentParser:
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file (see data/config.schema.json)")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    g.add_argument("--profile", choices=sorted(PROFILES), default=argparse.SUPPRESS,
                   help="task profile (default mow)")
    g.add_argument("--noise-level", type=int, choices=[0, 1, 2, 3], default=argparse.SUPPRESS,
                   help="perception noise level; 0 is noise free (train default 1, otherwise 0)")
    g.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
    return g


def build_parser() -> argparse.ArgumentParser:
    g = _global_parent()
    p = argparse.ArgumentParser(prog="cpprl", parents=[g],
                                description="Coverage path planning with reinforcement learning.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-maps", parents=[g], help="write generated maps as PGM + JSON")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--count", type=int, default=10, help="number of random maps")
    s.add_argument("--tiers", action="store_true", help="export the fixed tier maps instead")

    s = sub.add_parser("train", parents=[g], help="train a SAC agent")
    s.add_argument("--out", required=True, help="run directory (metrics.csv, checkpoints)")
    s.add_argument("--steps", type=int, help="environment steps (overrides config)")
    s.add_argument("--map", help="train on one fixed map instead of the curriculum")
    s.add_argument("--goal", type=float, default=None, help="goal coverage for --map (default 0.99)")
    s.add_argument("--arch", choices=["MLP", "CNN", "SGCNN"], help="network architecture")
    s.add_argument("--smoke", action="store_true", help="use the shipped small-scale training config")

    s = sub.add_parser("eval", parents=[g], help="evaluate a policy on maps and write a summary CSV")
    s.add_argument("--checkpoint", help="checkpoint file (actor is used)")
    s.add_argument("--policy", choices=["random", *PLANNERS], help="built-in policy instead of a checkpoint")
    s.add_argument("--maps", nargs="+", required=True, help="map files (.pgm with optional .json sidecar)")
    s.add_argument("--episodes", type=int, default=1, help="episodes per map")
    s.add_argument("--max-steps", type=int, default=None)
    s.add_argument("--goal", type=float, default=0.99)
    s.add_argument("--out", required=True, help="summary CSV path")
    s.add_argument("--log-dir", help="directory for per-episode CSV logs")

    s = sub.add_parser("baseline", parents=[g], help="run a classical planner on one map")
    s.add_argument("--planner", choices=PLANNERS, required=True)
    s.add_argument("--map", required=True)
    s.add_argument("--max-steps", type=int, default=None)
    s.add_argument("--out", required=True, help="episode CSV path")

    s = sub.add_parser("render", parents=[g], help="draw an episode log over its map as a PPM image")
    s.add_argument("--log", required=True, help="episode CSV")
    s.add_argument("--map", required=True)
    s.add_argument("--out", required=True, help="output .ppm")
    s.add_argument("--scale", type=int, default=4)
    return p


def _settings(args) -> dict:
    cfg = load_config(args.config) if getattr(args, "config", None) else {}
    g = cfg.get("global", {})
    return {"seed": getattr(args, "seed", g.get("seed", 0)),
            "profile": getattr(args, "profile", g.get("profile", "mow")),
            "noise_level": getattr(args, "noise_level", g.get("noise_level")),
            "config": cfg}


def _cmd_gen_maps(args, st) -> int:
    from .mapgen import export_maps, generate_random_map, task_of, tier_map, tiers
    task = task_of(st["profile"])
    if args.tiers:
        worlds = [tier_map(task, t.tier, i) for t in tiers(task) for i in range(len(t.seeds))]
    else:
        worlds = [generate_random_map((st["seed"], i), task) for i in range(args.count)]
    paths = export_maps(args.out, worlds, profile=st["profile"])
    print(f"wrote {len(paths)} maps to {args.out}")
    return 0


def _cmd_train(args, st) -> int:
    from .mapgen import Curriculum, task_of
    from .neuralnet import ArchitectureSpec
    from .sac import FixedMapSource, MetricsSink, SACConfig, train
    cfg = shipped_config("smoke") if args.smoke else st["config"]
    sac_cfg = SACConfig.from_dict(cfg.get("sac", {}))
    if args.steps is not None:
        sac_cfg.total_steps = args.steps
    if args.arch:
        sac_cfg.arch = args.arch
    tr = cfg.get("train", {})
    prof = get_profile(st["profile"])
    noise = st["noise_level"] if st["noise_level"] is not None else tr.get("noise_level", 1)
    env_cfg = EnvConfig(profile=prof, noise_level=noise, tau=tr.get("tau", 1000))
    map_path = args.map or tr.get("map")
    if map_path:
        world, _ = _load_map(map_path)
        goal = args.goal if args.goal is not None else tr.get("goal_coverage", 0.99)
        source = FixedMapSource(world, goal, map_id=world.name)
    elif tr.get("empty_side"):
        world = WorldMap.empty(float(tr["empty_side"]))
        source = FixedMapSource(world, args.goal or tr.get("goal_coverage", 0.99), map_id="empty")
    else:
        source = Curriculum(task_of(prof.name), seed=st["seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"sac": sac_cfg.to_dict(), "train": tr, "profile": prof.name,
                                                 "seed": st["seed"], "noise_level": noise}, indent=2))
    arch = ArchitectureSpec(arch=sac_cfg.arch, m=env_cfg.encoder.m, grid_size=env_cfg.encoder.grid_size,
                            lidar_rays=prof.lidar_rays)

    def progress(step, row):
        log.info("step %d episode %d return %.2f coverage %.3f %s", step, row["episode"], row["return"],
                 row["coverage"], row["reason"])

    train(env_cfg, sac_cfg, source, seed=st["seed"], sink=MetricsSink(out / "metrics.csv"),
          checkpoint_dir=out / "checkpoints", arch=arch, progress=progress)
    print(f"training finished; outputs in {out}")
    return 0


def _cmd_eval(args, st) -> int:
    if bool(args.checkpoint) == bool(args.policy):
        raise CLIError("give exactly one of --checkpoint or --policy")
    policy = args.policy or args.checkpoint
    if args.checkpoint and not Path(args.checkpoint).exists():
        raise CLIError(f"checkpoint not found: {args.checkpoint}")
    noise = st["noise_level"] or 0
    maps = [(m, *_load_map(m)) for m in args.maps]
    per_map: dict[str, list[Metrics]] = {}
    log_dir = Path(args.log_dir) if args.log_dir else None
    if log_dir:
        log_dir.mkdir(parents=True, exist_ok=True)
    for path, world, side in maps:
        name = Path(path).stem
        for e in range(args.episodes):
            seed = st["seed"] + e
            ep = run_episode(policy, world, st["profile"], noise, seed, start=_start_of(side) if e == 0 else None,
                             max_steps=args.max_steps, goal_coverage=args.goal, map_id=name)
            per_map.setdefault(name, []).append(compute_metrics(ep))
            if log_dir:
                ep.to_csv(log_dir / f"{name}_ep{e}.csv")
    rows = summarize(per_map)
    write_summary(args.out, rows)
    print(f"wrote {args.out} ({len(rows) - 1} maps + total)")
    return 0


def _cmd_baseline(args, st) -> int:
    world, side = _load_map(args.map)
    ep = run_episode(args.planner, world, st["profile"], st["noise_level"] or 0, st["seed"], start=_start_of(side),
                     max_steps=args.max_steps, map_id=Path(args.map).stem)
    ep.to_csv(args.out)
    m = compute_metrics(ep)
    print(f"{args.planner}: coverage {m.final_coverage:.4f}, T90 {m.T90}, T99 {m.T99}, "
          f"path {m.path_length:.2f} m, collisions {m.collisions}")
    return 0


def _cmd_render(args, st) -> int:
    if not Path(args.log).exists():
        raise CLIError(f"log file not found: {args.log}")
    world, _ = _load_map(args.map)
    ep = EpisodeLog.from_csv(args.log)
    render_trajectory(ep, world, args.out, scale=args.scale, profile=ep.header.get("profile", st["profile"]))
    print(f"wrote {args.out}")
    return 0


COMMANDS = {"gen-maps": _cmd_gen_maps, "train": _cmd_train, "eval": _cmd_eval, "baseline": _cmd_baseline,
            "render": _cmd_render}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    level = logging.WARNING - 10 * getattr(args, "verbose", 0)
    logging.basicConfig(level=max(level, logging.DEBUG), format="%(levelname)s %(name)s: %(message)s")
    try:
        st = _settings(args)
        return COMMANDS[args.command](args, st)
    except (CLIError, FileNotFoundError, ValueError) as e:
        print(f"cpprl {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # jsonschema errors and the like
        if type(e).__name__ == "ValidationError":
            print(f"cpprl {args.command}: invalid config: {e.message}", file=sys.stderr)
            return 2
        raise


__all__ = ["Metrics", "compute_metrics", "time_to_coverage", "run_episode", "render_trajectory", "summarize",
           "write_summary", "read_summary", "main", "build_parser", "RandomPolicy", "ActorPolicy", "load_config"]
