"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--env-steps 200] [--json out.json]

Kernel timings run both backends in this process. The environment step timing
runs one subprocess per backend (the backend is fixed at import time).
"""
import argparse
import json
import math
import os
import subprocess
import sys
import timeit

import numpy as np

from cpprl import kernels
from cpprl.gridworld import FINE_RESOLUTION as RES, GridSpec, WorldMap, add_border


def make_world(n=256, density=0.05, seed=0):
    rng = np.random.default_rng(seed)
    grid = (rng.random((n, n)) < density).astype(np.uint8)
    add_border(grid)
    return WorldMap(GridSpec(RES, n, n), grid)


def cases(rng):
    w = make_world()
    obst = w.obstacle
    x = y = 128 * RES + 0.01
    th = np.linspace(-math.pi / 2, math.pi / 2, 24)
    dx, dy = np.cos(th), np.sin(th)
    ranges = kernels.python.raycast(obst, RES, 0.0, 0.0, x, y, dx, dy, 7.0)
    xs = rng.random((4, 8, 34, 34, 8))
    cols = np.empty((4, 8 * 32 * 32, 9 * 8))
    pts = rng.random((120, 2))
    W = np.linalg.norm(pts[:, None] - pts[None], axis=-1)

    def two_opt(mod):
        tour = np.arange(120, dtype=np.int64)
        mod.two_opt(tour, W, 10_000)

    def im2col(mod):
        mod.im2col(xs, 3, 1, cols)

    def col2im(mod):
        gx = np.zeros_like(xs)
        mod.col2im(cols, 3, 1, gx)

    def cover(mod):
        cov = np.zeros_like(obst)
        mod.cover(obst, cov, RES, 0.0, 0.0, x, y, 1.0, 0.0, 3.5, 0.0)

    def mark(mod):
        known = np.zeros_like(obst)
        mod.mark_rays(known, RES, 0.0, 0.0, x, y, dx, dy, ranges, 7.0)

    return {
        "raycast (24 rays, 7 m)": lambda m: m.raycast(obst, RES, 0.0, 0.0, x, y, dx, dy, 7.0),
        "mark_rays (24 rays)": mark,
        "cover (3.5 m half disk)": cover,
        "disk_collides": lambda m: m.disk_collides(obst, RES, 0.0, 0.0, x, y, 0.15),
        "im2col (4x8x34x34x8, k3)": im2col,
        "col2im (4x8x34x34x8, k3)": col2im,
        "two_opt (120 nodes)": two_opt,
    }


ENV_SNIPPET = """
import time, numpy as np
from cpprl.env import CoverageEnv, EnvConfig
from cpprl.gridworld import Action, Pose, WorldMap
from cpprl import kernels
env = CoverageEnv(EnvConfig(noise_level=1), seed=0)
env.reset(WorldMap.empty(4.8), Pose(2.4, 2.4, 0.0))
rng = np.random.default_rng(0)
t0 = time.perf_counter()
for _ in range({n}):
    r = env.step(Action(*rng.uniform(-1, 1, 2)))
    if r.done:
        env.reset(WorldMap.empty(4.8), Pose(2.4, 2.4, 0.0))
print(kernels.BACKEND_NAME, (time.perf_counter() - t0) / {n})
"""


def env_step_time(n, pure):
    env = dict(os.environ)
    env.pop("CPPRL_PURE_PYTHON", None)
    if pure:
        env["CPPRL_PURE_PYTHON"] = "1"
    out = subprocess.run([sys.executable, "-c", ENV_SNIPPET.format(n=n)], env=env, capture_output=True,
                         text=True, check=True).stdout.split()
    return out[0], float(out[1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--env-steps", type=int, default=200, help="0 skips the environment step timing")
    ap.add_argument("--json", help="write results to this file")
    args = ap.parse_args(argv)

    backends = {"python": kernels.python}
    if kernels.compiled is not None:
        backends["cython"] = kernels.compiled
    else:
        print("compiled extension not available; timing the fallback only")
    results = {}
    print(f"{'kernel':28s}" + "".join(f"{b:>12s}" for b in backends) + "   speedup")
    for name, fn in cases(np.random.default_rng(0)).items():
        row = {}
        for b, mod in backends.items():
            fn(mod)  # warm up
            row[b] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
        sp = row["python"] / row["cython"] if "cython" in row else float("nan")
        results[name] = dict(row, speedup=sp)
        print(f"{name:28s}" + "".join(f"{row[b] * 1e3:10.3f}ms" for b in backends) + f"   {sp:7.1f}x")

    if args.env_steps:
        steps = {}
        for pure in (True, False):
            if not pure and kernels.compiled is None:
                continue
            b, t = env_step_time(args.env_steps, pure)
            steps[b] = t
        results["env.step"] = steps
        print("env.step (mow, 4.8 m): " + ", ".join(f"{b} {t * 1e3:.2f} ms" for b, t in steps.items()))
    if args.json:
        with open(args.json, "w") as f:
            json.dump(results, f, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
