import math
import time

import numpy as np
import pytest

from cpprl.gridworld import FINE_RESOLUTION, GridSpec, LidarScan, Pose, WorldMap
from cpprl.obs_encoder import (EncoderConfig, EncoderState, Observation, PooledPyramid, build_observation,
                               extract_egocentric, forward_map_points, sample_pyramid, update_pyramid)

from oracles import block_pool, pixel_of

RES = FINE_RESOLUTION
SMALL = EncoderConfig(m=3, s=2, grid_size=8)


def scan_of(n, value=1.0, rng_max=1.0):
    return LidarScan(np.full(n, value), np.zeros(n), 0.0)


def test_default_geometry():
    cfg = EncoderConfig()
    assert [cfg.side(i) for i in range(1, 5)] == pytest.approx([1.2, 4.8, 19.2, 76.8])
    assert cfg.span == pytest.approx(76.8)
    assert cfg.cells_per_observation == 12_288
    with pytest.raises(ValueError):
        EncoderConfig(coarse_reducer="median")


@pytest.mark.parametrize("side", [2.4, 20.0])
def test_observation_size_independent_of_world(side):
    w = WorldMap.empty(side)
    st = EncoderState(w.spec, EncoderConfig())
    obs = build_observation(st, Pose(side / 2, side / 2, 0.3), scan_of(24), 3.5)
    assert obs.maps.size == 12_288
    assert obs.to_flat().size == 12_288 + 24


def test_extract_fully_covered_is_ones():
    spec = GridSpec(RES, 256, 256)
    ones = np.ones(spec.shape)
    for th in (0.0, 0.7, math.pi / 2):
        for i in (1, 2, 3):
            out = extract_egocentric(ones, spec, Pose(4.8, 4.8, th), i, SMALL)
            assert np.allclose(out, 1.0)


def test_extract_axis_aligned_is_block_pooling(rng):
    spec = GridSpec(RES, 128, 128)
    grid = (rng.random(spec.shape) < 0.4).astype(np.float64)
    cfg = SMALL
    for i in (1, 2, 3):
        f = cfg.factor(i)
        # agent on a coarse-cell corner, heading up = +y
        cx, cy = 64, 64
        pose = Pose(cx * RES, cy * RES, math.pi / 2)
        out = extract_egocentric(grid, spec, pose, i, cfg)
        pooled = block_pool(grid, f)
        g = cfg.grid_size
        bx0, by0 = cx // f - g // 2, cy // f - g // 2
        # output row 0 is the top (largest y)
        expect = pooled[by0:by0 + g, bx0:bx0 + g][::-1]
        assert np.allclose(out, expect)
        pyr = PooledPyramid.from_grid(grid, spec, cfg.m, cfg.s)
        samp = sample_pyramid(pyr, pose, i, cfg)
        assert np.allclose(samp, expect)


def test_obstacle_ahead_appears_above_center():
    cfg = EncoderConfig()
    spec = GridSpec(RES, 128, 128)
    grid = np.zeros(spec.shape)
    pose = Pose(2.0, 2.0, 0.0)
    ix, iy = spec.world_to_cell(2.0 + 0.3, 2.0)
    grid[iy, ix] = 1
    out = extract_egocentric(grid, spec, pose, 1, cfg, reducer="max")
    rows, cols = np.nonzero(out)
    assert rows.size == 1
    assert cfg.grid_size // 2 - rows[0] in (8, 9)
    assert cols[0] in (15, 16)


def test_pyramid_single_cell_and_inverse():
    spec = GridSpec(RES, 40, 40)
    p = PooledPyramid(spec, 4, 4)
    base = [a.copy() for a in p.levels]
    p.update(np.array([5 * 40 + 7]), +1)
    for lvl in range(1, 5):
        f = 4 ** (lvl - 1)
        assert p.mean(lvl)[5 // f, 7 // f] == pytest.approx(1.0 / f ** 2)
    p.update(np.array([5 * 40 + 7]), -1)
    assert all(np.array_equal(a, b) for a, b in zip(base, p.levels))


def test_pyramid_incremental_fuzz(rng):
    spec = GridSpec(RES, 97, 70)
    grid = np.zeros(spec.shape, dtype=np.uint8)
    p = PooledPyramid(spec, 4, 4)
    for _ in range(2000):
        idx = np.unique(rng.integers(0, spec.width * spec.height, size=rng.integers(1, 5)))
        add = idx[grid.flat[idx] == 0]
        rem = idx[grid.flat[idx] == 1]
        grid.flat[add] = 1
        grid.flat[rem] = 0
        update_pyramid(p, add, rem)
    ref = PooledPyramid.from_grid(grid, spec, 4, 4)
    assert p.equals(ref)
    for lvl in range(1, 5):
        assert np.allclose(p.mean(lvl), block_pool(grid.astype(float), 4 ** (lvl - 1)), atol=1e-12)


def test_no_frontier_means_empty_channel():
    w = WorldMap.empty(4.8)
    st = EncoderState(w.spec, EncoderConfig())
    obs = build_observation(st, Pose(2.4, 2.4, 0.0), scan_of(24, 3.5), 3.5)
    assert not obs.frontier.any()
    assert np.all(obs.lidar == 1.0)
    assert np.all((obs.to_flat() >= 0) & (obs.to_flat() <= 1))


def test_far_frontier_point_only_in_outer_scale():
    cfg = EncoderConfig()
    spec = GridSpec(RES, 1200, 1200)
    st = EncoderState(spec, cfg)
    pose = Pose(10.0, 20.0, math.pi / 2)
    ix, iy = spec.world_to_cell(30.0, 20.0)
    st.change_frontier(np.array([iy * spec.width + ix]), np.empty(0, dtype=np.int64))
    obs = build_observation(st, pose, scan_of(24), 3.5)
    assert [obs.frontier[i].sum() for i in range(4)] == [0, 0, 0, 1]
    r, c = np.argwhere(obs.frontier[3])[0]
    assert c > cfg.grid_size // 2 and r in (15, 16)


def test_frontier_persistence_matches_per_point_oracle(rng):
    cfg = SMALL
    for trial in range(200):
        n = int(rng.integers(20, 90))
        spec = GridSpec(RES, n, n)
        pts = np.flatnonzero(rng.random(n * n) < rng.uniform(0.001, 0.05))
        x, y = rng.uniform(0, n * RES, size=2)
        pose = Pose(x, y, rng.uniform(-math.pi, math.pi))
        pxs, pys = spec.cell_center(pts % n, pts // n)
        grid = np.zeros(spec.shape)
        grid.flat[pts] = 1
        for i in range(1, cfg.m + 1):
            got = forward_map_points((np.atleast_1d(pxs), np.atleast_1d(pys)), pose, i, cfg)
            expect = np.zeros_like(got)
            for a, b in zip(np.atleast_1d(pxs), np.atleast_1d(pys)):
                r, c = pixel_of(a, b, pose.x, pose.y, pose.theta, cfg.pixel_size(i), cfg.grid_size)
                if 0 <= r < cfg.grid_size and 0 <= c < cfg.grid_size:
                    expect[r, c] = 1
            assert np.array_equal(got, expect)
            if trial < 40:
                ref = extract_egocentric(grid, spec, pose, i, cfg, reducer="max")
                assert np.array_equal(got, ref)


def _rot90_world(grid):
    """Rotate a grid a quarter turn counterclockwise in world coordinates."""
    return np.rot90(grid, k=1, axes=(1, 0)).copy()


def test_rotation_equivariance(rng):
    cfg = EncoderConfig(m=3, s=4, grid_size=16)
    n = 256
    spec = GridSpec(RES, n, n)
    cov = (rng.random((n, n)) < 0.3).astype(np.uint8)
    obst = (rng.random((n, n)) < 0.1).astype(np.uint8)
    fr = (rng.random((n, n)) < 0.05).astype(np.uint8)

    def observe(c, o, f, pose):
        st = EncoderState(spec, cfg)
        st.coverage.recompute(c)
        st.obstacle.recompute(o)
        flat = np.flatnonzero(f)
        st.change_frontier(flat, np.empty(0, dtype=np.int64))
        return build_observation(st, pose, scan_of(4), 1.0)

    side = n * RES
    x, y = 128 * RES, 64 * RES
    a = observe(cov, obst, fr, Pose(x, y, 0.0))
    b = observe(_rot90_world(cov), _rot90_world(obst), _rot90_world(fr), Pose(side - y, x, math.pi / 2))
    assert np.array_equal(a.coverage, b.coverage)
    assert np.array_equal(a.obstacle, b.obstacle)
    assert np.array_equal(a.frontier, b.frontier)


def test_observation_flat_roundtrip(tmp_path, rng):
    cfg = EncoderConfig()
    obs = Observation(rng.random((4, 32, 32)), rng.random((4, 32, 32)), rng.random((4, 32, 32)), rng.random(24))
    flat = obs.to_flat()
    assert np.array_equal(flat[:4096], obs.coverage.ravel())
    assert np.array_equal(flat[8192:12288], obs.frontier.ravel())
    back = Observation.from_flat(flat, 4, 32, 24)
    assert np.array_equal(back.to_flat(), flat)
    obs.save(tmp_path / "o.obs")
    re = Observation.load(tmp_path / "o.obs")
    assert np.array_equal(re.to_flat(), flat.astype(np.float32))
    with pytest.raises(ValueError):
        Observation.from_flat(flat[:-1], 4, 32, 24)


def _timed_build(side, reps=30):
    cfg = EncoderConfig()
    w = WorldMap.empty(side)
    st = EncoderState(w.spec, cfg)
    # identical local state around the agent in both worlds
    c = w.spec.world_to_cell(2.4, 2.4)
    ys, xs = np.mgrid[c[1] - 20:c[1] + 20, c[0] - 20:c[0] + 20]
    flat = (ys * w.spec.width + xs).ravel()
    st.add_coverage(flat)
    ring = np.concatenate([(ys[0] - 1) * w.spec.width + xs[0], (ys[-1] + 1) * w.spec.width + xs[-1]])
    st.change_frontier(ring, np.empty(0, dtype=np.int64))
    pose = Pose(2.4, 2.4, 0.4)
    scan = scan_of(24)
    build_observation(st, pose, scan, 3.5)
    t0 = time.perf_counter()
    for _ in range(reps):
        build_observation(st, pose, scan, 3.5)
    return (time.perf_counter() - t0) / reps


def test_build_time_scales_with_observation_not_world():
    small = min(_timed_build(4.8) for _ in range(3))
    big = min(_timed_build(76.8) for _ in range(3))
    assert big <= 2.0 * small
