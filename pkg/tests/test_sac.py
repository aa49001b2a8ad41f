import math

import numpy as np
import pytest

from cpprl.env import EnvConfig
from cpprl.gridworld import WorldMap, get_profile
from cpprl.neuralnet import SGCNN, Adam, ArchitectureSpec, Network, forward_actor
from cpprl.obs_encoder import Observation
from cpprl.rewards import GOAL
from cpprl.sac import (METRICS_COLUMNS, Batch, FixedMapSource, MetricsSink, ReplayBuffer, SACAgent, SACConfig,
                       SACNets, actor_loss_grad, actor_update, critic_loss_grad, critic_targets, critic_update,
                       polyak_update, temperature_update, train)

TINY = ArchitectureSpec(arch=SGCNN, m=2, grid_size=16, lidar_rays=5, conv_channels=4, hidden=12)
# matches the default encoder (m=4, 32x32) so it can run inside the environment loop
SMALL = ArchitectureSpec(arch=SGCNN, m=4, grid_size=32, lidar_rays=24, conv_channels=4, hidden=16)


def nets64(seed=0, alpha=0.5):
    return SACNets.create(TINY, seed=seed, dtype=np.float64, init_alpha=alpha)


def batch(B=4, seed=0, spec=TINY, done=None):
    r = np.random.default_rng(seed)
    shp = (B, spec.map_channels, spec.grid_size, spec.grid_size)
    d = r.integers(0, 2, B).astype(np.float64) if done is None else np.full(B, float(done))
    return Batch(r.random(shp), r.random((B, spec.lidar_rays)), r.uniform(-1, 1, (B, 2)), r.normal(size=B),
                 r.random(shp), r.random((B, spec.lidar_rays)), d)


def fd_grad(f, x, h=1e-4):
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + h
        fp = f()
        x.flat[i] = old - h
        fm = f()
        x.flat[i] = old
        g.flat[i] = (fp - fm) / (2 * h)
    return g


def test_config_defaults_and_validation():
    c = SACConfig()
    assert (c.lr, c.batch_size, c.gamma, c.buffer_capacity) == (1e-5, 256, 0.99, 500_000)
    assert (c.polyak, c.target_entropy, c.updates_per_step, c.warmup_steps) == (0.005, -2.0, 1, 10_000)
    assert c.grad_clip is None
    assert SACConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError):
        SACConfig.from_dict({"learning_rate": 1.0})


# ---------------------------------------------------------------------------
# critic targets

def test_gamma_zero_target_is_reward():
    n = nets64()
    b = batch()
    y = critic_targets(b, n, 0.3, 0.0, np.random.default_rng(0))
    assert np.array_equal(y, b.reward)


def test_done_removes_bootstrap():
    n = nets64()
    b = batch(done=1)
    y = critic_targets(b, n, 0.3, 0.99, np.random.default_rng(0))
    assert np.array_equal(y, b.reward)


def test_target_uses_min_of_target_critics():
    n = nets64()
    n.target2.params += 0.05 * np.random.default_rng(3).normal(size=n.target2.size)
    b = batch(done=0)
    alpha, gamma = 0.2, 0.9
    y = critic_targets(b, n, alpha, gamma, np.random.default_rng(5))
    s = forward_actor(n.actor, b.next_maps, b.next_lidar, np.random.default_rng(5))
    q1 = n.target1.forward(b.next_maps, b.next_lidar, s.action)[0][:, 0]
    q2 = n.target2.forward(b.next_maps, b.next_lidar, s.action)[0][:, 0]
    ref = [b.reward[i] + gamma * (min(q1[i], q2[i]) - alpha * s.log_prob[i]) for i in range(4)]
    np.testing.assert_allclose(y, ref, rtol=1e-12)


def test_bellman_target_by_hand():
    """Networks reduced to constants: the target is computable in closed form."""
    n = nets64()
    for net in (n.actor, n.target1, n.target2):
        net.params[...] = 0.0
    n.target1.head.b[...] = 2.0
    n.target2.head.b[...] = 1.5
    n.actor.head.b[...] = [0.3, -0.2, math.log(0.5), math.log(0.25)]
    b = batch(B=2, done=0)
    b.done[...] = [0.0, 1.0]
    b.reward[...] = [1.0, -1.0]
    rng = np.random.default_rng(11)
    eps = np.random.default_rng(11).standard_normal((2, 2))
    y = critic_targets(b, n, 0.1, 0.9, rng)
    mean, std = np.array([0.3, -0.2]), np.array([0.5, 0.25])
    u = mean + std * eps[0]
    logp = sum(-0.5 * eps[0] ** 2 - np.log(std) - 0.5 * math.log(2 * math.pi) - np.log(1 - np.tanh(u) ** 2 + 1e-6))
    assert y[0] == pytest.approx(1.0 + 0.9 * (1.5 - 0.1 * logp), abs=1e-6)
    assert y[1] == -1.0


# ---------------------------------------------------------------------------
# losses and gradients

def test_critic_loss_gradient_matches_finite_differences():
    n = nets64()
    b = batch()
    y = np.random.default_rng(2).normal(size=4)
    c = n.critic1

    def loss():
        f, cf = c.features(b.maps, b.lidar)
        q, _ = c.fuse(f, b.action)
        return float(np.mean((q[:, 0] - y) ** 2))

    c.zero_grad()
    f, cf = c.features(b.maps, b.lidar)
    val = critic_loss_grad(c, f, cf, b.action, y)
    assert val == pytest.approx(loss(), rel=1e-12)
    num = fd_grad(loss, c.params)
    assert (np.abs(c.grads - num) / (np.abs(c.grads) + 1e-8)).max() < 1e-4


def test_actor_loss_gradient_matches_finite_differences():
    n = nets64(alpha=0.4)
    b = batch()
    eps = np.random.default_rng(8).standard_normal((4, 2))

    def loss():
        s = forward_actor(n.actor, b.maps, b.lidar, eps=eps)
        q1 = n.critic1.forward(b.maps, b.lidar, s.action)[0][:, 0]
        q2 = n.critic2.forward(b.maps, b.lidar, s.action)[0][:, 0]
        return float(np.mean(0.4 * s.log_prob - np.minimum(q1, q2)))

    val, _ = actor_loss_grad(b, n, 0.4, None, eps=eps)
    assert val == pytest.approx(loss(), rel=1e-12)
    num = fd_grad(loss, n.actor.params)
    assert (np.abs(n.actor.grads - num) / (np.abs(n.actor.grads) + 1e-8)).max() < 1e-4


def test_actor_gradient_vanishes_for_constant_critics_and_zero_alpha():
    n = nets64()
    for c in (n.critic1, n.critic2):
        c.params[...] = 0.0
        c.head.b[...] = 3.0
    actor_loss_grad(batch(), n, 0.0, np.random.default_rng(0))
    assert np.abs(n.actor.grads).max() < 1e-12


def test_actor_loss_decreases_on_fixed_batch():
    n = nets64(alpha=0.1)
    b = batch(B=8)
    opts = {"actor": Adam(n.actor.size, 1e-3, dtype=np.float64)}
    cfg = SACConfig(lr=1e-3)
    losses = [actor_update(b, n, opts, 0.1, cfg, np.random.default_rng(0))[0] for _ in range(100)]
    assert losses[-1] < losses[0]


def test_critic_loss_decreases_on_fixed_batch():
    n = nets64()
    b = batch(B=8)
    y = np.random.default_rng(1).normal(size=8)
    cfg = SACConfig(lr=1e-3)
    opts = {k: Adam(n.critic1.size, 1e-3, dtype=np.float64) for k in ("critic1", "critic2")}
    losses = [critic_update(b, n, opts, 0.1, cfg, None, y=y) for _ in range(100)]
    assert losses[-1] < 0.75 * losses[0]


# ---------------------------------------------------------------------------
# temperature and Polyak

def test_temperature_zero_gradient_at_target():
    la = np.array([math.log(0.3)])
    opt = Adam(1, 1e-2, dtype=np.float64)
    temperature_update(la, np.full(16, 2.0), -2.0, opt)
    assert la[0] == math.log(0.3)


def test_temperature_rises_when_entropy_below_target():
    la = np.array([0.0])
    opt = Adam(1, 1e-2, dtype=np.float64)
    # entropy -logp = -3 < target -2
    for _ in range(5):
        temperature_update(la, np.full(16, 3.0), -2.0, opt)
    assert la[0] > 0.0
    la2 = np.array([0.0])
    temperature_update(la2, np.full(16, 0.0), -2.0, Adam(1, 1e-2, dtype=np.float64))
    assert la2[0] < 0.0
    assert math.exp(la2[0]) > 0.0


def test_polyak_cases():
    a = Network(TINY, seed=1, dtype=np.float64)
    b = Network(TINY, seed=2, dtype=np.float64)
    t = b.copy()
    polyak_update(t, a, 1.0)
    assert np.array_equal(t.params, a.params)
    t = b.copy()
    polyak_update(t, a, 0.0)
    assert np.array_equal(t.params, b.params)


def test_polyak_converges_geometrically():
    a = Network(TINY, seed=1, dtype=np.float64)
    t = Network(TINY, seed=2, dtype=np.float64)
    tau = 0.005
    d0 = np.linalg.norm(t.params - a.params)
    k = round(math.log(2) / tau)
    for _ in range(k):
        polyak_update(t, a, tau)
    assert np.linalg.norm(t.params - a.params) / d0 == pytest.approx((1 - tau) ** k, rel=1e-9)
    assert (1 - tau) ** k == pytest.approx(0.5, rel=0.01)


# ---------------------------------------------------------------------------
# replay buffer

def obs_of(seed, spec=TINY):
    r = np.random.default_rng(seed)
    m, g = spec.m, spec.grid_size
    return Observation(r.random((m, g, g)), r.random((m, g, g)), r.random((m, g, g)), r.random(spec.lidar_rays))


def test_buffer_fifo_and_capacity():
    buf = ReplayBuffer(5, (6, 16, 16), 5)
    for i in range(12):
        buf.add(obs_of(i), [i / 20, 0.0], float(i), obs_of(i + 1), False)
        assert len(buf) == min(i + 1, 5)
    assert [buf.transition(k)["reward"] for k in range(5)] == [7.0, 8.0, 9.0, 10.0, 11.0]


def test_buffer_quantization_and_frame_sharing():
    buf = ReplayBuffer(10, (6, 16, 16), 5)
    o = [obs_of(i) for i in range(4)]
    for i in range(3):
        buf.add(o[i], [0.1, -0.1], 1.0, o[i + 1], i == 2)
    assert buf.n_frames == 4  # chained states share frames
    b = buf.get([0, 1, 2])
    for i in range(3):
        assert np.abs(b.maps[i] - o[i].maps).max() <= 0.5 / 255 + 1e-7
        if i < 2:
            assert np.array_equal(b.next_maps[i], b.maps[i + 1])
        np.testing.assert_allclose(b.lidar[i], o[i].lidar, rtol=1e-6)
    assert b.done.tolist() == [0.0, 0.0, 1.0]


def test_buffer_rejects_nonfinite_reward():
    buf = ReplayBuffer(3, (6, 16, 16), 5)
    with pytest.raises(ValueError):
        buf.add(obs_of(0), [0, 0], float("nan"), obs_of(1), False)


def test_buffer_sampling_is_uniform_over_stored():
    buf = ReplayBuffer(50, (6, 16, 16), 5)
    for i in range(20):
        buf.add(obs_of(i), [0, 0], float(i), obs_of(i + 1), False)
    b = buf.sample(4000, np.random.default_rng(0))
    counts = np.bincount(b.reward.astype(int), minlength=20)
    assert counts.min() > 120 and counts.max() < 280


# ---------------------------------------------------------------------------
# agent and loop

def test_parameters_stay_finite_under_fuzzed_updates():
    cfg = SACConfig(lr=1e-3, batch_size=4)
    agent = SACAgent(TINY, cfg, seed=0)
    r = np.random.default_rng(0)
    for i in range(10_000):
        b = batch(B=4, seed=i)
        b.reward = r.uniform(-100, 100, 4)
        b.maps = b.maps.astype(np.float32)
        b.next_maps = b.next_maps.astype(np.float32)
        agent.update(b)
    for net in agent.nets.as_dict().values():
        assert np.all(np.isfinite(net.params))
    assert math.isfinite(agent.alpha) and agent.alpha > 0


def _run(tmp_path, name, steps=400, seed=3, goal=0.25, tau=25):
    cfg = SACConfig(lr=1e-3, batch_size=8, warmup_steps=150, total_steps=steps, checkpoint_every=0,
                    buffer_capacity=10_000)
    env_cfg = EnvConfig(profile=get_profile("mow"), tau=tau, noise_level=1)
    sink = MetricsSink(tmp_path / f"{name}.csv")
    agent = train(env_cfg, cfg, FixedMapSource(WorldMap.empty(1.2), goal), seed=seed, sink=sink,
                  checkpoint_dir=tmp_path / name, arch=SMALL, deterministic_time=True)
    return agent, sink


def test_training_is_deterministic_and_done_flags(tmp_path):
    a1, s1 = _run(tmp_path, "a")
    a2, s2 = _run(tmp_path, "b")
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
    assert np.array_equal(a1.nets.actor.params, a2.nets.actor.params)
    assert (tmp_path / "a" / "final.ckpt").exists()
    rows = s1.rows
    reasons = {r["reason"] for r in rows}
    assert GOAL in reasons and "truncated" in reasons
    buf = a1.buffer
    ends = {int(r["step"]): r["reason"] for r in rows}
    for i in range(len(buf)):
        d = buf.transition(i)["done"]
        assert d == (1.0 if ends.get(i + 1) == GOAL else 0.0)
    header = (tmp_path / "a.csv").read_text().splitlines()
    assert header[0].startswith("# cpprl-train-metrics/")
    assert header[1].split(",") == METRICS_COLUMNS


def test_checkpoint_roundtrip_of_agent(tmp_path):
    agent = SACAgent(TINY, SACConfig(dtype="float32"), seed=4)
    agent.nets.log_alpha[0] = -1.25
    agent.save(tmp_path / "a.ckpt", step=7)
    back = SACAgent.load(tmp_path / "a.ckpt")
    assert back.nets.log_alpha[0] == -1.25
    for k, net in agent.nets.as_dict().items():
        assert np.array_equal(net.params, getattr(back.nets, k).params)
