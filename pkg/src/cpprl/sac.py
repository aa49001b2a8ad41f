"""Soft actor-critic with twin critics, Polyak targets, learned temperature and a replay buffer."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .env import CoverageEnv, EnvConfig, StepResult
from .gridworld import Pose, WorldMap
from .neuralnet import (SGCNN, Adam, ArchitectureSpec, Network, forward_actor, actor_backward, load_checkpoint,
                        save_checkpoint)
from .obs_encoder import Observation
from .rewards import GOAL

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["step", "episode", "return", "length", "coverage", "reason", "level", "map_id", "alpha",
                   "critic_loss", "actor_loss", "alpha_loss", "entropy", "wall_time"]
METRICS_VERSION = "cpprl-train-metrics/1"


@dataclass
class SACConfig:
    lr: float = 1e-5
    batch_size: int = 256
    gamma: float = 0.99
    polyak: float = 0.005
    target_entropy: float = -2.0
    init_alpha: float = 1.0
    buffer_capacity: int = 500_000
    warmup_steps: int = 10_000
    update_every: int = 1
    updates_per_step: int = 1
    grad_clip: float | None = None
    arch: str = SGCNN
    total_steps: int = 8_000_000
    checkpoint_every: int = 100_000
    dtype: str = "float32"

    @classmethod
    def from_dict(cls, d: dict) -> "SACConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown SAC config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# replay

@dataclass
class Batch:
    maps: np.ndarray
    lidar: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_maps: np.ndarray
    next_lidar: np.ndarray
    done: np.ndarray


class ReplayBuffer:
    """FIFO ring of transitions with uniform sampling.

    Map frames are stored once as 8-bit values (value·255 rounded) and shared
    between a transition's next state and the following transition's state.
    Storage grows in chunks up to the capacity.
    """

    CHUNK = 4096

    def __init__(self, capacity: int, map_shape: tuple[int, ...], n_lidar: int, action_dim: int = 2):
        self.capacity = int(capacity)
        self.map_shape = tuple(map_shape)
        self.n_lidar = n_lidar
        self.frame_cap = 2 * self.capacity  # every live transition owns at most two frames
        self._frames = np.zeros((0,) + self.map_shape, dtype=np.uint8)
        self._lidar = np.zeros((0, n_lidar), dtype=np.float32)
        self.obs_idx = np.zeros(self.capacity, dtype=np.int64)
        self.next_idx = np.zeros(self.capacity, dtype=np.int64)
        self.action = np.zeros((self.capacity, action_dim), dtype=np.float32)
        self.reward = np.zeros(self.capacity, dtype=np.float32)
        self.done = np.zeros(self.capacity, dtype=np.float32)
        self.size = 0
        self.ptr = 0
        self.n_frames = 0  # frames ever written
        self._last_next = None  # (frame slot, quantized maps, lidar) of the most recent next state

    def __len__(self) -> int:
        return self.size

    @staticmethod
    def quantize(maps: np.ndarray) -> np.ndarray:
        return np.rint(np.clip(maps, 0.0, 1.0) * 255.0).astype(np.uint8)

    def _slot_storage(self, slot: int) -> None:
        if slot >= self._frames.shape[0]:
            n = min(self.frame_cap, max(self._frames.shape[0] * 2, slot + 1, self.CHUNK))
            frames = np.zeros((n,) + self.map_shape, dtype=np.uint8)
            lid = np.zeros((n, self.n_lidar), dtype=np.float32)
            frames[:self._frames.shape[0]] = self._frames
            lid[:self._lidar.shape[0]] = self._lidar
            self._frames, self._lidar = frames, lid

    def _write_frame(self, q: np.ndarray, lidar: np.ndarray) -> int:
        slot = self.n_frames % self.frame_cap
        self._slot_storage(slot)
        self._frames[slot] = q
        self._lidar[slot] = lidar
        self.n_frames += 1
        return slot

    def add(self, obs: Observation, action, reward: float, next_obs: Observation, done: bool) -> None:
        if not math.isfinite(reward):
            raise ValueError("reward must be finite")
        q = self.quantize(obs.maps)
        lid = np.asarray(obs.lidar, dtype=np.float32)
        last = self._last_next
        if last is not None and np.array_equal(last[1], q) and np.array_equal(last[2], lid):
            o = last[0]
        else:
            o = self._write_frame(q, lid)
        qn = self.quantize(next_obs.maps)
        ln = np.asarray(next_obs.lidar, dtype=np.float32)
        n = self._write_frame(qn, ln)
        self._last_next = (n, qn, ln)
        i = self.ptr
        self.obs_idx[i], self.next_idx[i] = o, n
        self.action[i] = action
        self.reward[i] = reward
        self.done[i] = float(done)
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def get(self, idx) -> Batch:
        idx = np.asarray(idx)
        o, n = self.obs_idx[idx], self.next_idx[idx]
        scale = np.float32(1.0 / 255.0)
        return Batch(self._frames[o].astype(np.float32) * scale, self._lidar[o].copy(), self.action[idx].copy(),
                     self.reward[idx].copy(), self._frames[n].astype(np.float32) * scale, self._lidar[n].copy(),
                     self.done[idx].copy())

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self.get(rng.integers(0, self.size, size=batch_size))

    def transition(self, i: int) -> dict:
        """Stored transition ``i`` counted from the oldest."""
        j = (self.ptr - self.size + i) % self.capacity
        b = self.get([j])
        return {"action": b.action[0], "reward": float(b.reward[0]), "done": float(b.done[0])}


# ---------------------------------------------------------------------------
# updates

@dataclass
class SACNets:
    actor: Network
    critic1: Network
    critic2: Network
    target1: Network
    target2: Network
    log_alpha: np.ndarray = field(default_factory=lambda: np.zeros(1))

    @classmethod
    def create(cls, arch_actor: ArchitectureSpec, seed: int = 0, dtype=np.float32, init_alpha: float = 1.0):
        arch_critic = ArchitectureSpec(**{**arch_actor.to_json(), "head": "critic"})
        actor = Network(arch_actor, seed=seed, dtype=dtype)
        c1 = Network(arch_critic, seed=seed + 1, dtype=dtype)
        c2 = Network(arch_critic, seed=seed + 2, dtype=dtype)
        return cls(actor, c1, c2, c1.copy(), c2.copy(), np.array([math.log(init_alpha)]))

    @property
    def alpha(self) -> float:
        return float(math.exp(self.log_alpha[0]))

    def as_dict(self) -> dict:
        return {"actor": self.actor, "critic1": self.critic1, "critic2": self.critic2,
                "target1": self.target1, "target2": self.target2}


def _clip(grads: np.ndarray, max_norm: float | None) -> None:
    if max_norm is None:
        return
    norm = float(np.linalg.norm(grads))
    if norm > max_norm:
        grads *= max_norm / norm


def critic_targets(batch: Batch, nets: SACNets, alpha: float, gamma: float, rng: np.random.Generator) -> np.ndarray:
    """y = r + gamma (1 - done) (min(Q'1, Q'2)(s', a') - alpha log pi(a'|s')), a' ~ pi(.|s')."""
    nxt = forward_actor(nets.actor, batch.next_maps, batch.next_lidar, rng)
    q1, _ = nets.target1.forward(batch.next_maps, batch.next_lidar, nxt.action)
    q2, _ = nets.target2.forward(batch.next_maps, batch.next_lidar, nxt.action)
    soft = np.minimum(q1[:, 0], q2[:, 0]) - alpha * nxt.log_prob
    return batch.reward + gamma * (1.0 - batch.done) * soft


def critic_loss_grad(critic: Network, feat, c_feat, action, y):
    """Squared-error loss of one critic against ``y``; accumulates its gradients."""
    q, c_fuse = critic.fuse(feat, action)
    err = q[:, 0] - y
    loss = float(np.mean(err * err))
    gfeat, _ = critic.fuse_backward((2.0 / err.size) * err[:, None], c_fuse)
    critic.features_backward(gfeat, c_feat)
    return loss


def critic_update(batch: Batch, nets: SACNets, opts: dict, alpha: float, config: SACConfig,
                  rng: np.random.Generator, y: np.ndarray | None = None, feats=None) -> float:
    if y is None:
        y = critic_targets(batch, nets, alpha, config.gamma, rng)
    y = y.astype(nets.critic1.dtype)
    losses = []
    for i, (critic, key) in enumerate(((nets.critic1, "critic1"), (nets.critic2, "critic2"))):
        feat, c_feat = feats[i] if feats is not None else critic.features(batch.maps, batch.lidar)
        critic.zero_grad()
        losses.append(critic_loss_grad(critic, feat, c_feat, batch.action, y))
        _clip(critic.grads, config.grad_clip)
        opts[key].step(critic.params, critic.grads)
    return 0.5 * (losses[0] + losses[1])


def actor_loss_grad(batch: Batch, nets: SACNets, alpha: float, rng: np.random.Generator, feats=None,
                    eps: np.ndarray | None = None):
    """Accumulates the actor gradient of E[alpha log pi(a|s) - min(Q1, Q2)(s, a)].

    Returns ``(loss, log_prob)``. Critic parameter gradients touched here are
    scratch and must be zeroed before a critic step.
    """
    actor = nets.actor
    sample = forward_actor(actor, batch.maps, batch.lidar, rng, eps=eps)
    B = sample.action.shape[0]
    qs, g_as = [], []
    for i, critic in enumerate((nets.critic1, nets.critic2)):
        feat, _ = feats[i] if feats is not None else critic.features(batch.maps, batch.lidar)
        q, c_fuse = critic.fuse(feat, sample.action)
        _, g_a = critic.fuse_backward(np.ones_like(q) / B, c_fuse)
        qs.append(q[:, 0])
        g_as.append(g_a)
    pick = (qs[0] <= qs[1])[:, None]
    g_action = -np.where(pick, g_as[0], g_as[1])
    qmin = np.minimum(qs[0], qs[1])
    loss = float(np.mean(alpha * sample.log_prob - qmin))
    actor.zero_grad()
    actor_backward(actor, sample, g_action, np.full(B, alpha / B, dtype=actor.dtype))
    return loss, sample.log_prob


def actor_update(batch: Batch, nets: SACNets, opts: dict, alpha: float, config: SACConfig,
                 rng: np.random.Generator, feats=None):
    loss, logp = actor_loss_grad(batch, nets, alpha, rng, feats)
    _clip(nets.actor.grads, config.grad_clip)
    opts["actor"].step(nets.actor.params, nets.actor.grads)
    return loss, logp


def temperature_update(log_alpha: np.ndarray, log_prob: np.ndarray, target_entropy: float, opt: Adam) -> float:
    """Step on E[-log_alpha (log pi + target_entropy)]; returns the loss."""
    m = float(np.mean(np.asarray(log_prob, dtype=np.float64) + target_entropy))
    grad = np.array([-m])
    loss = -float(log_alpha[0]) * m
    opt.step(log_alpha, grad)
    return loss


def polyak_update(target: Network, net: Network, tau: float) -> Network:
    target.params *= (1.0 - tau)
    target.params += tau * net.params
    return target


class SACAgent:
    """Owns the networks, optimizers and the update schedule."""

    def __init__(self, arch: ArchitectureSpec, config: SACConfig, seed: int = 0):
        self.config = config
        self.arch = arch
        dtype = np.dtype(config.dtype)
        self.nets = SACNets.create(arch, seed=seed, dtype=dtype, init_alpha=config.init_alpha)
        n = self.nets
        self.opts = {"actor": Adam(n.actor.size, config.lr, dtype=dtype),
                     "critic1": Adam(n.critic1.size, config.lr, dtype=dtype),
                     "critic2": Adam(n.critic2.size, config.lr, dtype=dtype),
                     "alpha": Adam(1, config.lr, dtype=np.float64)}
        self.rng = np.random.Generator(np.random.Philox(seed + 7919))
        self.updates = 0

    @property
    def alpha(self) -> float:
        return self.nets.alpha

    def act(self, obs: Observation, deterministic: bool = False) -> np.ndarray:
        s = forward_actor(self.nets.actor, obs.maps[None], obs.lidar[None], self.rng, deterministic=deterministic)
        return s.action[0].astype(np.float64)

    def update(self, batch: Batch) -> dict:
        """One simultaneous SAC update.

        Critic trunk features of s are computed once with the pre-update
        critics and shared by the actor loss and the critic regression.
        """
        n, cfg = self.nets, self.config
        alpha = n.alpha
        feats = [c.features(batch.maps, batch.lidar) for c in (n.critic1, n.critic2)]
        a_loss, logp = actor_update(batch, n, self.opts, alpha, cfg, self.rng, feats)
        al_loss = temperature_update(n.log_alpha, logp, cfg.target_entropy, self.opts["alpha"])
        y = critic_targets(batch, n, alpha, cfg.gamma, self.rng)
        c_loss = critic_update(batch, n, self.opts, alpha, cfg, self.rng, y=y, feats=feats)
        polyak_update(n.target1, n.critic1, cfg.polyak)
        polyak_update(n.target2, n.critic2, cfg.polyak)
        self.updates += 1
        return {"critic_loss": c_loss, "actor_loss": a_loss, "alpha_loss": al_loss,
                "entropy": float(-np.mean(logp))}

    def save(self, path, step: int, extra: dict | None = None) -> Path:
        meta = {"log_alpha": float(self.nets.log_alpha[0]), "updates": self.updates,
                "sac": self.config.to_dict()}
        meta.update(extra or {})
        return save_checkpoint(path, self.nets.as_dict(), step=step, extra=meta)

    @classmethod
    def load(cls, path, config: SACConfig | None = None) -> "SACAgent":
        nets, header = load_checkpoint(path)
        extra = header.get("extra", {})
        cfg = config or SACConfig.from_dict(extra.get("sac", {}))
        agent = cls(nets["actor"].spec, cfg)
        for k, v in nets.items():
            getattr(agent.nets, k).params[...] = v.params
        agent.nets.log_alpha[0] = extra.get("log_alpha", 0.0)
        agent.updates = extra.get("updates", 0)
        return agent


# ---------------------------------------------------------------------------
# training loop

@dataclass
class EpisodeSpec:
    world: WorldMap
    start: Pose
    goal_coverage: float
    map_id: str = ""
    level: int = 0


class FixedMapSource:
    """Episode source that always uses one map with random starts."""

    def __init__(self, world: WorldMap, goal_coverage: float = 0.99, map_id: str = "fixed"):
        from .env import random_start
        self._random_start = random_start
        self.world = world
        self.goal = goal_coverage
        self.map_id = map_id

    def next_episode(self, rng: np.random.Generator, radius: float) -> EpisodeSpec:
        return EpisodeSpec(self.world, self._random_start(self.world, radius, rng), self.goal, self.map_id, 0)

    def report(self, spec: EpisodeSpec, reached_goal: bool) -> None:
        pass


class MetricsSink:
    """Append-only CSV of finished episodes."""

    def __init__(self, path=None):
        self.rows: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as f:
                f.write(f"# {METRICS_VERSION}\n")
                csv.DictWriter(f, METRICS_COLUMNS).writeheader()

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as f:
                csv.DictWriter(f, METRICS_COLUMNS).writerow(row)


def _fmt(x):
    return f"{x:.6g}" if isinstance(x, float) else x


def train(env_config: EnvConfig, config: SACConfig, source, seed: int = 0, sink: MetricsSink | None = None,
          checkpoint_dir=None, arch: ArchitectureSpec | None = None, deterministic_time: bool = False,
          progress: Callable[[int, dict], None] | None = None) -> SACAgent:
    """Run the SAC loop for ``config.total_steps`` environment steps.

    ``source`` provides episodes (``next_episode(rng, radius)``) and receives
    results (``report(spec, reached_goal)``); a curriculum or a fixed map.
    """
    sink = sink or MetricsSink()
    enc = env_config.encoder
    prof = env_config.profile
    if arch is None:
        arch = ArchitectureSpec(arch=config.arch, head="actor", m=enc.m, grid_size=enc.grid_size,
                                lidar_rays=prof.lidar_rays)
    agent = SACAgent(arch, config, seed)
    env = CoverageEnv(env_config, seed=seed)
    rng = np.random.Generator(np.random.Philox(seed))
    buf = ReplayBuffer(min(config.buffer_capacity, max(config.total_steps, 1)), (3 * enc.m, enc.grid_size, enc.grid_size),
                       prof.lidar_rays)
    ckpt = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt:
        ckpt.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    episode = 0
    ep = source.next_episode(rng, prof.agent_radius)
    obs = env.reset(ep.world, ep.start, goal_coverage=ep.goal_coverage)
    ep_ret, ep_len = 0.0, 0
    last = {"critic_loss": float("nan"), "actor_loss": float("nan"), "alpha_loss": float("nan"),
            "entropy": float("nan")}
    for step in range(1, config.total_steps + 1):
        if step <= config.warmup_steps:
            action = rng.uniform(-1.0, 1.0, size=2)
        else:
            action = agent.act(obs)
        res: StepResult = env.step(action)
        r = res.reward.total
        buf.add(obs, action, r, res.obs, res.reason == GOAL)
        obs = res.obs
        ep_ret += r
        ep_len += 1
        if step > config.warmup_steps and len(buf) >= config.batch_size and step % config.update_every == 0:
            for _ in range(config.updates_per_step):
                last = agent.update(buf.sample(config.batch_size, agent.rng))
        if res.done:
            episode += 1
            reached = res.reason == GOAL
            source.report(ep, reached)
            row = {"step": step, "episode": episode, "return": ep_ret, "length": ep_len,
                   "coverage": env.covered_fraction, "reason": res.reason, "level": ep.level,
                   "map_id": ep.map_id, "alpha": agent.alpha, **last,
                   "wall_time": 0.0 if deterministic_time else time.perf_counter() - t0}
            sink.write({k: _fmt(v) for k, v in row.items()})
            if progress:
                progress(step, row)
            ep = source.next_episode(rng, prof.agent_radius)
            obs = env.reset(ep.world, ep.start, goal_coverage=ep.goal_coverage)
            ep_ret, ep_len = 0.0, 0
        if ckpt and config.checkpoint_every and step % config.checkpoint_every == 0:
            agent.save(ckpt / f"step_{step:09d}.ckpt", step)
    if ckpt:
        agent.save(ckpt / "final.ckpt", config.total_steps)
    agent.buffer = buf
    return agent


def load_train_config(path) -> dict:
    return json.loads(Path(path).read_text())


__all__ = ["SACConfig", "ReplayBuffer", "Batch", "SACNets", "SACAgent", "critic_targets", "critic_update",
           "actor_update", "actor_loss_grad", "temperature_update", "polyak_update", "train", "FixedMapSource",
           "EpisodeSpec", "MetricsSink", "METRICS_COLUMNS"]
