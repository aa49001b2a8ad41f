"""Small numpy networks with hand-written gradients: MLP, plain CNN and scale-grouped CNN.

All parameters of a network live in one flat vector; every layer holds
views into it (and into a matching gradient vector), so optimizers and
target-network averaging work on plain arrays.

Internally convolutional activations use the layout ``(groups, batch, H, W, C)``
which lets the im2col product come out of ``matmul`` without a transpose.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import kernels

MLP, CNN, SGCNN = "MLP", "CNN", "SGCNN"
ARCHITECTURES = (MLP, CNN, SGCNN)
LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
TANH_EPS = 1e-6
LOG_STD_BIAS = -1.0
CONV_CHANNELS = 24
HIDDEN = 256


# ---------------------------------------------------------------------------
# layers

class Layer:
    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return []

    def bind(self, params: np.ndarray, grads: np.ndarray, offset: int) -> int:
        for name, shape in self.shapes():
            n = int(np.prod(shape))
            setattr(self, name, params[offset:offset + n].reshape(shape))
            setattr(self, "g" + name, grads[offset:offset + n].reshape(shape))
            offset += n
        return offset

    def fan_in(self) -> int:
        return 1

    def forward(self, x):
        raise NotImplementedError

    def backward(self, gy, cache):
        raise NotImplementedError


class Linear(Layer):
    def __init__(self, n_in: int, n_out: int):
        self.n_in, self.n_out = n_in, n_out

    def shapes(self):
        return [("W", (self.n_in, self.n_out)), ("b", (self.n_out,))]

    def fan_in(self):
        return self.n_in

    def forward(self, x):
        return x @ self.W + self.b, x

    def backward(self, gy, x):
        self.gW += x.T @ gy
        self.gb += gy.sum(axis=0)
        return gy @ self.W.T


class ReLU(Layer):
    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, gy, mask):
        return gy * mask


class GroupConv(Layer):
    """Valid grouped convolution on ``(groups, B, H, W, C)`` tensors."""

    def __init__(self, groups: int, c_in: int, c_out: int, k: int, stride: int = 1):
        self.groups, self.c_in, self.c_out, self.k, self.stride = groups, c_in, c_out, k, stride

    def shapes(self):
        return [("W", (self.groups, self.k * self.k * self.c_in, self.c_out)), ("b", (self.groups, 1, self.c_out))]

    def fan_in(self):
        return self.k * self.k * self.c_in

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return (h - self.k) // self.stride + 1, (w - self.k) // self.stride + 1

    def forward(self, x):
        x = np.ascontiguousarray(x)
        g, B, H, W, C = x.shape
        Ho, Wo = self.out_hw(H, W)
        cols = np.empty((g, B * Ho * Wo, self.k * self.k * C), dtype=x.dtype)
        kernels.im2col(x, self.k, self.stride, cols)
        y = np.matmul(cols, self.W) + self.b
        return y.reshape(g, B, Ho, Wo, self.c_out), (cols, (B, H, W, Ho, Wo))

    def backward(self, gy, cache):
        cols, (B, H, W, Ho, Wo) = cache
        g = self.groups
        gyr = gy.reshape(g, B * Ho * Wo, self.c_out)
        self.gW += np.matmul(cols.transpose(0, 2, 1), gyr)
        self.gb += gyr.sum(axis=1, keepdims=True)
        gcols = np.ascontiguousarray(np.matmul(gyr, self.W.transpose(0, 2, 1)))
        gx = np.zeros((g, B, H, W, self.c_in), dtype=gy.dtype)
        kernels.col2im(gcols, self.k, self.stride, gx)
        return gx


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def bind(self, params, grads, offset):
        for layer in self.layers:
            offset = layer.bind(params, grads, offset)
        return offset

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, gy, caches):
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            gy = layer.backward(gy, c)
        return gy

    def param_layers(self):
        for layer in self.layers:
            if isinstance(layer, Sequential):
                yield from layer.param_layers()
            elif layer.shapes():
                yield layer


# ---------------------------------------------------------------------------
# architecture

@dataclass(frozen=True)
class ArchitectureSpec:
    arch: str = SGCNN
    head: str = "actor"  # "actor" or "critic"
    m: int = 4
    grid_size: int = 32
    lidar_rays: int = 24
    action_dim: int = 2
    conv_channels: int = CONV_CHANNELS
    hidden: int = HIDDEN

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.head not in ("actor", "critic"):
            raise ValueError("head must be 'actor' or 'critic'")
        if self.arch == SGCNN and self.conv_channels % self.m:
            raise ValueError("conv channels must split evenly over the scale groups")

    @property
    def out_dim(self) -> int:
        return 2 * self.action_dim if self.head == "actor" else 1

    @property
    def map_channels(self) -> int:
        return 3 * self.m

    def conv_hw(self) -> int:
        g = self.grid_size // 2
        return g - 6

    def to_json(self) -> dict:
        return asdict(self)


class Network:
    """Map trunk + lidar extractor + fusion MLP + linear head.

    ``forward(maps, lidar, action=None)`` takes maps as ``(B, 3m, G, G)`` in
    channel order coverage 1..m, obstacle 1..m, frontier 1..m.
    """

    def __init__(self, spec: ArchitectureSpec, seed: int | None = 0, dtype=np.float32, zero_head: bool = False):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        s = spec
        n_act = s.action_dim if s.head == "critic" else 0
        if s.arch == MLP:
            self.trunk = None
            fuse_in = s.map_channels * s.grid_size ** 2 + s.lidar_rays + n_act
            self.lidar_net = None
        else:
            groups = s.m if s.arch == SGCNN else 1
            c_in = 3 if s.arch == SGCNN else s.map_channels
            c = s.conv_channels // groups
            self.groups = groups
            self.convs = Sequential([
                GroupConv(groups, c_in, c, 2, stride=2), ReLU(),
                GroupConv(groups, c, c, 3), ReLU(),
                GroupConv(groups, c, c, 3), ReLU(),
                GroupConv(groups, c, c, 3), ReLU(),
            ])
            hw = s.conv_hw()
            self.flat_dim = s.conv_channels * hw * hw
            self.trunk = Sequential([Linear(self.flat_dim, s.hidden), ReLU()])
            self.lidar_net = Sequential([Linear(s.lidar_rays, s.lidar_rays), ReLU()])
            fuse_in = s.hidden + s.lidar_rays + n_act
        self.fusion = Sequential([Linear(fuse_in, s.hidden), ReLU(), Linear(s.hidden, s.hidden), ReLU()])
        self.head = Linear(s.hidden, s.out_dim)
        self.modules = [m for m in (getattr(self, "convs", None), self.trunk, self.lidar_net, self.fusion)
                        if m is not None] + [self.head]
        n = 0
        for mod in self.modules:
            for layer in (mod.param_layers() if isinstance(mod, Sequential) else [mod]):
                n += sum(int(np.prod(sh)) for _, sh in layer.shapes())
        self.size = n
        self.params = np.zeros(n, dtype=self.dtype)
        self.grads = np.zeros(n, dtype=self.dtype)
        off = 0
        for mod in self.modules:
            off = mod.bind(self.params, self.grads, off)
        self.step = 0
        if seed is not None:
            self.init(seed, zero_head)

    # -- parameters -----------------------------------------------------
    def layers(self):
        for mod in self.modules:
            yield from (mod.param_layers() if isinstance(mod, Sequential) else [mod])

    def init(self, seed: int, zero_head: bool = False) -> None:
        """Fan-in scaled uniform init; the actor's log-std bias starts at -1."""
        rng = np.random.Generator(np.random.Philox(seed))
        for layer in self.layers():
            bound = 1.0 / math.sqrt(layer.fan_in())
            layer.W[...] = rng.uniform(-bound, bound, size=layer.W.shape)
            layer.b[...] = rng.uniform(-bound, bound, size=layer.b.shape)
        if zero_head:
            self.head.W[...] = 0.0
            self.head.b[...] = 0.0
        if self.spec.head == "actor":
            self.head.b[self.spec.action_dim:] = LOG_STD_BIAS

    def zero_grad(self) -> None:
        self.grads[...] = 0.0

    def copy(self) -> "Network":
        other = Network(self.spec, seed=None, dtype=self.dtype)
        other.params[...] = self.params
        other.step = self.step
        return other

    def layout(self) -> list[dict]:
        out = []
        off = 0
        for i, layer in enumerate(self.layers()):
            for name, shape in layer.shapes():
                n = int(np.prod(shape))
                out.append({"layer": i, "kind": type(layer).__name__, "name": name, "shape": list(shape),
                            "offset": off})
                off += n
        return out

    # -- forward / backward ------------------------------------------------
    def _check(self, maps, lidar, action):
        s = self.spec
        if maps.ndim != 4 or maps.shape[1:] != (s.map_channels, s.grid_size, s.grid_size):
            raise ValueError(f"maps must be (B, {s.map_channels}, {s.grid_size}, {s.grid_size}), got {maps.shape}")
        if lidar.ndim != 2 or lidar.shape != (maps.shape[0], s.lidar_rays):
            raise ValueError(f"lidar must be (B, {s.lidar_rays}), got {lidar.shape}")
        if s.head == "critic":
            if action is None or action.shape != (maps.shape[0], s.action_dim):
                raise ValueError("critic needs an action of shape (B, action_dim)")

    def _to_groups(self, maps):
        s = self.spec
        B = maps.shape[0]
        if self.groups == 1:
            return maps.transpose(0, 2, 3, 1)[None]
        # channel index kind*m + scale -> group scale, channels (cov, obs, frontier)
        x = maps.reshape(B, 3, s.m, s.grid_size, s.grid_size)
        return x.transpose(2, 0, 3, 4, 1)

    def _from_groups(self, g, B):
        s = self.spec
        if self.groups == 1:
            return g[0].transpose(0, 3, 1, 2)
        return g.transpose(1, 4, 0, 2, 3).reshape(B, 3 * s.m, s.grid_size, s.grid_size)

    def features(self, maps, lidar):
        """Map and lidar features before fusion (the critic appends the action after these)."""
        maps = np.asarray(maps, dtype=self.dtype)
        lidar = np.asarray(lidar, dtype=self.dtype)
        B = maps.shape[0]
        if self.trunk is None:
            return np.concatenate([maps.reshape(B, -1), lidar], axis=1), None
        x = np.ascontiguousarray(self._to_groups(maps))
        conv_out, c_conv = self.convs.forward(x)
        flat = conv_out.transpose(1, 0, 2, 3, 4).reshape(B, -1)
        f_map, c_trunk = self.trunk.forward(flat)
        f_lid, c_lid = self.lidar_net.forward(lidar)
        return np.concatenate([f_map, f_lid], axis=1), (c_conv, conv_out.shape, c_trunk, c_lid)

    def fuse(self, feat, action=None):
        """Fusion MLP + head on precomputed features; the critic appends ``action``."""
        if self.spec.head == "critic":
            feat = np.concatenate([feat, np.asarray(action, dtype=self.dtype)], axis=1)
        h, c_fuse = self.fusion.forward(feat)
        out, c_head = self.head.forward(h)
        return out, (c_fuse, c_head)

    def fuse_backward(self, gout, cache):
        """Returns ``(g_features, g_action)``; ``g_action`` is None for the actor."""
        c_fuse, c_head = cache
        k = self.spec.action_dim
        gh = self.head.backward(np.asarray(gout, dtype=self.dtype), c_head)
        gfeat = self.fusion.backward(gh, c_fuse)
        if self.spec.head == "critic":
            return gfeat[:, :-k], gfeat[:, -k:]
        return gfeat, None

    def features_backward(self, gfeat, c_feat, need_input_grad: bool = False):
        s = self.spec
        B = gfeat.shape[0]
        if self.trunk is None:
            if not need_input_grad:
                return None
            n_map = s.map_channels * s.grid_size ** 2
            return gfeat[:, :n_map].reshape(B, s.map_channels, s.grid_size, s.grid_size), gfeat[:, n_map:]
        c_conv, conv_shape, c_trunk, c_lid = c_feat
        g_lid_in = self.lidar_net.backward(np.ascontiguousarray(gfeat[:, s.hidden:]), c_lid)
        g_flat = self.trunk.backward(np.ascontiguousarray(gfeat[:, :s.hidden]), c_trunk)
        g, _, hh, ww, cc = conv_shape
        g_conv = np.ascontiguousarray(g_flat.reshape(B, g, hh, ww, cc).transpose(1, 0, 2, 3, 4))
        g_x = self.convs.backward(g_conv, c_conv)
        if need_input_grad:
            return self._from_groups(g_x, B), g_lid_in
        return None

    def forward(self, maps, lidar, action=None):
        maps = np.asarray(maps)
        lidar = np.asarray(lidar)
        self._check(maps, lidar, action)
        feat, c_feat = self.features(maps, lidar)
        out, c_fuse = self.fuse(feat, action)
        return out, (c_feat, c_fuse)

    def backward(self, gout, cache, need_input_grad: bool = False):
        """Accumulate parameter gradients; returns the gradient w.r.t. the action (critic) or None.

        With ``need_input_grad`` the map and lidar input gradients are also returned.
        """
        c_feat, c_fuse = cache
        gfeat, g_action = self.fuse_backward(gout, c_fuse)
        g_in = self.features_backward(gfeat, c_feat, need_input_grad)
        if need_input_grad:
            return (g_action,) + g_in
        return g_action


def param_count(spec: ArchitectureSpec) -> int:
    """Closed-form parameter count from the layer dimensions."""
    s = spec
    n_act = s.action_dim if s.head == "critic" else 0
    head = s.hidden * s.out_dim + s.out_dim
    fusion_tail = s.hidden * s.hidden + s.hidden
    if s.arch == MLP:
        n_in = s.map_channels * s.grid_size ** 2 + s.lidar_rays + n_act
        return n_in * s.hidden + s.hidden + fusion_tail + head
    groups = s.m if s.arch == SGCNN else 1
    c_in = 3 if s.arch == SGCNN else s.map_channels
    c = s.conv_channels // groups
    convs = groups * ((4 * c_in * c + c) + 3 * (9 * c * c + c))
    hw = s.conv_hw()
    fc = s.conv_channels * hw * hw * s.hidden + s.hidden
    lidar = s.lidar_rays * s.lidar_rays + s.lidar_rays
    fusion = (s.hidden + s.lidar_rays + n_act) * s.hidden + s.hidden + fusion_tail
    return convs + fc + lidar + fusion + head


# ---------------------------------------------------------------------------
# squashed Gaussian policy

@dataclass
class PolicySample:
    action: np.ndarray
    log_prob: np.ndarray
    mean: np.ndarray
    log_std: np.ndarray
    cache: tuple


def forward_actor(actor: Network, maps, lidar, rng: np.random.Generator | None = None,
                  deterministic: bool = False, eps: np.ndarray | None = None) -> PolicySample:
    """Sample tanh-squashed actions with their log-probabilities.

    ``eps`` overrides the standard-normal draws (for gradient checks).
    """
    out, cache = actor.forward(maps, lidar)
    k = actor.spec.action_dim
    mean = out[:, :k]
    raw = out[:, k:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(log_std)
    if eps is None:
        eps = np.zeros_like(mean) if deterministic else rng.standard_normal(mean.shape).astype(mean.dtype)
    u = mean + std * eps
    # tanh rounds to exactly +-1 for |u| beyond ~9 (float32) or ~19 (float64); keep actions strictly inside
    lim = np.nextafter(np.array(1.0, dtype=u.dtype), np.array(0.0, dtype=u.dtype))
    a = np.clip(np.tanh(u), -lim, lim)
    log_prob = np.sum(-0.5 * eps * eps - log_std - 0.5 * math.log(2 * math.pi)
                      - np.log(1.0 - a * a + TANH_EPS), axis=1)
    return PolicySample(a, log_prob, mean, log_std, (cache, raw, eps, std, a))


def actor_backward(actor: Network, sample: PolicySample, g_action: np.ndarray, g_logp: np.ndarray,
                   need_input_grad: bool = False):
    """Backpropagate dL/da and dL/dlogp (per sample) through the reparameterised sample."""
    cache, raw, eps, std, a = sample.cache
    g_logp = np.asarray(g_logp)[:, None]
    one_m = 1.0 - a * a
    # d/du of -log(1 - tanh(u)^2 + eps)
    dcorr = 2.0 * a * one_m / (one_m + TANH_EPS)
    g_u = g_action * one_m + g_logp * dcorr
    g_mean = g_u
    g_logstd = g_u * std * eps - g_logp
    g_logstd = g_logstd * ((raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX))
    gout = np.concatenate([g_mean, g_logstd], axis=1)
    return actor.backward(gout, cache, need_input_grad=need_input_grad)


def forward_critic(critic: Network, maps, lidar, action):
    q, cache = critic.forward(maps, lidar, action)
    return q[:, 0], cache


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    def __init__(self, size: int, lr: float = 1e-5, betas=(0.9, 0.999), eps: float = 1e-8, dtype=np.float32):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(size, dtype=dtype)
        self.v = np.zeros(size, dtype=dtype)
        self.t = 0

    def step(self, params: np.ndarray, grads: np.ndarray, lr: float | None = None) -> None:
        """In-place update; bias corrections are folded into the step size and epsilon."""
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        self.m *= self.b1
        self.m += (1.0 - self.b1) * grads
        self.v *= self.b2
        self.v += (1.0 - self.b2) * np.square(grads)
        # lr * (m/c1) / (sqrt(v/c2) + eps) == (lr sqrt(c2)/c1) * m / (sqrt(v) + eps sqrt(c2))
        denom = np.sqrt(self.v)
        denom += self.eps * math.sqrt(c2)
        np.divide(self.m, denom, out=denom)
        denom *= lr * math.sqrt(c2) / c1
        params -= denom.astype(params.dtype, copy=False)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


def adam_step(params: np.ndarray, grads: np.ndarray, opt: Adam, lr: float | None = None) -> np.ndarray:
    opt.step(params, grads, lr)
    return params


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"CPPRLCK1"


def save_checkpoint(path, nets: dict, step: int = 0, extra: dict | None = None) -> Path:
    """Write ``MAGIC | u32 header length | JSON header | float32 LE parameter blocks``."""
    entries = []
    off = 0
    for name, net in nets.items():
        entries.append({"name": name, "spec": net.spec.to_json(), "size": net.size, "offset": off,
                        "layout": net.layout()})
        off += net.size
    header = {"format": "cpprl-checkpoint/1", "step": int(step), "dtype": "<f4", "nets": entries,
              "extra": extra or {}}
    blob = json.dumps(header).encode()
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for net in nets.values():
            f.write(np.asarray(net.params, dtype="<f4").tobytes())
    return path


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<I", f.read(4))
        return json.loads(f.read(n))


def load_checkpoint(path, dtype=np.float32) -> tuple[dict, dict]:
    """Returns ``(nets by name, header)``."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n])
    body = np.frombuffer(data[12 + n:], dtype="<f4")
    nets = {}
    for e in header["nets"]:
        net = Network(ArchitectureSpec(**e["spec"]), seed=None, dtype=dtype)
        if net.size != e["size"]:
            raise ValueError(f"checkpoint net {e['name']} has {e['size']} params, architecture needs {net.size}")
        net.params[...] = body[e["offset"]:e["offset"] + e["size"]]
        net.step = header["step"]
        nets[e["name"]] = net
    return nets, header
