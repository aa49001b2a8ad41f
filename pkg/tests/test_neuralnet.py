import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpprl.neuralnet import (CNN, LOG_STD_MAX, LOG_STD_MIN, MLP, SGCNN, Adam, ArchitectureSpec, GroupConv, Linear,
                             Network, ReLU, actor_backward, adam_step, forward_actor, forward_critic,
                             load_checkpoint, param_count, read_checkpoint_header, save_checkpoint)

TINY = dict(m=2, grid_size=16, lidar_rays=5, conv_channels=4, hidden=12)


def rel_err(a, n):
    return np.abs(a - n) / (np.abs(a) + 1e-8)


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


def tiny(arch=SGCNN, head="actor", seed=0):
    return Network(ArchitectureSpec(arch=arch, head=head, **TINY), seed=seed, dtype=np.float64)


def inputs(net, B=3, seed=1):
    r = np.random.default_rng(seed)
    s = net.spec
    maps = r.random((B, s.map_channels, s.grid_size, s.grid_size))
    lidar = r.random((B, s.lidar_rays))
    action = r.uniform(-1, 1, (B, s.action_dim))
    return maps, lidar, action


# ---------------------------------------------------------------------------
# layers

def test_linear_gradients():
    r = np.random.default_rng(0)
    lay = Linear(4, 3)
    p = r.normal(size=15)
    g = np.zeros(15)
    lay.bind(p, g, 0)
    x = r.normal(size=(5, 4))
    R = r.normal(size=(5, 3))

    def loss():
        return float(np.sum(lay.forward(x)[0] * R))

    y, c = lay.forward(x)
    gx = lay.backward(R, c)
    assert rel_err(g, fd_grad(loss, p)).max() < 1e-4
    assert rel_err(gx, fd_grad(loss, x)).max() < 1e-4


def test_relu_gradient():
    r = np.random.default_rng(1)
    x = r.normal(size=(6, 7))
    R = r.normal(size=x.shape)
    lay = ReLU()
    y, c = lay.forward(x)
    gx = lay.backward(R, c)
    num = fd_grad(lambda: float(np.sum(lay.forward(x)[0] * R)), x)
    assert rel_err(gx, num).max() < 1e-4


@pytest.mark.parametrize("k,stride", [(2, 2), (3, 1)])
def test_group_conv_gradients(k, stride):
    r = np.random.default_rng(2)
    lay = GroupConv(2, 3, 2, k, stride)
    n = sum(int(np.prod(s)) for _, s in lay.shapes())
    p = r.normal(size=n)
    g = np.zeros(n)
    lay.bind(p, g, 0)
    x = r.normal(size=(2, 2, 7, 7, 3))
    y, c = lay.forward(x)
    R = r.normal(size=y.shape)
    gx = lay.backward(R, c)

    def loss():
        return float(np.sum(lay.forward(x)[0] * R))

    assert rel_err(g, fd_grad(loss, p)).max() < 1e-4
    assert rel_err(gx, fd_grad(loss, x)).max() < 1e-4


def test_group_conv_matches_direct_convolution():
    r = np.random.default_rng(3)
    lay = GroupConv(2, 3, 4, 3, 1)
    n = sum(int(np.prod(s)) for _, s in lay.shapes())
    lay.bind(r.normal(size=n), np.zeros(n), 0)
    x = r.normal(size=(2, 1, 6, 6, 3))
    y, _ = lay.forward(x)
    W = lay.W.reshape(2, 3, 3, 3, 4)
    for gi in range(2):
        for i in range(4):
            for j in range(4):
                patch = x[gi, 0, i:i + 3, j:j + 3, :]
                ref = np.einsum("abc,abcd->d", patch, W[gi]) + lay.b[gi, 0]
                np.testing.assert_allclose(y[gi, 0, i, j], ref, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------------------
# whole networks

@pytest.mark.parametrize("arch", [MLP, CNN, SGCNN])
@pytest.mark.parametrize("head", ["actor", "critic"])
def test_network_parameter_and_input_gradients(arch, head):
    spec_kw = dict(TINY)
    if arch == MLP:
        spec_kw.update(grid_size=4, hidden=8)
    net = Network(ArchitectureSpec(arch=arch, head=head, **spec_kw), seed=0, dtype=np.float64)
    assert net.size <= 10_000
    maps, lidar, action = inputs(net)
    act = action if head == "critic" else None
    out, cache = net.forward(maps, lidar, act)
    R = np.random.default_rng(9).normal(size=out.shape)
    net.zero_grad()
    g = net.backward(R, cache, need_input_grad=True)

    def loss():
        return float(np.sum(net.forward(maps, lidar, act)[0] * R))

    assert rel_err(net.grads, fd_grad(loss, net.params)).max() < 1e-4
    g_action, g_maps, g_lidar = g
    assert rel_err(g_maps, fd_grad(loss, maps)).max() < 1e-4
    assert rel_err(g_lidar, fd_grad(loss, lidar)).max() < 1e-4
    if head == "critic":
        assert rel_err(g_action, fd_grad(loss, action)).max() < 1e-4
    else:
        assert g_action is None


def test_gaussian_tanh_policy_gradient():
    net = tiny()
    maps, lidar, _ = inputs(net)
    eps = np.random.default_rng(4).normal(size=(3, 2))
    wa = np.random.default_rng(5).normal(size=(3, 2))
    wl = np.random.default_rng(6).normal(size=3)

    def loss():
        s = forward_actor(net, maps, lidar, eps=eps)
        return float(np.sum(s.action * wa) + np.sum(s.log_prob * wl))

    s = forward_actor(net, maps, lidar, eps=eps)
    net.zero_grad()
    actor_backward(net, s, wa, wl)
    assert rel_err(net.grads, fd_grad(loss, net.params)).max() < 1e-4


def test_constant_loss_gives_zero_gradient():
    net = tiny(head="critic")
    maps, lidar, action = inputs(net)
    out, cache = net.forward(maps, lidar, action)
    net.zero_grad()
    net.backward(np.zeros_like(out), cache)
    assert not net.grads.any()


def test_gradient_linearity():
    net = tiny(head="critic")
    maps, lidar, action = inputs(net)
    r = np.random.default_rng(7)
    R1, R2 = r.normal(size=(3, 1)), r.normal(size=(3, 1))

    def grad(R):
        out, cache = net.forward(maps, lidar, action)
        net.zero_grad()
        net.backward(R, cache)
        return net.grads.copy()

    np.testing.assert_allclose(grad(2.0 * R1 - 0.5 * R2), 2.0 * grad(R1) - 0.5 * grad(R2), rtol=1e-10, atol=1e-12)


def test_sgcnn_feature_chain_shapes():
    net = Network(ArchitectureSpec(arch=SGCNN), seed=0)
    x = np.zeros((4, 1, 32, 32, 3), dtype=np.float32)
    shapes = []
    for layer in net.convs.layers:
        x, _ = layer.forward(x)
        if isinstance(layer, GroupConv):
            shapes.append(x.shape[2:])
    assert shapes == [(16, 16, 6), (14, 14, 6), (12, 12, 6), (10, 10, 6)]
    assert net.flat_dim == 4 * 6 * 10 * 10 == 2400


def test_sgcnn_groups_are_independent():
    net = Network(ArchitectureSpec(arch=SGCNN), seed=0, dtype=np.float64)
    maps = np.random.default_rng(0).random((2, 12, 32, 32))
    other = maps.copy()
    other[:, [1, 5, 9]] = np.random.default_rng(1).random((2, 3, 32, 32))  # scale 2 of every channel kind

    def group_out(m):
        x = np.ascontiguousarray(net._to_groups(m))
        y, _ = net.convs.forward(x)
        return y

    a, b = group_out(maps), group_out(other)
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[2:], b[2:])
    assert not np.array_equal(a[1], b[1])


def test_parameter_counts_within_bands():
    sg = ArchitectureSpec(arch=SGCNN)
    mlp = ArchitectureSpec(arch=MLP)
    cnn = ArchitectureSpec(arch=CNN)
    n_sg, n_mlp, n_cnn = param_count(sg), param_count(mlp), param_count(cnn)
    assert abs(n_sg - 0.8e6) <= 0.15 * 0.8e6
    assert abs(n_mlp - 3.2e6) <= 0.15 * 3.2e6
    assert n_sg / 2 <= n_cnn <= 2 * n_sg
    for spec, n in ((sg, n_sg), (mlp, n_mlp), (cnn, n_cnn)):
        assert Network(spec, seed=None).size == n
    critic = ArchitectureSpec(arch=SGCNN, head="critic")
    assert Network(critic, seed=None).size == param_count(critic)


def test_sgcnn_count_breakdown():
    net = Network(ArchitectureSpec(arch=SGCNN), seed=None)
    sizes = [layer.W.size + layer.b.size for layer in net.layers()]
    assert sum(sizes[:4]) == 4272  # grouped convolutions
    assert sizes[4] == 614_656  # 2400 -> 256
    assert sizes[5] == 600  # lidar 24 -> 24
    assert sizes[6] + sizes[7] == 137_728  # fusion
    assert sizes[8] == 256 * 4 + 4


def test_shape_mismatch_raises():
    net = tiny()
    maps, lidar, action = inputs(net)
    with pytest.raises(ValueError):
        net.forward(maps[:, :3], lidar)
    with pytest.raises(ValueError):
        net.forward(maps, lidar[:, :2])
    critic = tiny(head="critic")
    with pytest.raises(ValueError):
        critic.forward(maps, lidar)


def test_zero_head_gives_centered_actions():
    net = Network(ArchitectureSpec(arch=SGCNN, **TINY), seed=0, dtype=np.float64, zero_head=True)
    maps, lidar, _ = inputs(net)
    s = forward_actor(net, maps, lidar, deterministic=True)
    assert np.array_equal(s.mean, np.zeros_like(s.mean))
    assert np.array_equal(s.action, np.zeros_like(s.action))


def test_fixed_seed_sampling_is_reproducible():
    net = tiny()
    maps, lidar, _ = inputs(net)
    a = forward_actor(net, maps, lidar, np.random.default_rng(3)).action
    b = forward_actor(net, maps, lidar, np.random.default_rng(3)).action
    assert np.array_equal(a, b)


def test_log_prob_matches_change_of_variables():
    net = tiny()
    maps, lidar, _ = inputs(net, B=2)
    eps = np.array([[0.3, -1.2], [0.0, 2.0]])
    s = forward_actor(net, maps, lidar, eps=eps)
    std = np.exp(s.log_std)
    u = s.mean + std * eps
    gauss = -0.5 * ((u - s.mean) / std) ** 2 - np.log(std) - 0.5 * math.log(2 * math.pi)
    ref = np.sum(gauss - np.log(1 - np.tanh(u) ** 2 + 1e-6), axis=1)
    np.testing.assert_allclose(s.log_prob, ref, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-5, 5))
def test_actions_strictly_inside_and_log_std_clamped(bias_mean, bias_std, e):
    net = tiny()
    net.head.b[:2] = bias_mean
    net.head.b[2:] = bias_std
    maps, lidar, _ = inputs(net, B=2)
    s = forward_actor(net, maps, lidar, eps=np.full((2, 2), e))
    assert np.all(s.log_std >= LOG_STD_MIN) and np.all(s.log_std <= LOG_STD_MAX)
    assert np.all(np.isfinite(s.log_prob))
    assert np.all(np.abs(s.action) < 1.0)
    net32 = Network(net.spec, seed=0)
    net32.head.b[:2] = bias_mean
    net32.head.b[2:] = bias_std
    s32 = forward_actor(net32, maps.astype(np.float32), lidar.astype(np.float32), eps=np.full((2, 2), e, np.float32))
    assert s32.action.dtype == np.float32 and np.all(np.abs(s32.action) < 1.0)
    assert np.all(np.isfinite(s32.log_prob))


def test_critics_with_different_seeds_differ():
    maps, lidar, action = inputs(tiny(head="critic"))
    q1, _ = forward_critic(tiny(head="critic", seed=1), maps, lidar, action)
    q2, _ = forward_critic(tiny(head="critic", seed=2), maps, lidar, action)
    assert not np.allclose(q1, q2)


def test_zero_params_critic_returns_head_bias():
    net = tiny(head="critic")
    net.params[...] = 0.0
    net.head.b[...] = 0.75
    maps, lidar, action = inputs(net)
    q, _ = forward_critic(net, maps, lidar, action)
    assert np.array_equal(q, np.full(3, 0.75))


@pytest.mark.parametrize("arch", [MLP, SGCNN])
def test_critic_finite_on_extreme_inputs(arch):
    net = Network(ArchitectureSpec(arch=arch, head="critic"), seed=0)
    maps = np.ones((2, 12, 32, 32), dtype=np.float32)
    lidar = np.ones((2, 24), dtype=np.float32)
    action = np.array([[1.0, -1.0], [-1.0, 1.0]], dtype=np.float32)
    q, _ = forward_critic(net, maps, lidar, action)
    assert np.all(np.isfinite(q))


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    actor = Network(ArchitectureSpec(arch=SGCNN), seed=5)
    critic = Network(ArchitectureSpec(arch=SGCNN, head="critic"), seed=6)
    path = save_checkpoint(tmp_path / "x.ckpt", {"actor": actor, "critic1": critic}, step=42, extra={"k": 1})
    nets, header = load_checkpoint(path)
    assert header["step"] == 42 and header["extra"] == {"k": 1}
    assert read_checkpoint_header(path)["format"] == "cpprl-checkpoint/1"
    maps = np.random.default_rng(0).random((2, 12, 32, 32)).astype(np.float32)
    lidar = np.random.default_rng(1).random((2, 24)).astype(np.float32)
    a1 = forward_actor(actor, maps, lidar, deterministic=True).action
    a2 = forward_actor(nets["actor"], maps, lidar, deterministic=True).action
    assert np.array_equal(a1, a2)
    act = np.zeros((2, 2), dtype=np.float32)
    assert np.array_equal(forward_critic(critic, maps, lidar, act)[0], forward_critic(nets["critic1"], maps, lidar, act)[0])


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        load_checkpoint(p)


# ---------------------------------------------------------------------------
# Adam

def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0, 3.0])
    opt = Adam(3, lr=1e-3, dtype=np.float64)
    for _ in range(5):
        adam_step(p, np.zeros(3), opt)
    assert np.array_equal(p, [1.0, -2.0, 3.0])


def test_adam_first_step_magnitude_is_lr():
    p = np.zeros(4)
    opt = Adam(4, lr=1e-3, dtype=np.float64)
    adam_step(p, np.array([0.5, -2.0, 10.0, 1e-3]), opt)
    # m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
    ref = -1e-3 * np.array([0.5, -2.0, 10.0, 1e-3]) / (np.abs([0.5, -2.0, 10.0, 1e-3]) + 1e-8)
    np.testing.assert_allclose(p, ref, rtol=1e-9)


def test_adam_matches_textbook_formula_over_steps():
    r = np.random.default_rng(0)
    p = r.normal(size=6)
    q = p.copy()
    opt = Adam(6, lr=1e-2, dtype=np.float64)
    m = np.zeros(6)
    v = np.zeros(6)
    for t in range(1, 21):
        g = r.normal(size=6)
        adam_step(p, g, opt)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        q -= 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p, q, rtol=1e-10, atol=1e-12)


def test_adam_deterministic():
    g = np.random.default_rng(1).normal(size=(10, 5))
    outs = []
    for _ in range(2):
        p = np.ones(5)
        opt = Adam(5, lr=1e-3, dtype=np.float64)
        for row in g:
            adam_step(p, row, opt)
        outs.append(p)
    assert np.array_equal(outs[0], outs[1])
