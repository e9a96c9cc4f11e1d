import numpy as np
import pytest
import torch

from firebreak import nn as qnn
from firebreak.nn import QNetwork, StateError


def tiny(arch="small", dueling=False, rows=4, cols=4, ch=2, seed=0, dtype=torch.float64):
    return QNetwork(ch, rows, cols, arch, dueling, dropout=0.1, seed=seed).to(dtype)


def batch(net, b=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    c, r, k = net.config["in_channels"], net.config["rows"], net.config["cols"]
    x = torch.rand((b, c, r, k), generator=g, dtype=torch.float64)
    mask = torch.rand((b, r * k), generator=g) > 0.3
    mask[:, 0] = True
    return x.to(next(net.parameters()).dtype), mask


# ---------------------------------------------------------- structure

@pytest.mark.parametrize("arch,convs,hidden", [("small", 2, [512, 128]), ("big", 3, [2048, 48, 32])])
def test_architectures(arch, convs, hidden):
    net = QNetwork(5, 10, 10, arch, dueling=True)
    assert len(net.convs) == convs
    widths = [m.out_features for m in net.head if isinstance(m, torch.nn.Linear)]
    assert widths == hidden + [100]
    vwidths = [m.out_features for m in net.value_head if isinstance(m, torch.nn.Linear)]
    assert vwidths == hidden + [1]
    out = net.evaluate(torch.zeros(2, 5, 10, 10))
    assert out.q.shape == (2, 100) and out.value.shape == (2,)


def test_big_net_on_4x4_grid():
    net = tiny("big")
    assert net(torch.zeros(1, 2, 4, 4, dtype=torch.float64)).shape == (1, 16)


def test_init_he_uniform_zero_bias():
    net = QNetwork(3, 8, 8, "small", seed=4)
    for name, p in net.named_parameters():
        if name.endswith("bias"):
            assert not p.any()
        else:
            fan_in = p[0].numel()
            assert p.abs().max() <= np.sqrt(6.0 / fan_in) + 1e-6


def test_seeded_init_reproducible():
    a, b = QNetwork(3, 6, 6, seed=9), QNetwork(3, 6, 6, seed=9)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_shape_mismatch():
    net = tiny()
    with pytest.raises(ValueError):
        net(torch.zeros(1, 2, 5, 4, dtype=torch.float64))
    with pytest.raises(ValueError):
        net(torch.zeros(1, 2, 4, 4, dtype=torch.float64), torch.ones(1, 15, dtype=torch.bool))


# ------------------------------------------------------------- dueling

def _set_heads(net, adv, value):
    with torch.no_grad():
        net.head[-1].weight.zero_()
        net.head[-1].bias.copy_(torch.as_tensor(adv, dtype=net.head[-1].bias.dtype))
        net.value_head[-1].weight.zero_()
        net.value_head[-1].bias.fill_(value)


def test_dueling_equal_advantages_give_value():
    net = tiny(dueling=True)
    _set_heads(net, [0.7] * 16, -2.5)
    x, mask = batch(net)
    q = net(x, mask)
    assert torch.all(q[mask] == -2.5)


def test_dueling_hand_example():
    net = tiny(dueling=True)
    _set_heads(net, [2.0, 0.0] + [9.0] * 14, 1.0)
    mask = torch.zeros(1, 16, dtype=torch.bool)
    mask[0, :2] = True
    q = net(torch.zeros(1, 2, 4, 4, dtype=torch.float64), mask)
    assert q[0, :2].tolist() == [2.0, 0.0]
    assert torch.all(torch.isinf(q[0, 2:]))


def test_dueling_identity_random_states():
    net = tiny(dueling=True, rows=6, cols=6)
    x, mask = batch(net, b=50, seed=3)
    out = net.evaluate(x, mask)
    centred = torch.where(mask, out.raw - out.value[:, None], 0.0).sum(1) / mask.sum(1)
    assert centred.abs().max() < 1e-6


def test_masked_entries_never_argmax():
    for seed in range(20):
        net = tiny(dueling=seed % 2 == 0, seed=seed)
        x, mask = batch(net, b=8, seed=seed)
        idx = qnn.forward(net, x, mask).argmax(1)
        assert mask[torch.arange(8), idx].all()


def test_eval_forward_is_pure():
    net = tiny()
    x, mask = batch(net)
    assert torch.equal(net(x, mask), net(x, mask))


def test_dropout_only_in_training():
    net = tiny()
    x, _ = batch(net)
    assert not torch.equal(net(x, training=True), net(x, training=False))


# ------------------------------------------------------------ gradients

def test_backward_linear_closed_form():
    net = tiny()
    x, _ = batch(net, b=4)
    q = qnn.forward(net, x)
    grads = qnn.backward(net, torch.ones_like(q))
    _, feats = net.features(x)
    hidden = net.head[:-1](feats)
    last = f"head.{len(net.head) - 1}"
    # d(sum q)/dW_ij = sum over batch of hidden_j, identical for every output row i
    expected = hidden.sum(0).expand_as(grads[last + ".weight"])
    torch.testing.assert_close(grads[last + ".weight"], expected.detach())
    torch.testing.assert_close(grads[last + ".bias"], torch.full((16,), 4.0, dtype=torch.float64))


def test_zero_loss_grad_gives_zero_gradients():
    net = tiny(dueling=True)
    x, mask = batch(net)
    q = qnn.forward(net, x, mask)
    grads = qnn.backward(net, torch.zeros_like(q))
    assert all(not g.any() for g in grads.values())


def test_backward_requires_forward():
    net = tiny()
    with pytest.raises(StateError):
        qnn.backward(net, torch.zeros(1, 16))
    q = qnn.forward(net, batch(net)[0])
    qnn.backward(net, torch.zeros_like(q))
    with pytest.raises(StateError):
        qnn.backward(net, torch.zeros_like(q))


def fd_check(net, x, mask, training, per_tensor=12, h=1e-4, seed=0):
    """Central differences on sampled entries of every parameter tensor."""
    rng = np.random.default_rng(seed)
    state = net.dropout_rng.get_state()
    g = torch.Generator().manual_seed(seed)
    w = torch.randn((x.shape[0], net.n_actions), generator=g, dtype=torch.float64)
    w = torch.where(mask, w, 0.0) if mask is not None else w

    def loss():
        net.dropout_rng.set_state(state)
        with torch.no_grad():
            q = net(x, mask, training)
        return float(torch.where(torch.isfinite(q), q * w, 0.0).sum())

    net.dropout_rng.set_state(state)
    q = qnn.forward(net, x, mask, training)
    grads = qnn.backward(net, w)
    worst = 0.0
    for name, p in net.named_parameters():
        flat = p.data.view(-1)
        for k in rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False):
            old = flat[k].item()
            flat[k] = old + h
            up = loss()
            flat[k] = old - h
            down = loss()
            flat[k] = old
            fd = (up - down) / (2 * h)
            an = grads[name].view(-1)[k].item()
            scale = max(abs(fd), abs(an))
            if scale > 1e-6:
                worst = max(worst, abs(fd - an) / scale)
    return worst


@pytest.mark.parametrize("arch", ["small", "big"])
@pytest.mark.parametrize("dueling", [False, True])
def test_finite_differences(arch, dueling):
    net = tiny(arch, dueling, rows=5, cols=6, seed=2)
    x, mask = batch(net, b=2, seed=1)
    assert fd_check(net, x, mask, training=True) < 1e-3
    assert fd_check(net, x, None, training=False, seed=1) < 1e-3


# ------------------------------------------------------------ optimiser

def test_adam_zero_gradient_no_move():
    net = tiny()
    before = [p.clone() for p in net.parameters()]
    opt = qnn.make_optimizer(net, 5e-5)
    qnn.adam_step(net, {n: torch.zeros_like(p) for n, p in net.named_parameters()}, opt)
    assert all(torch.equal(a, b) for a, b in zip(before, net.parameters()))


def test_adam_first_step_opposes_gradient():
    net = tiny()
    opt = qnn.make_optimizer(net, 1e-3)
    grads = {n: torch.randn_like(p) for n, p in net.named_parameters()}
    before = {n: p.clone() for n, p in net.named_parameters()}
    qnn.adam_step(net, grads, opt)
    for n, p in net.named_parameters():
        delta = p - before[n]
        nz = grads[n] != 0
        assert torch.all(torch.sign(delta[nz]) == -torch.sign(grads[n][nz]))
        # bias-corrected first step: lr * |g| / (|g| + eps)
        g = grads[n][nz].abs()
        torch.testing.assert_close(delta[nz].abs(), 1e-3 * g / (g + 1e-8), rtol=1e-6, atol=1e-12)


def test_adam_shape_mismatch_and_lr():
    net = tiny()
    opt = qnn.make_optimizer(net, 5e-5)
    assert opt.param_groups[0]["lr"] == 5e-5
    assert opt.param_groups[0]["betas"] == (0.9, 0.999) and opt.param_groups[0]["eps"] == 1e-8
    grads = {n: torch.zeros_like(p) for n, p in net.named_parameters()}
    name = next(iter(grads))
    grads[name] = torch.zeros(3)
    with pytest.raises(ValueError):
        qnn.adam_step(net, grads, opt)


# ----------------------------------------------------------- target sync

def test_sync_target():
    online, target = tiny(seed=1), tiny(seed=2)
    x, mask = batch(online)
    qnn.sync_target(online, target)
    assert torch.equal(online(x, mask), target(x, mask))
    with torch.no_grad():
        next(online.parameters()).add_(1.0)
    assert not torch.equal(online(x, mask), target(x, mask))
    with pytest.raises(ValueError):
        qnn.sync_target(online, tiny("big"))


def test_l2_penalty_weights_only():
    net = tiny()
    with torch.no_grad():
        for n, p in net.named_parameters():
            p.fill_(2.0 if n.endswith("bias") else 0.5)
    n_weights = sum(p.numel() for n, p in net.named_parameters() if n.endswith("weight"))
    assert float(qnn.l2_penalty(net).detach()) == pytest.approx(0.25 * n_weights)


# --------------------------------------------------------------- GradCAM

def cam_oracle(net, x, action, mask=None):
    """Numerical gradient of q[action] w.r.t. the last conv activation, then the CAM recipe."""
    act, _ = net.features(x)
    act = act.detach().clone()
    m = None if mask is None else mask.reshape(1, -1)

    def q_of(a):
        return float(net.heads(torch.nn.functional.max_pool2d(a, 2, 2, ceil_mode=True).flatten(1), m)
                     .raw[0, action].detach())

    grad = np.zeros(act.shape[1:])
    h = 1e-6
    for idx in np.ndindex(*act.shape[1:]):
        a = act.clone()
        a[(0,) + idx] += h
        up = q_of(a)
        a[(0,) + idx] -= 2 * h
        grad[idx] = (up - q_of(a)) / (2 * h)
    weights = grad.mean(axis=(1, 2))
    cam = np.maximum((weights[:, None, None] * act[0].numpy()).sum(0), 0)
    rows, cols = net.config["rows"], net.config["cols"]
    ri = (np.arange(rows) * cam.shape[0]) // rows
    ci = (np.arange(cols) * cam.shape[1]) // cols
    cam = cam[np.ix_(ri, ci)]
    return cam / cam.max() if cam.max() > 0 else cam


@pytest.mark.parametrize("rows,cols", [(6, 6), (7, 5)])
def test_grad_cam_matches_oracle(rows, cols):
    net = tiny(rows=rows, cols=cols, seed=5)
    with torch.no_grad():
        for conv in net.convs:        # strictly positive activations: no pooling ties
            conv.weight.abs_()
            conv.bias.fill_(0.1)
    x, mask = batch(net, b=1, seed=5)
    for action in (0, 3, rows * cols - 1):
        got = qnn.grad_cam(net, x[0], action, mask[0])
        np.testing.assert_allclose(got, cam_oracle(net, x, action, mask[0]), atol=1e-5)


def test_grad_cam_contract():
    net = tiny(rows=7, cols=5, dueling=True, seed=1)
    x, _ = batch(net, b=1)
    cam = qnn.grad_cam(net, x[0], 4)
    assert cam.shape == (7, 5)
    assert cam.min() >= 0 and cam.max() <= 1
    if cam.max() > 0:
        assert cam.max() == 1.0
    with pytest.raises(ValueError):
        qnn.grad_cam(net, x[0], 35)


def test_grad_cam_zero_head():
    net = tiny(rows=6, cols=6)
    with torch.no_grad():
        for p in net.head.parameters():
            p.zero_()
    x, _ = batch(net, b=1)
    assert not qnn.grad_cam(net, x[0], 2).any()


# ------------------------------------------------------------ checkpoints

def test_checkpoint_round_trip(tmp_path):
    net = QNetwork(4, 5, 5, "big", dueling=True, seed=3)
    qnn.save_checkpoint(tmp_path / "m.npz", net, {"episodes": 7})
    back, extra = qnn.load_checkpoint(tmp_path / "m.npz")
    assert extra == {"episodes": 7} and back.config == net.config
    x = torch.rand(2, 4, 5, 5)
    assert torch.equal(back(x), net(x))


def test_checkpoint_bytes_deterministic():
    net = QNetwork(2, 4, 4, seed=1)
    assert qnn.checkpoint_bytes(net) == qnn.checkpoint_bytes(QNetwork(2, 4, 4, seed=1))


def test_checkpoint_rejects_foreign_file(tmp_path):
    np.savez(tmp_path / "x.npz", __meta__=np.frombuffer(b'{"format": "nope"}', dtype=np.uint8))
    with pytest.raises(ValueError):
        qnn.load_checkpoint(tmp_path / "x.npz")
