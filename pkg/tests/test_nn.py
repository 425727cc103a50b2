import struct

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from selfaugment.contrastive import infonce_loss
from selfaugment.nn import (
    CheckpointError,
    EncoderConfig,
    SgdConfig,
    build_encoder,
    float64_copy,
    grad_check,
    linear_head,
    load_checkpoint,
    make_sgd,
    save_checkpoint,
    set_epoch_lr,
    sgd_step,
)


def _batch(n=4, size=8, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).random((n, 3, size, size)).astype(np.float32))


def test_forward_shapes_and_normalization():
    cfg = EncoderConfig()
    enc = build_encoder(cfg, 0)
    h, z = enc(_batch())
    assert h.shape == (4, cfg.feat_dim) and z.shape == (4, cfg.proj_dim)
    torch.testing.assert_close(z.norm(dim=1), torch.ones(4), atol=1e-5, rtol=0)
    with pytest.raises(ValueError):
        enc.features(torch.zeros(4, 1, 8, 8))


def test_forward_is_deterministic():
    a, b = build_encoder(EncoderConfig(), 3), build_encoder(EncoderConfig(), 3)
    x = _batch()
    assert torch.equal(a(x)[1], b(x)[1])
    assert torch.equal(a(x)[0], a(x)[0])


def test_zero_weights_give_zero_features():
    enc = build_encoder(EncoderConfig(norm="none"), 0)
    with torch.no_grad():
        for p in enc.parameters():
            p.zero_()
    assert torch.count_nonzero(enc.project(_batch(), normalize=False)) == 0
    assert torch.count_nonzero(enc.features(_batch())) == 0


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(proj_dim=1)
    with pytest.raises(ValueError):
        EncoderConfig(widths=())
    with pytest.raises(ValueError):
        EncoderConfig(norm="layer")


# -- SGD ------------------------------------------------------------------------------


def test_lr_zero_leaves_parameters():
    enc = build_encoder(EncoderConfig(), 0)
    before = [p.detach().clone() for p in enc.parameters()]
    opt = make_sgd(enc.parameters(), SgdConfig(0.0, 0.9, 1e-4))
    for _ in range(3):
        loss = enc.project(_batch()).sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert all(torch.equal(a, b) for a, b in zip(before, enc.parameters()))


def test_linear_quadratic_matches_closed_form():
    """L = 0.5 * ||W x + b - y||^2 has dL/dW = r x^T and dL/db = r with r = W x + b - y."""
    rng = np.random.default_rng(0)
    W0 = rng.normal(size=(2, 3))
    b0 = rng.normal(size=2)
    x = rng.normal(size=3)
    y = rng.normal(size=2)
    cfg = SgdConfig(0.1, momentum=0.9, weight_decay=0.01)

    # hand-derived two steps of v <- m v + g + wd theta; theta <- theta - lr v
    W, b = W0.copy(), b0.copy()
    vW, vb = np.zeros_like(W), np.zeros_like(b)
    for _ in range(2):
        r = W @ x + b - y
        vW = 0.9 * vW + np.outer(r, x) + 0.01 * W
        vb = 0.9 * vb + r + 0.01 * b
        W, b = W - 0.1 * vW, b - 0.1 * vb

    layer = torch.nn.Linear(3, 2).double()
    with torch.no_grad():
        layer.weight.copy_(torch.from_numpy(W0))
        layer.bias.copy_(torch.from_numpy(b0))
    opt = make_sgd(layer.parameters(), cfg)
    xt, yt = torch.from_numpy(x), torch.from_numpy(y)
    for _ in range(2):
        loss = 0.5 * ((layer(xt) - yt) ** 2).sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
    np.testing.assert_allclose(layer.weight.detach().numpy(), W, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(layer.bias.detach().numpy(), b, rtol=1e-12, atol=1e-12)

    # the explicit update follows the same rule
    Wt, bt = torch.from_numpy(W0.copy()), torch.from_numpy(b0.copy())
    vel = [torch.zeros_like(Wt), torch.zeros_like(bt)]
    for _ in range(2):
        r = Wt @ xt + bt - yt
        sgd_step([Wt, bt], [torch.outer(r, xt), r], vel, cfg, epoch=0)
    np.testing.assert_allclose(Wt.numpy(), W, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(bt.numpy(), b, rtol=1e-12, atol=1e-12)


def test_step_schedule():
    cfg = SgdConfig(1.0, schedule=((30, 0.1),))
    assert cfg.lr_at(29) == 1.0 and cfg.lr_at(30) == pytest.approx(0.1) and cfg.lr_at(49) == pytest.approx(0.1)
    two = SgdConfig(15.0, schedule=((20, 0.1), (30, 0.1)))
    assert [two.lr_at(e) for e in (0, 19, 20, 29, 30)] == pytest.approx([15, 15, 1.5, 1.5, 0.15])
    opt = make_sgd([torch.zeros(1, requires_grad=True)], two)
    assert set_epoch_lr(opt, two, 25) == pytest.approx(1.5) and opt.param_groups[0]["lr"] == pytest.approx(1.5)
    with pytest.raises(ValueError):
        SgdConfig(-1.0)
    with pytest.raises(ValueError):
        SgdConfig(0.1, momentum=1.0)


# -- gradient checks --------------------------------------------------------------------


def test_grad_check_encoder_infonce():
    enc = float64_copy(build_encoder(EncoderConfig(), 0))
    g = torch.Generator().manual_seed(0)
    xq = torch.rand(6, 3, 8, 8, generator=g, dtype=torch.float64)
    xk = torch.rand(6, 3, 8, 8, generator=g, dtype=torch.float64)
    queue = F.normalize(torch.randn(16, enc.cfg.proj_dim, generator=g, dtype=torch.float64), dim=1)
    with torch.no_grad():
        k = enc.project(xk)

    def loss_fn():
        return infonce_loss(enc.project(xq), k, queue, 0.2)[0]

    assert grad_check(list(enc.parameters()), loss_fn, eps=1e-6, num_checks=96) < 1e-3


def test_grad_check_linear_head_cross_entropy():
    head = linear_head(10, 4, seed=0).double()
    g = torch.Generator().manual_seed(1)
    x = torch.randn(32, 10, generator=g, dtype=torch.float64)
    y = torch.randint(0, 4, (32,), generator=g)
    assert grad_check(list(head.parameters()), lambda: F.cross_entropy(head(x), y), eps=1e-6) < 1e-4


def test_zero_loss_has_zero_gradient():
    head = linear_head(5, 3).double()
    loss_fn = lambda: 0.0 * head(torch.ones(1, 5, dtype=torch.float64)).sum()  # noqa: E731
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(head.parameters()))
    assert all(torch.count_nonzero(g) == 0 for g in grads)
    assert grad_check(list(head.parameters()), loss_fn) == 0.0


@pytest.mark.parametrize("eps", [1e-7, 0.1])
def test_grad_check_eps_bounds(eps):
    head = linear_head(2, 2).double()
    with pytest.raises(ValueError):
        grad_check(list(head.parameters()), lambda: head(torch.ones(1, 2, dtype=torch.float64)).sum(), eps=eps)


@given(st.integers(0, 1000))
def test_grad_check_layer_types(seed):
    """Conv, batch norm, pooling, ReLU and linear layers all agree with finite differences."""
    enc = float64_copy(build_encoder(EncoderConfig(widths=(4, 6), proj_dim=3), seed))
    x = torch.rand(3, 3, 4, 4, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    w = torch.randn(3, generator=torch.Generator().manual_seed(seed + 1), dtype=torch.float64)
    assert grad_check(list(enc.parameters()), lambda: (enc.project(x, normalize=False) @ w).sum(),
                      num_checks=24, seed=seed) < 1e-3


def test_memorization_loss_decreases_monotonically():
    torch.manual_seed(0)
    x = _batch(32, 8, seed=5)
    y = torch.arange(32) % 4
    enc = build_encoder(EncoderConfig(), 0)
    head = linear_head(enc.cfg.feat_dim, 4, 0)
    params = list(enc.parameters()) + list(head.parameters())
    opt = make_sgd(params, SgdConfig(0.05, momentum=0.0))
    losses = []
    for _ in range(20):
        loss = F.cross_entropy(head(enc.features(x)), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


# -- checkpoints ------------------------------------------------------------------------


def test_checkpoint_round_trip_and_layout(tmp_path):
    tensors = {"b.weight": torch.arange(6, dtype=torch.float32).view(2, 3), "a": torch.tensor([1.5]),
               "scalar": torch.tensor(2.0)}
    path = tmp_path / "x.saug"
    save_checkpoint(path, tensors)
    raw = path.read_bytes()
    assert raw[:4] == b"SAUG"
    assert struct.unpack_from("<II", raw, 4) == (1, 3)
    (n,) = struct.unpack_from("<I", raw, 12)
    assert raw[16:16 + n] == b"a"  # records sorted by name
    back = load_checkpoint(path)
    assert set(back) == set(tensors)
    for k in tensors:
        assert torch.equal(back[k], tensors[k])
    save_checkpoint(tmp_path / "y.saug", back)
    assert (tmp_path / "y.saug").read_bytes() == raw


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "x.saug"
    save_checkpoint(path, {"w": torch.ones(4)})
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-3])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short")
    (tmp_path / "long").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(tmp_path / "long")
