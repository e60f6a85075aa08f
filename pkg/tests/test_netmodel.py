import numpy as np
import pytest
import torch

from skei.errors import ConfigError, LoadError, NumericError
from skei.netmodel import (UNetSpec, bn_forward, build_unet, count_parameters, load_checkpoint,
                           read_checkpoint, save_checkpoint, select_parameters)


def test_bn_forward_identity_and_arithmetic():
    v = torch.tensor([2.0, 4.0, -1.5], dtype=torch.float64)
    assert torch.equal(bn_forward(v, 1.0, 0.0, 0.0, 1.0), v)
    out = bn_forward(torch.tensor([2.0, 4.0]), 2.0, 1.0, 3.0, 1.0)
    assert out.tolist() == [-1.0, 3.0]


def test_bn_forward_per_channel_broadcast():
    v = torch.ones(2, 3, 4, 4, dtype=torch.float64)
    out = bn_forward(v, torch.tensor([1.0, 2.0, 3.0]), torch.zeros(3), torch.zeros(3), torch.ones(3))
    assert out[:, 2].eq(3.0).all() and out[:, 0].eq(1.0).all()


def test_bn_forward_rejects_nonpositive_std():
    with pytest.raises(NumericError):
        bn_forward(torch.ones(3), 1.0, 0.0, 0.0, 0.0)


def test_bn_forward_scale_gradient_matches_central_difference():
    gen = torch.Generator().manual_seed(0)
    v = torch.randn(5, dtype=torch.float64, generator=gen)
    scale = torch.tensor(1.3, dtype=torch.float64, requires_grad=True)

    def f(s):
        return (bn_forward(v, s, 0.2, 0.1, 0.7) ** 2).sum()

    f(scale).backward()
    h = 1e-6
    fd = (f(torch.tensor(1.3 + h, dtype=torch.float64)) - f(torch.tensor(1.3 - h, dtype=torch.float64))) / (2 * h)
    assert abs(float(scale.grad) - float(fd)) <= 1e-4 * abs(float(fd))


def test_forward_preserves_shape():
    net = build_unet(depth=3, base_channels=4)
    x = torch.randn(2, 1, 64, 64)
    assert net(x).shape == x.shape
    odd = torch.randn(1, 1, 30, 22)
    assert net(odd).shape == odd.shape
    cplx = build_unet(depth=2, base_channels=4, in_channels=2)
    assert cplx(torch.randn(1, 2, 16, 16)).shape == (1, 2, 16, 16)


def test_residual_network_starts_as_identity():
    net = build_unet(depth=2, base_channels=4, residual=True)
    x = torch.randn(1, 1, 16, 16)
    assert torch.equal(net(x), x)


def test_residual_with_zero_inner_weights_is_identity():
    net = build_unet(depth=2, base_channels=4, residual=True)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("weight") and p.ndim == 4:
                p.zero_()
    x = torch.randn(1, 1, 16, 16)
    assert torch.allclose(net(x), x)


def _bn_widths_by_walk(spec: UNetSpec) -> list[int]:
    # Two norms per conv block on the way down, then per level one after the
    # up-convolution and two in the decoding block.
    w = [spec.base_channels * 2**i for i in range(spec.depth + 1)]
    down = [c for c in w for _ in range(2)]
    up = [w[i - 1] for i in range(spec.depth, 0, -1) for _ in range(3)]
    return down + up


def test_bn_only_count_matches_architecture_walk():
    spec = UNetSpec(depth=4, base_channels=16)
    net = build_unet(depth=4, base_channels=16)
    widths = _bn_widths_by_walk(spec)
    assert len(net.norm_layers()) == len(widths) == 22
    sel = select_parameters(net, "bn-only")
    assert sel.count(net) == 2 * sum(widths) == 3424


def test_full_selector_covers_everything():
    net = build_unet(depth=2, base_channels=4)
    sel = select_parameters(net, "full")
    assert sel.count(net) == count_parameters(net)
    groups = net.parameter_groups()
    assert set(groups["conv"]).isdisjoint(groups["norm"])
    with pytest.raises(ConfigError):
        select_parameters(net, "half")


def test_reference_scale_parameter_budget():
    net = build_unet(depth=4, base_channels=64)
    total = count_parameters(net)
    assert abs(total - 3.45e7) / 3.45e7 <= 0.05
    bn = select_parameters(net, "bn-only").count(net)
    assert bn == 13_696
    assert bn / total == pytest.approx(1.4e4 / 3.45e7, rel=0.05)


def test_selector_apply_freezes_the_rest():
    net = build_unet(depth=2, base_channels=4)
    sel = select_parameters(net, "bn-only")
    params = sel.apply(net)
    assert count_parameters(net, trainable_only=True) == sel.count(net)
    assert all(p.requires_grad for p in params)
    before = {n: p.detach().clone() for n, p in net.named_parameters()}
    opt = torch.optim.Adam(params, lr=1e-2)
    for _ in range(3):
        opt.zero_grad()
        (net(torch.randn(2, 1, 16, 16)) ** 2).sum().backward()
        opt.step()
    for name in net.parameter_groups()["conv"]:
        assert torch.equal(dict(net.named_parameters())[name], before[name])


def test_checkpoint_round_trip(tmp_path):
    net = build_unet(depth=2, base_channels=4, in_channels=2)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(torch.randn_like(p))
    path = save_checkpoint(net, tmp_path / "net.npz")
    spec, state = read_checkpoint(path)
    assert spec == net.spec
    loaded = load_checkpoint(path, expected=net.spec)
    for k, v in net.state_dict().items():
        assert torch.equal(loaded.state_dict()[k], v)
    x = torch.randn(1, 2, 16, 16)
    net.eval(), loaded.eval()
    assert torch.equal(net(x), loaded(x))
    assert np.issubdtype(state["head.weight"].dtype, np.floating)


def test_checkpoint_mismatch_and_garbage(tmp_path):
    net = build_unet(depth=2, base_channels=4)
    path = save_checkpoint(net, tmp_path / "net.npz")
    with pytest.raises(LoadError):
        load_checkpoint(path, expected=UNetSpec(depth=3, base_channels=4))
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(LoadError):
        load_checkpoint(bad)


def test_invalid_depth():
    with pytest.raises(ConfigError):
        build_unet(depth=0)
