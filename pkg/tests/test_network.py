import numpy as np
import pytest
import torch

from esoseg.errors import ConfigError, ShapeError
from esoseg.losses import dice_loss
from esoseg.network import (VARIANTS, ChannelAttention, NetworkConfig, SpatialAttention,
                            build_network, compose_receptive_field, forward, receptive_field)

TINY = dict(stem_channels=4, growth=4, R=2)


def _gradient_support(cfg, n):
    net = build_network(cfg, 0).double().eval()
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(1, 1, n, n, n, dtype=torch.float64, generator=gen).requires_grad_()
    c = n // 2
    net.logits(x)[0, 1, c, c, c].backward()
    idx = np.argwhere(x.grad[0, 0].numpy() != 0)
    return idx.max(0) - idx.min(0) + 1


def test_variant_table():
    assert VARIANTS["DDAUnet"] == (2, True, False, True)
    assert VARIANTS["DUnet"] == (1, False, False, False)
    assert len(VARIANTS) == 6


def test_config_errors():
    with pytest.raises(ConfigError):
        NetworkConfig(variant="DDAUnet", use_cha1=True)
    with pytest.raises(ConfigError):
        NetworkConfig.for_variant("DUnet", dilation_ddb=2)
    with pytest.raises(ConfigError):
        NetworkConfig.for_variant("UNet")
    with pytest.raises(ConfigError):
        NetworkConfig(theta=0.0)
    with pytest.raises(ConfigError):
        NetworkConfig(theta=1.5)
    cfg = NetworkConfig.for_variant("DDUnet", growth=8)
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("variant", list(VARIANTS))
def test_shape_and_softmax_every_variant(variant):
    net = build_network(NetworkConfig.for_variant(variant, **TINY), 1).eval()
    x = torch.rand(2, 1, 12, 8, 4)
    with torch.no_grad():
        y = net(x)
    assert y.shape == (2, 2, 12, 8, 4)
    assert torch.all((y >= 0) & (y <= 1))
    assert torch.allclose(y.sum(1), torch.ones(2, 12, 8, 4), atol=1e-5)


def test_default_full_size_patch():
    net = build_network(NetworkConfig(), 0).eval()
    with torch.no_grad():
        y = forward(net, np.zeros((1, 72, 72, 24), np.float32))
    assert y.shape == (1, 2, 72, 72, 24)
    assert torch.isfinite(y).all()
    assert torch.allclose(y.sum(1), torch.ones(1, 72, 72, 24), atol=1e-5)


def test_indivisible_dims():
    net = build_network(NetworkConfig(**TINY), 0)
    with pytest.raises(ShapeError):
        net(torch.zeros(1, 1, 10, 8, 8))
    with pytest.raises(ShapeError):
        forward(net, torch.zeros(1, 2, 8, 8, 8))


def test_batch_order_and_duplicates():
    net = build_network(NetworkConfig(**TINY), 2).eval()
    xs = torch.rand(7, 1, 8, 8, 8)
    xs[3] = xs[5]
    with torch.no_grad():
        batch = net(xs)
        singles = [net(xs[i:i + 1]) for i in range(7)]
    for i in range(7):
        assert torch.allclose(batch[i], singles[i][0], atol=1e-6)
    # batched CPU kernels may round the two copies one ulp apart
    assert torch.allclose(batch[3], batch[5], rtol=0, atol=1e-6)


def test_deterministic_init():
    cfg = NetworkConfig(**TINY)
    a, b, c = build_network(cfg, 5), build_network(cfg, 5), build_network(cfg, 6)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    assert any(not torch.equal(va, vc) for va, vc in zip(a.state_dict().values(), c.state_dict().values()))


def test_parameter_budget_and_lattice():
    dda = build_network(NetworkConfig(), 0)
    assert 40_000 <= dda.parameter_count <= 200_000
    dd = build_network(NetworkConfig.for_variant("DDUnet"), 0)
    dd_shapes = {k: v.shape for k, v in dd.state_dict().items()}
    dda_shapes = {k: v.shape for k, v in dda.state_dict().items()}
    assert set(dd_shapes) <= set(dda_shapes)
    assert all(dda_shapes[k] == s for k, s in dd_shapes.items())
    extra = set(dda_shapes) - set(dd_shapes)
    assert extra and all(".spa." in k or k.startswith("skip_gates") for k in extra)
    du = build_network(NetworkConfig.for_variant("DUnet"), 0)
    assert du.parameter_count == dd.parameter_count  # dilation adds no parameters


def test_topology_stem_and_blocks():
    net = build_network(NetworkConfig(), 0)
    convs = [m for m in net.stem.modules() if isinstance(m, torch.nn.Conv3d)]
    assert [c.kernel_size for c in convs] == [(3, 3, 3), (3, 3, 3)]
    block = net.down_blocks[0]
    assert len(block.ddb.layers) == 3
    dilated = [m for m in block.ddb.modules() if isinstance(m, torch.nn.Conv3d) and m.kernel_size == (3, 3, 3)]
    assert all(m.dilation == (2, 2, 2) for m in dilated)
    assert block.ddb.out_channels == int(np.ceil(0.5 * (16 + 3 * 16)))
    assert block.spa is not None and block.cha1 is None
    assert all(isinstance(g, ChannelAttention) for g in net.skip_gates)
    assert net.head.kernel_size == (1, 1, 1) and net.head.out_channels == 2


@pytest.mark.parametrize("variant", list(VARIANTS))
def test_no_dead_branches(variant):
    torch.manual_seed(0)
    net = build_network(NetworkConfig.for_variant(variant), 3).train()
    x = torch.rand(2, 1, 8, 8, 8)
    gt = (torch.rand(2, 8, 8, 8) > 0.6).float()
    dice_loss(net(x)[:, 1], gt).backward()
    groups = {}
    for name, p in net.named_parameters():
        owner = name.rsplit(".", 1)[0]
        groups[owner] = groups.get(owner, 0.0) + float(p.grad.abs().sum())
    dead = [k for k, v in groups.items() if v == 0]
    assert not dead


def test_receptive_field_base_cases():
    assert compose_receptive_field([("conv", 3, 1)]) == 3
    assert compose_receptive_field([("conv", 3, 2)]) == 5
    assert compose_receptive_field([("conv", 3, 1), ("pool", 2), ("conv", 3, 1)]) == 8


def test_receptive_field_ordering():
    du = receptive_field(NetworkConfig.for_variant("DUnet"))
    dd = receptive_field(NetworkConfig.for_variant("DDUnet"))
    dda = receptive_field(NetworkConfig())
    assert all(a < b for a, b in zip(du, dd))
    assert all(a <= b for a, b in zip(dd, dda))
    assert du == (88, 88, 88) and dd == (148, 148, 148) and dda == (168, 168, 168)


@pytest.mark.parametrize("variant,kw,exact", [
    ("DUnet", dict(levels=2, R=1, stem_channels=2, growth=2), True),
    ("DDUnet", dict(levels=2, R=1, stem_channels=2, growth=2), True),
    ("DUnet", dict(levels=3, R=1, stem_channels=4, growth=4), False),
])
def test_receptive_field_against_gradient_support(variant, kw, exact):
    # the analytic value bounds the measured support; max-pool routes gradients
    # through one element per window, so deeper nets measure smaller
    cfg = NetworkConfig.for_variant(variant, **kw)
    r = receptive_field(cfg)[0]
    n = ((r + 8) // 4 + 1) * 4
    support = _gradient_support(cfg, n)
    assert np.all(support <= r)
    if exact:
        assert np.all(support == r)


def test_spatial_attention_properties():
    spa = SpatialAttention()
    x = torch.randn(2, 5, 6, 6, 6)
    with torch.no_grad():
        assert torch.all(spa(x).abs() <= x.abs())
        spa.conv.weight.zero_()
        spa.conv.bias.fill_(1e4)
        assert torch.equal(spa(x), x)
    spa = SpatialAttention()
    with torch.no_grad():
        g = spa.gate(torch.full((1, 3, 5, 5, 5), 2.0))
    interior = g[0, 0, 1:-1, 1:-1, 1:-1]
    assert torch.allclose(interior, interior.flatten()[0].expand_as(interior))
    assert g.shape == (1, 1, 5, 5, 5) and torch.all((g > 0) & (g < 1))


def test_channel_attention_properties():
    cha = ChannelAttention(4)
    x = torch.randn(1, 4, 3, 3, 3)
    with torch.no_grad():
        cha.fc2.weight.zero_()
        cha.fc2.bias.fill_(1e4)
        assert torch.equal(cha(x), x)
    cha = ChannelAttention(4)
    x[:, 1] = x[:, 0]
    with torch.no_grad():
        torch.nn.init.normal_(cha.fc2.weight)
        cha.fc2.weight[1] = cha.fc2.weight[0]
        cha.fc2.bias[1] = cha.fc2.bias[0]
        w = cha.gate(x)
        assert w[0, 0] == w[0, 1]
        assert torch.equal(cha(torch.zeros(1, 4, 3, 3, 3)), torch.zeros(1, 4, 3, 3, 3))
