"""DDAUnet family: dilated dense blocks with spatial/channel attention in a 3-level U-net.

Tensors follow the torch layout ``(batch, channel, x, y, z)``; the two output
channels are (background, tumor) probabilities after a softmax.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

# variant -> (dilation_ddb, use_spa, use_cha1, use_cha2)
VARIANTS: Dict[str, Tuple[int, bool, bool, bool]] = {
    "DUnet": (1, False, False, False),
    "DDUnet": (2, False, False, False),
    "DDAUnet-noChA2": (2, True, False, False),
    "DDAUnet-plusChA1-noChA2": (2, True, True, False),
    "DDAUnet-noSpA-plusChA1-noChA2": (2, False, True, False),
    "DDAUnet": (2, True, False, True),
}


@dataclass(frozen=True)
class NetworkConfig:
    variant: str = "DDAUnet"
    levels: int = 3
    stem_channels: int = 16
    R: int = 3
    growth: int = 16
    theta: float = 0.5
    dilation_ddb: int = 2
    use_spa: bool = True
    use_cha1: bool = False
    use_cha2: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        expected = VARIANTS[self.variant]
        actual = (self.dilation_ddb, self.use_spa, self.use_cha1, self.use_cha2)
        if actual != expected:
            raise ConfigError(
                f"variant {self.variant} requires (dilation, spa, cha1, cha2)={expected}, got {actual}")
        if not (0.0 < self.theta <= 1.0):
            raise ConfigError(f"theta must be in (0, 1], got {self.theta}")
        if self.levels < 2:
            raise ConfigError("levels must be >= 2")
        if min(self.stem_channels, self.R, self.growth) < 1:
            raise ConfigError("stem_channels, R and growth must be positive")

    @classmethod
    def for_variant(cls, variant: str = "DDAUnet", **overrides) -> "NetworkConfig":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        d, spa, cha1, cha2 = VARIANTS[variant]
        kwargs = dict(variant=variant, dilation_ddb=d, use_spa=spa, use_cha1=cha1, use_cha2=cha2)
        kwargs.update(overrides)
        return cls(**kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)


class ConvBNReLU(nn.Sequential):
    def __init__(self, c_in, c_out, kernel=3, dilation=1):
        pad = dilation * (kernel // 2)
        super().__init__(
            nn.Conv3d(c_in, c_out, kernel, padding=pad, dilation=dilation, bias=False),
            nn.BatchNorm3d(c_out),
            nn.ReLU(inplace=True),
        )


class SpatialAttention(nn.Module):
    """Per-voxel sigmoid gate from channel-mean and channel-max maps."""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv3d(2, 1, 3, padding=1)

    def gate(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))

    def forward(self, x):
        return x * self.gate(x)


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation gate, reduction ratio 2."""

    def __init__(self, channels, reduction=2):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        # set by tiled inference to the channel means of the whole volume
        self.fixed_squeeze = None

    def gate(self, x):
        if self.fixed_squeeze is not None:
            squeezed = self.fixed_squeeze.to(x.dtype).expand(x.shape[0], -1)
        else:
            squeezed = x.mean(dim=(2, 3, 4))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(squeezed))))

    def forward(self, x):
        w = self.gate(x)
        return x * w[:, :, None, None, None]


class SubDDB(nn.Sequential):
    def __init__(self, c_in, bottleneck, growth, dilation):
        super().__init__(
            ConvBNReLU(c_in, bottleneck, kernel=1),
            ConvBNReLU(bottleneck, growth, kernel=3, dilation=dilation),
        )


class DilatedDenseBlock(nn.Module):
    def __init__(self, c_in, R, growth, theta, dilation, bottleneck=None):
        super().__init__()
        bottleneck = bottleneck or growth
        self.layers = nn.ModuleList(
            SubDDB(c_in + i * growth, bottleneck, growth, dilation) for i in range(R))
        total = c_in + R * growth
        self.out_channels = math.ceil(theta * total)
        self.compress = nn.Conv3d(total, self.out_channels, 1)

    def forward(self, x):
        feats = [x]
        for layer in self.layers:
            feats.append(layer(torch.cat(feats, dim=1)))
        return self.compress(torch.cat(feats, dim=1))


class DDSCAB(nn.Module):
    """Dense block followed by the optional SpA and ChA1 gates."""

    def __init__(self, c_in, cfg: NetworkConfig):
        super().__init__()
        self.ddb = DilatedDenseBlock(c_in, cfg.R, cfg.growth, cfg.theta, cfg.dilation_ddb,
                                     bottleneck=_bottleneck_width(cfg))
        self.out_channels = self.ddb.out_channels
        self.spa = SpatialAttention() if cfg.use_spa else None
        self.cha1 = ChannelAttention(self.out_channels) if cfg.use_cha1 else None

    def forward(self, x):
        x = self.ddb(x)
        if self.spa is not None:
            x = self.spa(x)
        if self.cha1 is not None:
            x = self.cha1(x)
        return x


def _bottleneck_width(cfg: NetworkConfig) -> int:
    # half the growth rate; keeps the default model near the stated budget
    return max(1, cfg.growth // 2)


def level_widths(cfg: NetworkConfig) -> List[int]:
    """Output width of each level (skip and decoder channels).

    Held at the stem width: the dense blocks already grow the channel count,
    and doubling here pushes the ChA1 variants past 200k parameters.
    """
    return [cfg.stem_channels] * cfg.levels


def center_crop(x, shape):
    """Crop the trailing three axes of ``x`` symmetrically to ``shape``."""
    slices = [slice(None), slice(None)]
    for have, want in zip(x.shape[2:], shape):
        start = (have - want) // 2
        slices.append(slice(start, start + want))
    return x[tuple(slices)]


class Network(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        widths = level_widths(cfg)
        s = cfg.stem_channels
        self.stem = nn.Sequential(ConvBNReLU(1, s, 3), ConvBNReLU(s, s, 3))

        self.down_blocks = nn.ModuleList()
        self.down_convs = nn.ModuleList()
        c = s
        for l in range(cfg.levels - 1):
            block = DDSCAB(c, cfg)
            self.down_blocks.append(block)
            self.down_convs.append(ConvBNReLU(block.out_channels, widths[l], kernel=1))
            c = widths[l]

        self.bottom_block = DDSCAB(c, cfg)
        self.bottom_conv = ConvBNReLU(self.bottom_block.out_channels, widths[-1], kernel=3)
        c = widths[-1]

        self.skip_gates = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        self.up_convs = nn.ModuleList()
        for l in reversed(range(cfg.levels - 1)):
            self.skip_gates.append(ChannelAttention(widths[l]) if cfg.use_cha2 else nn.Identity())
            block = DDSCAB(c + widths[l], cfg)
            self.up_blocks.append(block)
            self.up_convs.append(ConvBNReLU(block.out_channels, widths[l], kernel=3))
            c = widths[l]

        self.head = nn.Conv3d(c, 2, 1)

    def logits(self, x):
        if any(n % self.cfg.divisor for n in x.shape[2:]):
            raise ShapeError(
                f"spatial dims {tuple(x.shape[2:])} must be divisible by {self.cfg.divisor}")
        x = self.stem(x)
        skips = []
        for block, conv in zip(self.down_blocks, self.down_convs):
            x = conv(block(x))
            skips.append(x)
            x = F.max_pool3d(x, 2)
        x = self.bottom_conv(self.bottom_block(x))
        for gate, block, conv, skip in zip(self.skip_gates, self.up_blocks, self.up_convs,
                                           reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
            if x.shape[2:] != skip.shape[2:]:
                shape = [min(a, b) for a, b in zip(x.shape[2:], skip.shape[2:])]
                x, skip = center_crop(x, shape), center_crop(skip, shape)
            x = conv(block(torch.cat([x, gate(skip)], dim=1)))
        return self.head(x)

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)


def build_network(cfg: NetworkConfig, seed: int = 0) -> Network:
    """Construct a network with deterministic Kaiming initialisation."""
    gen = torch.Generator().manual_seed(int(seed))
    net = Network(cfg)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, nn.Conv3d):
                fan_in = m.in_channels * math.prod(m.kernel_size)
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.Linear):
                bound = 1.0 / math.sqrt(m.in_features)
                m.weight.copy_((torch.rand(m.weight.shape, generator=gen) * 2 - 1) * bound)
                m.bias.zero_()
            elif isinstance(m, nn.BatchNorm3d):
                m.weight.fill_(1.0)
                m.bias.zero_()
    return net


def forward(net: Network, batch) -> torch.Tensor:
    """Run ``net`` on a batch shaped (B, x, y, z) or (B, 1, x, y, z); returns (B, 2, x, y, z)."""
    x = torch.as_tensor(batch, dtype=next(net.parameters()).dtype)
    if x.ndim == 4:
        x = x[:, None]
    if x.ndim != 5 or x.shape[1] != 1:
        raise ShapeError(f"expected (B, x, y, z) or (B, 1, x, y, z), got {tuple(x.shape)}")
    return net(x)


def layer_plan(cfg: NetworkConfig) -> List[tuple]:
    """Deepest path through the network as ("conv", k, d) / ("pool", 2) / ("up", 2) steps.

    The dense path through a block chains all R (1x1, dilated 3x3) pairs;
    the spatial gate adds its own 3x3 conv.  Channel gates are global and
    are left out of the spatial extent.
    """
    plan = []

    def ddscab():
        for _ in range(cfg.R):
            plan.extend([("conv", 1, 1), ("conv", 3, cfg.dilation_ddb)])
        if cfg.use_spa:
            plan.append(("conv", 3, 1))

    plan += [("conv", 3, 1), ("conv", 3, 1)]
    for _ in range(cfg.levels - 1):
        ddscab()
        plan += [("conv", 1, 1), ("pool", 2)]
    ddscab()
    plan.append(("conv", 3, 1))
    for _ in range(cfg.levels - 1):
        plan.append(("up", 2))
        ddscab()
        plan.append(("conv", 3, 1))
    plan.append(("conv", 1, 1))
    return plan


def compose_receptive_field(plan) -> int:
    """Extent in input voxels seen by one output voxel.

    A conv adds ``d * (k - 1) * jump``; a 2x pool adds ``jump`` and doubles
    it; linear upsampling mixes two coarse neighbours (adds ``jump``) and
    halves it.
    """
    r, jump = 1, 1
    for step in plan:
        if step[0] == "conv":
            _, k, d = step
            r += d * (k - 1) * jump
        elif step[0] == "pool":
            r += (step[1] - 1) * jump
            jump *= step[1]
        elif step[0] == "up":
            r += jump
            jump //= step[1]
        else:
            raise ValueError(f"unknown layer kind {step[0]!r}")
    return r


def receptive_field(cfg: NetworkConfig) -> Tuple[int, int, int]:
    """Analytic receptive field (isotropic in voxels, all kernels are cubic)."""
    r = compose_receptive_field(layer_plan(cfg))
    return (r, r, r)
