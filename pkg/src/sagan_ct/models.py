"""Generator, patch discriminator and sharpness regressor.

Kernel sizes are not legible from the architecture figure, so they are part
of the configs: 7x7 for the full-resolution entry/exit convolutions, 3x3 for
the strided and residual stages of the generator, 4x4 throughout the
discriminator.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .imaging import HU_RANGE, Image2D
from .nn import functional as F
from .nn.tensor import Tensor

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class GeneratorConfig:
    base_width: int = 64
    n_residual: int = 9
    in_channels: int = 1
    out_channels: int = 1
    outer_kernel: int = 7
    inner_kernel: int = 3
    output: str = "tanh"

    def __post_init__(self):
        if self.base_width < 4:
            raise ValueError(f"base_width must be >= 4, got {self.base_width}")
        if self.n_residual < 1:
            raise ValueError(f"need at least one residual block, got {self.n_residual}")
        if self.in_channels != 1 or self.out_channels != 1:
            raise ValueError("only single-channel images are supported")
        if self.outer_kernel % 2 == 0 or self.inner_kernel % 2 == 0:
            raise ValueError("generator kernels must be odd")
        if self.output not in ("tanh", "sigmoid"):
            raise ValueError(f"unknown output squashing {self.output!r}")


@dataclass(frozen=True)
class DiscriminatorConfig:
    widths: tuple[int, ...] = (64, 128, 256, 512)
    kernel: int = 4
    padding: int = 1
    in_channels: int = 2

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != 4 or min(self.widths) < 1:
            raise ValueError(f"expected four positive widths, got {self.widths}")
        if self.in_channels != 2:
            raise ValueError("the conditional discriminator takes exactly 2 channels")

    @property
    def strides(self):
        return (2, 2, 2, 1, 1)

    def receptive_field(self):
        rf = 1
        for s in reversed(self.strides):
            rf = s * rf + (self.kernel - s)
        return rf


def _rng(seed):
    return np.random.default_rng(seed)


def _name_params(net):
    for name, p in net.named_parameters():
        p.name = name
    return net


class ResidualBlock(nn.Module):
    def __init__(self, c, k, rng, dtype):
        super().__init__()
        p = k // 2
        self.conv1 = nn.Conv2d(c, c, k, 1, p, rng=rng, dtype=dtype)
        self.bn1 = nn.BatchNorm2d(c, rng=rng, dtype=dtype)
        self.conv2 = nn.Conv2d(c, c, k, 1, p, rng=rng, dtype=dtype)
        self.bn2 = nn.BatchNorm2d(c, rng=rng, dtype=dtype)

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return F.residual_add(x, h)


class Generator(nn.Module):
    """U-Net with a stride-1 first stage and a residual bottleneck at 1/4 scale."""

    def __init__(self, cfg: GeneratorConfig = GeneratorConfig(), seed=0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        rng = _rng(seed)
        b, ko, ki = cfg.base_width, cfg.outer_kernel, cfg.inner_kernel
        pi = ki // 2
        self.enc1 = nn.Conv2d(cfg.in_channels, b, ko, 1, ko // 2, rng=rng, dtype=dtype)
        self.enc2 = nn.Conv2d(b, 2 * b, ki, 2, pi, rng=rng, dtype=dtype)
        self.enc2_bn = nn.BatchNorm2d(2 * b, rng=rng, dtype=dtype)
        self.enc3 = nn.Conv2d(2 * b, 4 * b, ki, 2, pi, rng=rng, dtype=dtype)
        self.enc3_bn = nn.BatchNorm2d(4 * b, rng=rng, dtype=dtype)
        self.blocks = [ResidualBlock(4 * b, ki, rng, dtype) for _ in range(cfg.n_residual)]
        self.dec2 = nn.ConvTranspose2d(4 * b, 2 * b, ki, 2, pi, output_padding=1, rng=rng, dtype=dtype)
        self.dec2_bn = nn.BatchNorm2d(2 * b, rng=rng, dtype=dtype)
        self.dec1 = nn.ConvTranspose2d(4 * b, b, ki, 2, pi, output_padding=1, rng=rng, dtype=dtype)
        self.dec1_bn = nn.BatchNorm2d(b, rng=rng, dtype=dtype)
        self.out = nn.Conv2d(2 * b, cfg.out_channels, ko, 1, ko // 2, rng=rng, dtype=dtype)
        _name_params(self)

    def forward(self, x):
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"spatial size {x.shape[2:]} must be divisible by 4")
        e1 = F.leaky_relu(self.enc1(x), LEAKY_SLOPE)
        e2 = F.leaky_relu(self.enc2_bn(self.enc2(e1)), LEAKY_SLOPE)
        h = F.leaky_relu(self.enc3_bn(self.enc3(e2)), LEAKY_SLOPE)
        for block in self.blocks:
            h = block(h)
        h = F.relu(self.dec2_bn(self.dec2(h)))
        h = F.concat_channels(h, e2)
        h = F.relu(self.dec1_bn(self.dec1(h)))
        h = F.concat_channels(h, e1)
        h = self.out(h)
        return F.tanh(h) if self.cfg.output == "tanh" else F.sigmoid(h)


class Discriminator(nn.Module):
    """70x70 PatchGAN over the channel-concatenated (LDCT, candidate) pair."""

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig(), seed=0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        rng = _rng(seed)
        w, k, p = cfg.widths, cfg.kernel, cfg.padding
        s = cfg.strides
        self.c1 = nn.Conv2d(cfg.in_channels, w[0], k, s[0], p, rng=rng, dtype=dtype)
        self.c2 = nn.Conv2d(w[0], w[1], k, s[1], p, rng=rng, dtype=dtype)
        self.bn2 = nn.BatchNorm2d(w[1], rng=rng, dtype=dtype)
        self.c3 = nn.Conv2d(w[1], w[2], k, s[2], p, rng=rng, dtype=dtype)
        self.bn3 = nn.BatchNorm2d(w[2], rng=rng, dtype=dtype)
        self.c4 = nn.Conv2d(w[2], w[3], k, s[3], p, rng=rng, dtype=dtype)
        self.bn4 = nn.BatchNorm2d(w[3], rng=rng, dtype=dtype)
        self.c5 = nn.Conv2d(w[3], 1, k, s[4], p, rng=rng, dtype=dtype)
        _name_params(self)

    def forward(self, pair):
        if pair.shape[1] != self.cfg.in_channels:
            raise ValueError(f"discriminator expects 2 channels, got {pair.shape[1]}")
        h = F.leaky_relu(self.c1(pair), LEAKY_SLOPE)
        h = F.leaky_relu(self.bn2(self.c2(h)), LEAKY_SLOPE)
        h = F.leaky_relu(self.bn3(self.c3(h)), LEAKY_SLOPE)
        h = F.leaky_relu(self.bn4(self.c4(h)), LEAKY_SLOPE)
        return self.c5(h)

    def output_shape(self, h, w):
        for s in self.cfg.strides:
            h = F.conv_output_size(h, self.cfg.kernel, s, self.cfg.padding)
            w = F.conv_output_size(w, self.cfg.kernel, s, self.cfg.padding)
        return h, w


def build_generator(cfg: GeneratorConfig = GeneratorConfig(), seed=0, dtype=np.float32):
    return Generator(cfg, seed, dtype)


def build_discriminator(cfg: DiscriminatorConfig = DiscriminatorConfig(), seed=0, dtype=np.float32):
    return Discriminator(cfg, seed, dtype)


def sharpness_net_config(base_width=16, n_residual=3):
    return GeneratorConfig(base_width=base_width, n_residual=n_residual, output="sigmoid")


def build_sharpness_net(cfg: GeneratorConfig | None = None, seed=0, dtype=np.float32):
    """Generator skeleton with a sigmoid head, regressing maps onto [0, 1]."""
    cfg = cfg or sharpness_net_config()
    if cfg.output != "sigmoid":
        raise ValueError("the sharpness network must end in a sigmoid")
    return Generator(cfg, seed, dtype)


# -- HU <-> network range ------------------------------------------------------


@dataclass(frozen=True)
class HuNormalization:
    lo: float = HU_RANGE[0]
    hi: float = HU_RANGE[1]

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ValueError("normalization range must be increasing")

    def forward(self, hu):
        return 2.0 * (np.asarray(hu, dtype=np.float64) - self.lo) / (self.hi - self.lo) - 1.0

    def inverse(self, u):
        return (np.asarray(u, dtype=np.float64) + 1.0) * 0.5 * (self.hi - self.lo) + self.lo


def to_batch(arrays, dtype=np.float32):
    """Stack 2-D arrays into an (N, 1, H, W) tensor."""
    arrays = [np.asarray(a) for a in arrays]
    return Tensor(np.stack(arrays)[:, None].astype(dtype))


def generator_denoise(net: Generator, ldct: Image2D, norm: HuNormalization = HuNormalization()) -> Image2D:
    """Run a frozen generator on one HU image and map the result back to HU."""
    if net.training:
        raise RuntimeError("generator_denoise needs the network in eval mode")
    x = to_batch([norm.forward(ldct.data)], dtype=net.enc1.weight.dtype)
    y = net(x).data[0, 0]
    if not np.all(np.isfinite(y)):
        raise nn.NonFiniteError("generator produced non-finite output")
    return ldct.with_data(norm.inverse(y))


def config_dict(cfg):
    return asdict(cfg)
