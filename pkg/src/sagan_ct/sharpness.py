"""Local-binary-pattern sharpness maps and the network distilled from them.

A pixel's pattern sets bit ``p`` when its ``p``-th neighbour (square
8-neighbourhood, counter-clockwise from east) exceeds the centre by more than
``T`` times the dynamic range. Patterns with at most two circular 0/1
transitions map to their popcount (0..8), the rest to 9. The map is the
fraction of pixels carrying one of the sharp codes 6..9 inside a square
window, with edge replication at the border.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter

from . import nn
from .imaging import Image2D
from .models import HuNormalization, build_sharpness_net, sharpness_net_config, to_batch
from .nn import functional as F
from .phantoms import random_ellipse_phantom
from .physics import STANDARD_N0_GRID, FanBeamGeometry, NoiseModelParams, desk_equivalent_n0, simulate_ldct

log = logging.getLogger(__name__)

SHARP_CODES = (6, 7, 8, 9)
NON_UNIFORM = 9
# (row, col) offsets counter-clockwise from east
NEIGHBOUR_OFFSETS = ((0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1))


@dataclass(frozen=True)
class LbpConfig:
    radius: int = 1
    neighbors: int = 8
    lbp_threshold: float = 0.016
    window: int = 21
    dynamic_range: float | None = None  # None: per-image max - min

    def __post_init__(self):
        if self.neighbors != 8:
            raise ValueError("only the 8-neighbour pattern is supported")
        if self.radius != 1:
            raise ValueError("only radius 1 is supported")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if self.lbp_threshold < 0:
            raise ValueError("lbp_threshold must be non-negative")
        if self.dynamic_range is not None and not self.dynamic_range > 0:
            raise ValueError("a fixed dynamic range must be positive")


def _riu2_table():
    table = np.empty(256, dtype=np.uint8)
    for pattern in range(256):
        bits = [(pattern >> i) & 1 for i in range(8)]
        transitions = sum(bits[i] != bits[(i + 1) % 8] for i in range(8))
        table[pattern] = sum(bits) if transitions <= 2 else NON_UNIFORM
    return table


RIU2_TABLE = _riu2_table()


def _data(img):
    return np.asarray(img.data if isinstance(img, Image2D) else img, dtype=np.float64)


def lbp_riu2_codes(img, cfg: LbpConfig = LbpConfig()) -> np.ndarray:
    """riu2 code (0..9) for every pixel; border neighbours are edge-replicated."""
    a = _data(img)
    r = cfg.radius
    if a.ndim != 2 or min(a.shape) <= 2 * r + 1:
        raise ValueError(f"image {a.shape} too small for an LBP of radius {r}")
    rng = cfg.dynamic_range if cfg.dynamic_range is not None else float(a.max() - a.min())
    thresh = cfg.lbp_threshold * rng
    padded = np.pad(a, r, mode="edge")
    h, w = a.shape
    pattern = np.zeros(a.shape, dtype=np.uint8)
    for bit, (dr, dc) in enumerate(NEIGHBOUR_OFFSETS):
        nb = padded[r + dr:r + dr + h, r + dc:r + dc + w]
        pattern |= ((nb - a) > thresh).astype(np.uint8) << bit
    return RIU2_TABLE[pattern]


def sharpness_map(img, cfg: LbpConfig = LbpConfig()) -> np.ndarray:
    codes = lbp_riu2_codes(img, cfg)
    sharp = np.isin(codes, SHARP_CODES).astype(np.float64)
    out = uniform_filter(sharp, size=cfg.window, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def sharpness_mse(a, b, cfg: LbpConfig = LbpConfig()) -> float:
    da, db = _data(a), _data(b)
    if da.shape != db.shape:
        raise ValueError(f"sharpness_mse: shape mismatch {da.shape} vs {db.shape}")
    return float(np.mean((sharpness_map(da, cfg) - sharpness_map(db, cfg)) ** 2))


def gaussian_blur(img, sigma):
    """Gaussian blur with reflective borders; ``sigma == 0`` returns a copy."""
    if sigma < 0:
        raise ValueError("blur sigma must be non-negative")
    if isinstance(img, Image2D):
        return img.with_data(gaussian_blur(img.data, sigma))
    a = np.asarray(img, dtype=np.float64)
    return a.copy() if sigma == 0 else gaussian_filter(a, sigma, mode="reflect")


def variable_blur(img, sigma_max, rng):
    """Spatially varying blur: a smooth random weight map blends sharp and blurred copies."""
    a = _data(img)
    blurred = gaussian_blur(a, sigma_max)
    weight = gaussian_filter(rng.standard_normal(a.shape), sigma=max(a.shape) / 6, mode="wrap")
    weight = (weight - weight.min()) / max(np.ptp(weight), 1e-12)
    return (1 - weight) * a + weight * blurred


# -- distillation --------------------------------------------------------------


@dataclass(frozen=True)
class DistillConfig:
    epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-4
    beta1: float = 0.5
    seed: int = 0
    base_width: int = 16
    n_residual: int = 3

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


def make_distillation_set(n_images, n=64, seed=0, noise_hu=(0.0, 60.0), sigma_max=2.5,
                          norm: HuNormalization = HuNormalization(), cfg: LbpConfig = LbpConfig(),
                          mix=(1, 1, 1, 1), residual=(0.1, 0.6)):
    """(normalized image, analytic sharpness map) pairs covering clean and noisy inputs.

    Every phantom gets a random spatially varying blur, then one of four
    treatments drawn with weights ``mix``: left clean, white noise of a random
    strength, a simulated low-dose scan at a random dose of the reference
    ladder (streaky, correlated noise), or such a scan with its noise residual
    scaled down by a factor drawn from ``residual``, imitating a partial
    denoiser. The regressor thus sees reference images, noisy inputs and the
    outputs in between.
    """
    rng = np.random.default_rng([seed, 0xD157])
    weights = np.asarray(mix, dtype=np.float64)
    weights = weights / weights.sum()
    geom = None
    pairs = []
    for _ in range(n_images):
        phantom = random_ellipse_phantom(int(rng.integers(2**31)), n)
        hu = variable_blur(phantom.data, rng.uniform(0.0, sigma_max), rng)
        kind = rng.choice(len(weights), p=weights)
        if kind == 1:
            hu = hu + rng.normal(0.0, rng.uniform(*noise_hu), size=hu.shape)
        elif kind >= 2:
            geom = geom or FanBeamGeometry.for_image(n, phantom.pixel_spacing)
            n0 = STANDARD_N0_GRID[int(rng.integers(len(STANDARD_N0_GRID)))]
            flux = desk_equivalent_n0(n0, geom.n_views, phantom.pixel_spacing)
            noisy = simulate_ldct(phantom.with_data(hu), geom,
                                  NoiseModelParams(flux, 0.0, int(rng.integers(2**31))), units="hu")
            noise = noisy.data.astype(np.float64) - hu
            hu = hu + (noise if kind == 2 else rng.uniform(*residual) * noise)
        pairs.append((norm.forward(hu).astype(np.float32), sharpness_map(hu, cfg).astype(np.float32)))
    return pairs


def distill_sharpness_net(dataset, cfg: DistillConfig = DistillConfig(), net=None, on_epoch=None):
    """Regress a sigmoid-headed U-Net onto the analytic maps with an MSE loss.

    Batch-norm running statistics are recomputed over the training set once
    the weights are final, since the exponential averages lag the weights and
    small batches make them noisy. Returns the network frozen in eval mode.
    Raises ``NonFiniteError`` if the loss diverges.
    """
    dataset = list(dataset)
    if len(dataset) < 32:
        raise ValueError(f"need at least 32 training pairs, got {len(dataset)}")
    shapes = {img.shape for img, _ in dataset}
    if len(shapes) != 1 or any(s[0] != s[1] for s in shapes):
        raise ValueError("distillation images must be square and share one shape")
    if net is None:
        net = build_sharpness_net(sharpness_net_config(cfg.base_width, cfg.n_residual), seed=cfg.seed)
    net.train()
    net.requires_grad_(True)
    adam = nn.AdamConfig(lr=cfg.lr, beta1=cfg.beta1)
    params = net.parameters()
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = to_batch([dataset[i][0] for i in idx])
            y = to_batch([dataset[i][1] for i in idx])
            net.zero_grad()
            loss = F.mse_loss(net(x), y)
            value = loss.item()
            if not np.isfinite(value):
                raise nn.NonFiniteError(f"distillation loss became {value} at epoch {epoch}, step {step}")
            loss.backward()
            nn.adam_step(params, adam)
            total += value * len(idx)
            step += 1
        log.info("distill epoch %d: mse %.5f", epoch, total / len(dataset))
        if on_epoch is not None:
            on_epoch(epoch, total / len(dataset))
    net.requires_grad_(False)
    nn.recompute_batchnorm_stats(
        net, (to_batch([img for img, _ in dataset[i:i + cfg.batch_size]])
              for i in range(0, len(dataset), cfg.batch_size)))
    return net


def predict_sharpness(net, images, batch_size=8):
    """Run a frozen sharpness network on normalized 2-D arrays."""
    out = []
    for start in range(0, len(images), batch_size):
        out.extend(net(to_batch(images[start:start + batch_size])).data[:, 0])
    return np.stack(out)
