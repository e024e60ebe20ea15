"""Adversarial training of the denoiser with L1 and sharpness-map terms.

The generator minimises::

    mean((D(x, G(x)) - 1)^2) + lambda1 * mean|y - G(x)| + lambda2 * mean((S(G(x)) - S(y))^2)

and the discriminator minimises ``mean((D(x, y) - 1)^2) + mean(D(x, G(x))^2)``.
Each step runs the generator once, updates D ``k_alternation`` times on the
detached output and then updates G. The sharpness network S is frozen.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .imaging import Image2D, tile_quarters
from .metrics import windowed_psnr
from .models import (
    DiscriminatorConfig,
    GeneratorConfig,
    HuNormalization,
    build_discriminator,
    build_generator,
    build_sharpness_net,
    generator_denoise,
    to_batch,
)
from .nn import functional as F
from .nn.tensor import Tensor
from .phantoms import random_ellipse_phantom
from .physics import STANDARD_N0_GRID, FanBeamGeometry, NoiseModelParams, desk_equivalent_n0, simulate_ldct

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("step", "d_loss", "g_adv", "g_l1", "g_sharp")
HISTORY_FILE = "history.csv"
LATEST_CHECKPOINT = "latest.sgck"


class TrainingDiverged(nn.NonFiniteError):
    def __init__(self, step, what):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 100.0
    lambda2: float = 0.001
    adam: nn.AdamConfig = field(default_factory=nn.AdamConfig)
    epochs: int = 200
    k_alternation: int = 1
    batch_size: int = 1
    crop_size: int | None = None
    seed: int = 0
    sharpness_loss_enabled: bool = True
    max_steps: int | None = None  # cap on generator steps, None for full epochs
    checkpoint_every: int = 500
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    sharpness_net: str | None = None  # path of a distilled S checkpoint
    # data generation
    n_images: int = 64
    image_size: int = 64
    pixel_spacing: float = 2.0
    n0_grid: tuple[float, ...] = STANDARD_N0_GRID
    per_dose_n0: float | None = None  # train on a single dose level instead of the mix

    def __post_init__(self):
        object.__setattr__(self, "n0_grid", tuple(float(v) for v in self.n0_grid))
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.k_alternation < 1:
            raise ValueError("k_alternation must be at least 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be positive")
        if self.per_dose_n0 is not None and self.per_dose_n0 not in self.n0_grid:
            raise ValueError(f"per-dose n0 {self.per_dose_n0} is not in the grid {self.n0_grid}")

    @property
    def uses_sharpness(self):
        return self.sharpness_loss_enabled and self.lambda2 > 0

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        if "adam" in d and isinstance(d["adam"], dict):
            d["adam"] = nn.AdamConfig(**d["adam"])
        if "generator" in d and isinstance(d["generator"], dict):
            d["generator"] = GeneratorConfig(**d["generator"])
        if "discriminator" in d and isinstance(d["discriminator"], dict):
            d["discriminator"] = DiscriminatorConfig(**d["discriminator"])
        return cls(**d)


def load_config(path) -> TrainConfig:
    """Read a TrainConfig from ``.toml`` or ``.json``."""
    path = Path(path)
    if path.suffix == ".toml":
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    elif path.suffix == ".json":
        data = json.loads(path.read_text())
    else:
        raise ValueError(f"config must be .toml or .json, got {path.name}")
    return TrainConfig.from_dict(data.get("train", data))


# -- data ----------------------------------------------------------------------


@dataclass(frozen=True)
class TrainSample:
    x: np.ndarray  # low-dose reconstruction, normalized
    y: np.ndarray  # reference image, normalized
    n0: float = 0.0  # dose level on the reference grid
    phantom_seed: int = 0

    def __post_init__(self):
        if self.x.shape != self.y.shape:
            raise ValueError(f"pair shapes differ: {self.x.shape} vs {self.y.shape}")


def make_training_set(n_images, geom: FanBeamGeometry | None = None, n0_grid=STANDARD_N0_GRID, seed=0,
                      n=64, pixel_spacing=2.0, per_dose_n0=None, crop=None,
                      norm: HuNormalization = HuNormalization()):
    """Random phantoms and their simulated low-dose reconstructions as normalized pairs.

    Dose levels are drawn from ``n0_grid`` (or fixed to ``per_dose_n0``) and
    rescaled to the desk geometry before simulation. ``crop=n // 2`` splits
    every pair into its four quarters.
    """
    if n_images < 1:
        raise ValueError("need at least one image")
    geom = geom or FanBeamGeometry.for_image(n, pixel_spacing)
    grid = tuple(float(v) for v in n0_grid)
    rng = np.random.default_rng([seed, 0x7A1])
    out = []
    for _ in range(n_images):
        phantom_seed = int(rng.integers(2**31))
        n0 = per_dose_n0 if per_dose_n0 is not None else grid[int(rng.integers(len(grid)))]
        noise_seed = int(rng.integers(2**31))
        gt = random_ellipse_phantom(phantom_seed, n, pixel_spacing)
        flux = desk_equivalent_n0(n0, geom.n_views, pixel_spacing)
        ldct = simulate_ldct(gt, geom, NoiseModelParams(flux, 0.0, noise_seed), units="hu")
        pairs = [(ldct, gt)]
        if crop is not None:
            if crop * 2 != n:
                raise ValueError("only quarter crops (crop = n / 2) are supported")
            pairs = list(zip(tile_quarters(ldct), tile_quarters(gt)))
        for a, b in pairs:
            out.append(TrainSample(norm.forward(a.data).astype(np.float32),
                                   norm.forward(b.data).astype(np.float32), n0, phantom_seed))
    return out


# -- losses --------------------------------------------------------------------


def _pair(x, img):
    return F.concat_channels(x, img)


def discriminator_loss(D, x, y, y_hat):
    """``mean((D(x, y) - 1)^2) + mean(D(x, y_hat)^2)``; ``y_hat`` is detached."""
    if not (x.shape == y.shape == y_hat.shape):
        raise ValueError(f"shape mismatch {x.shape}, {y.shape}, {y_hat.shape}")
    real = D(_pair(x, y))
    fake = D(_pair(x, y_hat.detach()))
    return F.lsgan_loss(real, 1) + F.lsgan_loss(fake, 0)


def generator_loss(G, D, S, x, y, cfg: TrainConfig, y_hat=None):
    """Total generator loss and its weighted components (adv, l1, sharp).

    D and S must not receive updates from this loss; their parameters should
    have ``requires_grad`` off while it is backpropagated.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if y_hat is None:
        y_hat = G(x)
    adv = F.lsgan_loss(D(_pair(x, y_hat)), 1)
    l1 = F.l1_loss(y_hat, y) * cfg.lambda1
    total = adv + l1
    sharp_value = 0.0
    if cfg.uses_sharpness:
        if S is None:
            raise ValueError("the sharpness term needs a sharpness network")
        target = Tensor(S(Tensor(y.data)).data)
        sharp = F.mse_loss(S(y_hat), target) * cfg.lambda2
        total = total + sharp
        sharp_value = sharp.item()
    parts = {"g_adv": adv.item(), "g_l1": l1.item(), "g_sharp": sharp_value}
    if not all(math.isfinite(v) for v in parts.values()):
        raise nn.NonFiniteError(f"non-finite generator loss components {parts}")
    return total, parts


# -- state and stepping --------------------------------------------------------


@dataclass
class TrainState:
    G: nn.Module
    D: nn.Module
    S: nn.Module | None
    cfg: TrainConfig
    step: int = 0  # generator steps taken
    epoch: int = 0
    batch_index: int = 0  # next batch within the epoch

    @classmethod
    def create(cls, cfg: TrainConfig, S=None):
        G = build_generator(cfg.generator, seed=cfg.seed)
        D = build_discriminator(cfg.discriminator, seed=cfg.seed + 1)
        if S is not None:
            S.eval()
            S.requires_grad_(False)
        elif cfg.uses_sharpness:
            raise ValueError("lambda2 > 0 needs a distilled sharpness network")
        return cls(G, D, S, cfg)


def train_step(state: TrainState, batch):
    """One generator forward, ``k`` discriminator updates, one generator update."""
    if not batch:
        raise ValueError("empty batch")
    cfg = state.cfg
    x = to_batch([s.x for s in batch])
    y = to_batch([s.y for s in batch])
    G, D = state.G, state.D
    G.train()
    D.train()
    step = state.step

    y_hat = G(x)
    fake = y_hat.detach()
    D.requires_grad_(True)
    d_value = 0.0
    for _ in range(cfg.k_alternation):
        D.zero_grad()
        d_loss = discriminator_loss(D, x, y, fake)
        d_value = d_loss.item()
        if not math.isfinite(d_value):
            raise TrainingDiverged(step, "discriminator loss")
        d_loss.backward()
        _adam(D, cfg, step)

    D.requires_grad_(False)
    G.zero_grad()
    try:
        g_total, parts = generator_loss(G, D, state.S, x, y, cfg, y_hat=y_hat)
    except nn.NonFiniteError:
        raise TrainingDiverged(step, "generator loss") from None
    g_total.backward()
    _adam(G, cfg, step)
    D.requires_grad_(True)

    state.step += 1
    return {"step": state.step, "d_loss": d_value, **parts}


def _adam(net, cfg, step):
    try:
        nn.adam_step(net.parameters(), cfg.adam)
    except nn.NonFiniteError as exc:
        raise TrainingDiverged(step, f"gradient ({exc})") from None


def _batches(n, cfg: TrainConfig, epoch):
    order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
    return [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]


# -- checkpoints ---------------------------------------------------------------


def save_state(path, state: TrainState):
    entries = {}
    entries.update(nn.module_entries(state.G, "G.", with_adam=True))
    entries.update(nn.module_entries(state.D, "D.", with_adam=True))
    if state.S is not None:
        entries.update(nn.module_entries(state.S, "S."))
    meta = {
        "kind": "sagan-train",
        "step": state.step,
        "epoch": state.epoch,
        "batch_index": state.batch_index,
        "config": state.cfg.to_dict(),
        "sharpness_net": None if state.S is None else dataclasses.asdict(state.S.cfg),
        "hu_range": [HuNormalization().lo, HuNormalization().hi],
    }
    nn.save_checkpoint(path, entries, meta)


def load_state(path, cfg: TrainConfig | None = None) -> TrainState:
    meta, entries = nn.load_checkpoint(path)
    if meta.get("kind") != "sagan-train":
        raise nn.CheckpointError(f"{path} is not a training checkpoint")
    cfg = cfg or TrainConfig.from_dict(meta["config"])
    S = None
    if meta.get("sharpness_net") is not None:
        S = build_sharpness_net(GeneratorConfig(**meta["sharpness_net"]))
        nn.restore_module(S, entries, "S.")
    state = TrainState.create(cfg, S)
    nn.restore_module(state.G, entries, "G.")
    nn.restore_module(state.D, entries, "D.")
    state.step = meta["step"]
    state.epoch = meta["epoch"]
    state.batch_index = meta["batch_index"]
    return state


def load_generator(path):
    """Generator in eval mode from a training or generator-only checkpoint.

    The HU range the weights were trained with is attached as ``G.hu_norm``.
    """
    meta, entries = nn.load_checkpoint(path)
    if meta.get("kind") == "sagan-train":
        gcfg = GeneratorConfig(**meta["config"]["generator"])
    elif meta.get("kind") == "generator":
        gcfg = GeneratorConfig(**meta["generator"])
    else:
        raise nn.CheckpointError(f"{path}: no generator in checkpoint")
    G = build_generator(gcfg)
    nn.restore_module(G, entries, "G.")
    G.hu_norm = HuNormalization(*meta.get("hu_range", (HuNormalization().lo, HuNormalization().hi)))
    return G.eval()


def finalize_generator(G, dataset, batch_size=4):
    """Recompute batch-norm statistics over the training inputs; returns G in eval mode."""
    data = list(dataset)
    batches = (to_batch([s.x for s in data[i:i + batch_size]]) for i in range(0, len(data), batch_size))
    G.requires_grad_(False)
    try:
        nn.recompute_batchnorm_stats(G, batches)
    finally:
        G.requires_grad_(True)
    return G


def export_generator(path, G, metadata=None, norm: HuNormalization = HuNormalization()):
    """Write a generator-only checkpoint readable by ``load_generator``."""
    meta = {"kind": "generator", "generator": dataclasses.asdict(G.cfg), "hu_range": [norm.lo, norm.hi],
            **(metadata or {})}
    nn.save_checkpoint(path, nn.module_entries(G, "G."), meta)


def save_sharpness_net(path, S, metadata=None):
    meta = {"kind": "sharpness", "config": dataclasses.asdict(S.cfg), **(metadata or {})}
    nn.save_checkpoint(path, nn.module_entries(S, "S."), meta)


def load_sharpness_net(path):
    meta, entries = nn.load_checkpoint(path)
    if meta.get("kind") != "sharpness":
        raise nn.CheckpointError(f"{path} is not a sharpness-network checkpoint")
    S = build_sharpness_net(GeneratorConfig(**meta["config"]))
    nn.restore_module(S, entries, "S.")
    S.eval()
    S.requires_grad_(False)
    return S


# -- loop ----------------------------------------------------------------------


def _history_rows(path):
    if not path.exists():
        return []
    with path.open(newline="") as fh:
        return list(csv.reader(fh))[1:]


def _write_history(path, rows):
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        writer.writerows(rows)


def _format_row(r):
    return [str(r["step"])] + [repr(float(r[k])) for k in HISTORY_COLUMNS[1:]]


def train(cfg: TrainConfig, dataset, out_dir, S=None, resume=None, on_epoch=None) -> TrainState:
    """Run the alternating optimisation, checkpointing into ``out_dir``.

    Writes ``history.csv`` (one row per generator step) and ``latest.sgck``
    plus ``step_XXXXXXX.sgck`` every ``checkpoint_every`` steps. With
    ``resume`` the state, data position and history are restored so that the
    continued run matches an uninterrupted one exactly.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("dataset is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hist_path = out / HISTORY_FILE
    if resume is not None:
        state = load_state(resume, cfg)
        rows = [r for r in _history_rows(hist_path) if int(r[0]) <= state.step]
        if len(rows) != state.step:
            raise nn.CheckpointError(
                f"history holds {len(rows)} rows up to step {state.step}; cannot resume consistently"
            )
    else:
        state = TrainState.create(cfg, S)
        rows = []
    _write_history(hist_path, rows)
    limit = cfg.max_steps if cfg.max_steps is not None else math.inf

    with hist_path.open("a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        while state.epoch < cfg.epochs and state.step < limit:
            batches = _batches(len(dataset), cfg, state.epoch)
            epoch_rows = []
            while state.batch_index < len(batches) and state.step < limit:
                idx = batches[state.batch_index]
                record = train_step(state, [dataset[i] for i in idx])
                state.batch_index += 1
                writer.writerow(_format_row(record))
                epoch_rows.append(record)
                if state.step % cfg.checkpoint_every == 0:
                    fh.flush()
                    _checkpoint(out, state, keep=True)
            if state.batch_index >= len(batches):
                state.epoch += 1
                state.batch_index = 0
            if epoch_rows:
                summary = {k: float(np.mean([r[k] for r in epoch_rows])) for k in HISTORY_COLUMNS[1:]}
                log.info("epoch %d step %d %s", state.epoch, state.step,
                         " ".join(f"{k}={v:.4f}" for k, v in summary.items()))
                if on_epoch is not None:
                    on_epoch(state, summary)
        fh.flush()
    _checkpoint(out, state, keep=False)
    return state


def _checkpoint(out, state, keep):
    if keep:
        save_state(out / f"step_{state.step:07d}.sgck", state)
    save_state(out / LATEST_CHECKPOINT, state)


# -- evaluation helpers --------------------------------------------------------


def denoise_samples(G, samples, norm: HuNormalization = HuNormalization(), pixel_spacing=2.0):
    """Generator outputs (HU images) for normalized samples."""
    G.eval()
    out = []
    for s in samples:
        ldct = Image2D(norm.inverse(s.x), pixel_spacing)
        out.append(generator_denoise(G, ldct, norm))
    return out


def validation_psnr(G, samples, norm: HuNormalization = HuNormalization()):
    """Mean windowed PSNR of the input and of the generator output against the reference."""
    inputs, outputs = [], []
    for s, den in zip(samples, denoise_samples(G, samples, norm)):
        ref = Image2D(norm.inverse(s.y))
        inputs.append(windowed_psnr(Image2D(norm.inverse(s.x)), ref))
        outputs.append(windowed_psnr(den, ref))
    return float(np.mean(inputs)), float(np.mean(outputs))
