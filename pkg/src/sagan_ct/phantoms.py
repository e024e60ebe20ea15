"""Synthetic ground-truth objects: Shepp-Logan, bar-pattern module, random bodies.

Ellipse coordinates live in the unit field of view ``[-1, 1]^2`` with y up;
pixels are evaluated by area supersampling so that edges are antialiased and
downsampled phantoms agree with coarser renderings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .imaging import HU_RANGE, Image2D
from .physics import MU_WATER, hu_to_mu, mu_to_hu  # noqa: F401  (re-exported)

SUPERSAMPLE = 4
BODY_HU = 40.0
AIR_HU = -1000.0
LINE_PAIR_CONTRAST = 340.0

# modified (high-contrast) Shepp-Logan: amplitude, semi-axes a/b, centre x/y, angle (deg)
SHEPP_LOGAN_ELLIPSES = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)


@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]
    axes: tuple[float, float]
    rotation: float  # degrees, counter-clockwise
    value: float

    def __post_init__(self):
        if min(self.axes) <= 0:
            raise ValueError(f"ellipse axes must be positive, got {self.axes}")
        if not math.isfinite(self.value):
            raise ValueError("ellipse value must be finite")

    def inside(self, x, y):
        t = math.radians(self.rotation)
        dx = x - self.center[0]
        dy = y - self.center[1]
        u = dx * math.cos(t) + dy * math.sin(t)
        v = -dx * math.sin(t) + dy * math.cos(t)
        return (u / self.axes[0]) ** 2 + (v / self.axes[1]) ** 2 <= 1.0


@dataclass(frozen=True)
class EllipsePhantomSpec:
    ellipses: tuple[Ellipse, ...]
    background: float = 0.0
    n: int = 64
    value_range: tuple[float, float] | None = None
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "ellipses", tuple(self.ellipses))
        if self.n < 16:
            raise ValueError(f"phantom grid must be at least 16 pixels, got {self.n}")
        for e in self.ellipses:
            # the bounding circle of the ellipse must touch the unit field of view
            if math.hypot(*e.center) - max(e.axes) > 1.0:
                raise ValueError(f"ellipse {e} lies outside the field of view")


def _check_n(n):
    if n < 16:
        raise ValueError(f"phantom grid must be at least 16 pixels, got {n}")


def unit_grid(n, supersample=SUPERSAMPLE):
    """Sub-pixel sample coordinates in the unit square, shape (n*s, n*s)."""
    m = n * supersample
    c = (np.arange(m) + 0.5) / m * 2.0 - 1.0
    x, y = np.meshgrid(c, -c)
    return x, y


def _block_mean(fine, s):
    m = fine.shape[0] // s
    return fine.reshape(m, s, m, s).mean(axis=(1, 3))


def render(spec: EllipsePhantomSpec, supersample=SUPERSAMPLE) -> np.ndarray:
    """Sum of ellipse indicators over the background, area-averaged per pixel."""
    x, y = unit_grid(spec.n, supersample)
    fine = np.full(x.shape, spec.background, dtype=np.float64)
    for e in spec.ellipses:
        fine[e.inside(x, y)] += e.value
    out = _block_mean(fine, supersample)
    if spec.value_range is not None:
        out = np.clip(out, *spec.value_range)
    return out


def shepp_logan_spec(n) -> EllipsePhantomSpec:
    ellipses = tuple(Ellipse((x0, y0), (a, b), phi, amp) for amp, a, b, x0, y0, phi in SHEPP_LOGAN_ELLIPSES)
    return EllipsePhantomSpec(ellipses, 0.0, n, (0.0, 1.0))


def shepp_logan(n, pixel_spacing=1.0) -> Image2D:
    """Modified Shepp-Logan on an ``n x n`` grid, values in [0, 1]."""
    _check_n(n)
    return Image2D(render(shepp_logan_spec(n)), pixel_spacing)


# -- bar-pattern module --------------------------------------------------------


@dataclass(frozen=True)
class BarGroup:
    lp_per_cm: float
    bar_width_px: float
    row0: float  # top edge (pixels)
    row1: float
    col0: float  # left edge of the first bar
    col1: float  # right edge of the last bar
    n_bars: int

    @property
    def centre_row(self):
        return 0.5 * (self.row0 + self.row1)


def bar_width_mm(lp_per_cm):
    return 10.0 / (2.0 * lp_per_cm)


def line_pair_layout(n, groups, pixel_spacing, n_bars=4) -> list[BarGroup]:
    """Place the bar groups one above the other, centred horizontally."""
    _check_n(n)
    groups = list(groups)
    if not groups:
        raise ValueError("need at least one bar group")
    bad = [g for g in groups if not g > 0 or bar_width_mm(g) / pixel_spacing < 1.0]
    if bad:
        raise ValueError(
            f"bar groups {bad} lp/cm are narrower than one pixel at {pixel_spacing} mm/pixel"
        )
    widths = [bar_width_mm(g) / pixel_spacing for g in groups]
    heights = [max(4.0 * w, 6.0) for w in widths]
    gap = 2.0 * max(widths)
    total = sum(heights) + gap * (len(groups) - 1)
    extent = [2 * n_bars * w for w in widths]  # bar + equal gap per line pair
    inner = 0.45 * n * math.sqrt(2)
    if total > 0.8 * n or max(extent) > 0.8 * n or math.hypot(total, max(extent)) > 2 * 0.9 * inner:
        raise ValueError("bar groups do not fit inside the module; use a larger grid")
    out = []
    row = (n - total) / 2
    for g, w, h in zip(groups, widths, heights):
        span = (2 * n_bars - 1) * w
        col0 = (n - span) / 2
        out.append(BarGroup(float(g), w, row, row + h, col0, col0 + span, n_bars))
        row += h + gap
    return out


def line_pair_module(n, groups=(4, 5), pixel_spacing=0.5, n_bars=4, background=BODY_HU,
                     contrast=LINE_PAIR_CONTRAST, supersample=8) -> Image2D:
    """Circular module (HU) with vertical bar groups of width ``10 / (2 g)`` mm."""
    layout = line_pair_layout(n, groups, pixel_spacing, n_bars)
    m = n * supersample
    # fine pixel centres in coarse pixel units
    c = (np.arange(m) + 0.5) / supersample
    cols, rows = np.meshgrid(c, c)
    fine = np.full((m, m), AIR_HU)
    r = 0.45 * n
    fine[(rows - n / 2) ** 2 + (cols - n / 2) ** 2 <= r * r] = background
    for grp in layout:
        in_rows = (rows >= grp.row0) & (rows < grp.row1)
        for b in range(n_bars):
            left = grp.col0 + 2 * b * grp.bar_width_px
            fine[in_rows & (cols >= left) & (cols < left + grp.bar_width_px)] = background + contrast
    return Image2D(_block_mean(fine, supersample), pixel_spacing)


# -- random training bodies ----------------------------------------------------


@dataclass(frozen=True)
class RandomPhantomConfig:
    n_ellipses: tuple[int, int] = (3, 12)
    delta_hu: tuple[float, float] = (5.0, 50.0)
    body_hu: float = BODY_HU
    air_hu: float = AIR_HU
    value_range: tuple[float, float] = HU_RANGE
    texture_hu: float = 20.0  # std of a fine tissue texture; 0 disables it
    texture_cells: int = 64  # texture correlation length is 2 / texture_cells of the field

    def __post_init__(self):
        lo, hi = self.n_ellipses
        if not 1 <= lo <= hi:
            raise ValueError("n_ellipses must be an increasing pair of positive counts")
        if not 0 < self.delta_hu[0] <= self.delta_hu[1]:
            raise ValueError("delta_hu must be an increasing pair of positive values")
        if self.texture_hu < 0 or self.texture_cells < 2:
            raise ValueError("texture_hu must be non-negative and texture_cells at least 2")


def random_ellipse_spec(seed, n, cfg: RandomPhantomConfig = RandomPhantomConfig()) -> EllipsePhantomSpec:
    _check_n(n)
    rng = np.random.default_rng([seed, 0x5EED])
    # body: an air background plus one large ellipse lifting it to soft tissue
    ba = rng.uniform(0.72, 0.88)
    bb = rng.uniform(0.55, 0.75)
    body = Ellipse((0.0, 0.0), (ba, bb), rng.uniform(-10, 10), cfg.body_hu - cfg.air_hu)
    ellipses = [body]
    count = int(rng.integers(cfg.n_ellipses[0], cfg.n_ellipses[1] + 1))
    for _ in range(count):
        a, b = rng.uniform(0.05, 0.3, size=2)
        # keep centres well inside the body
        r = rng.uniform(0, 0.6) ** 0.5 * 0.8
        t = rng.uniform(0, 2 * np.pi)
        cx, cy = r * ba * math.cos(t) * 0.8, r * bb * math.sin(t) * 0.8
        mag = rng.uniform(*cfg.delta_hu)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        ellipses.append(Ellipse((cx, cy), (a, b), rng.uniform(0, 180), sign * mag))
    return EllipsePhantomSpec(tuple(ellipses), cfg.air_hu, n, cfg.value_range,
                              extras={"seed": seed, "texture_hu": cfg.texture_hu})


def _texture_field(seed, n, std, cells):
    """Pixel averages of a bilinear random field on a fixed ``cells``-wide lattice.

    The lattice is tied to the field of view rather than the grid, so the same
    seed gives the same texture at every resolution.
    """
    rng = np.random.default_rng([seed, 0x7E47])
    # at n == cells a pixel averages four lattice nodes, whose mean has std 1/2
    lattice = rng.standard_normal((cells + 1, cells + 1)) * (std / 0.5)
    x, y = unit_grid(n)
    u = (x + 1) / 2 * cells
    v = (1 - y) / 2 * cells
    i0 = np.clip(np.floor(v).astype(np.int64), 0, cells - 1)
    j0 = np.clip(np.floor(u).astype(np.int64), 0, cells - 1)
    fv = v - i0
    fu = u - j0
    fine = (lattice[i0, j0] * (1 - fv) * (1 - fu) + lattice[i0 + 1, j0] * fv * (1 - fu)
            + lattice[i0, j0 + 1] * (1 - fv) * fu + lattice[i0 + 1, j0 + 1] * fv * fu)
    return _block_mean(fine, SUPERSAMPLE)


def random_ellipse_phantom(seed, n, pixel_spacing=2.0, cfg: RandomPhantomConfig = RandomPhantomConfig()) -> Image2D:
    """A body-like HU phantom with low-contrast inserts, deterministic per seed."""
    spec = random_ellipse_spec(seed, n, cfg)
    base = render(EllipsePhantomSpec(spec.ellipses, spec.background, n))
    body_mask = _block_mean(spec.ellipses[0].inside(*unit_grid(n)).astype(np.float64), SUPERSAMPLE)
    out = base
    if cfg.texture_hu > 0:
        out = out + body_mask * _texture_field(seed, n, cfg.texture_hu, cfg.texture_cells)
    return Image2D(np.clip(out, *cfg.value_range), pixel_spacing)


def downsample2(img: Image2D) -> Image2D:
    """2x2 block mean, doubling the pixel spacing."""
    return Image2D(_block_mean(img.data.astype(np.float64), 2), 2 * img.pixel_spacing)
