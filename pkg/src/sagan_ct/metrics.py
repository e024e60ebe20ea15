"""Image-quality and dose bookkeeping: PSNR, SSIM, ROI noise, line profiles, dose scaling.

Report files
------------
``MetricReport.to_json`` writes an object with sorted keys::

    {"metadata": {...}, "noise_level": float, "psnr": float | "inf",
     "roi_stds": [float, ...], "ssim": float}

CSV run logs carry the columns of ``MetricReport.CSV_COLUMNS``; ``roi_stds``
is joined with ``;`` and metadata is flattened as ``key=value`` pairs.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d, map_coordinates
from scipy.signal import find_peaks

from .imaging import ABDOMEN_WINDOW, Image2D, RoiRect, Window, apply_window

PSNR_IDENTICAL = math.inf
DEFAULT_PROFILE_SAMPLES = 30
DEFAULT_ROI_SIZE = 21


def _as_array(img):
    return np.asarray(img.data if isinstance(img, Image2D) else img, dtype=np.float64)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def psnr(a, b, peak=255.0):
    """``10 log10(peak^2 / MSE)``; identical inputs give ``inf``."""
    a = _as_array(a)
    b = _as_array(b)
    _same_shape(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(peak * peak / mse)


@dataclass(frozen=True)
class SsimConfig:
    k1: float = 0.01
    k2: float = 0.03
    window: int = 11
    sigma: float = 1.5
    data_range: float = 255.0

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("SSIM window must be odd and at least 3")


def _gaussian_taps(size, sigma):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _valid_filter(img, taps):
    """Separable correlation keeping only fully covered window positions."""
    h = len(taps) // 2
    out = correlate1d(correlate1d(img, taps, axis=0, mode="constant"), taps, axis=1, mode="constant")
    return out[h:img.shape[0] - h, h:img.shape[1] - h]


def ssim_map(a, b, cfg: SsimConfig = SsimConfig()):
    a = _as_array(a)
    b = _as_array(b)
    _same_shape(a, b, "ssim")
    if min(a.shape) < cfg.window:
        raise ValueError(f"SSIM needs images of at least {cfg.window}x{cfg.window}, got {a.shape}")
    taps = _gaussian_taps(cfg.window, cfg.sigma)
    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    mu_a = _valid_filter(a, taps)
    mu_b = _valid_filter(b, taps)
    saa = _valid_filter(a * a, taps) - mu_a**2
    sbb = _valid_filter(b * b, taps) - mu_b**2
    sab = _valid_filter(a * b, taps) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return num / den


def ssim(a, b, cfg: SsimConfig = SsimConfig()):
    """Mean local SSIM over valid Gaussian-window positions."""
    return float(np.clip(ssim_map(a, b, cfg).mean(), -1.0, 1.0))


def windowed_psnr(a: Image2D, b: Image2D, win: Window = ABDOMEN_WINDOW):
    """PSNR between abdomen-window 8-bit renderings of two HU images."""
    return psnr(apply_window(a, win), apply_window(b, win))


def windowed_ssim(a: Image2D, b: Image2D, win: Window = ABDOMEN_WINDOW):
    return ssim(apply_window(a, win), apply_window(b, win))


def roi_stds(img, rois):
    data = _as_array(img)
    rois = list(rois)
    if not rois:
        raise ValueError("need at least one ROI")
    for r in rois:
        if not r.fits(data.shape):
            raise ValueError(f"ROI {r} lies outside the {data.shape[1]}x{data.shape[0]} image")
    return [float(np.std(data[r.slice()])) for r in rois]


def roi_noise_level(img, rois):
    """Mean population standard deviation over homogeneous ROIs."""
    return float(np.mean(roi_stds(img, rois)))


def find_flat_rois(img, count, size=DEFAULT_ROI_SIZE, max_range=1.0, stride=None):
    """Non-overlapping ROIs whose ground-truth values vary by at most ``max_range``."""
    data = _as_array(img)
    stride = stride or size
    out = []
    for y0 in range(0, data.shape[0] - size + 1, stride):
        for x0 in range(0, data.shape[1] - size + 1, stride):
            block = data[y0:y0 + size, x0:x0 + size]
            if np.ptp(block) <= max_range:
                out.append(RoiRect(x0, y0, size, size))
                if len(out) == count:
                    return out
    return out


def line_profile(img, p0, p1, n=DEFAULT_PROFILE_SAMPLES):
    """Bilinear samples at ``n`` equally spaced points from ``p0`` to ``p1`` (inclusive).

    Points are ``(x, y)`` = (column, row) in pixel units.
    """
    data = _as_array(img)
    if n < 2:
        raise ValueError("a profile needs at least 2 samples")
    h, w = data.shape
    for p in (p0, p1):
        if not (0 <= p[0] <= w - 1 and 0 <= p[1] <= h - 1):
            raise ValueError(f"profile endpoint {p} outside the {w}x{h} image")
    t = np.linspace(0.0, 1.0, n)
    xs = p0[0] + t * (p1[0] - p0[0])
    ys = p0[1] + t * (p1[1] - p0[1])
    return map_coordinates(data, [ys, xs], order=1, mode="nearest")


def _alternating_extrema(profile):
    """Interior local maxima and minima, merged so that types alternate."""
    p = np.asarray(profile, dtype=np.float64)
    peaks, _ = find_peaks(p)
    troughs, _ = find_peaks(-p)
    events = sorted([(i, 1) for i in peaks] + [(i, -1) for i in troughs])
    merged = []
    for i, kind in events:
        if merged and merged[-1][1] == kind:
            # keep the more extreme of two same-type neighbours
            j = merged[-1][0]
            if kind * p[i] > kind * p[j]:
                merged[-1] = (i, kind)
        else:
            merged.append((i, kind))
    return merged


def modulation_depth(profile, n_bars):
    """``(mean peak - mean trough) / (mean peak + mean trough)`` over alternating extrema.

    A group counts as resolved only when at least ``2 n_bars - 1`` alternating
    extrema are found; otherwise 0 is returned.
    """
    p = np.asarray(profile, dtype=np.float64)
    if n_bars < 1:
        raise ValueError("n_bars must be positive")
    ext = _alternating_extrema(p)
    if len(ext) < 2 * n_bars - 1:
        return 0.0
    hi = np.mean([p[i] for i, k in ext if k == 1])
    lo = np.mean([p[i] for i, k in ext if k == -1])
    denom = hi + lo
    if denom == 0:
        return 0.0
    return float((hi - lo) / denom)


# -- dose arithmetic -----------------------------------------------------------


@dataclass(frozen=True)
class DoseRecord:
    tube_current: float  # mAs
    ctdi_vol: float  # mGy
    dlp: float  # mGy cm
    effective_dose: float  # mSv
    # unscaled record and cumulative fraction, so repeated scaling composes exactly
    base: tuple | None = field(default=None, repr=False, compare=False)
    fraction: float = field(default=1.0, repr=False, compare=False)

    def __post_init__(self):
        vals = self.values()
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise ValueError(f"dose fields must be finite and non-negative, got {vals}")
        if self.base is None:
            object.__setattr__(self, "base", vals)

    def values(self):
        return (self.tube_current, self.ctdi_vol, self.dlp, self.effective_dose)

    def rounded(self, digits=2):
        return DoseRecord(*(round(v, digits) for v in self.values()))


PIGLET_FULL_DOSE = DoseRecord(300.0, 30.83, 943.24, 14.14)
PIGLET_DOSE_FRACTIONS = (1.0, 0.5, 0.25, 0.1, 0.05)


def dose_scale(full: DoseRecord, fraction) -> DoseRecord:
    """Scale every dose index linearly with the tube-current fraction."""
    if not (isinstance(fraction, (int, float)) and 0 < fraction <= 1):
        raise ValueError(f"dose fraction must lie in (0, 1], got {fraction}")
    total = full.fraction * fraction
    return DoseRecord(*(v * total for v in full.base), base=full.base, fraction=total)


# -- reports -------------------------------------------------------------------


def _json_float(v):
    return "inf" if v == math.inf else v


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    noise_level: float
    roi_stds: tuple[float, ...] = ()
    metadata: dict = field(default_factory=dict)

    CSV_COLUMNS = ("name", "psnr", "ssim", "noise_level", "roi_stds", "metadata")

    def __post_init__(self):
        object.__setattr__(self, "roi_stds", tuple(float(s) for s in self.roi_stds))
        vals = (self.ssim, self.noise_level) + self.roi_stds
        if not all(math.isfinite(v) for v in vals) or math.isnan(self.psnr):
            raise ValueError("metric values must be finite (PSNR may be +inf for identical images)")
        if not -1.0 <= self.ssim <= 1.0:
            raise ValueError(f"SSIM {self.ssim} outside [-1, 1]")

    def to_dict(self):
        return {
            "metadata": dict(sorted(self.metadata.items())),
            "noise_level": self.noise_level,
            "psnr": _json_float(self.psnr),
            "roi_stds": list(self.roi_stds),
            "ssim": self.ssim,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        p = d["psnr"]
        return cls(math.inf if p == "inf" else float(p), d["ssim"], d["noise_level"],
                   tuple(d["roi_stds"]), d.get("metadata", {}))

    def csv_row(self, name):
        meta = ";".join(f"{k}={v}" for k, v in sorted(self.metadata.items()))
        stds = ";".join(repr(s) for s in self.roi_stds)
        return [name, repr(self.psnr), repr(self.ssim), repr(self.noise_level), stds, meta]

    def with_metadata(self, **kw):
        return replace(self, metadata={**self.metadata, **kw})


def evaluate(candidate: Image2D, reference: Image2D, rois=(), win: Window = ABDOMEN_WINDOW,
             metadata=None) -> MetricReport:
    """PSNR/SSIM on windowed 8-bit renderings plus ROI noise on the HU data."""
    _same_shape(candidate.data, reference.data, "evaluate")
    a = apply_window(candidate, win)
    b = apply_window(reference, win)
    stds = roi_stds(candidate, rois) if rois else []
    noise = float(np.mean(stds)) if stds else 0.0
    return MetricReport(psnr(a, b), ssim(a, b), noise, tuple(stds), dict(metadata or {}))


def append_csv(path, rows, header=MetricReport.CSV_COLUMNS):
    """Append rows to a CSV run log, writing the header for a new file."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if new:
        writer.writerow(header)
    writer.writerows(rows)
    with path.open("a", newline="") as fh:
        fh.write(buf.getvalue())
