import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.ndimage import gaussian_filter1d

from sagan_ct.imaging import Image2D, RoiRect, apply_window
from sagan_ct.metrics import (
    DEFAULT_PROFILE_SAMPLES,
    DEFAULT_ROI_SIZE,
    PIGLET_DOSE_FRACTIONS,
    PIGLET_FULL_DOSE,
    DoseRecord,
    MetricReport,
    SsimConfig,
    append_csv,
    dose_scale,
    evaluate,
    find_flat_rois,
    line_profile,
    modulation_depth,
    psnr,
    roi_noise_level,
    roi_stds,
    ssim,
    windowed_psnr,
)
from sagan_ct.phantoms import shepp_logan

# rows of the piglet dose table: mAs, CTDIvol, DLP, effective dose per fraction
DOSE_TABLE = {
    1.0: (300, 30.83, 943.24, 14.14),
    0.5: (150, 15.41, 471.62, 7.07),
    0.25: (75, 7.71, 235.81, 3.54),
    0.1: (30, 3.08, 94.32, 1.41),
    0.05: (15, 1.54, 47.16, 0.71),
}

u8 = arrays(np.uint8, (12, 12))


def square_wave(n_bars=4, width=6, low=0.0, high=400.0, margin=6):
    prof = [low] * margin
    for b in range(n_bars):
        prof += [high] * width
        if b < n_bars - 1:
            prof += [low] * width
    return np.array(prof + [low] * margin)


class TestPsnr:
    def test_identical_sentinel(self):
        a = np.arange(16, dtype=np.uint8).reshape(4, 4)
        assert psnr(a, a) == math.inf

    def test_full_scale_zero_db(self):
        assert psnr(np.zeros((4, 4)), np.full((4, 4), 255)) == pytest.approx(0.0)

    def test_closed_form(self):
        assert psnr(np.zeros((4, 4)), np.full((4, 4), 128)) == pytest.approx(5.987, abs=5e-4)
        assert psnr(np.zeros((4, 4)), np.full((4, 4), 128)) == pytest.approx(20 * math.log10(255 / 128))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))

    @given(u8, u8)
    def test_symmetric(self, a, b):
        assert psnr(a, b) == psnr(b, a)

    @given(u8, st.integers(0, 143), st.integers(1, 255))
    def test_perturbation_drops_below_sentinel(self, a, idx, delta):
        b = a.astype(np.int64)
        b.flat[idx] += delta
        assert psnr(a, b) < math.inf

    def test_windowed(self):
        a = Image2D(np.full((8, 8), -160.0))
        b = Image2D(np.full((8, 8), 240.0))
        assert windowed_psnr(a, b) == pytest.approx(0.0)


@pytest.fixture(scope="module")
def sl8():
    return np.round(shepp_logan(64).data * 255)


class TestSsim:
    def test_self_is_one(self, sl8):
        assert ssim(sl8, sl8) == pytest.approx(1.0)

    def test_symmetric(self, sl8):
        noisy = sl8 + np.random.default_rng(0).normal(0, 20, sl8.shape)
        assert ssim(sl8, noisy) == pytest.approx(ssim(noisy, sl8), abs=1e-12)

    def test_noise_monotone(self, sl8):
        rng = np.random.default_rng(1)
        z = rng.standard_normal(sl8.shape)
        scores = [ssim(sl8, sl8 + s * z) for s in (2, 5, 10, 20, 40)]
        assert all(a > b for a, b in zip(scores, scores[1:]))

    def test_reference_value(self):
        # two constants: luminance term only, (2ab + c1) / (a^2 + b^2 + c1)
        c1 = (0.01 * 255) ** 2
        expected = (2 * 100 * 120 + c1) / (100**2 + 120**2 + c1)
        assert ssim(np.full((16, 16), 100.0), np.full((16, 16), 120.0)) == pytest.approx(expected)

    def test_too_small(self):
        with pytest.raises(ValueError, match="at least"):
            ssim(np.zeros((10, 10)), np.zeros((10, 10)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((16, 16)), np.zeros((16, 17)))

    @settings(max_examples=25)
    @given(arrays(np.uint8, (16, 16)), arrays(np.uint8, (16, 16)))
    def test_bounded(self, a, b):
        assert -1.0 <= ssim(a, b) <= 1.0

    def test_config(self):
        with pytest.raises(ValueError):
            SsimConfig(window=10)


class TestRoiNoise:
    def test_constant(self):
        assert roi_noise_level(np.full((40, 40), 7.0), [RoiRect(0, 0), RoiRect(15, 15)]) == 0.0

    def test_gaussian_sigma(self):
        noise = np.random.default_rng(0).normal(0, 10, (21, 21))
        assert roi_noise_level(noise, [RoiRect(0, 0)]) == pytest.approx(10, rel=0.15)

    def test_default_size(self):
        assert DEFAULT_ROI_SIZE == 21
        assert (RoiRect(0, 0).w, RoiRect(0, 0).h) == (21, 21)

    def test_population_std(self):
        img = np.zeros((2, 2))
        img[0, 0] = 2.0
        assert roi_stds(img, [RoiRect(0, 0, 2, 2)]) == [pytest.approx(np.sqrt(0.75))]

    def test_mean_over_rois(self):
        img = np.zeros((10, 20))
        img[:, 10:] = np.tile([0.0, 2.0], (10, 5))
        assert roi_noise_level(img, [RoiRect(0, 0, 10, 10), RoiRect(10, 0, 10, 10)]) == pytest.approx(0.5)

    def test_out_of_bounds_named(self):
        with pytest.raises(ValueError, match="x0=30"):
            roi_noise_level(np.zeros((40, 40)), [RoiRect(0, 0), RoiRect(30, 0)])

    def test_offset_invariant(self):
        img = np.random.default_rng(3).normal(0, 5, (42, 42))
        rois = [RoiRect(0, 0), RoiRect(21, 21)]
        assert roi_noise_level(img + 1000, rois) == pytest.approx(roi_noise_level(img, rois), rel=1e-9)

    def test_find_flat(self):
        img = np.zeros((63, 63))
        img[:21, :21] = np.arange(21)
        rois = find_flat_rois(img, 4)
        assert len(rois) == 4
        assert RoiRect(0, 0) not in rois
        assert all(np.ptp(img[r.slice()]) == 0 for r in rois)


class TestLineProfile:
    def test_default_samples(self):
        assert DEFAULT_PROFILE_SAMPLES == 30
        assert len(line_profile(np.ones((8, 8)), (0, 0), (7, 7))) == 30

    def test_constant(self):
        np.testing.assert_allclose(line_profile(np.full((8, 8), 3.0), (1, 2), (6, 5), n=11), 3.0)

    def test_ramp_linear(self):
        ramp = np.tile(np.arange(10.0), (10, 1)) * 2 + np.arange(10.0)[:, None]
        prof = line_profile(ramp, (0.5, 1.0), (8.0, 7.5), n=17)
        t = np.linspace(0, 1, 17)
        expected = 2 * (0.5 + 7.5 * t) + (1.0 + 6.5 * t)
        np.testing.assert_allclose(prof, expected, atol=1e-12)

    def test_endpoints_inclusive(self):
        img = np.arange(25.0).reshape(5, 5)
        prof = line_profile(img, (0, 0), (4, 4), n=5)
        np.testing.assert_allclose(prof, np.diag(img))

    def test_out_of_bounds(self):
        with pytest.raises(ValueError, match="outside"):
            line_profile(np.zeros((8, 8)), (0, 0), (8, 3))

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            line_profile(np.zeros((8, 8)), (0, 0), (3, 3), n=1)


class TestModulationDepth:
    def test_square_wave(self):
        assert modulation_depth(square_wave(), 4) == pytest.approx(1.0)

    def test_constant(self):
        assert modulation_depth(np.full(40, 10.0), 4) == 0.0

    def test_blur_lowers_depth(self):
        sq = square_wave()
        sharp = modulation_depth(sq, 4)
        blurred = [modulation_depth(gaussian_filter1d(sq, s), 4) for s in (1.0, 2.0)]
        assert sharp > blurred[0] > blurred[1]

    def test_unresolved(self):
        # four bars blurred into one lump
        assert modulation_depth(gaussian_filter1d(square_wave(width=2), 4.0), 4) == 0.0

    def test_known_contrast(self):
        assert modulation_depth(square_wave(low=100.0, high=300.0), 4) == pytest.approx(0.5)

    def test_bad_bars(self):
        with pytest.raises(ValueError):
            modulation_depth(square_wave(), 0)


class TestDose:
    @pytest.mark.parametrize("fraction", PIGLET_DOSE_FRACTIONS)
    def test_table(self, fraction):
        got = dose_scale(PIGLET_FULL_DOSE, fraction).rounded().values()
        np.testing.assert_allclose(got, DOSE_TABLE[fraction], atol=1e-9)

    def test_identity(self):
        assert dose_scale(PIGLET_FULL_DOSE, 1.0) == PIGLET_FULL_DOSE

    @pytest.mark.parametrize("fraction", [0.0, -0.1, 1.5, float("nan")])
    def test_out_of_range(self, fraction):
        with pytest.raises(ValueError, match="fraction"):
            dose_scale(PIGLET_FULL_DOSE, fraction)

    @given(st.floats(0.001, 1.0), st.floats(0.001, 1.0))
    def test_multiplicative(self, a, b):
        twice = dose_scale(dose_scale(PIGLET_FULL_DOSE, a), b)
        once = dose_scale(PIGLET_FULL_DOSE, a * b)
        assert twice.values() == once.values()

    def test_ratios_consistent(self):
        d = dose_scale(PIGLET_FULL_DOSE, 0.3)
        ratios = np.array(d.values()) / np.array(PIGLET_FULL_DOSE.values())
        np.testing.assert_allclose(ratios, 0.3)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            DoseRecord(-1.0, 1.0, 1.0, 1.0)


class TestReport:
    def make(self):
        return MetricReport(31.5, 0.91, 12.0, (11.0, 13.0), {"seed": 3, "n0": 1e4, "method": "fbp"})

    def test_json_round_trip(self):
        r = self.make()
        assert MetricReport.from_json(r.to_json()) == r

    def test_json_key_order(self):
        text = self.make().to_json()
        keys = list(json.loads(text))
        assert keys == sorted(keys)
        assert text == self.make().to_json()

    def test_inf_psnr(self):
        r = MetricReport(math.inf, 1.0, 0.0)
        assert json.loads(r.to_json())["psnr"] == "inf"
        assert MetricReport.from_json(r.to_json()).psnr == math.inf

    def test_invariants(self):
        with pytest.raises(ValueError):
            MetricReport(30.0, 1.5, 0.0)
        with pytest.raises(ValueError):
            MetricReport(float("nan"), 0.5, 0.0)
        with pytest.raises(ValueError):
            MetricReport(30.0, 0.5, float("inf"))

    def test_csv(self, tmp_path):
        path = tmp_path / "log.csv"
        append_csv(path, [self.make().csv_row("a")])
        append_csv(path, [self.make().csv_row("b")])
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(MetricReport.CSV_COLUMNS)
        assert len(lines) == 3 and lines[2].startswith("b,31.5,0.91,12.0,11.0;13.0,")

    def test_with_metadata(self):
        r = self.make().with_metadata(seed=4)
        assert r.metadata["seed"] == 4 and r.metadata["method"] == "fbp"

    def test_evaluate(self):
        rng = np.random.default_rng(0)
        ref = Image2D(np.full((42, 42), 40.0))
        cand = Image2D(40.0 + rng.normal(0, 10, (42, 42)))
        rep = evaluate(cand, ref, [RoiRect(0, 0), RoiRect(21, 21)], metadata={"seed": 0})
        assert rep.psnr == pytest.approx(psnr(apply_window(cand), apply_window(ref)))
        assert rep.noise_level == pytest.approx(10, rel=0.15)
        assert len(rep.roi_stds) == 2 and rep.metadata == {"seed": 0}
        assert evaluate(ref, ref).psnr == math.inf
