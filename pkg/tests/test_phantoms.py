import numpy as np
import pytest
from scipy.signal import find_peaks

from sagan_ct.imaging import HU_RANGE
from sagan_ct.phantoms import (
    AIR_HU,
    BODY_HU,
    LINE_PAIR_CONTRAST,
    Ellipse,
    EllipsePhantomSpec,
    RandomPhantomConfig,
    bar_width_mm,
    downsample2,
    line_pair_layout,
    line_pair_module,
    random_ellipse_phantom,
    random_ellipse_spec,
    render,
    shepp_logan,
    shepp_logan_spec,
    unit_grid,
)


def mirror(e):
    return ((-e.center[0], e.center[1]), e.axes, (-e.rotation) % 180, e.value)


def key(e):
    return ((round(e.center[0], 6), round(e.center[1], 6)), e.axes, round(e.rotation % 180, 6), e.value)


class TestSheppLogan:
    def test_size_and_range(self):
        img = shepp_logan(64)
        assert img.shape == (64, 64)
        assert img.data.max() == pytest.approx(1.0)
        assert img.data.min() >= 0.0

    def test_ten_ellipses(self):
        assert len(shepp_logan_spec(64).ellipses) == 10

    def test_outside_outer_ellipse_is_zero(self):
        img = shepp_logan(64).data
        outer = shepp_logan_spec(64).ellipses[0]
        x, y = unit_grid(64, 1)
        far = ~Ellipse(outer.center, tuple(1.05 * a for a in outer.axes), outer.rotation, 1.0).inside(x, y)
        assert far.any()
        assert not img[far].any()
        assert img[0, 0] == 0.0

    def test_mirror_symmetry_on_symmetric_subset(self):
        # oracle: pixels untouched by any ellipse without a mirror partner must be x-symmetric
        spec = shepp_logan_spec(64)
        keys = {key(e) for e in spec.ellipses}
        lonely = [e for e in spec.ellipses if key(Ellipse(*mirror(e))) not in keys]
        assert 0 < len(lonely) < len(spec.ellipses)
        x, y = unit_grid(64, 1)
        pad = 3.0 / 64
        touched = np.zeros((64, 64), bool)
        for e in lonely:
            grown = Ellipse(e.center, tuple(a + pad for a in e.axes), e.rotation, 1.0)
            touched |= grown.inside(x, y) | grown.inside(-x, y)
        img = shepp_logan(64).data
        sym = ~touched
        assert sym.mean() > 0.5
        np.testing.assert_allclose(img[sym], img[:, ::-1][sym], atol=1e-12)

    def test_too_small(self):
        with pytest.raises(ValueError, match="16"):
            shepp_logan(8)


class TestEllipseSpec:
    def test_render_disk_area(self):
        spec = EllipsePhantomSpec((Ellipse((0, 0), (0.5, 0.5), 0.0, 2.0),), 1.0, 64)
        img = render(spec, supersample=8)
        # mean = background + value * area fraction
        assert img.mean() == pytest.approx(1.0 + 2.0 * np.pi * 0.25 / 4, rel=2e-3)

    def test_rejects_ellipse_outside(self):
        with pytest.raises(ValueError, match="outside"):
            EllipsePhantomSpec((Ellipse((3.0, 0.0), (0.1, 0.1), 0.0, 1.0),), 0.0, 32)

    def test_rejects_bad_axes(self):
        with pytest.raises(ValueError):
            Ellipse((0, 0), (0.0, 0.1), 0.0, 1.0)
        with pytest.raises(ValueError):
            Ellipse((0, 0), (0.1, 0.1), 0.0, float("nan"))

    def test_value_range_clamps(self):
        spec = EllipsePhantomSpec((Ellipse((0, 0), (0.5, 0.5), 0.0, 5.0),), 0.0, 16, (0.0, 1.0))
        assert render(spec).max() == 1.0


class TestLinePairs:
    def test_bar_width(self):
        assert bar_width_mm(4) == 1.25
        layout = line_pair_layout(128, (4, 5), 0.5)
        assert layout[0].bar_width_px == 2.5
        assert layout[1].bar_width_px == 2.0

    def test_values(self):
        img = line_pair_module(128, (4, 5), 0.5).data
        assert img.max() == pytest.approx(BODY_HU + LINE_PAIR_CONTRAST)
        assert img[64, 2] == AIR_HU
        assert np.median(img[20:40, 40:90]) == BODY_HU

    @pytest.mark.parametrize("index", [0, 1])
    def test_profile_extrema(self, index):
        grp = line_pair_layout(128, (4, 5), 0.5)[index]
        img = line_pair_module(128, (4, 5), 0.5).data
        row = img[int(grp.centre_row)]
        lo, hi = int(grp.col0) - 3, int(np.ceil(grp.col1)) + 3
        prof = row[lo:hi]
        peaks, _ = find_peaks(prof)
        valleys, _ = find_peaks(-prof)
        # n_bars maxima and the n_bars - 1 gaps between them, plus the flanking background
        assert len(peaks) == grp.n_bars
        assert len(valleys) == grp.n_bars - 1
        assert len(peaks) + len(valleys) + 1 == 2 * grp.n_bars

    def test_unresolvable_group_named(self):
        with pytest.raises(ValueError, match=r"\[12\]"):
            line_pair_layout(128, (4, 12), 0.5)

    def test_does_not_fit(self):
        with pytest.raises(ValueError, match="fit"):
            line_pair_module(32, (1, 2), 1.0)

    def test_empty_groups(self):
        with pytest.raises(ValueError):
            line_pair_layout(64, (), 0.5)


class TestRandomPhantom:
    def test_deterministic(self):
        assert random_ellipse_phantom(3, 64) == random_ellipse_phantom(3, 64)

    def test_ellipse_count(self):
        for seed in range(20):
            n = len(random_ellipse_spec(seed, 64).ellipses) - 1
            assert 3 <= n <= 12

    def test_deltas_are_low_contrast(self):
        for seed in range(10):
            for e in random_ellipse_spec(seed, 64).ellipses[1:]:
                assert 5.0 <= abs(e.value) <= 50.0

    def test_range(self):
        cfg = RandomPhantomConfig(value_range=(-200.0, 100.0))
        for seed in range(5):
            img = random_ellipse_phantom(seed, 64, cfg=cfg).data
            assert img.min() >= -200.0 and img.max() <= 100.0
        img = random_ellipse_phantom(0, 64).data
        assert HU_RANGE[0] <= img.min() and img.max() <= HU_RANGE[1]

    def test_seeds_differ(self):
        for s in range(100):
            a = random_ellipse_phantom(2 * s, 32).data
            b = random_ellipse_phantom(2 * s + 1, 32).data
            assert np.mean(a != b) >= 0.01

    def test_body_background(self):
        img = random_ellipse_phantom(0, 64, cfg=RandomPhantomConfig(texture_hu=0.0)).data
        assert img[0, 0] == AIR_HU
        assert np.median(img[24:40, 24:40]) == pytest.approx(BODY_HU, abs=50)

    @pytest.mark.parametrize("seed", range(3))
    def test_resolution_consistent(self, seed):
        fine = random_ellipse_phantom(seed, 128, 1.0)
        coarse = random_ellipse_phantom(seed, 64, 2.0)
        half = downsample2(fine)
        assert half.pixel_spacing == coarse.pixel_spacing
        span = coarse.data.max() - coarse.data.min()
        assert np.abs(half.data - coarse.data).mean() < 0.02 * span

    def test_shepp_logan_resolution_consistent(self):
        half = downsample2(shepp_logan(128))
        assert np.abs(half.data - shepp_logan(64).data).mean() < 0.02

    def test_config_checked(self):
        with pytest.raises(ValueError):
            RandomPhantomConfig(n_ellipses=(5, 2))
        with pytest.raises(ValueError):
            RandomPhantomConfig(delta_hu=(0.0, 5.0))
        with pytest.raises(ValueError):
            RandomPhantomConfig(texture_cells=1)
