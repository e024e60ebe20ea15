import numpy as np
import pytest

from sagan_ct import nn
from sagan_ct.imaging import HU_RANGE, Image2D
from sagan_ct.models import (
    LEAKY_SLOPE,
    DiscriminatorConfig,
    GeneratorConfig,
    HuNormalization,
    build_discriminator,
    build_generator,
    build_sharpness_net,
    config_dict,
    generator_denoise,
    sharpness_net_config,
    to_batch,
)
from sagan_ct.nn.tensor import Tensor

# parameter counts of the default configurations
GOLDEN_PARAMS = {"generator": 11452865, "generator_desk": 275825, "discriminator": 2765505}

DESK = GeneratorConfig(base_width=8, n_residual=1)


def n_params(net):
    return sum(p.data.size for p in net.parameters())


def rand(*shape, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(-1, 1, shape).astype(np.float32))


def pass_through_generator(cfg=DESK):
    """Generator whose output is tanh(input): the skip path carries x, the decoder is muted."""
    g = build_generator(cfg, seed=0)
    b, ko = cfg.base_width, cfg.outer_kernel
    c = ko // 2
    w = np.zeros_like(g.enc1.weight.data)
    w[0, 0, c, c] = 1.0
    w[1, 0, c, c] = -1.0
    g.enc1.weight.data[...] = w
    g.enc1.bias.data[...] = 0
    # leaky(x) - leaky(-x) = (1 + slope) x
    wo = np.zeros_like(g.out.weight.data)
    wo[0, b + 0, c, c] = 1.0 / (1 + LEAKY_SLOPE)
    wo[0, b + 1, c, c] = -1.0 / (1 + LEAKY_SLOPE)
    g.out.weight.data[...] = wo
    g.out.bias.data[...] = 0
    return g.eval()


class TestGenerator:
    def test_256_shape_and_range(self):
        g = build_generator(GeneratorConfig(base_width=4, n_residual=1)).eval()
        y = g(rand(1, 1, 256, 256)).data
        assert y.shape == (1, 1, 256, 256)
        assert np.all(np.abs(y) < 1)

    @pytest.mark.parametrize("size", [64, 32, 20])
    def test_fully_convolutional(self, size):
        g = build_generator(DESK).eval()
        assert g(rand(1, 1, size, size)).shape == (1, 1, size, size)

    def test_rectangular(self):
        g = build_generator(DESK).eval()
        assert g(rand(2, 1, 16, 24)).shape == (2, 1, 16, 24)

    def test_bottleneck_quarter_scale(self):
        g = build_generator(GeneratorConfig(base_width=4, n_residual=1)).eval()
        seen = {}
        block = g.blocks[0]
        orig = block.forward

        def spy(x):
            seen["shape"] = x.shape
            return orig(x)

        block.forward = spy
        g(rand(1, 1, 256, 256))
        assert seen["shape"] == (1, 16, 64, 64)

    def test_size_divisible_by_4(self):
        with pytest.raises(ValueError, match="divisible by 4"):
            build_generator(DESK)(rand(1, 1, 30, 30))

    def test_layout(self):
        g = build_generator(GeneratorConfig(base_width=16, n_residual=3))
        assert g.enc1.weight.shape == (16, 1, 7, 7) and g.enc1.stride == 1
        assert g.enc2.weight.shape == (32, 16, 3, 3) and g.enc2.stride == 2
        assert g.enc3.weight.shape == (64, 32, 3, 3) and g.enc3.stride == 2
        assert len(g.blocks) == 3 and g.blocks[0].conv1.weight.shape == (64, 64, 3, 3)
        # decoders consume the concatenated skip channels directly
        assert g.dec2.weight.shape == (64, 32, 3, 3)
        assert g.dec1.weight.shape == (64, 16, 3, 3)
        assert g.out.weight.shape == (1, 32, 7, 7)

    def test_param_count_golden(self):
        assert n_params(build_generator()) == GOLDEN_PARAMS["generator"]
        assert n_params(build_generator(GeneratorConfig(16, 3))) == GOLDEN_PARAMS["generator_desk"]

    def test_param_count_depends_only_on_config(self):
        assert n_params(build_generator(DESK, seed=1)) == n_params(build_generator(DESK, seed=2))

    def test_seeded_init(self):
        a, b = build_generator(DESK, seed=3), build_generator(DESK, seed=3)
        assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))
        c = build_generator(DESK, seed=4)
        assert not np.array_equal(a.enc1.weight.data, c.enc1.weight.data)

    @pytest.mark.parametrize("kw", [dict(base_width=2), dict(n_residual=0), dict(in_channels=2),
                                    dict(outer_kernel=4), dict(output="relu")])
    def test_bad_config(self, kw):
        with pytest.raises(ValueError):
            GeneratorConfig(**kw)


class TestDiscriminator:
    def test_receptive_field(self):
        assert DiscriminatorConfig().receptive_field() == 70

    def test_receptive_field_by_probe(self):
        # one output unit only depends on the 70x70 patch above it
        cfg = DiscriminatorConfig(widths=(2, 2, 2, 2))
        d = build_discriminator(cfg, dtype=np.float64).eval()
        x = Tensor(np.zeros((1, 2, 96, 96)), requires_grad=True)
        out = d(x)
        mask = np.zeros(out.shape)
        mask[0, 0, 5, 5] = 1.0
        (out * Tensor(mask)).sum().backward()
        rows, cols = np.nonzero(np.abs(x.grad[0]).sum(axis=0))
        assert rows.max() - rows.min() + 1 <= 70 and cols.max() - cols.min() + 1 <= 70
        d2 = build_discriminator(cfg, seed=1, dtype=np.float64).eval()
        x2 = Tensor(np.random.default_rng(0).random((1, 2, 96, 96)), requires_grad=True)
        out2 = d2(x2)
        (out2 * Tensor(mask)).sum().backward()
        rows, cols = np.nonzero(np.abs(x2.grad[0]).sum(axis=0))
        assert rows.max() - rows.min() + 1 == 70 and cols.max() - cols.min() + 1 == 70

    def test_256_gives_30(self):
        d = build_discriminator(DiscriminatorConfig(widths=(4, 8, 8, 8))).eval()
        assert d(rand(1, 2, 256, 256)).shape == (1, 1, 30, 30)
        assert d.output_shape(256, 256) == (30, 30)

    def test_70_unpadded_gives_single_patch(self):
        cfg = DiscriminatorConfig(widths=(4, 8, 8, 8), padding=0)
        assert cfg.receptive_field() == 70
        d = build_discriminator(cfg).eval()
        assert d(rand(1, 2, 70, 70)).shape == (1, 1, 1, 1)

    def test_layers(self):
        d = build_discriminator()
        assert [c.weight.shape[0] for c in (d.c1, d.c2, d.c3, d.c4, d.c5)] == [64, 128, 256, 512, 1]
        assert d.c1.weight.shape[1] == 2
        assert [c.stride for c in (d.c1, d.c2, d.c3, d.c4, d.c5)] == [2, 2, 2, 1, 1]
        assert n_params(d) == GOLDEN_PARAMS["discriminator"]

    def test_unsquashed_output(self):
        d = build_discriminator(DiscriminatorConfig(widths=(4, 8, 8, 8))).eval()
        d.c5.bias.data[...] = 3.0
        assert d(rand(1, 2, 64, 64)).data.max() > 1.0
        d.c5.bias.data[...] = -3.0
        assert d(rand(1, 2, 64, 64)).data.min() < -1.0

    def test_rejects_one_channel(self):
        d = build_discriminator(DiscriminatorConfig(widths=(4, 8, 8, 8)))
        with pytest.raises(ValueError, match="2 channels"):
            d(rand(1, 1, 64, 64))

    def test_bad_config(self):
        with pytest.raises(ValueError):
            DiscriminatorConfig(widths=(64, 128, 256))
        with pytest.raises(ValueError):
            DiscriminatorConfig(in_channels=1)


class TestSharpnessNet:
    def test_shape_and_range(self):
        s = build_sharpness_net(sharpness_net_config(4, 1)).eval()
        y = s(Tensor(np.random.default_rng(0).normal(0, 10, (2, 1, 32, 32)).astype(np.float32))).data
        assert y.shape == (2, 1, 32, 32)
        assert np.all(np.isfinite(y)) and y.min() >= 0 and y.max() <= 1

    def test_requires_sigmoid(self):
        with pytest.raises(ValueError, match="sigmoid"):
            build_sharpness_net(GeneratorConfig(base_width=4, n_residual=1))

    def test_default_desk_config(self):
        cfg = sharpness_net_config()
        assert (cfg.base_width, cfg.n_residual, cfg.output) == (16, 3, "sigmoid")


class TestDenoise:
    def test_pass_through_sanity_net(self):
        g = pass_through_generator()
        norm = HuNormalization()
        mid = 0.5 * (HU_RANGE[0] + HU_RANGE[1])
        hu = mid + np.random.default_rng(0).uniform(-400, 400, (32, 32))
        out = generator_denoise(g, Image2D(hu, 0.7), norm)
        span = HU_RANGE[1] - HU_RANGE[0]
        assert np.abs(out.data - hu).max() < 0.01 * span
        assert out.pixel_spacing == pytest.approx(0.7)

    def test_deterministic(self):
        g = build_generator(DESK, seed=5).eval()
        img = Image2D(np.random.default_rng(1).normal(40, 30, (32, 32)))
        assert generator_denoise(g, img) == generator_denoise(g, img)

    def test_large_input(self):
        g = build_generator(GeneratorConfig(base_width=4, n_residual=1)).eval()
        out = generator_denoise(g, Image2D(np.zeros((512, 512))))
        assert out.shape == (512, 512)

    def test_needs_eval_mode(self):
        with pytest.raises(RuntimeError, match="eval"):
            generator_denoise(build_generator(DESK), Image2D(np.zeros((16, 16))))

    def test_non_finite_aborts(self):
        g = build_generator(DESK).eval()
        g.out.bias.data[...] = np.nan
        with pytest.raises(nn.NonFiniteError):
            generator_denoise(g, Image2D(np.zeros((16, 16))))


class TestNormalization:
    def test_range_maps_to_unit(self):
        norm = HuNormalization()
        np.testing.assert_allclose(norm.forward(np.array(HU_RANGE)), [-1.0, 1.0])

    def test_inverse(self):
        norm = HuNormalization()
        hu = np.linspace(-1024, 3071, 17)
        np.testing.assert_allclose(norm.inverse(norm.forward(hu)), hu, atol=1e-9)

    def test_bad_range(self):
        with pytest.raises(ValueError):
            HuNormalization(10.0, 10.0)

    def test_to_batch(self):
        t = to_batch([np.zeros((4, 4)), np.ones((4, 4))])
        assert t.shape == (2, 1, 4, 4) and t.data.dtype == np.float32

    def test_config_dict(self):
        assert config_dict(DESK)["base_width"] == 8
