"""Generator architecture contracts: presets, shapes, init, gradients."""

import numpy as np
import pytest

from mrxray import grad, metrics
from mrxray.errors import ConfigError, DimensionError, LoadError
from mrxray.generator import (
    Generator,
    GeneratorConfig,
    build,
    from_checkpoint,
    param_count,
    preset_baseline,
    preset_proposed,
)
from mrxray.grad import Tensor, directional_gradcheck, gradcheck


def small_config(**overrides):
    base = dict(base_width=6, levels=2, res_blocks_per_level=(1, 1))
    base.update(overrides)
    return GeneratorConfig(**base)


class TestPresets:
    def test_proposed_distributes_blocks(self):
        cfg = preset_proposed()
        assert cfg.levels == 3
        assert cfg.res_blocks_per_level == (3, 3, 3)
        assert sum(cfg.res_blocks_per_level) == 9
        assert cfg.upsample_mode == "bilinear_conv"
        assert cfg.base_width == 32

    def test_baseline_gathers_blocks_at_lowest_level(self):
        cfg = preset_baseline()
        assert cfg.levels == 3
        assert cfg.res_blocks_per_level == (0, 0, 9)
        assert cfg.upsample_mode == "transposed_conv"

    def test_preset_param_counts_within_2x(self):
        a = param_count(preset_proposed())
        b = param_count(preset_baseline())
        assert max(a, b) / min(a, b) < 2.0


class TestConfigValidation:
    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(levels=0, res_blocks_per_level=()),
            dict(res_blocks_per_level=(1, 1)),  # wrong length for 3 levels
            dict(res_blocks_per_level=(0, 0, 0)),
            dict(res_blocks_per_level=(1, 1, -1)),
            dict(upsample_mode="nearest"),
            dict(inner_kernel=4),
            dict(outer_kernel=0),
            dict(base_width=0),
        ],
    )
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            GeneratorConfig(**kwargs).validate()

    def test_round_trip_through_dict(self):
        cfg = preset_baseline()
        again = GeneratorConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_from_dict_rejects_missing_keys(self):
        records = preset_proposed().to_dict()
        del records["gen.levels"]
        with pytest.raises(ConfigError):
            GeneratorConfig.from_dict(records)


class TestBuildAndForward:
    def test_same_seed_builds_bit_identical_weights(self):
        a = build(preset_proposed(), seed=7)
        b = build(preset_proposed(), seed=7)
        for name, tensor in a.parameters().items():
            assert np.array_equal(tensor.data, b.parameters()[name].data), name

    def test_different_seeds_differ(self):
        a = build(small_config(), seed=1)
        b = build(small_config(), seed=2)
        assert not np.array_equal(a.stem_conv.w.data, b.stem_conv.w.data)

    @pytest.mark.parametrize("preset", [preset_proposed, preset_baseline])
    def test_forward_preserves_shape_and_tanh_range(self, preset):
        gen = build(preset(), seed=0)
        x = Tensor(
            np.random.default_rng(3).uniform(-1, 1, (1, 1, 64, 64)).astype(np.float32)
        )
        y = gen.forward(x)
        assert y.shape == (1, 1, 64, 64)
        assert float(y.data.min()) > -1.0 and float(y.data.max()) < 1.0

    def test_forward_handles_batches_and_rectangles(self):
        gen = build(small_config(), seed=4)
        x = Tensor(np.zeros((2, 1, 16, 24), dtype=np.float32))
        assert gen.forward(x).shape == (2, 1, 16, 24)

    def test_indivisible_dims_rejected(self):
        gen = build(preset_proposed(), seed=0)
        x = Tensor(np.zeros((1, 1, 62, 64), dtype=np.float32))
        with pytest.raises(DimensionError):
            gen.forward(x)

    def test_wrong_channel_count_rejected(self):
        gen = build(small_config(), seed=0)
        with pytest.raises(DimensionError):
            gen.forward(Tensor(np.zeros((1, 3, 16, 16), dtype=np.float32)))

    def test_forward_is_deterministic(self):
        gen = build(small_config(), seed=11)
        x = Tensor(
            np.random.default_rng(0).uniform(-1, 1, (1, 1, 16, 16)).astype(np.float32)
        )
        assert np.array_equal(gen.forward(x).data, gen.forward(x).data)


class TestResidualIdentity:
    def test_zero_init_makes_blocks_identity(self):
        cfg = small_config()
        gen = build(cfg, seed=5, residual_zero_init=True)
        x = Tensor(
            np.random.default_rng(1).standard_normal((1, 6, 12, 12)).astype(np.float32)
        )
        block = gen.enc_blocks[0][0]
        y = block.forward(x)
        np.testing.assert_array_equal(y.data, x.data)

    def test_default_blocks_are_not_identity(self):
        gen = build(small_config(), seed=5)
        x = Tensor(
            np.random.default_rng(1).standard_normal((1, 6, 12, 12)).astype(np.float32)
        )
        y = gen.enc_blocks[0][0].forward(x)
        assert not np.array_equal(y.data, x.data)


class TestParamCount:
    def test_hand_counted_minimal_config(self):
        # stem 3x3 1->1 (9+1) + norm (2) + one block: two 3x3 convs
        # (9+1 each) with two norms (2 each) + head 3x3 1->1 (9+1)
        cfg = GeneratorConfig(
            base_width=1,
            levels=1,
            res_blocks_per_level=(1,),
            outer_kernel=3,
            inner_kernel=3,
        )
        by_hand = (9 + 1 + 2) + (2 * (9 + 1) + 2 * 2) + (9 + 1)
        assert param_count(cfg) == by_hand
        assert build(cfg, seed=0).param_count() == by_hand

    @pytest.mark.parametrize("preset", [preset_proposed, preset_baseline])
    def test_closed_form_matches_built_model(self, preset):
        cfg = preset()
        assert param_count(cfg) == build(cfg, seed=1).param_count()

    def test_doubling_width_roughly_quadruples_count(self):
        narrow = param_count(small_config(base_width=8))
        wide = param_count(small_config(base_width=16))
        # conv weights quadruple; bias, norm, stem and head terms lag
        assert 3.5 < wide / narrow < 4.0


class TestGradients:
    def test_two_level_toy_whole_model_per_coordinate(self):
        gen = build(small_config(), seed=5, dtype=np.float64)
        rng = np.random.default_rng(1005)
        target = Tensor(rng.uniform(-0.8, 0.8, (1, 1, 16, 16)), requires_grad=False)

        def fn(x, *weights):
            d = grad.sub(gen.forward(x), target)
            return grad.tmean(grad.hadamard(d, d))

        inputs = [Tensor(rng.uniform(-0.8, 0.8, (1, 1, 16, 16)), requires_grad=True)]
        inputs += list(gen.parameters().values())
        result = gradcheck(
            fn, inputs, step=1e-6, coords_per_input=4, rng=np.random.default_rng(7)
        )
        assert result.max_rel_error < 1e-3

    @pytest.mark.parametrize("preset", [preset_proposed, preset_baseline])
    def test_full_preset_whole_model_directional(self, preset):
        gen = build(preset(), seed=11, dtype=np.float64)
        rng = np.random.default_rng(1011)
        target = Tensor(rng.uniform(-0.8, 0.8, (1, 1, 16, 16)), requires_grad=False)

        def fn(x, *weights):
            d = grad.sub(gen.forward(x), target)
            return grad.tmean(grad.hadamard(d, d))

        inputs = [Tensor(rng.uniform(-0.8, 0.8, (1, 1, 16, 16)), requires_grad=True)]
        inputs += list(gen.parameters().values())
        result = directional_gradcheck(
            fn, inputs, n_directions=6, rng=np.random.default_rng(61)
        )
        assert result.max_rel_error < 1e-3


class TestCheckerboardProbe:
    def test_bilinear_has_lower_high_band_energy_every_seed(self):
        bilinear_cfg = preset_proposed()
        transposed_cfg = GeneratorConfig(
            res_blocks_per_level=(3, 3, 3), upsample_mode="transposed_conv"
        )
        x = Tensor(np.full((1, 1, 32, 32), 0.4, dtype=np.float32))
        for seed in range(10):
            smooth = build(bilinear_cfg, seed=seed).forward(x)
            scattered = build(transposed_cfg, seed=seed).forward(x)
            hb_smooth = metrics.high_band_fraction(smooth.data[0, 0])
            hb_scattered = metrics.high_band_fraction(scattered.data[0, 0])
            assert hb_smooth < hb_scattered, f"seed {seed}"


class TestStatePlumbing:
    def test_state_round_trips_through_load(self):
        src = build(small_config(), seed=3)
        dst = build(small_config(), seed=4)
        dst.load_state(src.state())
        x = Tensor(
            np.random.default_rng(2).uniform(-1, 1, (1, 1, 16, 16)).astype(np.float32)
        )
        assert np.array_equal(src.forward(x).data, dst.forward(x).data)

    def test_load_rejects_wrong_names(self):
        gen = build(small_config(), seed=3)
        state = gen.state()
        state["bogus.w"] = state.pop("stem.conv.w")
        with pytest.raises(LoadError):
            gen.load_state(state)

    def test_load_rejects_wrong_shapes(self):
        gen = build(small_config(), seed=3)
        state = gen.state()
        state["stem.conv.b"] = np.zeros(99, dtype=np.float32)
        with pytest.raises(LoadError):
            gen.load_state(state)

    def test_from_checkpoint_rebuilds_forward(self):
        cfg = small_config()
        gen = build(cfg, seed=9)
        tensors = {f"w/{k}": v for k, v in gen.state().items()}
        again = from_checkpoint(cfg.to_dict(), tensors)
        x = Tensor(
            np.random.default_rng(5).uniform(-1, 1, (1, 1, 16, 16)).astype(np.float32)
        )
        assert np.array_equal(gen.forward(x).data, again.forward(x).data)
