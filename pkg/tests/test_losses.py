"""Loss semantics: Sobel maps, edge pyramid, perceptual and pixel losses."""

import numpy as np
import pytest

from mrxray.errors import ConfigError, DimensionError
from mrxray.features import FeatureExtractor
from mrxray.grad import Tape, Tensor, backward, gradcheck
from mrxray.losses import (
    LossConfig,
    LossTargets,
    _sobel_magnitude,
    edge_pyramid,
    label_targets,
    perceptual_loss,
    perceptual_loss_against,
    pixel_loss,
    sobel_edge_map,
)


@pytest.fixture(scope="module")
def fe():
    return FeatureExtractor.default()


def batch(arr, dtype=np.float32):
    return np.asarray(arr, dtype=dtype)[None, None]


def step_image(h=16, w=16, lo=0.0, hi=1.0, col=None):
    col = w // 2 if col is None else col
    img = np.full((h, w), lo)
    img[:, col:] = hi
    return img


class TestSobel:
    def test_constant_image_is_zero(self):
        m = sobel_edge_map(Tensor(batch(np.full((8, 8), 3.25))))
        assert not m.data.any()
        assert m.requires_grad is False

    def test_step_edge_two_columns(self):
        img = batch(step_image(8, 8))
        raw = _sobel_magnitude(img)
        cols = raw[0, 0, :, :]
        # correlation of the step with the x kernel: 4 on both columns
        # adjacent to the edge, zero everywhere else
        assert np.all(cols[:, 3] == 4.0) and np.all(cols[:, 4] == 4.0)
        mask = np.ones(8, dtype=bool)
        mask[[3, 4]] = False
        assert not cols[:, mask].any()
        normed = sobel_edge_map(Tensor(img)).data[0, 0]
        assert np.all(normed[:, 3] == 1.0) and np.all(normed[:, 4] == 1.0)

    def test_diagonal_ramp_has_constant_interior(self):
        i, j = np.meshgrid(np.arange(12), np.arange(12), indexing="ij")
        raw = _sobel_magnitude(batch(i + j, dtype=np.float64))
        interior = raw[0, 0, 1:-1, 1:-1]
        np.testing.assert_allclose(interior, 8.0 * np.sqrt(2.0), rtol=1e-12)

    def test_normalization_is_per_image(self):
        a = step_image(8, 8, hi=1.0)
        b = step_image(8, 8, hi=10.0)
        stacked = np.stack([a, b])[:, None]
        m = sobel_edge_map(Tensor(stacked.astype(np.float32))).data
        assert m[0].max() == 1.0 and m[1].max() == 1.0

    def test_multichannel_rejected(self):
        with pytest.raises(DimensionError):
            sobel_edge_map(Tensor(np.zeros((1, 2, 8, 8), dtype=np.float32)))


class TestEdgePyramid:
    def test_zero_map_floors_at_eps(self, fe):
        cfg = LossConfig(eps=0.1)
        pyr = edge_pyramid(np.zeros((1, 1, 16, 16)), fe, cfg)
        for s in cfg.layers:
            assert np.all(pyr.maps[s] == 0.1)

    def test_ones_map_saturates_at_one(self, fe):
        cfg = LossConfig(eps=0.1)
        pyr = edge_pyramid(np.ones((1, 1, 16, 16)), fe, cfg)
        for s in cfg.layers:
            np.testing.assert_allclose(pyr.maps[s], 1.0, rtol=1e-12)

    def test_single_pixel_factor_two_average(self, fe):
        edge = np.zeros((1, 1, 8, 8))
        edge[0, 0, 2, 5] = 1.0
        cfg = LossConfig(layers=(1,), eps=0.1)
        pyr = edge_pyramid(edge, fe, cfg)
        cell = pyr.maps[1][0, 0, 1, 2]
        np.testing.assert_allclose(cell, 0.1 + 0.9 * 0.25, rtol=1e-12)
        assert pyr.maps[1].shape == (1, 1, 4, 4)

    def test_bounds_hold_for_arbitrary_maps(self, fe):
        rng = np.random.default_rng(3)
        edge = rng.uniform(0, 1, size=(2, 1, 16, 16))
        cfg = LossConfig(eps=0.25)
        pyr = edge_pyramid(edge, fe, cfg)
        for s in cfg.layers:
            assert pyr.maps[s].min() >= 0.25
            assert pyr.maps[s].max() <= 1.0

    def test_indivisible_dims_rejected(self, fe):
        with pytest.raises(DimensionError):
            edge_pyramid(np.zeros((1, 1, 6, 6)), fe, LossConfig(layers=(2,)))

    def test_unknown_layer_rejected(self, fe):
        with pytest.raises(ConfigError):
            edge_pyramid(np.zeros((1, 1, 8, 8)), fe, LossConfig(layers=(7,)))


class TestLossConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            LossConfig(layers=()).validate()
        with pytest.raises(ConfigError):
            LossConfig(eps=0.0).validate()
        with pytest.raises(ConfigError):
            LossConfig(eps=1.0).validate()
        with pytest.raises(ConfigError):
            LossConfig(norm="L3").validate()
        with pytest.raises(ConfigError):
            LossConfig(layer_weights=(1.0,)).validate()
        with pytest.raises(ConfigError):
            LossConfig(layer_weights=(1.0, 1.0, -1.0, 1.0)).validate()
        LossConfig().validate()


class TestPerceptualLoss:
    def rand_pair(self, seed, h=16, w=16):
        rng = np.random.default_rng(seed)
        label = rng.uniform(-1, 1, size=(1, 1, h, w)).astype(np.float32)
        gen = rng.uniform(-1, 1, size=(1, 1, h, w)).astype(np.float32)
        return label, Tensor(gen)

    def test_identical_inputs_zero_for_all_variants(self, fe):
        label, _ = self.rand_pair(4)
        same = Tensor(label.copy())
        variants = [
            LossConfig(),
            LossConfig(edge_weighting=False),
            LossConfig(norm="weighted_L2"),
            LossConfig(signed_sum=True),
            LossConfig(layer_weights=(1.0, 0.5, 0.25, 0.125)),
        ]
        for cfg in variants:
            assert perceptual_loss(label, same, fe, cfg).item() == 0.0

    def test_non_negative_under_both_norms(self, fe):
        for seed in range(5):
            label, gen = self.rand_pair(10 + seed)
            for norm in ("weighted_L1", "weighted_L2"):
                cfg = LossConfig(norm=norm)
                assert perceptual_loss(label, gen, fe, cfg).item() >= 0.0

    def test_edge_off_equals_unweighted_reference(self, fe):
        label, gen = self.rand_pair(6)
        cfg = LossConfig(edge_weighting=False)
        loss = perceptual_loss(label, gen, fe, cfg).item()
        lf = fe.extract(Tensor(label))
        gf = fe.extract(Tensor(gen.data.copy()))
        expected = 0.0
        for s in cfg.layers:
            expected += np.abs(lf[s].data - gf[s].data).mean()
        assert loss == pytest.approx(expected, rel=0, abs=0)

    def test_monotone_in_edge_map(self, fe):
        label, gen = self.rand_pair(7)
        cfg = LossConfig()
        targets = label_targets(label, fe, cfg)
        low = perceptual_loss_against(targets, gen, fe, cfg).item()
        boosted = LossTargets(
            feats=targets.feats,
            pyramid=type(targets.pyramid)(
                maps={s: np.minimum(m * 1.5, 1.0) for s, m in targets.pyramid.maps.items()},
                eps=targets.pyramid.eps,
            ),
            shape=targets.shape,
        )
        gen2 = Tensor(gen.data.copy())
        high = perceptual_loss_against(boosted, gen2, fe, cfg).item()
        assert high >= low

    def test_floor_keeps_homogeneous_loss_positive(self, fe):
        label = np.full((1, 1, 16, 16), 0.5, dtype=np.float32)
        gen = Tensor(label + 0.2 * np.ones_like(label))
        loss = perceptual_loss(label, gen, fe, LossConfig()).item()
        assert loss > 0.0

    def test_shape_mismatch_rejected(self, fe):
        label, _ = self.rand_pair(8)
        gen = Tensor(np.zeros((1, 1, 8, 8), dtype=np.float32))
        with pytest.raises(DimensionError):
            perceptual_loss(label, gen, fe, LossConfig())

    def test_empty_layer_set_rejected(self, fe):
        label, gen = self.rand_pair(9)
        with pytest.raises(ConfigError):
            perceptual_loss(label, gen, fe, LossConfig(layers=()))

    def test_differentiable_in_g_only(self, fe):
        label, gen = self.rand_pair(12)
        gen.requires_grad = True
        cfg = LossConfig()
        with Tape() as tape:
            loss = perceptual_loss(label, gen, fe, cfg)
        backward(tape, loss)
        assert gen.grad is not None
        assert np.any(gen.grad != 0.0)
        for w, b in fe.stages:
            assert w.grad is None and b.grad is None

    @pytest.mark.parametrize("norm", ["weighted_L1", "weighted_L2"])
    def test_gradient_matches_finite_differences(self, fe, norm):
        fe64 = fe.as_dtype(np.float64)
        rng = np.random.default_rng(13)
        label = rng.uniform(-1, 1, size=(1, 1, 16, 16))
        gen = Tensor(rng.uniform(-1, 1, size=(1, 1, 16, 16)), requires_grad=True)
        cfg = LossConfig(norm=norm)
        targets = label_targets(label, fe64, cfg)

        def fn(g):
            return perceptual_loss_against(targets, g, fe64, cfg)

        result = gradcheck(fn, [gen], step=1e-5, coords_per_input=32, rng=rng)
        assert result.max_rel_error < 1e-4

    def test_edge_perturbations_cost_more_than_homogeneous(self, fe):
        """Same-energy noise on edge pixels vs homogeneous pixels."""
        label = batch(step_image(32, 32, lo=0.2, hi=0.8))
        edge_map = sobel_edge_map(Tensor(label)).data[0, 0]
        edge_px = np.argwhere(edge_map > 0.5)
        flat_px = np.argwhere(edge_map < 0.05)
        cfg = LossConfig(eps=0.1)
        targets = label_targets(label, fe, cfg)
        wins = 0
        for seed in range(10):
            rng = np.random.default_rng(100 + seed)
            k = 24
            amp = 0.3

            def perturbed(pixels):
                chosen = pixels[rng.choice(len(pixels), size=k, replace=False)]
                g = label.copy()
                signs = rng.choice([-1.0, 1.0], size=k)
                g[0, 0, chosen[:, 0], chosen[:, 1]] += amp * signs
                return Tensor(g.astype(np.float32))

            on_edges = perceptual_loss_against(targets, perturbed(edge_px), fe, cfg)
            on_flat = perceptual_loss_against(targets, perturbed(flat_px), fe, cfg)
            wins += on_edges.item() > on_flat.item()
        assert wins == 10


class TestPixelLoss:
    def test_trivial_values(self):
        ones = np.ones((1, 1, 4, 4), dtype=np.float32)
        zeros = Tensor(np.zeros_like(ones))
        assert pixel_loss(ones, Tensor(ones.copy())).item() == 0.0
        assert pixel_loss(ones, zeros, norm="L1").item() == 1.0
        assert pixel_loss(ones, Tensor(np.zeros_like(ones)), norm="L2").item() == 1.0

    def test_l2_gradient_matches_hand_formula(self):
        rng = np.random.default_rng(14)
        label = rng.uniform(-1, 1, size=(1, 1, 6, 6)).astype(np.float32)
        gen = Tensor(rng.uniform(-1, 1, size=(1, 1, 6, 6)).astype(np.float32))
        gen.requires_grad = True
        with Tape() as tape:
            loss = pixel_loss(label, gen, norm="L2")
        backward(tape, loss)
        expected = 2.0 * (gen.data - label) / label.size
        np.testing.assert_allclose(gen.grad, expected, rtol=1e-6)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            pixel_loss(
                np.zeros((1, 1, 4, 4), dtype=np.float32),
                Tensor(np.zeros((1, 1, 5, 5), dtype=np.float32)),
            )

    def test_unknown_norm_rejected(self):
        arr = np.zeros((1, 1, 4, 4), dtype=np.float32)
        with pytest.raises(ConfigError):
            pixel_loss(arr, Tensor(arr.copy()), norm="huber")
