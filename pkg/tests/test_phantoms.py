"""Phantom generation contracts and the bone-shell modality signature."""

import numpy as np
import pytest

from mrxray.errors import ConfigError
from mrxray.phantoms import BONE, PhantomSpec, TissueClass, generate_phantom
from mrxray.projector import ProjectionGeometry, project_pair


def erode(mask, iterations):
    out = mask.copy()
    for _ in range(iterations):
        out = (
            out
            & np.roll(out, 1, axis=0)
            & np.roll(out, -1, axis=0)
            & np.roll(out, 1, axis=1)
            & np.roll(out, -1, axis=1)
        )
    return out


class TestGeneration:
    def test_same_seed_is_bit_identical(self):
        a = generate_phantom(PhantomSpec(seed=42))
        b = generate_phantom(PhantomSpec(seed=42))
        assert np.array_equal(a.mr, b.mr)
        assert np.array_equal(a.mu, b.mu)

    def test_different_seeds_differ(self):
        a = generate_phantom(PhantomSpec(seed=1))
        b = generate_phantom(PhantomSpec(seed=2))
        assert not np.array_equal(a.mu, b.mu)

    @pytest.mark.parametrize("seed", [0, 3, 11])
    def test_shell_voxels_are_xray_only(self, seed):
        vol = generate_phantom(PhantomSpec(seed=seed, skull_shell=True))
        mr_max = float(vol.mr.max())
        shell = (vol.mu > 0.9 * BONE.mu) & (vol.mr < 0.05 * mr_max)
        assert shell.any()

    def test_zero_ellipsoids_without_shell_is_empty(self):
        spec = PhantomSpec(ellipsoid_count=(0, 0), skull_shell=False, seed=5)
        vol = generate_phantom(spec)
        assert not vol.mr.any() and not vol.mu.any()

    def test_structures_stay_off_the_boundary(self):
        vol = generate_phantom(PhantomSpec(seed=9))
        for arr in (vol.mr, vol.mu):
            assert not arr[0].any() and not arr[-1].any()
            assert not arr[:, 0].any() and not arr[:, -1].any()
            assert not arr[:, :, 0].any() and not arr[:, :, -1].any()

    def test_centered_on_isocenter(self):
        vol = generate_phantom(PhantomSpec(seed=0))
        lo, hi = vol.world_bounds()
        np.testing.assert_allclose(lo + hi, 0.0, atol=1e-12)

    def test_degenerate_count_range_rejected(self):
        with pytest.raises(ConfigError):
            generate_phantom(PhantomSpec(ellipsoid_count=(5, 2)))
        with pytest.raises(ConfigError):
            generate_phantom(PhantomSpec(ellipsoid_count=(-1, 2)))

    def test_negative_tissue_values_rejected(self):
        bad = (TissueClass("anti", mr=-0.1, mu=0.02),)
        with pytest.raises(ConfigError):
            generate_phantom(PhantomSpec(tissues=bad))

    def test_empty_tissue_list_rejected(self):
        with pytest.raises(ConfigError):
            generate_phantom(PhantomSpec(tissues=()))

    def test_coverage_blending_is_bounded(self):
        vol = generate_phantom(PhantomSpec(seed=8))
        assert vol.mr.max() <= 1.0 + 1e-6
        assert vol.mu.max() <= BONE.mu + 1e-6


class TestShellSignature:
    def test_xray_rim_edges_dominate_mr(self):
        vol = generate_phantom(PhantomSpec(seed=4, skull_shell=True))
        geom = ProjectionGeometry(
            mode="parallel", nu=72, nv=72, du=1.0, dv=1.0, angle=0.0
        )
        mr, xray = project_pair(vol, geom)
        mr_n = mr / mr.max()
        xr_n = xray / xray.max()
        support = xr_n > 0.02
        rim = support & ~erode(support, 3)  # silhouette band, shell rays live here
        assert rim.any()

        def band_energy(img):
            gy, gx = np.gradient(img)
            return float(((gx**2 + gy**2)[rim]).mean())

        assert band_energy(xr_n) > 5.0 * band_energy(mr_n)
