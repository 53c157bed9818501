import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cardioalign.augment import (EcgAugmentConfig, ImageAugmentConfig, augment_ecg_array, augment_image_array,
                                 ecg_augment, empirical_pool, ft_surrogate, image_augment, round_half_up,
                                 tabular_corrupt)
from cardioalign.cohort import CmrPhaseStack, EcgRecord

OFF = EcgAugmentConfig(crop_ratio=1.0, ft_phase_noise=0.0, gaussian_sigma=0.0, rescale_factor=0.0)
IMG_OFF = ImageAugmentConfig(hflip_prob=0.0, max_rotation_deg=0.0, brightness=0.0, contrast=0.0,
                             saturation=0.0, crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0))


def rng(seed=0):
    return np.random.default_rng(seed)


class TestFtSurrogate:
    @given(arrays(np.float64, st.integers(2, 257), elements=st.floats(-10, 10)), st.floats(0, 1),
           st.integers(0, 2**32 - 1))
    @settings(max_examples=80, deadline=None)
    def test_amplitude_spectrum_preserved(self, x, noise, seed):
        out = ft_surrogate(x, noise, rng(seed))
        assert out.shape == x.shape and np.isrealobj(out)
        a_in = np.abs(np.fft.rfft(x))
        a_out = np.abs(np.fft.rfft(out))
        assert np.all(np.abs(a_out - a_in) <= 1e-6 * np.maximum(a_in, 1.0))

    def test_zero_noise_identity(self):
        x = rng().normal(size=501)
        np.testing.assert_allclose(ft_surrogate(x, 0.0, rng(1)), x, atol=1e-9)

    def test_sine_stays_unit_amplitude(self):
        n = 1000
        x = np.sin(2 * np.pi * 7 * np.arange(n) / n)
        out = ft_surrogate(x, 0.1, rng(2))
        spec = np.abs(np.fft.rfft(out)) * 2 / n
        assert int(np.argmax(spec)) == 7
        assert spec[7] == pytest.approx(1.0, abs=1e-9)
        assert np.abs(out).max() == pytest.approx(1.0, abs=1e-6)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            ft_surrogate(np.array([0.0, np.inf]), 0.1, rng())


class TestEcgAugment:
    def test_identity_configuration(self):
        x = rng().normal(size=(12, 500))
        np.testing.assert_array_equal(augment_ecg_array(x, OFF, rng(3)), x)

    def test_noise_std(self):
        x = rng(0).normal(size=(1, 5000))
        x = (x - x.mean()) / x.std()
        cfg = EcgAugmentConfig(crop_ratio=1.0, ft_phase_noise=0.0, gaussian_sigma=0.25, rescale_factor=0.0)
        added = augment_ecg_array(x, cfg, rng(5)) - x
        assert 0.23 <= added.std() <= 0.27

    def test_rescale_range(self):
        cfg = EcgAugmentConfig(crop_ratio=1.0, ft_phase_noise=0.0, gaussian_sigma=0.0, rescale_factor=0.5)
        x = np.ones((2, 10))
        factors = [augment_ecg_array(x, cfg, rng(s))[0, 0] for s in range(300)]
        assert 0.75 <= min(factors) and max(factors) <= 1.25
        assert min(factors) < 0.8 and max(factors) > 1.2

    def test_crop_resize_keeps_shape_and_takes_contiguous_window(self):
        x = np.tile(np.arange(100, dtype=float), (3, 1))
        cfg = EcgAugmentConfig(crop_ratio=0.5, ft_phase_noise=0.0, gaussian_sigma=0.0, rescale_factor=0.0)
        out = augment_ecg_array(x, cfg, rng(9))
        assert out.shape == (3, 100)
        assert out[0, -1] - out[0, 0] == pytest.approx(round_half_up(50) - 1)
        assert np.all(np.diff(out[0]) > 0)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_deterministic_and_shape(self, seed):
        rec = EcgRecord("a", rng(seed).normal(size=(12, 500)), 125.0)
        a = ecg_augment(rec, EcgAugmentConfig(), rng(seed))
        b = ecg_augment(rec, EcgAugmentConfig(), rng(seed))
        assert a == b and a.shape == rec.shape

    def test_degenerate_input(self):
        with pytest.raises(ValueError):
            augment_ecg_array(np.zeros((2, 1)), EcgAugmentConfig(), rng())
        with pytest.raises(ValueError):
            EcgAugmentConfig(crop_ratio=0.0)


class TestImageAugment:
    def _img(self, seed=0):
        return rng(seed).uniform(0, 1, size=(3, 32, 32)).astype(np.float32)

    def test_identity_configuration(self):
        x = self._img()
        np.testing.assert_array_equal(augment_image_array(x, IMG_OFF, rng(1)), x)

    def test_flip(self):
        x = self._img()
        cfg = ImageAugmentConfig(hflip_prob=1.0, max_rotation_deg=0.0, brightness=0.0, contrast=0.0,
                                 saturation=0.0, crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0))
        np.testing.assert_array_equal(augment_image_array(x, cfg, rng(1)), x[:, :, ::-1])

    def test_same_geometry_for_all_phases(self):
        x = np.repeat(self._img()[:1], 3, axis=0)
        cfg = ImageAugmentConfig(brightness=0.0, contrast=0.0, saturation=0.0)
        for s in range(5):
            out = augment_image_array(x, cfg, rng(s))
            np.testing.assert_array_equal(out[0], out[1])
            np.testing.assert_array_equal(out[0], out[2])

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_deterministic_range_shape(self, seed):
        img = CmrPhaseStack("a", self._img(seed))
        a = image_augment(img, ImageAugmentConfig(), rng(seed))
        b = image_augment(img, ImageAugmentConfig(), rng(seed))
        assert a == b and a.phases.shape == (3, 32, 32)
        assert a.phases.min() >= 0 and a.phases.max() <= 1

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ImageAugmentConfig(hflip_prob=1.5)
        with pytest.raises(ValueError):
            ImageAugmentConfig(max_rotation_deg=200)


class TestTabularCorrupt:
    def test_rate_zero_identity(self):
        x = rng().normal(size=(4, 33))
        np.testing.assert_array_equal(tabular_corrupt(x, 0.0, empirical_pool(x), rng()), x)

    def test_rate_one_single_value_pools(self):
        x = np.zeros((3, 5))
        pool = [np.array([float(j + 1)]) for j in range(5)]
        np.testing.assert_array_equal(tabular_corrupt(x, 1.0, pool, rng()), np.tile(np.arange(1.0, 6.0), (3, 1)))

    @given(st.integers(1, 12), st.integers(1, 40), st.floats(0, 1), st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_count_and_pool_membership(self, b, f, rate, seed):
        x = np.full((b, f), -1.0)  # sentinel never present in the pools
        pools = [rng(seed + j).integers(0, 5, size=7).astype(float) for j in range(f)]
        out = tabular_corrupt(x, rate, pools, rng(seed))
        k = round_half_up(rate * f)
        for row in out:
            changed = np.flatnonzero(row != -1.0)
            assert len(changed) == k
            for j in changed:
                assert row[j] in pools[j]

    def test_f33_rate03_gives_ten(self):
        x = np.full((5, 33), np.nan)
        pools = [np.array([float(j)]) for j in range(33)]
        out = tabular_corrupt(x, 0.3, pools, rng(4))
        assert (~np.isnan(out)).sum(axis=1).tolist() == [10] * 5

    def test_deterministic_and_input_untouched(self):
        x = rng().normal(size=(6, 33))
        before = x.copy()
        a = tabular_corrupt(x, 0.3, empirical_pool(x), rng(8))
        b = tabular_corrupt(x, 0.3, empirical_pool(x), rng(8))
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(x, before)

    def test_errors(self):
        with pytest.raises(ValueError):
            tabular_corrupt(np.zeros((1, 2)), 1.5, [np.zeros(1)] * 2, rng())
        with pytest.raises(ValueError):
            tabular_corrupt(np.zeros((1, 2)), 0.3, [np.zeros(1), np.zeros(0)], rng())
