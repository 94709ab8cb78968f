"""Checks for the image quality metrics."""

import numpy as np
import pytest

from dwisparse import Mask3D, Volume4D, psnr, quality_report, ssim


def _vol(data):
    return Volume4D(np.asarray(data, dtype=np.float64))


def test_psnr_hand_value():
    # peak 10, squared error 1 everywhere: 10 log10(100 / 1) = 20 dB
    rng = np.random.default_rng(0)
    ref = rng.uniform(2.0, 9.0, size=(5, 5, 5, 3))
    ref[2, 2, 2, 1] = 10.0
    test = ref - 1.0
    overall, per_vol, flat = psnr(_vol(ref), _vol(test))
    assert not flat
    assert overall == pytest.approx(20.0, abs=1e-12)
    assert per_vol.shape == (3,)
    assert np.allclose(per_vol, 20.0, atol=1e-12)


def test_psnr_per_volume_mse():
    # volume 0 error 1, volume 1 error 2: per-volume values differ by
    # 10 log10(4) while the overall value averages the MSEs first
    ref = np.full((4, 4, 4, 2), 5.0)
    ref[0, 0, 0, 0] = 10.0
    test = ref.copy()
    test[..., 0] -= 1.0
    test[..., 1] -= 2.0
    overall, per_vol, _ = psnr(_vol(ref), _vol(test))
    assert per_vol[0] == pytest.approx(10 * np.log10(100.0), abs=1e-12)
    assert per_vol[1] == pytest.approx(10 * np.log10(100.0 / 4.0), abs=1e-12)
    assert overall == pytest.approx(10 * np.log10(100.0 / 2.5), abs=1e-12)


def test_psnr_identical_inputs_flagged_infinite():
    ref = np.full((3, 3, 3, 2), 4.0)
    overall, per_vol, flat = psnr(_vol(ref), _vol(ref.copy()))
    assert flat
    assert overall == float("inf")
    assert np.all(np.isinf(per_vol))


def test_psnr_mask_restricts_peak_and_error():
    ref = np.full((4, 4, 4, 1), 5.0)
    ref[0, 0, 0, 0] = 100.0  # outside the mask, must not set the peak
    test = ref.copy()
    test[1:, 1:, 1:, 0] -= 1.0
    region = np.zeros((4, 4, 4), dtype=bool)
    region[1:, 1:, 1:] = True
    overall, _, _ = psnr(_vol(ref), _vol(test), Mask3D(region))
    assert overall == pytest.approx(10 * np.log10(25.0), abs=1e-12)


def test_psnr_shape_mismatch_rejected():
    a = _vol(np.ones((3, 3, 3, 2)))
    b = _vol(np.ones((3, 3, 4, 2)))
    with pytest.raises(ValueError):
        psnr(a, b)


def test_psnr_empty_mask_rejected():
    a = _vol(np.ones((3, 3, 3, 1)))
    with pytest.raises(ValueError):
        psnr(a, a, Mask3D(np.zeros((3, 3, 3), dtype=bool)))


def test_psnr_nonpositive_peak_rejected():
    a = _vol(np.zeros((3, 3, 3, 1)))
    with pytest.raises(ValueError):
        psnr(a, a)


def test_ssim_identical_images_are_unity():
    rng = np.random.default_rng(1)
    ref = rng.uniform(0.0, 1.0, size=(12, 12, 4, 2))
    vals = ssim(_vol(ref), _vol(ref.copy()))
    assert vals.shape == (2,)
    assert np.allclose(vals, 1.0, atol=1e-12)


def test_ssim_decreases_with_noise_level():
    rng = np.random.default_rng(2)
    ref = rng.uniform(0.0, 1.0, size=(16, 16, 6, 1))
    small = ref + rng.normal(0, 0.02, size=ref.shape)
    large = ref + rng.normal(0, 0.3, size=ref.shape)
    s_small = ssim(_vol(ref), _vol(small))[0]
    s_large = ssim(_vol(ref), _vol(large))[0]
    assert s_small > s_large
    assert s_small > 0.9
    assert s_large < 0.7


def test_ssim_constant_offset_below_unity():
    # a uniform brightness shift lowers the luminance term everywhere
    rng = np.random.default_rng(3)
    ref = rng.uniform(1.0, 2.0, size=(12, 12, 4, 1))
    test = ref + 0.5
    val = ssim(_vol(ref), _vol(test))[0]
    assert val < 0.99


def test_ssim_zero_dynamic_range_rejected():
    ref = _vol(np.full((8, 8, 4, 1), 3.0))
    test = _vol(np.zeros((8, 8, 4, 1)))
    with pytest.raises(ValueError):
        ssim(ref, test)


def test_ssim_mask_selects_region():
    # corrupt only voxels outside the mask: in-mask score stays 1
    rng = np.random.default_rng(4)
    ref = rng.uniform(0.0, 1.0, size=(16, 16, 4, 1))
    test = ref.copy()
    test[:4, :, :, :] += 10.0
    region = np.zeros((16, 16, 4), dtype=bool)
    region[10:, :, :] = True
    vals = ssim(_vol(ref), _vol(test), Mask3D(region))
    # the 11-tap window never reaches the corrupted rows from x >= 10
    assert vals[0] == pytest.approx(1.0, abs=1e-9)


def test_quality_report_bundles_both_metrics():
    rng = np.random.default_rng(5)
    ref = rng.uniform(0.0, 2.0, size=(10, 10, 5, 2))
    test = ref + rng.normal(0, 0.05, size=ref.shape)
    rep = quality_report(_vol(ref), _vol(test))
    overall, per_vol, flat = psnr(_vol(ref), _vol(test))
    assert rep.psnr_mean == pytest.approx(overall)
    assert np.allclose(rep.psnr_db, per_vol)
    assert np.allclose(rep.ssim, ssim(_vol(ref), _vol(test)))
    assert rep.ssim_mean == pytest.approx(float(rep.ssim.mean()))
    assert rep.n_mask_voxels == 10 * 10 * 5
    assert rep.psnr_infinite is flat is False


def test_quality_report_flags_identical_inputs():
    rng = np.random.default_rng(6)
    ref = rng.uniform(0.0, 1.0, size=(8, 8, 4, 1))
    rep = quality_report(_vol(ref), _vol(ref.copy()))
    assert rep.psnr_infinite
    assert rep.psnr_mean == float("inf")
    assert rep.ssim_mean == pytest.approx(1.0, abs=1e-12)
