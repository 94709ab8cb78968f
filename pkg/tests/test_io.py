"""Volume and gradient file reading and writing."""

import gzip
import os
import struct

import numpy as np
import pytest

from dwisparse.io import (
    VolumeIOError,
    GradientError,
    GradientTable,
    HeaderError,
    Mask3D,
    TruncatedDataError,
    UnsupportedDatatypeError,
    Volume4D,
    read_gradients,
    read_mask,
    read_volume,
    write_mask,
    write_volume,
)


def test_volume_roundtrip_float32_identity(tmp_path):
    rng = np.random.default_rng(0)
    vol = Volume4D(
        rng.random((4, 4, 4, 3)).astype(np.float32).astype(np.float64),
        spacing=(2.0, 2.0, 2.5),
    )
    path = str(tmp_path / "v.nii")
    write_volume(vol, path)
    back = read_volume(path)
    assert back.data.shape == vol.data.shape
    assert back.spacing == vol.spacing
    assert np.max(np.abs(back.data - vol.data)) == 0.0


def test_volume_roundtrip_gzip(tmp_path):
    rng = np.random.default_rng(1)
    vol = Volume4D(rng.random((3, 5, 2, 2)))
    path = str(tmp_path / "v.nii.gz")
    write_volume(vol, path, dtype="float64")
    back = read_volume(path)
    np.testing.assert_array_equal(back.data, vol.data)


def test_minimal_file_defined_order(tmp_path):
    # values 0..7 in a 2x2x2 grid: x varies fastest in the file
    vol = Volume4D(np.arange(8, dtype=np.float64).reshape((2, 2, 2), order="F"))
    path = str(tmp_path / "m.nii")
    write_volume(vol, path, dtype="float64")
    back = read_volume(path)
    flat = back.data[..., 0].ravel(order="F")
    np.testing.assert_array_equal(flat, np.arange(8.0))


def test_scl_slope_and_inter_applied(tmp_path):
    vol = Volume4D(np.full((1, 1, 1, 1), 3.0))
    path = str(tmp_path / "s.nii")
    write_volume(vol, path, dtype="float64")
    raw = bytearray(open(path, "rb").read())
    # scl_slope at offset 112, scl_inter at 116 in the NIfTI-1 header
    raw[112:116] = struct.pack("<f", 2.0)
    raw[116:120] = struct.pack("<f", 1.0)
    open(path, "wb").write(bytes(raw))
    back = read_volume(path)
    assert back.data[0, 0, 0, 0] == pytest.approx(7.0)


def test_wrong_magic_is_header_error(tmp_path):
    vol = Volume4D(np.zeros((2, 2, 2, 1)))
    path = str(tmp_path / "bad.nii")
    write_volume(vol, path)
    raw = bytearray(open(path, "rb").read())
    raw[344:348] = b"XXXX"
    open(path, "wb").write(bytes(raw))
    with pytest.raises(HeaderError):
        read_volume(path)


def test_unsupported_datatype_reported_distinctly(tmp_path):
    vol = Volume4D(np.zeros((2, 2, 2, 1)))
    path = str(tmp_path / "dt.nii")
    write_volume(vol, path)
    raw = bytearray(open(path, "rb").read())
    raw[70:72] = struct.pack("<h", 128)  # RGB, unsupported
    open(path, "wb").write(bytes(raw))
    with pytest.raises(UnsupportedDatatypeError):
        read_volume(path)


def test_truncated_data_reported_distinctly(tmp_path):
    vol = Volume4D(np.zeros((4, 4, 4, 2)))
    path = str(tmp_path / "tr.nii")
    write_volume(vol, path)
    raw = open(path, "rb").read()
    open(path, "wb").write(raw[: len(raw) - 64])
    with pytest.raises(TruncatedDataError):
        read_volume(path)


def test_negative_intensities_clamped_on_load(tmp_path):
    vol = Volume4D(np.array([[[[-5.0, 2.0]]]]))
    path = str(tmp_path / "neg.nii")
    write_volume(vol, path, dtype="float64")
    back = read_volume(path)
    assert back.data.min() == 0.0
    assert back.data[0, 0, 0, 1] == 2.0


def test_3d_volume_reads_as_single_volume(tmp_path):
    vol = Volume4D(np.ones((3, 3, 3)))
    assert vol.n_volumes == 1
    path = str(tmp_path / "v3.nii")
    write_volume(vol, path)
    back = read_volume(path)
    assert back.data.shape == (3, 3, 3, 1)


def test_int16_payload_supported(tmp_path):
    vol = Volume4D(np.arange(8.0).reshape(2, 2, 2, 1))
    path = str(tmp_path / "i.nii")
    write_volume(vol, path, dtype="int16")
    back = read_volume(path)
    np.testing.assert_array_equal(back.data, vol.data)


def test_write_unwritable_path_raises(tmp_path):
    vol = Volume4D(np.zeros((2, 2, 2, 1)))
    with pytest.raises(VolumeIOError):
        write_volume(vol, str(tmp_path / "no" / "such" / "dir" / "v.nii"))


def test_mask_roundtrip(tmp_path):
    mask = Mask3D(np.random.default_rng(3).random((4, 4, 4)) > 0.5)
    path = str(tmp_path / "m.nii")
    write_mask(mask, path)
    back = read_mask(path)
    np.testing.assert_array_equal(back.data, mask.data)


def test_gradient_table_basic(tmp_path):
    bval = tmp_path / "d.bval"
    bvec = tmp_path / "d.bvec"
    bval.write_text("0 1000 1000\n")
    bvec.write_text("0 1 0\n0 0 1\n0 0 0\n")
    table = read_gradients(str(bval), str(bvec))
    assert list(table.b0_indices) == [0]
    assert list(table.dwi_indices) == [1, 2]
    np.testing.assert_allclose(table.bvecs[1], [1, 0, 0])


def test_gradient_normalization(tmp_path):
    bval = tmp_path / "d.bval"
    bvec = tmp_path / "d.bvec"
    bval.write_text("0 1000\n")
    bvec.write_text("0 2\n0 0\n0 0\n")
    table = read_gradients(str(bval), str(bvec))
    np.testing.assert_allclose(table.bvecs[1], [1.0, 0.0, 0.0])


def test_gradient_count_mismatch(tmp_path):
    bval = tmp_path / "d.bval"
    bvec = tmp_path / "d.bvec"
    bval.write_text("0 1000 1000\n")
    bvec.write_text("0 1 0 0\n0 0 1 0\n0 0 0 1\n")
    with pytest.raises(GradientError):
        read_gradients(str(bval), str(bvec))


def test_gradient_zero_direction_for_dwi(tmp_path):
    bval = tmp_path / "d.bval"
    bvec = tmp_path / "d.bvec"
    bval.write_text("0 1000\n")
    bvec.write_text("0 0\n0 0\n0 0\n")
    with pytest.raises(GradientError):
        read_gradients(str(bval), str(bvec))


def test_gradient_requires_a_b0(tmp_path):
    bval = tmp_path / "d.bval"
    bvec = tmp_path / "d.bvec"
    bval.write_text("1000 1000\n")
    bvec.write_text("1 0\n0 1\n0 0\n")
    with pytest.raises(GradientError):
        read_gradients(str(bval), str(bvec))


def test_b0_threshold_configurable(tmp_path):
    bval = tmp_path / "d.bval"
    bvec = tmp_path / "d.bvec"
    bval.write_text("40 1000\n")
    bvec.write_text("0 1\n0 0\n0 0\n")
    table = read_gradients(str(bval), str(bvec), b0_threshold=50.0)
    assert list(table.b0_indices) == [0]
    with pytest.raises(GradientError):
        # with a lower threshold there is no b0 left
        read_gradients(str(bval), str(bvec), b0_threshold=10.0)


def test_volume_validation():
    with pytest.raises(ValueError):
        Volume4D(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Volume4D(np.zeros((2, 2, 2, 1)), spacing=(1.0, 0.0, 1.0))
    vol = Volume4D(np.zeros((2, 2, 2, 1)))
    vol.data[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        vol.validate()
