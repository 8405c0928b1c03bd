import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import smooth_volume
from thermoreg.grid import (BinaryMask, Grid, GridError, LandmarkSet, NiftiIntegrityError, NiftiParseError,
                            Volume, check_same_grid, clamp_intensity, normalize_unit, preprocess, read_landmarks,
                            read_mask, read_nifti, read_volume, resample, write_landmarks, write_mask,
                            write_nifti, write_volume)


def test_volume_rejects_nonfinite_and_bad_spacing():
    with pytest.raises(ValueError):
        Volume(np.array([[[np.nan]]]), (1, 1, 1))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), (1, 0, 1))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), (1, 1, 1), modality="PET")


def test_volume_is_immutable():
    v = Volume(np.zeros((2, 2, 2)), (1, 1, 1))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1


def test_mask_values_must_be_binary():
    with pytest.raises(ValueError):
        BinaryMask(np.full((2, 2, 2), 2), (1, 1, 1))
    m = BinaryMask(np.eye(2)[:, :, None].repeat(2, 2), (1, 1, 1))
    assert m.invert().count == 8 - m.count


def test_check_same_grid_mismatch():
    a = Volume(np.zeros((4, 4, 4)), (1, 1, 1))
    b = Volume(np.zeros((4, 4, 4)), (1, 1, 2))
    with pytest.raises(GridError):
        check_same_grid(a, b)


# clamp / normalize


def test_clamp_ct_range():
    v = Volume(np.array([-1000.0, 0.0, 1200.0]).reshape(3, 1, 1), (1, 1, 1), "CT")
    assert clamp_intensity(v, -800, 800).data.ravel().tolist() == [-800, 0, 800]


def test_clamp_noop_and_saturation():
    v = Volume(np.linspace(-5, 5, 8).reshape(2, 2, 2), (1, 1, 1))
    assert np.array_equal(clamp_intensity(v, -5, 5).data, v.data)
    sat = Volume(np.full((2, 2, 2), 11.0), (1, 1, 1))
    assert np.all(clamp_intensity(sat, 0, 10).data == 10)
    with pytest.raises(ValueError):
        clamp_intensity(v, 1, 1)


def test_normalize_examples():
    v = Volume(np.array([-800.0, 0.0, 800.0]).reshape(3, 1, 1), (1, 1, 1))
    assert normalize_unit(v).data.ravel().tolist() == [0, 0.5, 1]
    u = Volume(np.array([0.0, 1.0, 0.25]).reshape(3, 1, 1), (1, 1, 1))
    assert np.array_equal(normalize_unit(u).data, u.data)
    with pytest.warns(RuntimeWarning):
        z = normalize_unit(Volume(np.full((2, 2, 2), 5.0), (1, 1, 1)))
    assert np.all(z.data == 0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4, 2), elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_clamp_normalize_range(a):
    v = Volume(a, (1, 1, 1), "CT")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        out = normalize_unit(clamp_intensity(v, -800, 800)).data
    assert out.min() >= 0 and out.max() <= 1


# resample


def test_resample_identity_and_constant():
    v = Volume(smooth_volume((8, 9, 7)), (1.5, 1.5, 2.0))
    assert np.abs(resample(v, v.shape, v.spacing).data - v.data).max() == 0
    c = Volume(np.full((8, 8, 8), 0.3), (1, 1, 1))
    assert np.allclose(resample(c, (5, 11, 3), (1.7, 0.7, 3.1)).data, 0.3, atol=1e-12)


def test_resample_ramp_downsample():
    x = np.arange(16.0)[:, None, None] * np.ones((16, 8, 8))
    v = Volume(0.5 * x + 1.0, (1, 1, 1))
    out = resample(v, (8, 8, 8), (2, 1, 1))
    expected = 0.5 * (2 * np.arange(8.0)) + 1.0
    assert np.allclose(out.data[:, 3, 3], expected, atol=1e-6)


def test_resample_round_trip_smooth():
    v = Volume(smooth_volume((32, 32, 16), sigma=4), (2, 2, 2))
    back = resample(resample(v, (48, 48, 24), (4 / 3, 4 / 3, 4 / 3)), v.shape, v.spacing)
    assert np.abs(back.data - v.data).max() <= 0.02


def test_resample_rejects_bad_args():
    v = Volume(np.zeros((4, 4, 4)), (1, 1, 1))
    with pytest.raises(ValueError):
        resample(v, (0, 4, 4), (1, 1, 1))
    with pytest.raises(ValueError):
        resample(v, (4, 4, 4), (1, -1, 1))


def test_preprocess_deterministic_and_unit_range(rng):
    v = Volume(rng.uniform(-1500, 1500, (10, 12, 6)), (1.2, 1.2, 3.0), "CT")
    a = preprocess(v, shape=(8, 8, 8), spacing=(1.5, 1.8, 2.25))
    b = preprocess(v, shape=(8, 8, 8), spacing=(1.5, 1.8, 2.25))
    assert a.data.tobytes() == b.data.tobytes()
    assert a.data.min() >= 0 and a.data.max() <= 1


# NIfTI


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.int16, np.uint8])
def test_nifti_round_trip_bit_exact(tmp_path, rng, dtype):
    data = (rng.uniform(0, 100, (5, 6, 7))).astype(dtype)
    write_nifti(tmp_path / "a.nii", data, (1.188, 1.188, 3.0))
    back, spacing, _ = read_nifti(tmp_path / "a.nii")
    assert back.dtype == data.dtype and back.tobytes() == data.tobytes()
    assert spacing == (1.188, 1.188, 3.0)


def test_volume_round_trip(tmp_path, rng):
    v = Volume(rng.random((6, 5, 4)).astype(np.float32), (1.188, 1.188, 3.0), "MR")
    write_volume(v, tmp_path / "v.nii")
    w = read_volume(tmp_path / "v.nii")
    assert w.data.tobytes() == v.data.tobytes()
    assert w.spacing == v.spacing and w.modality == "MR"


def test_mask_round_trip(tmp_path, rng):
    m = BinaryMask((rng.random((6, 5, 4)) > 0.5).astype(np.uint8), (2, 2, 2))
    write_mask(m, tmp_path / "m.nii")
    assert np.array_equal(read_mask(tmp_path / "m.nii").data, m.data)


def test_nifti_truncated_is_parse_error(tmp_path, rng):
    write_nifti(tmp_path / "a.nii", rng.random((4, 4, 4)).astype(np.float32), (1, 1, 1))
    buf = (tmp_path / "a.nii").read_bytes()
    (tmp_path / "short.nii").write_bytes(buf[:200])
    with pytest.raises(NiftiParseError) as exc:
        read_nifti(tmp_path / "short.nii")
    assert exc.value.offset >= 0
    (tmp_path / "cut.nii").write_bytes(buf[:-10])
    with pytest.raises(NiftiIntegrityError):
        read_nifti(tmp_path / "cut.nii")


def test_nifti_bad_magic(tmp_path, rng):
    write_nifti(tmp_path / "a.nii", rng.random((4, 4, 4)).astype(np.float32), (1, 1, 1))
    buf = bytearray((tmp_path / "a.nii").read_bytes())
    buf[344:348] = b"xxxx"
    (tmp_path / "b.nii").write_bytes(bytes(buf))
    with pytest.raises(NiftiParseError):
        read_nifti(tmp_path / "b.nii")


def test_nifti_scaling_honored(tmp_path):
    import struct
    data = np.arange(8, dtype=np.int16).reshape(2, 2, 2)
    write_nifti(tmp_path / "a.nii", data, (1, 1, 1))
    buf = bytearray((tmp_path / "a.nii").read_bytes())
    struct.pack_into("<ff", buf, 112, 2.0, -1.0)  # scl_slope, scl_inter
    (tmp_path / "s.nii").write_bytes(bytes(buf))
    back, _, _ = read_nifti(tmp_path / "s.nii")
    assert np.allclose(back, 2.0 * data - 1.0)


# landmarks


def test_landmarks_round_trip(tmp_path, rng):
    pts = LandmarkSet(rng.uniform(0, 50, (5, 3)), [f"p{i}" for i in range(5)])
    write_landmarks(pts, tmp_path / "l.csv")
    back = read_landmarks(tmp_path / "l.csv")
    assert np.array_equal(back.points, pts.points) and back.names == pts.names


def test_landmarks_inside():
    g = Grid((10, 10, 10), (1, 1, 1))
    pts = LandmarkSet(np.array([[0, 0, 0], [9, 9, 9], [9.5, 0, 0]]))
    assert pts.inside(g).tolist() == [True, True, False]
