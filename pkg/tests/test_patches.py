import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hsidiff.patches import (
    HEADER, MAGIC, Patch3D, PatchFormatError, PatchSet, PatchTruncatedError, ShapeError,
    decode_patchset, encode_patchset, format_psnr, is_valid, psnr, read_patchset,
    write_patchset,
)


def test_patch_rejects_non_finite():
    with pytest.raises(ValueError):
        Patch3D(np.array([[[np.nan]]], dtype=np.float32))
    with pytest.raises(ValueError):
        Patch3D(np.array([[[np.inf]]], dtype=np.float32))


def test_patch_needs_three_dims():
    with pytest.raises(ShapeError):
        Patch3D(np.zeros((2, 2), dtype=np.float32))


def test_patchset_rejects_mixed_dims():
    with pytest.raises(ShapeError):
        PatchSet((Patch3D(np.zeros((1, 1, 2))), Patch3D(np.zeros((1, 1, 3)))))


def test_single_zero_patch_round_trip(tmp_path):
    ps = PatchSet((Patch3D(np.zeros((1, 1, 1), dtype=np.float32)),))
    write_patchset(ps, tmp_path / "a.dvgp")
    back = read_patchset(tmp_path / "a.dvgp")
    assert len(back) == 1
    assert back[0].values[0, 0, 0] == 0.0
    assert back[0].label is None


def test_five_random_patches_round_trip(tmp_path, rng):
    values = rng.normal(size=(5, 7, 7, 20)).astype(np.float32)
    ps = PatchSet.from_array(values, [0, 1, 2, 3, 4])
    write_patchset(ps, tmp_path / "a.dvgp")
    back = read_patchset(tmp_path / "a.dvgp")
    assert back.patches == ps.patches
    assert np.array_equal(np.stack([p.values for p in back]).view(np.uint32),
                          values.view(np.uint32))


def test_writes_are_byte_identical(tmp_path, unit_patches):
    write_patchset(unit_patches, tmp_path / "a")
    write_patchset(unit_patches, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_empty_set_without_shape_is_rejected():
    with pytest.raises(ValueError):
        encode_patchset(PatchSet(()))


def test_empty_set_with_shape_round_trips():
    data = encode_patchset(PatchSet((), "", (7, 7, 20)))
    back = decode_patchset(data)
    assert len(back) == 0 and back.dims == (7, 7, 20)


def test_one_patch_file_size():
    # header: 8 magic + 5 u32; record: i32 label + 2*3*4 float32
    ps = PatchSet((Patch3D(np.ones((2, 3, 4), dtype=np.float32), 3),))
    assert len(encode_patchset(ps)) == 28 + 4 + 2 * 3 * 4 * 4


def test_header_layout():
    ps = PatchSet((Patch3D(np.ones((2, 3, 4), dtype=np.float32), 3),))
    data = encode_patchset(ps)
    assert data[:8] == b"DVGPATCH" == MAGIC
    assert struct.unpack_from("<IIIII", data, 8) == (1, 1, 2, 3, 4)
    assert struct.unpack_from("<i", data, HEADER.size) == (3,)


def test_corrupted_magic():
    data = bytearray(encode_patchset(PatchSet((Patch3D(np.zeros((1, 1, 1))),))))
    data[0] ^= 0xFF
    with pytest.raises(PatchFormatError) as err:
        decode_patchset(bytes(data))
    assert err.value.offset == 0


def test_truncated_payload():
    data = encode_patchset(PatchSet((Patch3D(np.zeros((2, 2, 2))),)))
    with pytest.raises(PatchTruncatedError):
        decode_patchset(data[:-4])
    with pytest.raises(PatchTruncatedError):
        decode_patchset(data[:10])


def test_unsupported_version():
    data = bytearray(encode_patchset(PatchSet((Patch3D(np.zeros((1, 1, 1))),))))
    struct.pack_into("<I", data, 8, 2)
    with pytest.raises(PatchFormatError):
        decode_patchset(bytes(data))


def test_write_failure_names_path(tmp_path):
    ps = PatchSet((Patch3D(np.zeros((1, 1, 1))),))
    target = tmp_path / "missing" / "x.dvgp"
    with pytest.raises(OSError, match="missing"):
        write_patchset(ps, target)


@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3),
                                     st.integers(1, 5)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_round_trip_property(values):
    ps = PatchSet.from_array(values)
    assert decode_patchset(encode_patchset(ps)).patches == ps.patches


# --- PSNR --------------------------------------------------------------------

def test_psnr_identical_is_inf():
    p = Patch3D(np.ones((2, 2, 2)))
    assert psnr(p, p) == math.inf
    assert format_psnr(psnr(p, p)) == "inf"
    assert is_valid(p, p)


def test_psnr_hand_computed_20db():
    o = Patch3D(np.ones((2, 2, 1)))
    d = Patch3D(np.full((2, 2, 1), 0.9))
    # MSE = 0.01 up to float rounding, MAX = 1
    assert psnr(o, d) == pytest.approx(20.0, abs=1e-9)


def test_boundary_is_inclusive():
    o = Patch3D(np.ones((2, 2, 1)))
    d = Patch3D(np.full((2, 2, 1), 0.9))
    value = psnr(o, d)
    assert is_valid(o, d, threshold=value)
    assert not is_valid(o, d, threshold=np.nextafter(value, np.inf))


def test_halving_mse_adds_3db(rng):
    o = Patch3D(rng.uniform(-1, 1, (3, 3, 4)))
    noise = rng.normal(0, 0.05, (3, 3, 4))
    a = psnr(o, Patch3D(o.values + noise))
    b = psnr(o, Patch3D(o.values + noise / math.sqrt(2)))
    assert b - a == pytest.approx(10 * math.log10(2), abs=1e-9)
    assert 10 * math.log10(2) == pytest.approx(3.0103, abs=1e-4)


def test_half_zeroed_unit_patch_is_invalid():
    o = Patch3D(np.ones((2, 2, 2)))
    d = o.values.copy()
    d[0] = 0.0
    value = psnr(o, Patch3D(d))
    # MSE = 0.5, MAX = 1
    assert value == pytest.approx(10 * math.log10(2), abs=1e-12)
    assert not is_valid(o, Patch3D(d))


def test_max_comes_from_the_original():
    a = Patch3D(np.array([[[1.0, -4.0, 2.0, 3.0]]]))
    b = Patch3D(np.array([[[1.1, -4.0, 2.0, 3.0]]]))
    # MAX = 4, MSE = 0.01 / 4
    assert psnr(a, b) == pytest.approx(10 * math.log10(16 / 0.0025), abs=1e-9)
    big = Patch3D(np.array([[[10.0, -4.0, 2.0, 3.0]]]))
    assert psnr(a, big) != pytest.approx(psnr(big, a))


def test_psnr_shape_mismatch():
    with pytest.raises(ShapeError):
        psnr(Patch3D(np.ones((1, 1, 2))), Patch3D(np.ones((1, 2, 1))))


def test_threshold_must_be_positive():
    p = Patch3D(np.ones((1, 1, 1)))
    with pytest.raises(ValueError):
        is_valid(p, p, threshold=0.0)


@given(st.floats(0.01, 1.0), st.floats(1.01, 3.0))
def test_psnr_non_increasing_in_magnitude(scale, grow):
    base = np.random.default_rng(0).uniform(-1, 1, (2, 3, 4))
    noise = np.random.default_rng(1).normal(0, 1, (2, 3, 4))
    o = Patch3D(base)
    small = psnr(o, Patch3D(base + scale * noise))
    large = psnr(o, Patch3D(base + scale * grow * noise))
    assert large <= small


def test_golden_file_bytes(fixtures_dir):
    expected = bytes.fromhex(
        "4456475041544348" "01000000" "01000000" "01000000" "01000000" "01000000"
        "ffffffff" "00000000")
    assert (fixtures_dir / "zero_1x1x1.dvgp").read_bytes() == expected
    ps = read_patchset(fixtures_dir / "zero_1x1x1.dvgp")
    assert len(ps) == 1 and ps[0].values.tolist() == [[[0.0]]]
