import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import linear_resample_1d, nearest_resample_3d, suv as suv_oracle
from petseg.errors import ContractError
from petseg.phantom import make_phantom
from petseg.preprocess import (
    F18_HALF_LIFE_S,
    Interp,
    SuvParams,
    body_bounding_box,
    clip_ct,
    minmax_normalize,
    preprocess_case,
    resample,
    resample_to_reference,
    to_suv,
)
from petseg.volume import Kind, PatchRegion, Volume3D


def vol(data, kind=Kind.RAW, spacing=(1.0, 1.0, 1.0), **kw):
    return Volume3D(np.asarray(data, dtype=np.float64), spacing, kind=kind, **kw)


# --- SUV ---------------------------------------------------------------------

def test_suv_reference_case():
    params = SuvParams(3.7e8, 70000.0, 3600.0)
    out = to_suv(vol(np.full((2, 2, 2), 3619.0)), params)
    # 1.000062451136 from an arbitrary-precision evaluation of the decay formula
    assert out.data[0, 0, 0] == pytest.approx(1.000062451136, rel=1e-6)
    assert out.kind is Kind.PET_SUV
    assert F18_HALF_LIFE_S == 6586.2


def test_suv_without_delay_is_plain_ratio():
    params = SuvParams(2.5e8, 80000.0, 0.0)
    out = to_suv(vol(np.full((1, 1, 1), 5000.0)), params)
    assert out.data[0, 0, 0] == np.float32(5000.0 * 80000.0 / 2.5e8)


def test_suv_zero_activity():
    out = to_suv(vol(np.zeros((3, 3, 3))), SuvParams(3.7e8, 70000.0, 1000.0))
    assert not out.data.any()


@settings(max_examples=50, deadline=None)
@given(
    c=st.floats(0, 1e5),
    dose=st.floats(1e6, 1e10),
    weight=st.floats(1e3, 2e5),
    delay=st.floats(0, 2e4),
)
def test_suv_matches_oracle(c, dose, weight, delay):
    out = to_suv(vol(np.full((1, 1, 1), c)), SuvParams(dose, weight, delay))
    expected = suv_oracle(c, dose, weight, delay, F18_HALF_LIFE_S)
    assert out.data[0, 0, 0] == pytest.approx(expected, rel=1e-6, abs=1e-30)


def test_suv_params_validation(tmp_path):
    with pytest.raises(ContractError):
        SuvParams(0.0, 70000, 0)
    with pytest.raises(ContractError):
        SuvParams(1e8, 70000, -1)
    side = tmp_path / "case.suv"
    side.write_text("dose_bq=3.7e8\nweight_g=70000\ndelay_s=3600\n")
    assert SuvParams.from_sidecar(side) == SuvParams(3.7e8, 70000.0, 3600.0)
    side.write_text("dose_bq=3.7e8\nweight_g=70000\n")
    with pytest.raises(ContractError, match="delay_s"):
        SuvParams.from_sidecar(side)
    side.write_text("dose_bq=3.7e8\nweight_g=70000\ndelay_s=1\nunits=kg\n")
    with pytest.raises(ContractError, match="unknown key"):
        SuvParams.from_sidecar(side)


# --- CT intensity ------------------------------------------------------------

def test_clip_values():
    out = clip_ct(vol([[[-2000.0, 500.0, 2000.0]]], Kind.CT_HU))
    assert out.data.ravel().tolist() == [-1024.0, 500.0, 1024.0]


def test_normalize_values():
    out = minmax_normalize(vol([[[-1024.0, 0.0, 1024.0]]], Kind.CT_HU))
    assert out.data.ravel().tolist() == [0.0, 0.5, 1.0]
    with pytest.raises(ContractError):
        minmax_normalize(vol([[[-2000.0]]], Kind.CT_HU))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 2, 2), elements=st.floats(-5000, 5000)))
def test_clip_idempotent_and_normalize_monotone(data):
    once = clip_ct(vol(data, Kind.CT_HU))
    assert once == clip_ct(once)
    norm = minmax_normalize(once)
    assert norm.data.min() >= 0 and norm.data.max() <= 1
    order = np.argsort(once.data.ravel(), kind="stable")
    assert np.all(np.diff(norm.data.ravel()[order]) >= 0)


# --- body box ----------------------------------------------------------------

def test_body_box_degenerate():
    ct = vol(np.full((6, 7, 8), -1024.0), Kind.CT_HU)
    pet = vol(np.zeros((6, 7, 8)), Kind.PET_SUV)
    box, warning = body_bounding_box(pet, ct)
    assert box == PatchRegion((0, 0, 0), (6, 7, 8)) and warning


def test_body_box_single_voxel():
    ct = np.full((10, 10, 10), -1024.0)
    ct[5, 5, 5] = 0.0
    box, warning = body_bounding_box(vol(np.zeros((10, 10, 10)), Kind.PET_SUV), vol(ct, Kind.CT_HU))
    assert box == PatchRegion((5, 5, 5), (1, 1, 1)) and not warning


def test_body_box_pet_only_voxel():
    pet = np.zeros((10, 10, 10))
    pet[2, 7, 4] = 1.0
    box, _ = body_bounding_box(vol(pet, Kind.PET_SUV), vol(np.full((10, 10, 10), -1024.0), Kind.CT_HU))
    assert box == PatchRegion((2, 7, 4), (1, 1, 1))


def test_body_box_phantom_matches_scan():
    ph = make_phantom(shape=(24, 20, 30), spacing=(4, 4, 4), origin=(0, 0, 0))
    ct = ph.ct.data
    box, _ = body_bounding_box(ph.ct.with_data(np.zeros(ct.shape), Kind.PET_SUV), ph.ct)
    # brute-force scan for the extent of the body
    lo, hi = [None] * 3, [None] * 3
    for x in range(ct.shape[0]):
        for y in range(ct.shape[1]):
            for z in range(ct.shape[2]):
                if ct[x, y, z] > -800:
                    for a, i in enumerate((x, y, z)):
                        lo[a] = i if lo[a] is None else min(lo[a], i)
                        hi[a] = i if hi[a] is None else max(hi[a], i)
    assert box.start == tuple(lo)
    assert box.size == tuple(h - l + 1 for l, h in zip(lo, hi))


# --- resampling --------------------------------------------------------------

def test_resample_identity():
    data = np.random.default_rng(0).random((4, 5, 6))
    v = vol(data, Kind.PET_SUV, spacing=(2, 2, 2))
    assert resample(v, (2, 2, 2)) == v


@pytest.mark.parametrize("target", [(1, 1, 1), (3, 2.5, 4), (0.7, 5, 2)])
def test_resample_constant(target):
    v = vol(np.full((4, 5, 6), 3.25), Kind.PET_SUV, spacing=(2, 2, 2))
    out = resample(v, target)
    assert np.all(out.data == np.float32(3.25))
    assert out.spacing == tuple(float(t) for t in target)


def test_resample_ramp_against_loop_oracle():
    ramp = np.array([0.0, 1.0, 2.0, 3.0])
    v = vol(ramp.reshape(4, 1, 1), Kind.PET_SUV, spacing=(4, 4, 4))
    out = resample(v, (2, 4, 4))
    assert out.shape == (8, 1, 1)
    expected = linear_resample_1d(ramp.tolist(), 4.0, 2.0, 8)
    assert out.data.ravel().tolist() == pytest.approx(expected, abs=1e-7)
    assert expected[:7] == [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0]


def test_resample_random_against_separable_loop_oracle():
    rng = np.random.default_rng(5)
    data = rng.random((5, 4, 3))
    spacing, target = (2.0, 3.0, 1.5), (1.5, 2.0, 1.0)
    out = resample(vol(data, Kind.PET_SUV, spacing=spacing), target)
    expected = data
    for axis in range(3):
        n_new = out.shape[axis]
        expected = np.apply_along_axis(
            lambda line: linear_resample_1d(line.tolist(), spacing[axis], target[axis], n_new), axis, expected
        )
    assert np.allclose(out.data, expected, atol=1e-6)


def test_checkerboard_nearest_against_loop_oracle():
    idx = np.indices((8, 6, 4)).sum(axis=0)
    board = (idx % 2).astype(np.uint8)
    mask = Volume3D(board, (2, 2, 2), kind=Kind.MASK)
    out = resample(mask, (4, 4, 4), Interp.NEAREST)
    expected = nearest_resample_3d(board, (2, 2, 2), (4, 4, 4), out.shape)
    assert np.array_equal(out.data, expected)
    assert out.data.dtype == np.uint8


def test_mask_trilinear_rejected():
    mask = Volume3D(np.zeros((2, 2, 2)), kind=Kind.MASK)
    with pytest.raises(ContractError):
        resample(mask, (1, 1, 1), Interp.TRILINEAR)


def test_resample_to_reference():
    ref = vol(np.zeros((6, 5, 4)), spacing=(3, 3, 3), origin=(1, 2, 3))
    same = Volume3D(np.random.default_rng(0).integers(0, 2, (6, 5, 4)), (3, 3, 3), (1, 2, 3), Kind.MASK)
    assert resample_to_reference(same, ref) == same
    ones = Volume3D(np.ones((9, 8, 7)), (2, 2, 2), (1, 2, 3), Kind.MASK)
    out = resample_to_reference(ones, ref)
    assert out.shape == ref.shape and out.data.all()
    assert out.spacing == ref.spacing and out.origin == ref.origin


def test_resample_to_reference_with_flipped_axes():
    # the prediction grid runs along -x; sampling must follow world positions
    ref = vol(np.zeros((4, 1, 1)), spacing=(1, 1, 1), origin=(0, 0, 0))
    data = np.zeros((4, 1, 1))
    data[0, 0, 0] = 1  # world x = 3
    pred = Volume3D(data, (1, 1, 1), (3, 0, 0), Kind.MASK, (-1, 1, 1))
    out = resample_to_reference(pred, ref)
    assert out.data.ravel().tolist() == [0, 0, 0, 1]


# --- whole chain -------------------------------------------------------------

def test_preprocess_case_phantom():
    ph = make_phantom()
    res = preprocess_case(ph.pet_activity, ph.ct, ph.lesions, ph.suv)
    assert not res.box_warning
    assert res.pet.spacing == (2.0, 2.0, 2.0) == res.ct.spacing == res.mask.spacing
    assert res.pet.shape == res.ct.shape == res.mask.shape
    assert res.ct.data.min() >= 0 and res.ct.data.max() <= 1
    assert res.pet.kind is Kind.PET_SUV and res.mask.kind is Kind.MASK
    # lesions sit at SUV 8 in a background of 1
    assert res.pet.data.max() == pytest.approx(8.0, rel=1e-5)
    assert res.mask.data.sum() > 0


def test_preprocess_ct_on_other_grid_is_resampled():
    pet = vol(np.ones((8, 8, 8)), Kind.PET_SUV, spacing=(2, 2, 2))
    ct = vol(np.zeros((16, 16, 16)), Kind.CT_HU, spacing=(1, 1, 1))
    res = preprocess_case(pet, ct)
    assert res.ct.shape == res.pet.shape
    assert np.allclose(res.ct.data, 0.5)
