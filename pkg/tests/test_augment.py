import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from petseg.augment import (
    AugmentConfig,
    adjust_gamma,
    apply_affine,
    apply_displacement,
    augment_sample,
    make_stream,
    patch_start,
    random_affine,
    random_gamma,
    random_noise,
    random_patch,
    sample_elastic_field,
)
from petseg.errors import ContractError
from petseg.kvconfig import dataclass_from_kv, dataclass_to_kv
from petseg.volume import Kind, Volume3D


def test_defaults():
    cfg = AugmentConfig()
    assert cfg.patch_size == 192
    assert cfg.translate_range == (0, 10)
    assert cfg.rotate_range == pytest.approx((-math.pi / 12, math.pi / 12))
    assert cfg.scale_factor == 1.1
    assert cfg.elastic_sigma_range == (0.0, 1.0) and cfg.elastic_offset_range == (0.0, 1.0)
    assert cfg.gamma_range == (0.7, 1.5)
    assert (cfg.noise_mean, cfg.noise_sigma) == (0.0, 1.0)


def test_config_kv_round_trip():
    cfg = AugmentConfig(patch_size=64, gamma_range=(0.8, 1.2), seed=7)
    assert dataclass_from_kv(AugmentConfig, dataclass_to_kv(cfg)) == cfg
    with pytest.raises(ContractError):
        dataclass_from_kv(AugmentConfig, "patch=3\n")
    with pytest.raises(ContractError):
        AugmentConfig(gamma_range=(1.5, 0.7))


def test_patch_of_exact_size_is_identity():
    cfg = AugmentConfig(patch_size=12)
    v = Volume3D(np.random.default_rng(0).random((12, 12, 12)), kind=Kind.PET_SUV)
    (out,) = random_patch([v], cfg, make_stream(0, 1))
    assert out == v


def test_patch_start_bounds_200():
    starts = np.array([patch_start((200, 200, 200), 192, make_stream(3, i)) for i in range(1000)])
    assert starts.min() == 0 and starts.max() == 8
    assert set(starts.ravel().tolist()) == set(range(9))


def test_patch_same_seed_same_region_and_small_volume_padding():
    cfg = AugmentConfig(patch_size=8)
    data = np.random.default_rng(1).random((10, 6, 12))
    pet = Volume3D(data, kind=Kind.PET_SUV)
    mask = Volume3D(data > 0.5, kind=Kind.MASK)
    a = random_patch([pet, mask], cfg, make_stream(5, 0))
    b = random_patch([pet, mask], cfg, make_stream(5, 0))
    assert a[0] == b[0] and a[1] == b[1]
    assert a[0].shape == (8, 8, 8)
    # the 6-voxel axis was padded by one zero slab on each side
    assert a[0].data[:, 0, :].max() == 0 and a[0].data[:, 7, :].max() == 0
    assert np.array_equal(a[1].data.astype(bool), a[0].data > 0.5)


def spike(shape=(11, 11, 11), at=(5, 5, 5)):
    data = np.zeros(shape)
    data[at] = 1.0
    return data


def test_affine_identity():
    v = Volume3D(np.random.default_rng(2).random((6, 7, 8)), kind=Kind.CT_HU)
    (out,) = apply_affine([v])
    assert out == v


def test_affine_translation_moves_spike():
    v = Volume3D(spike(), kind=Kind.PET_SUV)
    m = Volume3D(spike(), kind=Kind.MASK)
    out, mout = apply_affine([v, m], translation=(3, 0, -2))
    assert np.argwhere(out.data == 1).tolist() == [[8, 5, 3]]
    assert np.argwhere(mout.data == 1).tolist() == [[8, 5, 3]]


def test_affine_rotation_about_axial_axis():
    data = np.zeros((11, 11, 3))
    data[8, 5, 1] = 1.0  # three voxels along +x from the centre
    m = Volume3D(data, kind=Kind.MASK)
    (out,) = apply_affine([m], angle=math.pi / 2)
    assert np.argwhere(out.data == 1).tolist() == [[5, 8, 1]]


def test_random_affine_mask_binary_and_deterministic():
    cfg = AugmentConfig()
    rng = np.random.default_rng(3)
    m = Volume3D(rng.random((16, 16, 16)) > 0.7, kind=Kind.MASK)
    for i in range(10):
        (a,) = random_affine([m], cfg, make_stream(1, i))
        (b,) = random_affine([m], cfg, make_stream(1, i))
        assert a == b
        assert set(np.unique(a.data).tolist()) <= {0, 1}


def test_elastic_zero_and_constant():
    v = Volume3D(np.random.default_rng(4).random((5, 6, 7)), kind=Kind.CT_HU)
    (out,) = apply_displacement([v], np.zeros((3, 5, 6, 7)))
    assert out == v
    const = Volume3D(np.full((9, 9, 9), 2.5), kind=Kind.PET_SUV)
    field = sample_elastic_field(const.shape, AugmentConfig(), make_stream(0, 0))
    (warped,) = apply_displacement([const], field)
    assert np.allclose(warped.data, 2.5)


def test_elastic_displacement_bounded_over_1000_draws():
    cfg = AugmentConfig(elastic_grid_spacing=8)
    worst_hi, worst_lo = -np.inf, np.inf
    for i in range(1000):
        field = sample_elastic_field((20, 17, 12), cfg, make_stream(9, i))
        worst_hi = max(worst_hi, field.max())
        worst_lo = min(worst_lo, field.min())
    assert worst_hi <= 1.0 and worst_lo >= 0.0


def test_gamma_examples():
    data = np.array([0.0, 0.25, 1.0]).reshape(3, 1, 1)
    v = Volume3D(data, kind=Kind.CT_HU)
    assert adjust_gamma(v, 2.0).data.ravel().tolist() == [0.0, 0.0625, 1.0]
    assert adjust_gamma(v, 1.0) == v
    scaled = Volume3D(data * 4 + 1, kind=Kind.PET_SUV)  # range [1, 5]: 0.25 -> 2.0
    assert adjust_gamma(scaled, 2.0).data.ravel().tolist() == pytest.approx([1.0, 1.25, 5.0])


@settings(max_examples=40, deadline=None)
@given(gamma=st.floats(0.7, 1.5), seed=st.integers(0, 2**32 - 1))
def test_gamma_preserves_order(gamma, seed):
    values = np.sort(np.random.default_rng(seed).normal(size=30))
    out = adjust_gamma(Volume3D(values.reshape(30, 1, 1), kind=Kind.PET_SUV), gamma)
    assert np.all(np.diff(out.data.ravel()) >= 0)


def test_noise_statistics_and_determinism():
    cfg = AugmentConfig()
    v = Volume3D(np.zeros((100, 100, 100)), kind=Kind.PET_SUV)
    a = random_noise(v, cfg, make_stream(11, 0))
    b = random_noise(v, cfg, make_stream(11, 0))
    assert a == b
    noise = a.data.astype(np.float64)
    assert -0.01 <= noise.mean() <= 0.01
    assert 0.99 <= noise.std() <= 1.01


def test_intensity_transforms_reject_masks():
    m = Volume3D(np.zeros((2, 2, 2)), kind=Kind.MASK)
    with pytest.raises(ContractError):
        random_noise(m, AugmentConfig(), make_stream(0))
    with pytest.raises(ContractError):
        random_gamma(m, AugmentConfig(), make_stream(0))


def test_augment_sample_pipeline():
    cfg = AugmentConfig(patch_size=16, elastic_grid_spacing=8, seed=4)
    rng = np.random.default_rng(5)
    pet = Volume3D(rng.random((20, 18, 24)) * 5, kind=Kind.PET_SUV)
    ct = Volume3D(rng.random((20, 18, 24)), kind=Kind.CT_HU)
    mask = Volume3D(pet.data > 4, kind=Kind.MASK)
    first = augment_sample(pet, ct, mask, cfg, epoch=2, index=3)
    again = augment_sample(pet, ct, mask, cfg, epoch=2, index=3)
    other = augment_sample(pet, ct, mask, cfg, epoch=3, index=3)
    for a, b in zip(first, again):
        assert a == b
    assert first[0] != other[0]
    assert all(v.shape == (16, 16, 16) for v in first)
    assert first[2].kind is Kind.MASK and set(np.unique(first[2].data).tolist()) <= {0, 1}
