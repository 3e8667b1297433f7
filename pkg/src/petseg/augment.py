"""Randomized per-epoch training transforms.

Randomness comes from counter-based Philox generators keyed by
``(seed, epoch, sample, transform)`` so results do not depend on worker count
or call order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ContractError, GeometryError
from .preprocess import interp_axis
from .volume import Kind, PatchRegion, Volume3D, crop, require_same_geometry

# substream ids, in application order
PATCH, AFFINE, ELASTIC, GAMMA, NOISE = range(5)


@dataclass(frozen=True)
class AugmentConfig:
    patch_size: int = 192
    translate_range: tuple = (0, 10)
    rotate_range: tuple = (-math.pi / 12, math.pi / 12)
    scale_factor: float = 1.1
    elastic_sigma_range: tuple = (0.0, 1.0)
    elastic_offset_range: tuple = (0.0, 1.0)
    elastic_grid_spacing: int = 32
    gamma_range: tuple = (0.7, 1.5)
    noise_mean: float = 0.0
    noise_sigma: float = 1.0
    intensity_channels: tuple = ("pet", "ct")
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 1:
            raise ContractError(f"patch_size must be positive, got {self.patch_size}")
        for name in ("translate_range", "rotate_range", "elastic_sigma_range", "elastic_offset_range", "gamma_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ContractError(f"{name} must be ordered (low <= high), got {(lo, hi)}")
        if self.scale_factor < 1:
            raise ContractError(f"scale_factor must be >= 1, got {self.scale_factor}")
        if self.noise_sigma < 0:
            raise ContractError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        if self.elastic_grid_spacing < 1:
            raise ContractError("elastic_grid_spacing must be positive")
        unknown = set(self.intensity_channels) - {"pet", "ct"}
        if unknown:
            raise ContractError(f"unknown intensity channels {sorted(unknown)}")


def make_stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for one ``(seed, *keys)`` coordinate."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


def _pad_to(volume: Volume3D, size: int) -> Volume3D:
    shape = volume.shape
    if all(n >= size for n in shape):
        return volume
    before = [max(0, (size - n) // 2) for n in shape]
    after = [max(0, size - n - b) for n, b in zip(shape, before)]
    data = np.pad(volume.data, list(zip(before, after)))
    origin = tuple(o - d * s * b for o, d, s, b in zip(volume.origin, volume.direction, volume.spacing, before))
    return Volume3D(data, volume.spacing, origin, volume.kind, volume.direction)


def patch_start(shape, patch_size: int, stream: np.random.Generator) -> tuple:
    """Uniform start corner of a ``patch_size`` cube inside ``shape`` (already padded)."""
    if min(shape) < patch_size:
        raise ContractError(f"shape {tuple(shape)} is smaller than the patch size {patch_size}")
    return tuple(int(stream.integers(0, n - patch_size + 1)) for n in shape)


def random_patch(volumes: Sequence[Volume3D], cfg: AugmentConfig, stream: np.random.Generator):
    """Crop one random cubic patch, the same region from every volume.

    Volumes smaller than the patch are zero-padded symmetrically first.
    """
    require_same_geometry(*volumes)
    padded = [_pad_to(v, cfg.patch_size) for v in volumes]
    start = patch_start(padded[0].shape, cfg.patch_size, stream)
    region = PatchRegion(start, (cfg.patch_size,) * 3)
    return tuple(crop(v, region) for v in padded)


def _order(volume: Volume3D) -> int:
    return 0 if volume.kind is Kind.MASK else 1


def apply_affine(volumes: Sequence[Volume3D], translation=(0, 0, 0), angle: float = 0.0, scale: float = 1.0):
    """Apply ``out(x) = in(c + M^-1 (x - c - t))`` with ``M = scale * Rz(angle)`` about the grid centre.

    Intensities use trilinear interpolation, masks nearest neighbour; both clamp
    at the edges.
    """
    require_same_geometry(*volumes)
    shape = np.asarray(volumes[0].shape, dtype=float)
    centre = (shape - 1) / 2
    cos, sin = math.cos(angle), math.sin(angle)
    forward = scale * np.array([[cos, -sin, 0.0], [sin, cos, 0.0], [0.0, 0.0, 1.0]])
    inverse = np.linalg.inv(forward)
    offset = centre - inverse @ (centre + np.asarray(translation, dtype=float))
    out = []
    for v in volumes:
        if np.allclose(inverse, np.eye(3)) and np.allclose(offset, np.round(offset)):
            # integer shift: exact, and avoids interpolation round-off
            data = _shift_integer(v.data, np.round(offset).astype(int))
        else:
            data = ndimage.affine_transform(
                v.data.astype(np.float64), inverse, offset, order=_order(v), mode="nearest"
            )
        out.append(v.with_data(data))
    return tuple(out)


def _shift_integer(data: np.ndarray, offset: np.ndarray) -> np.ndarray:
    idx = [np.clip(np.arange(n) + o, 0, n - 1) for n, o in zip(data.shape, offset)]
    return data[np.ix_(*idx)]


def random_affine(volumes: Sequence[Volume3D], cfg: AugmentConfig, stream: np.random.Generator):
    """Sample one translation / axial rotation / isotropic scale and apply it to every volume."""
    lo, hi = cfg.translate_range
    translation = tuple(int(t) for t in stream.integers(lo, hi + 1, size=3))
    angle = float(stream.uniform(*cfg.rotate_range))
    scale = float(stream.uniform(1.0 / cfg.scale_factor, cfg.scale_factor))
    return apply_affine(volumes, translation, angle, scale)


def upsample_control_grid(grid: np.ndarray, shape, spacing: int) -> np.ndarray:
    """Linearly interpolate a coarse control grid (one point per ``spacing`` voxels) to ``shape``."""
    out = grid
    for axis, n in enumerate(shape):
        out = interp_axis(out, np.arange(n) / spacing, axis)
    return out


def apply_displacement(volumes: Sequence[Volume3D], field: np.ndarray):
    """Warp volumes by a dense displacement field of shape ``(3, nx, ny, nz)`` in voxels."""
    require_same_geometry(*volumes)
    shape = volumes[0].shape
    if field.shape != (3, *shape):
        raise GeometryError(f"displacement field shape {field.shape} does not match (3, *{shape})")
    if not field.any():
        return tuple(volumes)
    coords = np.indices(shape, dtype=np.float64) + field
    return tuple(
        v.with_data(ndimage.map_coordinates(v.data.astype(np.float64), coords, order=_order(v), mode="nearest"))
        for v in volumes
    )


def sample_elastic_field(shape, cfg: AugmentConfig, stream: np.random.Generator) -> np.ndarray:
    spacing = cfg.elastic_grid_spacing
    grid_shape = tuple(math.ceil(n / spacing) + 1 for n in shape)
    offsets = stream.uniform(*cfg.elastic_offset_range, size=(3, *grid_shape))
    sigma = float(stream.uniform(*cfg.elastic_sigma_range))
    smoothed = np.stack([ndimage.gaussian_filter(c, sigma, mode="nearest") for c in offsets])
    return np.stack([upsample_control_grid(c, shape, spacing) for c in smoothed])


def random_elastic(volumes: Sequence[Volume3D], cfg: AugmentConfig, stream: np.random.Generator):
    """Smooth random deformation shared by all volumes.

    Control-point offsets are uniform in ``elastic_offset_range`` voxels and
    smoothed by a Gaussian with a sigma drawn from ``elastic_sigma_range``.
    Smoothing and linear upsampling are convex, so no displacement component
    leaves the offset range.
    """
    field = sample_elastic_field(volumes[0].shape, cfg, stream)
    return apply_displacement(volumes, field)


def adjust_gamma(volume: Volume3D, gamma: float) -> Volume3D:
    data = volume.data.astype(np.float64)
    lo, hi = data.min(), data.max()
    if hi == lo:
        return volume
    unit = (data - lo) / (hi - lo)
    return volume.with_data(unit**gamma * (hi - lo) + lo)


def random_gamma(volume: Volume3D, cfg: AugmentConfig, stream: np.random.Generator) -> Volume3D:
    if volume.kind is Kind.MASK:
        raise ContractError("gamma correction is never applied to masks")
    return adjust_gamma(volume, float(stream.uniform(*cfg.gamma_range)))


def random_noise(volume: Volume3D, cfg: AugmentConfig, stream: np.random.Generator) -> Volume3D:
    if volume.kind is Kind.MASK:
        raise ContractError("noise is never added to masks")
    noise = stream.normal(cfg.noise_mean, cfg.noise_sigma, size=volume.shape)
    return volume.with_data(volume.data + noise)


def augment_sample(
    pet: Volume3D,
    ct: Volume3D,
    mask: Volume3D,
    cfg: AugmentConfig,
    epoch: int = 0,
    index: int = 0,
) -> tuple[Volume3D, Volume3D, Volume3D]:
    """All seven randomized transforms, in the order patch, affine, elastic, gamma, noise."""

    def stream(*keys):
        return make_stream(cfg.seed, epoch, index, *keys)

    vols = random_patch((pet, ct, mask), cfg, stream(PATCH))
    vols = random_affine(vols, cfg, stream(AFFINE))
    pet, ct, mask = random_elastic(vols, cfg, stream(ELASTIC))
    channels = {"pet": pet, "ct": ct}
    for i, name in enumerate(("pet", "ct")):
        if name in cfg.intensity_channels:
            channels[name] = random_gamma(channels[name], cfg, stream(GAMMA, i))
    for i, name in enumerate(("pet", "ct")):
        if name in cfg.intensity_channels:
            channels[name] = random_noise(channels[name], cfg, stream(NOISE, i))
    return channels["pet"], channels["ct"], mask
