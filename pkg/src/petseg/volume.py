"""3D scalar grids with physical geometry.

Arrays are indexed ``data[x, y, z]``. The linear (on-disk) order is x-fastest,
i.e. ``data.ravel(order="F")``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import BoundsError, ContractError, GeometryError


class Kind(str, enum.Enum):
    CT_HU = "ct_hu"
    PET_SUV = "pet_suv"
    MASK = "mask"
    PROB = "prob"
    RAW = "raw"


_FLOAT_KINDS = (Kind.CT_HU, Kind.PET_SUV, Kind.PROB)


def _as_triple(values, name, cast=float) -> tuple:
    values = tuple(cast(v) for v in values)
    if len(values) != 3:
        raise GeometryError(f"{name} must have 3 components, got {len(values)}")
    return values


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Immutable 3D grid.

    ``direction`` holds the sign (+1/-1) of each voxel axis in world space; only
    axis-aligned grids are representable. World position of voxel ``i`` along
    axis ``a`` is ``origin[a] + direction[a] * spacing[a] * i``.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    kind: Kind = Kind.RAW
    direction: tuple = (1, 1, 1)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise GeometryError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        kind = Kind(self.kind)
        spacing = _as_triple(self.spacing, "spacing")
        if not all(s > 0 and np.isfinite(s) for s in spacing):
            raise GeometryError(f"spacing components must be strictly positive, got {spacing}")
        origin = _as_triple(self.origin, "origin")
        direction = _as_triple(self.direction, "direction", int)
        if any(d not in (-1, 1) for d in direction):
            raise GeometryError(f"direction entries must be +1 or -1, got {direction}")

        if kind is Kind.MASK:
            if not np.isin(data, (0, 1)).all():
                raise ContractError("MASK volume values must be 0 or 1")
            data = data.astype(np.uint8, copy=True)
        elif kind in _FLOAT_KINDS:
            data = data.astype(np.float32, copy=True)
            if kind is Kind.PROB and data.size and (np.nanmin(data) < 0 or np.nanmax(data) > 1):
                raise ContractError("PROB volume values must lie in [0, 1]")
        else:
            dtype = np.float64 if data.dtype == np.float64 else np.float32
            data = data.astype(dtype, copy=True)
        data.setflags(write=False)

        object.__setattr__(self, "data", data)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    @property
    def shape(self) -> tuple:
        return tuple(int(n) for n in self.data.shape)

    def linear(self) -> np.ndarray:
        """Voxel values in x-fastest linear order."""
        return self.data.ravel(order="F")

    def with_data(self, data, kind: Kind | None = None) -> "Volume3D":
        """Same geometry, new voxel values."""
        data = np.asarray(data)
        if data.shape != self.data.shape:
            raise GeometryError(f"data shape {data.shape} does not match volume shape {self.shape}")
        return Volume3D(data, self.spacing, self.origin, kind or self.kind, self.direction)

    def same_geometry(self, other: "Volume3D", atol: float = 1e-4) -> bool:
        return (
            self.shape == other.shape
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=atol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=atol)
            and self.direction == other.direction
        )

    def world_coordinates(self, axis: int) -> np.ndarray:
        idx = np.arange(self.shape[axis], dtype=np.float64)
        return self.origin[axis] + self.direction[axis] * self.spacing[axis] * idx

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.spacing == other.spacing
            and self.origin == other.origin
            and self.direction == other.direction
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


@dataclass(frozen=True)
class PatchRegion:
    start: tuple
    size: tuple

    def __post_init__(self):
        start = _as_triple(self.start, "start", int)
        size = _as_triple(self.size, "size", int)
        if any(s < 0 for s in start):
            raise BoundsError(f"region start must be non-negative, got {start}")
        if any(s < 1 for s in size):
            raise BoundsError(f"region size must be positive, got {size}")
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "size", size)

    @property
    def stop(self) -> tuple:
        return tuple(a + b for a, b in zip(self.start, self.size))

    @property
    def slices(self) -> tuple:
        return tuple(slice(a, b) for a, b in zip(self.start, self.stop))

    def fits(self, shape: Sequence[int]) -> bool:
        return all(b <= n for b, n in zip(self.stop, shape))

    @classmethod
    def full(cls, shape: Sequence[int]) -> "PatchRegion":
        return cls((0, 0, 0), tuple(shape))


def voxel_volume_ml(spacing) -> float:
    """Volume of one voxel in millilitres (1 ml = 1000 mm^3)."""
    sx, sy, sz = _as_triple(spacing, "spacing")
    if min(sx, sy, sz) <= 0:
        raise GeometryError(f"spacing components must be strictly positive, got {(sx, sy, sz)}")
    return sx * sy * sz / 1000.0


def crop(volume: Volume3D, region: PatchRegion) -> Volume3D:
    if not region.fits(volume.shape):
        raise BoundsError(f"region {region} exceeds volume shape {volume.shape}")
    origin = tuple(
        o + d * s * i
        for o, d, s, i in zip(volume.origin, volume.direction, volume.spacing, region.start)
    )
    return Volume3D(volume.data[region.slices], volume.spacing, origin, volume.kind, volume.direction)


def concat_channels(a: Volume3D, b: Volume3D) -> np.ndarray:
    """Stack two co-registered volumes into a ``(2, nx, ny, nz)`` float32 array."""
    if a.shape != b.shape:
        raise GeometryError(f"channel shapes differ: {a.shape} vs {b.shape}")
    if not np.allclose(a.spacing, b.spacing, rtol=0, atol=1e-6):
        raise GeometryError(f"channel spacings differ: {a.spacing} vs {b.spacing}")
    return np.stack([a.data, b.data]).astype(np.float32)


def require_same_geometry(*volumes: Volume3D) -> None:
    first = volumes[0]
    for other in volumes[1:]:
        if not first.same_geometry(other):
            raise GeometryError(
                f"geometry mismatch: shape {first.shape} spacing {first.spacing} origin {first.origin}"
                f" vs shape {other.shape} spacing {other.spacing} origin {other.origin}"
            )
