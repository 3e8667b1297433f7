"""Synthetic whole-body PET/CT phantom with planted spherical lesions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .preprocess import SuvParams
from .volume import Kind, Volume3D

DEFAULT_SUV = SuvParams(injected_dose=3.7e8, patient_weight=70000.0, delay_seconds=3600.0)


@dataclass(frozen=True)
class Phantom:
    pet_activity: Volume3D  # Bq/ml, kind RAW
    ct: Volume3D  # HU
    lesions: Volume3D  # MASK
    suv: SuvParams


def make_phantom(
    shape=(64, 64, 160),
    spacing=(4.0, 4.0, 3.0),
    origin=(-126.0, -126.0, -200.0),
    lesions=((0.30, 0.0, 0.25, 14.0), (-0.25, 0.2, 0.55, 11.0), (0.0, -0.3, 0.8, 16.0)),
    background_suv: float = 1.0,
    lesion_suv: float = 8.0,
    suv: SuvParams = DEFAULT_SUV,
) -> Phantom:
    """Elliptic soft-tissue cylinder in air with hot spheres.

    ``lesions`` holds ``(x, y, z, radius_mm)`` with x, y as fractions of the
    body semi-axes (centred) and z as a fraction of the axial extent.
    """
    nx, ny, nz = shape
    sx, sy, sz = spacing
    x = (np.arange(nx) - (nx - 1) / 2) * sx
    y = (np.arange(ny) - (ny - 1) / 2) * sy
    z = np.arange(nz) * sz
    X, Y, Z = np.meshgrid(x, y, z, indexing="ij")
    ax, ay = 0.42 * nx * sx, 0.36 * ny * sy
    body = (X / ax) ** 2 + (Y / ay) ** 2 <= 1.0
    body &= (Z >= 0.05 * nz * sz) & (Z <= 0.95 * nz * sz)

    mask = np.zeros(shape, dtype=np.uint8)
    for fx, fy, fz, radius in lesions:
        cx, cy, cz = fx * ax, fy * ay, fz * nz * sz
        sphere = (X - cx) ** 2 + (Y - cy) ** 2 + (Z - cz) ** 2 <= radius**2
        mask[sphere & body] = 1

    ct = np.where(body, 40.0, -1000.0)
    suv_map = np.where(body, background_suv, 0.0)
    suv_map = np.where(mask == 1, lesion_suv, suv_map)
    activity = suv_map * suv.decayed_dose / suv.patient_weight
    return Phantom(
        Volume3D(activity, spacing, origin, Kind.RAW),
        Volume3D(ct, spacing, origin, Kind.CT_HU),
        Volume3D(mask, spacing, origin, Kind.MASK),
        suv,
    )
