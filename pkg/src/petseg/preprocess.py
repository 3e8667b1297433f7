"""Deterministic (non-randomized) preprocessing of PET/CT/mask triples."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, GeometryError
from .volume import Kind, PatchRegion, Volume3D, crop, require_same_geometry

log = logging.getLogger(__name__)

F18_HALF_LIFE_S = 6586.2
CT_CLIP = (-1024.0, 1024.0)
BODY_CT_THRESHOLD = -800.0
BODY_SUV_THRESHOLD = 0.1


@dataclass(frozen=True)
class SuvParams:
    injected_dose: float  # Bq
    patient_weight: float  # g
    delay_seconds: float
    half_life_seconds: float = F18_HALF_LIFE_S

    def __post_init__(self):
        if not self.injected_dose > 0:
            raise ContractError(f"injected dose must be positive, got {self.injected_dose}")
        if not self.patient_weight > 0:
            raise ContractError(f"patient weight must be positive, got {self.patient_weight}")
        if not self.half_life_seconds > 0:
            raise ContractError(f"half-life must be positive, got {self.half_life_seconds}")
        if self.delay_seconds < 0:
            raise ContractError(f"delay must be non-negative, got {self.delay_seconds}")

    @property
    def decayed_dose(self) -> float:
        return self.injected_dose * 2.0 ** (-self.delay_seconds / self.half_life_seconds)

    _SIDECAR_KEYS = {
        "dose_bq": "injected_dose",
        "weight_g": "patient_weight",
        "delay_s": "delay_seconds",
        "half_life_s": "half_life_seconds",
    }

    @classmethod
    def from_sidecar(cls, path) -> "SuvParams":
        """Parse a ``key=value`` sidecar with keys dose_bq, weight_g, delay_s[, half_life_s]."""
        from .kvconfig import read_kv

        values = read_kv(path, allowed=cls._SIDECAR_KEYS)
        missing = {"dose_bq", "weight_g", "delay_s"} - set(values)
        if missing:
            raise ContractError(f"{path}: missing keys {sorted(missing)}")
        return cls(**{cls._SIDECAR_KEYS[k]: float(v) for k, v in values.items()})


def to_suv(activity: Volume3D, params: SuvParams) -> Volume3D:
    """Body-weight SUV: activity (Bq/ml) * weight (g) / decay-corrected dose (Bq)."""
    if activity.kind not in (Kind.RAW, Kind.PET_SUV):
        raise ContractError(f"expected a PET activity volume, got kind {activity.kind.value}")
    factor = params.patient_weight / params.decayed_dose
    return activity.with_data(activity.data.astype(np.float64) * factor, Kind.PET_SUV)


def clip_ct(ct: Volume3D, bounds=CT_CLIP) -> Volume3D:
    if ct.kind not in (Kind.CT_HU, Kind.RAW):
        raise ContractError(f"expected a CT volume, got kind {ct.kind.value}")
    return ct.with_data(np.clip(ct.data, *bounds), Kind.CT_HU)


def minmax_normalize(ct: Volume3D, bounds=CT_CLIP) -> Volume3D:
    """Map the fixed clip interval onto [0, 1]; not the per-image extrema."""
    lo, hi = bounds
    data = ct.data.astype(np.float64)
    if data.min() < lo or data.max() > hi:
        raise ContractError(f"CT values must be clipped to [{lo}, {hi}] before normalization")
    return ct.with_data((data - lo) / (hi - lo), Kind.CT_HU)


def body_bounding_box(
    pet: Volume3D,
    ct: Volume3D,
    ct_threshold: float = BODY_CT_THRESHOLD,
    suv_threshold: float = BODY_SUV_THRESHOLD,
) -> tuple[PatchRegion, bool]:
    """Tightest box around voxels with CT above ``ct_threshold`` HU or SUV above ``suv_threshold``.

    Returns ``(region, warning)``; ``warning`` is True when nothing passed either
    threshold and the whole volume is returned.
    """
    require_same_geometry(pet, ct)
    body = (ct.data > ct_threshold) | (pet.data > suv_threshold)
    if not body.any():
        log.warning("no voxel above body thresholds; keeping the whole volume")
        return PatchRegion.full(pet.shape), True
    start, size = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hits = np.flatnonzero(body.any(axis=other))
        start.append(int(hits[0]))
        size.append(int(hits[-1] - hits[0] + 1))
    return PatchRegion(tuple(start), tuple(size)), False


class Interp(str, enum.Enum):
    TRILINEAR = "trilinear"
    NEAREST = "nearest"


def interp_axis(data: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    """1D linear interpolation of ``data`` along ``axis`` at fractional indices, edge-clamped."""
    n = data.shape[axis]
    coords = np.clip(coords, 0, n - 1)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    frac = coords - lo
    shape = [1, 1, 1]
    shape[axis] = -1
    frac = frac.reshape(shape)
    a = np.take(data, lo, axis=axis)
    b = np.take(data, hi, axis=axis)
    return a + (b - a) * frac


def _nearest_index(coords: np.ndarray, n: int) -> np.ndarray:
    # round half up, so ties resolve identically on every platform
    return np.clip(np.floor(coords + 0.5), 0, n - 1).astype(np.intp)


def _sample(volume: Volume3D, coords: list[np.ndarray], mode: Interp) -> np.ndarray:
    """Sample ``volume`` on the separable grid given by per-axis fractional indices."""
    mode = Interp(mode)
    if mode is Interp.NEAREST:
        idx = [_nearest_index(c, n) for c, n in zip(coords, volume.shape)]
        return volume.data[np.ix_(*idx)]
    if volume.kind is Kind.MASK:
        raise ContractError("MASK volumes must be resampled with NEAREST interpolation")
    out = volume.data.astype(np.float64)
    for axis in range(3):
        out = interp_axis(out, coords[axis], axis)
    return out


def resample(volume: Volume3D, target_spacing, mode: Interp | str = Interp.TRILINEAR) -> Volume3D:
    """Resample onto a grid with ``target_spacing`` sharing the same origin and direction.

    Output shape is ``ceil(shape * spacing / target_spacing)``; samples past the
    input extent take the nearest edge value.
    """
    mode = Interp(mode)
    if volume.kind is Kind.MASK and mode is not Interp.NEAREST:
        raise ContractError("MASK volumes must be resampled with NEAREST interpolation")
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or min(target) <= 0:
        raise GeometryError(f"target spacing must be 3 positive values, got {target_spacing}")
    shape = []
    for n, s, t in zip(volume.shape, volume.spacing, target):
        # guard against 192.00000000001 -> 193
        shape.append(max(1, math.ceil(round(n * s / t, 9))))
    coords = [np.arange(m) * (t / s) for m, s, t in zip(shape, volume.spacing, target)]
    data = _sample(volume, coords, mode)
    return Volume3D(data, target, volume.origin, volume.kind, volume.direction)


def resample_to_grid(volume: Volume3D, reference: Volume3D, mode: Interp | str) -> Volume3D:
    """Sample ``volume`` at the world positions of ``reference``'s voxels."""
    mode = Interp(mode)
    coords = []
    for axis in range(3):
        world = reference.world_coordinates(axis)
        idx = (world - volume.origin[axis]) / (volume.direction[axis] * volume.spacing[axis])
        coords.append(idx)
    data = _sample(volume, coords, mode)
    return Volume3D(data, reference.spacing, reference.origin, volume.kind, reference.direction)


def resample_to_reference(pred: Volume3D, reference: Volume3D) -> Volume3D:
    """Nearest-neighbour resampling of a binary prediction onto ``reference``'s grid."""
    if pred.kind is not Kind.MASK:
        raise ContractError(f"expected a MASK prediction, got kind {pred.kind.value}")
    return resample_to_grid(pred, reference, Interp.NEAREST)


@dataclass(frozen=True)
class PreprocessResult:
    pet: Volume3D
    ct: Volume3D
    mask: Volume3D | None
    body_box: PatchRegion
    box_warning: bool


def preprocess_case(
    pet: Volume3D,
    ct: Volume3D,
    mask: Volume3D | None = None,
    suv: SuvParams | None = None,
    target_spacing=(2.0, 2.0, 2.0),
    ct_threshold: float = BODY_CT_THRESHOLD,
    suv_threshold: float = BODY_SUV_THRESHOLD,
) -> PreprocessResult:
    """Run the full non-randomized chain on one case.

    CT is first brought onto the PET grid, PET is converted to SUV when
    ``suv`` is given, then clip, normalize, body crop and isotropic resampling
    follow in that order. The body box is found on the clipped HU values.
    """
    if not ct.same_geometry(pet):
        ct = resample_to_grid(ct, pet, Interp.TRILINEAR)
    if mask is not None and not mask.same_geometry(pet):
        mask = resample_to_grid(mask, pet, Interp.NEAREST)
    if suv is not None:
        pet = to_suv(pet, suv)
    elif pet.kind is Kind.RAW:
        pet = pet.with_data(pet.data, Kind.PET_SUV)
    ct = clip_ct(ct)
    box, warning = body_bounding_box(pet, ct, ct_threshold, suv_threshold)
    ct = minmax_normalize(ct)

    pet = resample(crop(pet, box), target_spacing, Interp.TRILINEAR)
    ct = resample(crop(ct, box), target_spacing, Interp.TRILINEAR)
    if mask is not None:
        mask = resample(crop(mask, box), target_spacing, Interp.NEAREST)
    return PreprocessResult(pet, ct, mask, box, warning)


def load_suv_params(path: str | Path | None) -> SuvParams | None:
    return None if path is None else SuvParams.from_sidecar(path)
