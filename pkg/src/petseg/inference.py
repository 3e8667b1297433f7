"""Sliding-window inference around a black-box patch predictor, plus ensembling.

A predictor maps a ``(2, wx, wy, wz)`` float32 patch (PET, CT) to two-channel
logits of the same shape. Foreground probability is ``sigmoid(z1 - z0)``.
"""

from __future__ import annotations

import enum
import logging
import os
import shlex
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nifti
from .errors import ContractError, PetsegError
from .train import foreground_probability
from .volume import Kind, PatchRegion, Volume3D, concat_channels, require_same_geometry

log = logging.getLogger(__name__)

Predictor = Callable[[np.ndarray], np.ndarray]

DEFAULT_WINDOW = 192
DEFAULT_OVERLAP = 0.5


class Blend(str, enum.Enum):
    CONSTANT = "constant"
    GAUSSIAN = "gaussian"


def axis_starts(size: int, window: int, stride: int) -> list[int]:
    """Window starts along one axis; the last window is pulled back to end at ``size``."""
    if size <= window:
        return [0]
    starts, s = [], 0
    while True:
        starts.append(s)
        if s + window >= size:
            break
        s = min(s + stride, size - window)
    return starts


@dataclass(frozen=True)
class WindowPlan:
    shape: tuple  # original volume shape
    padded_shape: tuple
    pad_before: tuple
    window: tuple
    stride: tuple
    regions: tuple  # PatchRegions in the padded volume, x-fastest order

    def __len__(self):
        return len(self.regions)


def plan_windows(shape, window=DEFAULT_WINDOW, overlap: float = DEFAULT_OVERLAP) -> WindowPlan:
    """Tile ``shape`` with windows at stride ``round(window * (1 - overlap))``.

    Axes shorter than the window are zero-padded (symmetrically) up to the
    window size.
    """
    shape = tuple(int(n) for n in shape)
    window = (int(window),) * 3 if np.isscalar(window) else tuple(int(w) for w in window)
    if min(window) < 1:
        raise ContractError(f"window must be at least 1, got {window}")
    if not 0 <= overlap < 1:
        raise ContractError(f"overlap must be in [0, 1), got {overlap}")
    stride = tuple(max(1, int(round(w * (1 - overlap)))) for w in window)
    padded = tuple(max(n, w) for n, w in zip(shape, window))
    pad_before = tuple((p - n) // 2 for p, n in zip(padded, shape))
    per_axis = [axis_starts(p, w, s) for p, w, s in zip(padded, window, stride)]
    regions = tuple(
        PatchRegion((x, y, z), window)
        for z in per_axis[2]
        for y in per_axis[1]
        for x in per_axis[0]
    )
    return WindowPlan(shape, padded, pad_before, window, stride, regions)


def blend_weights(window, mode: Blend | str = Blend.CONSTANT) -> np.ndarray:
    """Per-voxel weight map for one window.

    GAUSSIAN uses sigma = window / 8 per axis, centred, normalized to a peak of 1
    and floored at a small positive value so border voxels still count.
    """
    mode = Blend(mode)
    window = tuple(window)
    if mode is Blend.CONSTANT:
        return np.ones(window, dtype=np.float64)
    axes = []
    for w in window:
        centre = (w - 1) / 2
        sigma = w / 8
        axes.append(np.exp(-0.5 * ((np.arange(w) - centre) / sigma) ** 2))
    weights = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    weights /= weights.max()
    return np.maximum(weights, 1e-3)


def _pad(data: np.ndarray, plan: WindowPlan) -> np.ndarray:
    after = [p - n - b for p, n, b in zip(plan.padded_shape, plan.shape, plan.pad_before)]
    return np.pad(data, [(0, 0)] + list(zip(plan.pad_before, after)))


def infer(
    pet: Volume3D,
    ct: Volume3D,
    predictor: Predictor,
    plan: WindowPlan | None = None,
    blend: Blend | str = Blend.CONSTANT,
    jobs: int = 1,
    order: Sequence[int] | None = None,
) -> Volume3D:
    """Foreground probability map from patch-wise predictions.

    Windows are evaluated in ``order`` (default: plan order, optionally on
    ``jobs`` threads) but always accumulated in plan order, so the result is
    bitwise independent of both.
    """
    require_same_geometry(pet, ct)
    if plan is None:
        plan = plan_windows(pet.shape)
    if tuple(plan.shape) != pet.shape:
        raise ContractError(f"plan was made for shape {plan.shape}, volume has {pet.shape}")
    image = _pad(concat_channels(pet, ct), plan)
    weights = blend_weights(plan.window, blend)

    def run(i: int) -> np.ndarray:
        patch = np.ascontiguousarray(image[(slice(None),) + plan.regions[i].slices])
        logits = np.asarray(predictor(patch))
        if logits.shape != patch.shape:
            raise ContractError(f"predictor returned shape {logits.shape} for a patch of shape {patch.shape}")
        return foreground_probability(logits.astype(np.float64), axis=0)

    indices = list(range(len(plan))) if order is None else [int(i) for i in order]
    if sorted(indices) != list(range(len(plan))):
        raise ContractError("order must be a permutation of the window indices")
    results: list = [None] * len(plan)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for i, prob in zip(indices, pool.map(run, indices)):
                results[i] = prob
    else:
        for i in indices:
            results[i] = run(i)

    acc = np.zeros(plan.padded_shape, dtype=np.float64)
    norm = np.zeros(plan.padded_shape, dtype=np.float64)
    for region, prob in zip(plan.regions, results):
        acc[region.slices] += prob * weights
        norm[region.slices] += weights
    prob = acc / norm
    crop = tuple(slice(b, b + n) for b, n in zip(plan.pad_before, plan.shape))
    prob = np.clip(prob[crop], 0.0, 1.0)
    return pet.with_data(prob, Kind.PROB)


def binarize(prob: Volume3D, threshold: float = 0.5) -> Volume3D:
    if not 0 < threshold < 1:
        raise ContractError(f"threshold must lie in (0, 1), got {threshold}")
    return prob.with_data((prob.data >= np.float32(threshold)).astype(np.uint8), Kind.MASK)


def ensemble(probs: Sequence[Volume3D], weights: Sequence[float] | None = None) -> Volume3D:
    """Voxelwise weighted mean of probability maps; ``weights=None`` means uniform."""
    if not probs:
        raise ContractError("nothing to ensemble")
    require_same_geometry(*probs)
    if weights is None:
        weights = [1.0] * len(probs)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(probs),):
        raise ContractError(f"expected {len(probs)} weights, got {len(w)}")
    if (w < 0).any() or not np.isfinite(w).all():
        raise ContractError("ensemble weights must be finite and non-negative")
    if w.sum() == 0:
        raise ContractError("ensemble weights must not all be zero")
    w = w / w.sum()
    acc = np.zeros(probs[0].shape, dtype=np.float64)
    for wi, p in zip(w, probs):
        acc += wi * p.data.astype(np.float64)
    return probs[0].with_data(np.clip(acc, 0.0, 1.0), Kind.PROB)


STUB_SLOPE = 10.0
STUB_SUV_THRESHOLD = 2.5


def stub_predictor(slope: float = STUB_SLOPE, suv_threshold: float = STUB_SUV_THRESHOLD) -> Predictor:
    """Threshold predictor for pipeline tests: foreground logit ``slope * (SUV - threshold)``."""

    def predict(patch: np.ndarray) -> np.ndarray:
        fg = slope * (patch[0].astype(np.float64) - suv_threshold)
        return np.stack([np.zeros_like(fg), fg])

    return predict


def constant_predictor(logit: float) -> Predictor:
    def predict(patch: np.ndarray) -> np.ndarray:
        out = np.zeros(patch.shape, dtype=np.float64)
        out[1] = logit
        return out

    return predict


class ExternalPredictor:
    """Runs a user command once per window, exchanging patches as NIfTI files.

    For each window a fresh directory is created holding ``pet.nii`` and
    ``ct.nii``; the command is run with that directory as its final argument
    and must write ``logit0.nii`` and ``logit1.nii`` (same shape) into it.
    A non-zero exit status aborts inference.
    """

    def __init__(self, command: str, spacing=(2.0, 2.0, 2.0), timeout: float | None = None):
        self.argv = shlex.split(command)
        if not self.argv:
            raise ContractError("external predictor command is empty")
        self.spacing = tuple(spacing)
        self.timeout = timeout

    def __call__(self, patch: np.ndarray) -> np.ndarray:
        with tempfile.TemporaryDirectory(prefix="petseg-patch-") as tmp:
            tmp = Path(tmp)
            nifti.save(Volume3D(patch[0], self.spacing, kind=Kind.PET_SUV), tmp / "pet.nii")
            nifti.save(Volume3D(patch[1], self.spacing, kind=Kind.CT_HU), tmp / "ct.nii")
            proc = subprocess.run(
                [*self.argv, str(tmp)], capture_output=True, text=True, timeout=self.timeout, env=os.environ.copy()
            )
            if proc.returncode != 0:
                raise PetsegError(f"external predictor failed ({proc.returncode}): {proc.stderr.strip()}")
            try:
                z0 = nifti.load(tmp / "logit0.nii").data
                z1 = nifti.load(tmp / "logit1.nii").data
            except FileNotFoundError as exc:
                raise PetsegError(f"external predictor did not write {exc.filename}") from exc
        return np.stack([z0, z1])
