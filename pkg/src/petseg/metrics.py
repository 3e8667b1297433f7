"""Lesion-level evaluation: connected components, DSC, false positive / negative volume, ranking."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import ContractError, GeometryError
from .volume import Kind, Volume3D, voxel_volume_ml

log = logging.getLogger(__name__)

DEFAULT_CONNECTIVITY = 18
_STRUCTURE_RANK = {6: 1, 18: 2, 26: 3}


@dataclass(frozen=True)
class ComponentLabeling:
    labels: np.ndarray  # 0 = background, 1..K
    counts: np.ndarray  # counts[k - 1] = voxels in component k
    connectivity: int

    @property
    def num_components(self) -> int:
        return len(self.counts)


@dataclass(frozen=True)
class LesionMetrics:
    dsc: float
    fpv_ml: float
    fnv_ml: float


def _binary(mask) -> np.ndarray:
    data = mask.data if isinstance(mask, Volume3D) else np.asarray(mask)
    if isinstance(mask, Volume3D) and mask.kind is not Kind.MASK:
        raise ContractError(f"expected a MASK volume, got kind {mask.kind.value}")
    if not np.isin(data, (0, 1)).all():
        raise ContractError("mask must be binary")
    return data.astype(bool)


def connected_components(mask, connectivity: int = DEFAULT_CONNECTIVITY) -> ComponentLabeling:
    """Label foreground components of a binary mask (``Volume3D`` or 3D array).

    Labels are numbered in order of each component's first voxel in an
    x-fastest scan.
    """
    if connectivity not in _STRUCTURE_RANK:
        raise ContractError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    fg = _binary(mask)
    structure = ndimage.generate_binary_structure(3, _STRUCTURE_RANK[connectivity])
    labels, k = ndimage.label(fg, structure=structure)
    if k == 0:
        return ComponentLabeling(labels.astype(np.int32), np.zeros(0, dtype=np.int64), connectivity)

    flat = labels.ravel(order="F")
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    ids, first = ids[keep], first[keep]
    remap = np.zeros(k + 1, dtype=np.int32)
    remap[ids[np.argsort(first, kind="stable")]] = np.arange(1, k + 1, dtype=np.int32)
    labels = remap[labels]
    counts = np.bincount(labels.ravel(), minlength=k + 1)[1:]
    return ComponentLabeling(labels, counts, connectivity)


def _check_pair(gt: Volume3D, pred: Volume3D) -> None:
    if gt.shape != pred.shape:
        raise GeometryError(f"mask shapes differ: {gt.shape} vs {pred.shape}")
    if not np.allclose(gt.spacing, pred.spacing, rtol=1e-6, atol=0):
        raise GeometryError(f"mask spacings differ: {gt.spacing} vs {pred.spacing}")


def dice(gt: np.ndarray, pred: np.ndarray) -> float:
    """Dice of two boolean arrays; two empty masks score 1.0."""
    total = int(gt.sum()) + int(pred.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(gt, pred).sum()) / total


def dsc(gt: Volume3D, pred: Volume3D) -> float:
    _check_pair(gt, pred)
    return dice(_binary(gt), _binary(pred))


def _missed_voxels(source: np.ndarray, other: np.ndarray, connectivity: int) -> int:
    """Voxels of ``source`` components that do not touch ``other`` at all."""
    comp = connected_components(source, connectivity)
    if comp.num_components == 0:
        return 0
    hit = np.bincount(comp.labels[other], minlength=comp.num_components + 1)[1:]
    return int(comp.counts[hit == 0].sum())


def fpv(gt: Volume3D, pred: Volume3D, connectivity: int = DEFAULT_CONNECTIVITY) -> float:
    """Volume (ml) of predicted components with no overlap with the ground truth."""
    _check_pair(gt, pred)
    return _missed_voxels(_binary(pred), _binary(gt), connectivity) * voxel_volume_ml(pred.spacing)


def fnv(gt: Volume3D, pred: Volume3D, connectivity: int = DEFAULT_CONNECTIVITY) -> float:
    """Volume (ml) of ground-truth components with no overlap with the prediction."""
    _check_pair(gt, pred)
    return _missed_voxels(_binary(gt), _binary(pred), connectivity) * voxel_volume_ml(gt.spacing)


def evaluate_case(gt: Volume3D, pred: Volume3D, connectivity: int = DEFAULT_CONNECTIVITY) -> LesionMetrics:
    return LesionMetrics(dsc(gt, pred), fpv(gt, pred, connectivity), fnv(gt, pred, connectivity))


def mean_metrics(rows: Sequence[LesionMetrics]) -> LesionMetrics:
    if not rows:
        raise ContractError("cannot average an empty set of metrics")
    return LesionMetrics(
        float(np.mean([r.dsc for r in rows])),
        float(np.mean([r.fpv_ml for r in rows])),
        float(np.mean([r.fnv_ml for r in rows])),
    )


RANK_WEIGHTS = {"dsc": 0.5, "fpv": 0.25, "fnv": 0.25}


@dataclass(frozen=True)
class RankRow:
    name: str
    dsc: float
    fpv_ml: float
    fnv_ml: float
    rank_dsc: float
    rank_fpv: float
    rank_fnv: float
    score: float


def rank_aggregate(tables: Mapping[str, LesionMetrics]) -> list[RankRow]:
    """Rank algorithms per metric (1 = best, ties get the mean rank) and combine.

    Score is ``0.5 * rank_dsc + 0.25 * rank_fpv + 0.25 * rank_fnv``; rows are
    returned best first, ties kept in input order.
    """
    if len(tables) < 2:
        raise ContractError("ranking needs at least two algorithms")
    names = list(tables)
    values = {}
    for attr in ("dsc", "fpv_ml", "fnv_ml"):
        col = []
        for name in names:
            v = getattr(tables[name], attr, None)
            if v is None or not np.isfinite(v):
                raise ContractError(f"algorithm {name!r} is missing a finite {attr}")
            col.append(float(v))
        values[attr] = np.array(col)
    r_dsc = rankdata(-values["dsc"], method="average")
    r_fpv = rankdata(values["fpv_ml"], method="average")
    r_fnv = rankdata(values["fnv_ml"], method="average")
    score = RANK_WEIGHTS["dsc"] * r_dsc + RANK_WEIGHTS["fpv"] * r_fpv + RANK_WEIGHTS["fnv"] * r_fnv
    rows = [
        RankRow(
            n,
            *(float(values[a][i]) for a in ("dsc", "fpv_ml", "fnv_ml")),
            float(r_dsc[i]),
            float(r_fpv[i]),
            float(r_fnv[i]),
            float(score[i]),
        )
        for i, n in enumerate(names)
    ]
    return sorted(rows, key=lambda r: r.score)
