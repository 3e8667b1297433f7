"""Cohort-stratified k-fold assignment.

Each cohort is shuffled and dealt into folds on its own; fold ``f`` of the
dataset is the union of fold ``f`` of every cohort.
"""

from __future__ import annotations

import csv
import logging
import warnings
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError

log = logging.getLogger(__name__)

COHORTS = ("lymphoma", "lung_cancer", "melanoma", "negative")


@dataclass(frozen=True)
class Cohort:
    name: str
    case_ids: tuple
    patient_ids: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "case_ids", tuple(str(c) for c in self.case_ids))
        if self.patient_ids is not None:
            object.__setattr__(self, "patient_ids", tuple(str(p) for p in self.patient_ids))
            if len(self.patient_ids) != len(self.case_ids):
                raise ContractError(f"cohort {self.name}: {len(self.case_ids)} cases but {len(self.patient_ids)} patient ids")


def _groups(cohort: Cohort, per_patient: bool) -> list[list[str]]:
    if not per_patient or cohort.patient_ids is None:
        return [[c] for c in cohort.case_ids]
    groups: OrderedDict[str, list[str]] = OrderedDict()
    for case, patient in zip(cohort.case_ids, cohort.patient_ids):
        groups.setdefault(patient, []).append(case)
    return list(groups.values())


def stratified_split(
    cohorts: Sequence[Cohort],
    k: int = 5,
    seed: int = 0,
    per_patient: bool = True,
) -> dict[str, int]:
    """Map every case id to a fold in ``0..k-1``.

    Within a cohort, groups (one per patient, or one per case in per-image
    mode) are shuffled, ordered largest first with a stable sort, and each is
    given to the fold holding the fewest cases so far (lowest index on ties).
    With single-case groups this is a plain round-robin deal starting at fold 0.
    """
    if k < 2:
        raise ContractError(f"k must be at least 2, got {k}")
    if not cohorts or any(len(c.case_ids) == 0 for c in cohorts):
        raise ContractError("every cohort must contain at least one case")
    all_cases = [c for cohort in cohorts for c in cohort.case_ids]
    if len(set(all_cases)) != len(all_cases):
        raise ContractError("case ids must be unique across the dataset")
    if per_patient:
        owner = {}
        for cohort in cohorts:
            for p in set(cohort.patient_ids or ()):
                if owner.setdefault(p, cohort.name) != cohort.name:
                    raise ContractError(f"patient {p!r} appears in cohorts {owner[p]!r} and {cohort.name!r}")
    smallest = min(len(c.case_ids) for c in cohorts)
    if k > smallest:
        warnings.warn(f"k={k} exceeds the smallest cohort size {smallest}; some folds miss that cohort", stacklevel=2)

    assignment: dict[str, int] = {}
    for index, cohort in enumerate(cohorts):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), index])))
        groups = _groups(cohort, per_patient)
        shuffled = [groups[i] for i in rng.permutation(len(groups))]
        shuffled.sort(key=len, reverse=True)
        sizes = [0] * k
        for group in shuffled:
            fold = sizes.index(min(sizes))
            sizes[fold] += len(group)
            for case in group:
                assignment[case] = fold
    return assignment


def fold_sizes(assignment: dict[str, int], k: int = 5) -> list[int]:
    return [sum(1 for f in assignment.values() if f == i) for i in range(k)]


def read_cases_csv(path) -> list[Cohort]:
    """Read ``case_id,patient_id,cohort`` rows into cohorts (in order of first appearance)."""
    cases: OrderedDict[str, tuple[list, list]] = OrderedDict()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"case_id", "cohort"} - set(reader.fieldnames or ())
        if missing:
            raise ContractError(f"{path}: missing columns {sorted(missing)}")
        has_patient = "patient_id" in (reader.fieldnames or ())
        for row in reader:
            ids, patients = cases.setdefault(row["cohort"].strip(), ([], []))
            ids.append(row["case_id"].strip())
            patients.append(row["patient_id"].strip() if has_patient and row["patient_id"] else row["case_id"].strip())
    return [Cohort(name, tuple(ids), tuple(p)) for name, (ids, p) in cases.items()]


def write_folds_csv(assignment: dict[str, int], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["case_id", "fold"])
        for case, fold in assignment.items():
            writer.writerow([case, fold])
