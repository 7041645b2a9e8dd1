"""Deterministic patient-grouped, class-stratified fold assignment.

Patients are the assignment unit so no patient's images leak across folds.
Stratification targets the nine-class diagnosis distribution: patients are
processed largest-first and each goes to the fold currently least loaded
with respect to the patient's own class counts. Ties are broken by a seeded
64-bit mix of the patient id, which makes assignments reproducible across
runs and platforms while still varying with the seed.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import IO

import numpy as np

from .datamodel import Dataset, _as_line_iter
from .errors import CoverageError, DomainError, FormatError, UniquenessError
from .hashing import MASK64, fnv1a64, splitmix64
from .targets import TargetScheme, map_diagnosis

N_STRATA = TargetScheme.NINE_CLASS.class_count

DEFAULT_FOLDS = 5
DEFAULT_SEED = 42


@dataclass(frozen=True)
class FoldAssignment:
    """Image -> fold map for a k-fold split.

    Every image of the source dataset appears exactly once, and all images
    of one patient share a fold. ``seed`` is None for assignments read back
    from CSV, where the generating seed is unknown.
    """

    k: int
    assignment: dict[str, int]
    seed: int | None

    def fold_of(self, image_name: str) -> int:
        return self.assignment[image_name]

    def __len__(self) -> int:
        return len(self.assignment)


@dataclass(frozen=True)
class FoldStats:
    size: int
    positives: int

    @property
    def positive_ratio(self) -> float:
        return self.positives / self.size if self.size else 0.0


@dataclass(frozen=True)
class FoldRatioReport:
    per_fold: tuple[FoldStats, ...]
    total: FoldStats


def assign_folds(d: Dataset, k: int, seed: int) -> FoldAssignment:
    """Split a dataset into k patient-grouped, class-stratified folds.

    Patients are sorted by descending image count, then by descending
    per-class count signature, then by patient_id, and greedily placed on
    the fold with the smallest dot product between the fold's current class
    counts and the patient's class counts. Tied folds are resolved with
    ``splitmix64(seed ^ fnv1a64(patient_id))``, so the result is a pure
    function of (dataset, k, seed).
    """
    if k < 2:
        raise DomainError(f"fold count must be at least 2, got {k}")
    if not d.records:
        raise DomainError("cannot assign folds on an empty dataset")
    # Fewer patients than folds is allowed; the surplus folds stay empty.
    patients = d.by_patient

    class_counts: dict[str, np.ndarray] = {}
    for pid, positions in patients.items():
        counts = np.zeros(N_STRATA, dtype=np.int64)
        for pos in positions:
            counts[map_diagnosis(d.records[pos].diagnosis).value] += 1
        class_counts[pid] = counts

    order = sorted(
        patients,
        key=lambda pid: (
            -int(class_counts[pid].sum()),
            tuple(-c for c in class_counts[pid].tolist()),
            pid,
        ),
    )

    seed64 = seed & MASK64
    fold_counts = np.zeros((k, N_STRATA), dtype=np.int64)
    patient_fold: dict[str, int] = {}
    for pid in order:
        v = class_counts[pid]
        loads = fold_counts @ v
        tied = np.flatnonzero(loads == loads.min())
        if tied.size == 1:
            fold = int(tied[0])
        else:
            draw = splitmix64(seed64 ^ fnv1a64(pid.encode("utf-8")))
            fold = int(tied[draw % tied.size])
        fold_counts[fold] += v
        patient_fold[pid] = fold

    assignment = {r.image_name: patient_fold[r.patient_id] for r in d.records}
    return FoldAssignment(k=k, assignment=assignment, seed=seed)


def fold_ratio_report(d: Dataset, f: FoldAssignment) -> FoldRatioReport:
    """Exact per-fold sizes and positive ratios, plus the global ones."""
    sizes = [0] * f.k
    positives = [0] * f.k
    for r in d.records:
        fold = f.assignment.get(r.image_name)
        if fold is None:
            raise CoverageError(
                f"image {r.image_name!r} has no fold assignment"
            )
        sizes[fold] += 1
        positives[fold] += int(r.is_positive)
    per_fold = tuple(FoldStats(s, p) for s, p in zip(sizes, positives))
    total = FoldStats(sum(sizes), sum(positives))
    return FoldRatioReport(per_fold=per_fold, total=total)


def write_folds_csv(d: Dataset, f: FoldAssignment) -> str:
    """Serialize an assignment in dataset record order (header
    ``image_name,fold``)."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["image_name", "fold"])
    for r in d.records:
        fold = f.assignment.get(r.image_name)
        if fold is None:
            raise CoverageError(f"image {r.image_name!r} has no fold assignment")
        writer.writerow([r.image_name, str(fold)])
    return out.getvalue()


def read_folds_csv(stream: str | IO[str]) -> FoldAssignment:
    """Parse a folds CSV; k is inferred as max fold index + 1."""
    reader = csv.reader(_as_line_iter(stream))
    header = next(reader, None)
    if header is None:
        raise FormatError("empty folds stream: no header row")
    if header != ["image_name", "fold"]:
        raise FormatError(f"unrecognized folds header: {','.join(header)}")
    assignment: dict[str, int] = {}
    for row_num, row in enumerate(reader, start=1):
        if not row:
            continue
        if len(row) != 2:
            raise FormatError(f"row {row_num}: expected 2 fields, got {len(row)}")
        name, fold_cell = row
        if name in assignment:
            raise UniquenessError(f"duplicate image_name {name!r} in folds CSV")
        try:
            fold = int(fold_cell)
        except ValueError:
            raise FormatError(f"row {row_num}: non-integer fold {fold_cell!r}") from None
        if fold < 0:
            raise FormatError(f"row {row_num}: negative fold {fold}")
        assignment[name] = fold
    if not assignment:
        raise FormatError("folds CSV contains no data rows")
    return FoldAssignment(k=max(assignment.values()) + 1, assignment=assignment, seed=None)
