"""Canonical record types and the toolkit's CSV formats.

All types are immutable after construction and safe for concurrent readers.
CSV streams are UTF-8; LF and CRLF are both accepted on read, LF is written.
Floats are written in their shortest round-trip representation, so
``parse(write(x)) == x`` holds exactly for datasets and prediction sets.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import IO, Iterable, Iterator

import numpy as np

from .errors import (
    CoverageError,
    DomainError,
    FormatError,
    RangeError,
    ShapeError,
    UniquenessError,
)
from .targets import DiagnosisClass, TargetScheme, class_index, map_diagnosis

METADATA_COLUMNS = (
    "image_name",
    "patient_id",
    "sex",
    "age_approx",
    "anatom_site_general_challenge",
    "diagnosis",
    "target",
    "source",
)
SIZE_COLUMN = "image_size_bytes"

#: Positive ratio of the newer cohort used as a sanity-check anchor.
EXPECTED_2020_POSITIVE_RATE = 0.0176

AGE_MAX = 120.0


class Sex(Enum):
    MALE = "male"
    FEMALE = "female"
    MISSING = "missing"


class BinaryTarget(Enum):
    BENIGN = 0
    MALIGNANT = 1


class SourceYear(Enum):
    Y2019 = 2019
    Y2020 = 2020


@dataclass(frozen=True, slots=True)
class SampleRecord:
    """One lesion image's metadata row."""

    image_name: str
    patient_id: str
    sex: Sex
    age_approx: float | None
    anatom_site: str | None
    diagnosis: str | None
    target_binary: BinaryTarget
    source_year: SourceYear
    image_size_bytes: int | None = None

    def __post_init__(self) -> None:
        if self.age_approx is not None and not 0.0 <= self.age_approx <= AGE_MAX:
            raise RangeError(
                f"{self.image_name}: age_approx {self.age_approx} outside [0, {AGE_MAX:g}]"
            )
        if self.image_size_bytes is not None and self.image_size_bytes <= 0:
            raise RangeError(
                f"{self.image_name}: image_size_bytes must be positive, "
                f"got {self.image_size_bytes}"
            )

    @property
    def is_positive(self) -> bool:
        return self.target_binary is BinaryTarget.MALIGNANT


@dataclass(frozen=True)
class Dataset:
    """Ordered collection of records with a patient index.

    ``by_patient`` maps each patient_id to the positions of its records, in
    record order; every record appears in the index exactly once.
    """

    records: tuple[SampleRecord, ...]
    by_patient: dict[str, tuple[int, ...]]

    @classmethod
    def from_records(cls, records: Iterable[SampleRecord]) -> "Dataset":
        recs = tuple(records)
        seen: dict[str, int] = {}
        groups: dict[str, list[int]] = {}
        for pos, rec in enumerate(recs):
            if rec.image_name in seen:
                raise UniquenessError(
                    f"duplicate image_name {rec.image_name!r} "
                    f"(rows {seen[rec.image_name] + 1} and {pos + 1})"
                )
            seen[rec.image_name] = pos
            groups.setdefault(rec.patient_id, []).append(pos)
        return cls(recs, {pid: tuple(ix) for pid, ix in groups.items()})

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[SampleRecord]:
        return iter(self.records)

    @cached_property
    def image_names(self) -> tuple[str, ...]:
        return tuple(r.image_name for r in self.records)


@dataclass(frozen=True, slots=True)
class ValidationIssue:
    image_name: str
    rule: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    errors: tuple[ValidationIssue, ...]
    warnings: tuple[ValidationIssue, ...]

    @property
    def ok(self) -> bool:
        return not self.errors


def _as_line_iter(stream: str | IO[str]) -> Iterator[str]:
    if isinstance(stream, str):
        return iter(io.StringIO(stream))
    return iter(stream)


def parse_metadata_csv(stream: str | IO[str]) -> Dataset:
    """Parse the metadata CSV format into a Dataset.

    Expected header: ``image_name,patient_id,sex,age_approx,
    anatom_site_general_challenge,diagnosis,target,source`` with an optional
    trailing ``image_size_bytes`` column. Empty cells denote missing values;
    ``target`` is 0/1 and ``source`` is 2019/2020. Records are returned in
    file order.
    """
    reader = csv.reader(_as_line_iter(stream))
    header = next(reader, None)
    if header is None:
        raise FormatError("empty metadata stream: no header row")
    expected = list(METADATA_COLUMNS)
    if header == expected:
        has_size = False
    elif header == expected + [SIZE_COLUMN]:
        has_size = True
    else:
        missing = [c for c in expected if c not in header]
        if missing:
            raise FormatError(
                "metadata header is missing column(s): " + ", ".join(missing)
            )
        raise FormatError(f"unrecognized metadata header: {','.join(header)}")
    width = len(expected) + (1 if has_size else 0)

    records = []
    for row_num, row in enumerate(reader, start=1):
        if not row:  # tolerate blank trailing lines
            continue
        if len(row) != width:
            raise FormatError(
                f"row {row_num}: expected {width} fields, got {len(row)}"
            )
        records.append(_parse_metadata_row(row, row_num, has_size))
    return Dataset.from_records(records)


def _parse_metadata_row(row: list[str], row_num: int, has_size: bool) -> SampleRecord:
    image_name, patient_id = row[0], row[1]
    if not image_name:
        raise FormatError(f"row {row_num}: empty image_name")
    if not patient_id:
        raise FormatError(f"row {row_num}: empty patient_id")

    sex_cell = row[2].strip().lower()
    if sex_cell == "":
        sex = Sex.MISSING
    elif sex_cell in ("male", "female"):
        sex = Sex(sex_cell)
    else:
        raise FormatError(f"row {row_num}: invalid sex {row[2]!r}")

    age: float | None = None
    if row[3] != "":
        try:
            age = float(row[3])
        except ValueError:
            raise FormatError(
                f"row {row_num}: non-numeric age_approx {row[3]!r}"
            ) from None
        if not 0.0 <= age <= AGE_MAX:
            raise RangeError(
                f"row {row_num}: age_approx {age:g} outside [0, {AGE_MAX:g}]"
            )

    site = row[4] if row[4] != "" else None
    diagnosis = row[5] if row[5] != "" else None

    if row[6] == "0":
        target = BinaryTarget.BENIGN
    elif row[6] == "1":
        target = BinaryTarget.MALIGNANT
    else:
        raise FormatError(f"row {row_num}: target must be 0 or 1, got {row[6]!r}")

    if row[7] == "2019":
        source = SourceYear.Y2019
    elif row[7] == "2020":
        source = SourceYear.Y2020
    else:
        raise FormatError(
            f"row {row_num}: source must be 2019 or 2020, got {row[7]!r}"
        )

    size: int | None = None
    if has_size and row[8] != "":
        try:
            size = int(row[8])
        except ValueError:
            raise FormatError(
                f"row {row_num}: non-integer image_size_bytes {row[8]!r}"
            ) from None
        if size <= 0:
            raise RangeError(
                f"row {row_num}: image_size_bytes must be positive, got {size}"
            )

    return SampleRecord(
        image_name=image_name,
        patient_id=patient_id,
        sex=sex,
        age_approx=age,
        anatom_site=site,
        diagnosis=diagnosis,
        target_binary=target,
        source_year=source,
        image_size_bytes=size,
    )


def _format_float(v: float) -> str:
    # repr() is the shortest digit string that round-trips; drop a trailing
    # ".0" so integral values stay as plain integers.
    if float(v).is_integer() and abs(v) < 1e16:
        return str(int(v))
    return repr(float(v))


def write_metadata_csv(d: Dataset) -> str:
    """Serialize a Dataset back to metadata-CSV text (inverse of parsing)."""
    has_size = any(r.image_size_bytes is not None for r in d.records)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    header = list(METADATA_COLUMNS) + ([SIZE_COLUMN] if has_size else [])
    writer.writerow(header)
    for r in d.records:
        row = [
            r.image_name,
            r.patient_id,
            "" if r.sex is Sex.MISSING else r.sex.value,
            "" if r.age_approx is None else _format_float(r.age_approx),
            r.anatom_site or "",
            r.diagnosis or "",
            str(r.target_binary.value),
            str(r.source_year.value),
        ]
        if has_size:
            row.append("" if r.image_size_bytes is None else str(r.image_size_bytes))
        writer.writerow(row)
    return out.getvalue()


def validate_consistency(d: Dataset) -> ValidationReport:
    """Check dataset-level label consistency.

    Errors: a present diagnosis that maps to MEL paired with a benign label,
    or a malignant label whose present diagnosis maps elsewhere (the binary
    target must agree with the melanoma class). Warnings: records with a
    missing diagnosis, and a 2020-cohort positive ratio that strays from the
    expected 1.76% by more than a factor of two.
    """
    errors: list[ValidationIssue] = []
    warnings: list[ValidationIssue] = []
    n_2020 = 0
    pos_2020 = 0
    for r in d.records:
        if r.source_year is SourceYear.Y2020:
            n_2020 += 1
            pos_2020 += int(r.is_positive)
        if r.diagnosis is None:
            warnings.append(
                ValidationIssue(
                    r.image_name,
                    "diagnosis-missing",
                    "diagnosis missing; melanoma consistency not verifiable",
                )
            )
            continue
        is_mel = map_diagnosis(r.diagnosis, TargetScheme.NINE_CLASS) is DiagnosisClass.MEL
        if is_mel and not r.is_positive:
            errors.append(
                ValidationIssue(
                    r.image_name,
                    "target-diagnosis-mismatch",
                    f"diagnosis {r.diagnosis!r} maps to MEL but target is benign",
                )
            )
        elif not is_mel and r.is_positive:
            errors.append(
                ValidationIssue(
                    r.image_name,
                    "target-diagnosis-mismatch",
                    f"target is malignant but diagnosis {r.diagnosis!r} does not map to MEL",
                )
            )
    if n_2020 > 0:
        ratio = pos_2020 / n_2020
        low = EXPECTED_2020_POSITIVE_RATE / 2
        high = EXPECTED_2020_POSITIVE_RATE * 2
        if ratio < low or ratio > high:
            warnings.append(
                ValidationIssue(
                    "*",
                    "positive-rate-2020",
                    f"2020 positive ratio {ratio:.4f} deviates from "
                    f"{EXPECTED_2020_POSITIVE_RATE:.4f} by more than a factor of 2",
                )
            )
    return ValidationReport(tuple(errors), tuple(warnings))


def _scalar_header() -> list[str]:
    return ["image_name", "target"]


def _full_header(scheme: TargetScheme) -> list[str]:
    return ["image_name"] + [f"prob_{c.name}" for c in scheme.classes]


@dataclass(frozen=True, eq=False)
class PredictionSet:
    """Per-image scores: either scalar melanoma scores or class probabilities.

    Exactly one of ``scores`` (shape ``(n,)``) and ``probs`` (shape
    ``(n, C)``, with ``scheme`` set) is present. All values lie in [0, 1];
    probability rows sum to 1 within 1e-9. Arrays are stored read-only.
    """

    image_names: tuple[str, ...]
    scores: np.ndarray | None = None
    probs: np.ndarray | None = None
    scheme: TargetScheme | None = None

    def __post_init__(self) -> None:
        if (self.scores is None) == (self.probs is None):
            raise DomainError("exactly one of scores/probs must be provided")
        n = len(self.image_names)
        if len(set(self.image_names)) != n:
            raise UniquenessError("prediction image names are not unique")
        if self.scores is not None:
            arr = np.asarray(self.scores, dtype=np.float64)
            if arr.shape != (n,):
                raise ShapeError(f"scores shape {arr.shape} != ({n},)")
            _check_unit_interval(arr)
            object.__setattr__(self, "scores", _frozen(arr))
        else:
            if self.scheme is None:
                raise DomainError("probs require a target scheme")
            arr = np.asarray(self.probs, dtype=np.float64)
            if arr.shape != (n, self.scheme.class_count):
                raise ShapeError(
                    f"probs shape {arr.shape} != ({n}, {self.scheme.class_count})"
                )
            _check_unit_interval(arr)
            if n and np.max(np.abs(arr.sum(axis=1) - 1.0)) > 1e-9:
                raise DomainError("probability rows must sum to 1 within 1e-9")
            object.__setattr__(self, "probs", _frozen(arr))

    @classmethod
    def from_scores(
        cls, image_names: Iterable[str], scores: np.ndarray | Iterable[float]
    ) -> "PredictionSet":
        return cls(tuple(image_names), scores=np.asarray(list(scores), dtype=np.float64))

    @classmethod
    def from_probs(
        cls,
        image_names: Iterable[str],
        probs: np.ndarray,
        scheme: TargetScheme,
    ) -> "PredictionSet":
        return cls(tuple(image_names), probs=np.asarray(probs, dtype=np.float64), scheme=scheme)

    @property
    def is_scalar(self) -> bool:
        return self.scores is not None

    def __len__(self) -> int:
        return len(self.image_names)

    def to_scalar(self) -> "PredictionSet":
        """Reduce class probabilities to scalar melanoma scores."""
        if self.is_scalar:
            return self
        assert self.probs is not None and self.scheme is not None
        mel_col = class_index(DiagnosisClass.MEL, self.scheme)
        return PredictionSet.from_scores(self.image_names, self.probs[:, mel_col])

    def score_map(self) -> dict[str, float]:
        """image_name -> scalar score (scalar sets only)."""
        if not self.is_scalar:
            raise DomainError("score_map is only defined for scalar prediction sets")
        assert self.scores is not None
        return dict(zip(self.image_names, self.scores.tolist()))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PredictionSet):
            return NotImplemented
        if self.image_names != other.image_names or self.scheme is not other.scheme:
            return False
        if (self.scores is None) != (other.scores is None):
            return False
        if self.scores is not None:
            return bool(np.array_equal(self.scores, other.scores))
        return bool(np.array_equal(self.probs, other.probs))

    __hash__ = None  # type: ignore[assignment]


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = arr.copy()
    out.flags.writeable = False
    return out


def _check_unit_interval(arr: np.ndarray) -> None:
    # NaN fails both comparisons, so it is rejected here too.
    ok = (arr >= 0.0) & (arr <= 1.0)
    if not bool(np.all(ok)):
        bad = arr[~ok].flat[0]
        raise RangeError(f"probability {bad!r} outside [0, 1]")


def write_predictions_csv(p: PredictionSet) -> str:
    """Serialize predictions: ``image_name,target`` for scalar sets, or
    ``image_name,prob_<CLASS>,...`` in scheme column order for full sets."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    if p.is_scalar:
        assert p.scores is not None
        writer.writerow(_scalar_header())
        for name, score in zip(p.image_names, p.scores):
            writer.writerow([name, _format_float(float(score))])
    else:
        assert p.probs is not None and p.scheme is not None
        writer.writerow(_full_header(p.scheme))
        for name, row in zip(p.image_names, p.probs):
            writer.writerow([name] + [_format_float(float(v)) for v in row])
    return out.getvalue()


def parse_predictions_csv(stream: str | IO[str]) -> PredictionSet:
    """Parse a prediction CSV; the header decides scalar vs full shape."""
    reader = csv.reader(_as_line_iter(stream))
    header = next(reader, None)
    if header is None:
        raise FormatError("empty prediction stream: no header row")
    if header == _scalar_header():
        scheme = None
    elif header == _full_header(TargetScheme.NINE_CLASS):
        scheme = TargetScheme.NINE_CLASS
    elif header == _full_header(TargetScheme.FOUR_CLASS):
        scheme = TargetScheme.FOUR_CLASS
    else:
        raise FormatError(f"unrecognized prediction header: {','.join(header)}")

    width = 2 if scheme is None else 1 + scheme.class_count
    names: list[str] = []
    values: list[list[float]] = []
    for row_num, row in enumerate(reader, start=1):
        if not row:
            continue
        if len(row) != width:
            raise FormatError(
                f"row {row_num}: expected {width} fields, got {len(row)}"
            )
        if not row[0]:
            raise FormatError(f"row {row_num}: empty image_name")
        try:
            vals = [float(cell) for cell in row[1:]]
        except ValueError:
            raise FormatError(f"row {row_num}: non-numeric score") from None
        names.append(row[0])
        values.append(vals)

    if scheme is None:
        return PredictionSet.from_scores(names, [v[0] for v in values])
    arr = (
        np.asarray(values, dtype=np.float64)
        if values
        else np.zeros((0, scheme.class_count))
    )
    return PredictionSet.from_probs(names, arr, scheme)


def require_coverage(
    required: Iterable[str], available: Iterable[str] | dict[str, object], what: str
) -> None:
    """Raise CoverageError naming the first image missing from ``available``."""
    have = available if isinstance(available, (dict, set, frozenset)) else set(available)
    missing = [name for name in required if name not in have]
    if missing:
        raise CoverageError(
            f"{what} missing {len(missing)} image(s), first: {missing[0]!r}"
        )
