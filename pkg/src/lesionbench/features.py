"""Metadata feature engineering.

Each record becomes a 14-dimensional vector in fixed order::

    [sex, age_z, site_0 .. site_9, log_size_z, n_images_z]

Sex is 1 (male) / 0 (female) / -1 (missing). Continuous features are
z-scored against statistics fitted on a caller-chosen subset (normally the
training fold); missing continuous values encode as 0, i.e. the mean. The
anatomical site occupies ten one-hot slots against a data-derived
vocabulary; a missing or out-of-vocabulary site leaves the whole block zero.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from functools import cached_property
from typing import IO, Iterable, Sequence

import numpy as np

from .datamodel import Dataset, SampleRecord, Sex, _as_line_iter, _format_float
from .errors import (
    CapacityError,
    DomainError,
    FormatError,
    ShapeError,
    UniquenessError,
)

N_METADATA_FEATURES = 14
SITE_SLOTS = 10
STD_FLOOR = 1e-8

FEATURE_NAMES: tuple[str, ...] = (
    ("sex", "age_z")
    + tuple(f"site_{i}" for i in range(SITE_SLOTS))
    + ("log_size_z", "n_images_z")
)


@dataclass(frozen=True)
class SiteVocabulary:
    """Exactly ten site slots: observed sites sorted ascending, then padding."""

    sites: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.sites) != SITE_SLOTS:
            raise ShapeError(f"site vocabulary must have {SITE_SLOTS} entries")
        if len(set(self.sites)) != SITE_SLOTS:
            raise UniquenessError("site vocabulary entries must be unique")

    def index_of(self, site: str) -> int | None:
        try:
            return self.sites.index(site)
        except ValueError:
            return None


@dataclass(frozen=True)
class NormStats:
    """Mean/std for the three continuous features, fitted on one subset.

    Stds use the (n-1) denominator and are floored at ``STD_FLOOR``. A
    ``*_defaulted`` flag records that no values were observed and the stats
    fell back to mean 0, std 1.
    """

    age_mean: float
    age_std: float
    log_size_mean: float
    log_size_std: float
    n_images_mean: float
    n_images_std: float
    age_defaulted: bool = False
    log_size_defaulted: bool = False

    def __post_init__(self) -> None:
        for name in ("age_std", "log_size_std", "n_images_std"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive")


def compute_n_images(d: Dataset) -> dict[str, int]:
    """Per-image count of records sharing the image's patient_id.

    Counted over exactly the dataset given; pass the train+test concatenation
    to reproduce counts over all available data.
    """
    return {
        r.image_name: len(d.by_patient[r.patient_id]) for r in d.records
    }


def build_site_vocab(d: Dataset) -> SiteVocabulary:
    """Distinct non-missing sites, sorted ascending, padded to ten slots."""
    distinct = sorted({r.anatom_site for r in d.records if r.anatom_site is not None})
    if len(distinct) > SITE_SLOTS:
        extras = ", ".join(distinct[SITE_SLOTS:])
        raise CapacityError(
            f"found {len(distinct)} distinct sites, vocabulary holds "
            f"{SITE_SLOTS}; extras: {extras}"
        )
    padding = [f"__unused_{i}__" for i in range(SITE_SLOTS - len(distinct))]
    return SiteVocabulary(tuple(distinct + padding))


def _mean_std(values: Sequence[float]) -> tuple[float, float, bool]:
    n = len(values)
    if n == 0:
        return 0.0, 1.0, True
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    if n == 1:
        return mean, STD_FLOOR, False
    std = float(arr.std(ddof=1))
    return mean, max(std, STD_FLOOR), False


def fit_norm_stats(
    d: Dataset,
    n_images: dict[str, int],
    mask: Sequence[bool] | None = None,
) -> NormStats:
    """Fit normalization statistics on the records selected by ``mask``.

    ``mask`` aligns with ``d.records``; None selects everything. Missing ages
    and sizes are excluded from their statistics; sizes enter as natural logs.
    """
    if mask is None:
        selected = list(d.records)
    else:
        if len(mask) != len(d.records):
            raise ShapeError(
                f"mask length {len(mask)} != record count {len(d.records)}"
            )
        selected = [r for r, keep in zip(d.records, mask) if keep]
    if not selected:
        raise DomainError("cannot fit normalization statistics on an empty subset")

    ages = [r.age_approx for r in selected if r.age_approx is not None]
    log_sizes = [
        math.log(r.image_size_bytes)
        for r in selected
        if r.image_size_bytes is not None
    ]
    counts = [float(n_images[r.image_name]) for r in selected]

    age_mean, age_std, age_defaulted = _mean_std(ages)
    ls_mean, ls_std, ls_defaulted = _mean_std(log_sizes)
    ni_mean, ni_std, _ = _mean_std(counts)
    return NormStats(
        age_mean=age_mean,
        age_std=age_std,
        log_size_mean=ls_mean,
        log_size_std=ls_std,
        n_images_mean=ni_mean,
        n_images_std=ni_std,
        age_defaulted=age_defaulted,
        log_size_defaulted=ls_defaulted,
    )


def encode(
    r: SampleRecord,
    vocab: SiteVocabulary,
    stats: NormStats,
    n_images: dict[str, int],
) -> np.ndarray:
    """Encode one record as its 14-dimensional feature vector."""
    if r.image_name not in n_images:
        raise KeyError(f"image {r.image_name!r} missing from n_images map")
    v = np.zeros(N_METADATA_FEATURES, dtype=np.float64)

    if r.sex is Sex.MALE:
        v[0] = 1.0
    elif r.sex is Sex.MISSING:
        v[0] = -1.0

    if r.age_approx is not None:
        v[1] = (r.age_approx - stats.age_mean) / stats.age_std

    if r.anatom_site is not None:
        slot = vocab.index_of(r.anatom_site)
        if slot is not None:
            v[2 + slot] = 1.0

    if r.image_size_bytes is not None:
        v[12] = (math.log(r.image_size_bytes) - stats.log_size_mean) / stats.log_size_std

    v[13] = (n_images[r.image_name] - stats.n_images_mean) / stats.n_images_std
    return v


def encode_dataset(
    d: Dataset,
    vocab: SiteVocabulary,
    stats: NormStats,
    n_images: dict[str, int],
) -> np.ndarray:
    """Encode every record; rows follow dataset order."""
    if not d.records:
        return np.zeros((0, N_METADATA_FEATURES), dtype=np.float64)
    return np.stack([encode(r, vocab, stats, n_images) for r in d.records])


@dataclass(frozen=True, eq=False)
class FeatureTable:
    """Image-keyed feature matrix, the unit of feature CSV exchange."""

    image_names: tuple[str, ...]
    values: np.ndarray  # (n, width) float64

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != len(self.image_names):
            raise ShapeError(
                f"feature matrix shape {arr.shape} does not match "
                f"{len(self.image_names)} image names"
            )
        if len(set(self.image_names)) != len(self.image_names):
            raise UniquenessError("feature table image names are not unique")
        if not np.all(np.isfinite(arr)):
            raise DomainError("feature values must be finite")
        frozen = arr.copy()
        frozen.flags.writeable = False
        object.__setattr__(self, "values", frozen)

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    def __len__(self) -> int:
        return len(self.image_names)

    def __contains__(self, image_name: str) -> bool:
        return image_name in self._positions

    @cached_property
    def _positions(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.image_names)}

    def select(self, image_names: Iterable[str]) -> np.ndarray:
        """Rows for the given images, in the given order."""
        idx = [self._positions[name] for name in image_names]
        return self.values[idx]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureTable):
            return NotImplemented
        return self.image_names == other.image_names and bool(
            np.array_equal(self.values, other.values)
        )

    __hash__ = None  # type: ignore[assignment]


def write_feature_csv(table: FeatureTable, prefix: str = "f") -> str:
    """Serialize a feature table with header ``image_name,<prefix>0,...``."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["image_name"] + [f"{prefix}{i}" for i in range(table.width)])
    for name, row in zip(table.image_names, table.values):
        writer.writerow([name] + [_format_float(float(v)) for v in row])
    return out.getvalue()


def read_feature_csv(
    stream: str | IO[str], prefix: str = "f", width: int | None = None
) -> FeatureTable:
    """Parse a feature CSV; ``width`` pins the expected column count."""
    reader = csv.reader(_as_line_iter(stream))
    header = next(reader, None)
    if header is None:
        raise FormatError("empty feature stream: no header row")
    if len(header) < 2 or header[0] != "image_name":
        raise FormatError(f"unrecognized feature header: {','.join(header)}")
    n_cols = len(header) - 1
    if header[1:] != [f"{prefix}{i}" for i in range(n_cols)]:
        raise FormatError(f"unrecognized feature header: {','.join(header)}")
    if width is not None and n_cols != width:
        raise FormatError(f"expected {width} feature columns, got {n_cols}")

    names: list[str] = []
    rows: list[list[float]] = []
    for row_num, row in enumerate(reader, start=1):
        if not row:
            continue
        if len(row) != n_cols + 1:
            raise FormatError(
                f"row {row_num}: expected {n_cols + 1} fields, got {len(row)}"
            )
        try:
            rows.append([float(cell) for cell in row[1:]])
        except ValueError:
            raise FormatError(f"row {row_num}: non-numeric feature value") from None
        names.append(row[0])
    values = np.asarray(rows, dtype=np.float64) if rows else np.zeros((0, n_cols))
    return FeatureTable(tuple(names), values)
