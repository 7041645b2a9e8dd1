"""Ranking metrics and their stability.

The AUC here is the Mann-Whitney statistic: the probability that a random
positive outscores a random negative, with ties counted half. It is computed
from tied ranks in integer arithmetic, so it equals exact pair counting down
to the final double-precision division.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources
from typing import IO, Sequence

import numpy as np

from .datamodel import Dataset, PredictionSet, SourceYear, _as_line_iter, require_coverage
from .errors import (
    DomainError,
    FormatError,
    RangeError,
    ShapeError,
    UniquenessError,
)
from .folds import FoldAssignment
from .hashing import MASK64

METRIC_NAMES = ("cv_all", "cv_2020", "private_lb", "public_lb")

REFERENCE_SCORES_RESOURCE = "model_scores.csv"

_MAX_REDRAWS = 10


@dataclass(frozen=True, eq=False)
class LabeledScores:
    """Parallel scores and binary labels; the input shape for AUC."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if scores.ndim != 1 or labels.ndim != 1 or scores.shape != labels.shape:
            raise ShapeError(
                f"scores {scores.shape} and labels {labels.shape} must be "
                "1-D and equal-length"
            )
        if not np.all(np.isfinite(scores)):
            raise DomainError("scores must be finite")
        if not np.all((labels == 0) | (labels == 1)):
            raise DomainError("labels must be 0 or 1")
        for name, arr in (("scores", scores), ("labels", labels)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return int(self.scores.size)


def doubled_ranks(values: Sequence[float] | np.ndarray) -> np.ndarray:
    """Twice the 1-based average ranks, as exact int64.

    Ties share their group's average rank; doubling keeps the .5 averages in
    integer arithmetic.
    """
    x = np.asarray(values, dtype=np.float64)
    n = x.size
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(x, kind="stable")
    sx = x[order]
    new_group = np.empty(n, dtype=bool)
    new_group[0] = True
    new_group[1:] = sx[1:] != sx[:-1]
    group = np.cumsum(new_group) - 1
    starts = np.flatnonzero(new_group)
    ends = np.append(starts[1:], n) - 1
    r2_sorted = (starts + ends + 2)[group]  # (first_rank + last_rank) per position
    r2 = np.empty(n, dtype=np.int64)
    r2[order] = r2_sorted
    return r2


def average_ranks(values: Sequence[float] | np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged (values are exact multiples of 0.5)."""
    return doubled_ranks(values) / 2.0


def auc(s: LabeledScores) -> float:
    """Tie-aware ROC AUC of scores against binary labels.

    Equals ``(#{pos > neg} + 0.5 * #{pos == neg}) / (P * N)``, evaluated via
    the rank-sum identity in O(n log n). The numerator is assembled in exact
    integer arithmetic; the single final division is the only rounding.
    """
    labels = s.labels
    p = int(labels.sum())
    n = int(labels.size) - p
    if p == 0 or n == 0:
        raise DomainError("AUC requires at least one positive and one negative")
    r2 = doubled_ranks(s.scores)
    u2 = int(r2[labels == 1].sum()) - p * (p + 1)  # equals 2*wins + ties
    return u2 / (2 * p * n)


def auc_or_none(
    scores: np.ndarray | Sequence[float], labels: np.ndarray | Sequence[int]
) -> float | None:
    """AUC, or None when undefined (empty input or a single class)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return None
    p = int(labels.sum())
    if p == 0 or p == labels.size:
        return None
    return auc(LabeledScores(np.asarray(scores, dtype=np.float64), labels))


@dataclass(frozen=True)
class CvReport:
    """AUC over everything, over the 2020 cohort, and within each fold.

    Entries are None where the restriction holds a single class and the AUC
    is undefined.
    """

    cv_all: float | None
    cv_2020: float | None
    per_fold: tuple[float | None, ...]


def evaluate_cv(preds: PredictionSet, d: Dataset, f: FoldAssignment) -> CvReport:
    """Score out-of-fold predictions against a dataset's labels.

    ``preds`` must be scalar and cover every image of ``d``; producing
    predictions out-of-fold is the caller's responsibility.
    """
    if not preds.is_scalar:
        raise DomainError("evaluate_cv expects scalar predictions; call to_scalar()")
    score_by_name = preds.score_map()
    require_coverage(d.image_names, score_by_name, "predictions")
    require_coverage(d.image_names, f.assignment, "fold assignment")

    scores = np.array([score_by_name[name] for name in d.image_names])
    labels = np.array([int(r.is_positive) for r in d.records], dtype=np.int64)
    folds = np.array([f.assignment[name] for name in d.image_names])
    is_2020 = np.array(
        [r.source_year is SourceYear.Y2020 for r in d.records], dtype=bool
    )

    cv_all = auc_or_none(scores, labels)
    cv_2020 = auc_or_none(scores[is_2020], labels[is_2020])
    per_fold = tuple(
        auc_or_none(scores[folds == k], labels[folds == k]) for k in range(f.k)
    )
    return CvReport(cv_all=cv_all, cv_2020=cv_2020, per_fold=per_fold)


@dataclass(frozen=True)
class ScoreRow:
    model_id: str
    cv_all: float
    cv_2020: float
    private_lb: float
    public_lb: float

    def __post_init__(self) -> None:
        for name in METRIC_NAMES:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise RangeError(f"model {self.model_id!r}: {name}={v!r} outside [0, 1]")


@dataclass(frozen=True)
class ScoreTable:
    """Per-model scores on the four tracked metrics."""

    rows: tuple[ScoreRow, ...]

    def __post_init__(self) -> None:
        ids = [r.model_id for r in self.rows]
        if len(set(ids)) != len(ids):
            raise UniquenessError("score table model ids are not unique")

    def column(self, metric: str) -> np.ndarray:
        if metric not in METRIC_NAMES:
            raise DomainError(f"unknown metric {metric!r}")
        return np.array([getattr(r, metric) for r in self.rows], dtype=np.float64)


@dataclass(frozen=True)
class StabilityResult:
    """Sample standard deviation per metric, plus the induced ordering.

    ``ranking`` lists metric names from most stable (smallest std) to least.
    """

    stds: tuple[float, float, float, float]
    ranking: tuple[str, ...]

    def as_dict(self) -> dict[str, float]:
        return dict(zip(METRIC_NAMES, self.stds))


def stability(t: ScoreTable) -> StabilityResult:
    """Per-metric sample standard deviation ((n-1) denominator) and ranking."""
    if len(t.rows) < 2:
        raise DomainError("stability needs at least 2 rows")
    # Each column is summed in sorted order, so the result is bitwise
    # independent of row order.
    stds = tuple(float(np.std(np.sort(t.column(m)), ddof=1)) for m in METRIC_NAMES)
    ranking = tuple(
        name for _, name in sorted(zip(stds, METRIC_NAMES), key=lambda p: p[0])
    )
    return StabilityResult(stds=stds, ranking=ranking)  # type: ignore[arg-type]


@dataclass(frozen=True)
class BootstrapResult:
    """Spread of AUC under resampling; ``n_skipped`` counts replicates that
    stayed single-class after bounded redraws."""

    std: float
    n_used: int
    n_skipped: int


def bootstrap_auc_std(s: LabeledScores, n_boot: int, seed: int) -> BootstrapResult:
    """Standard deviation of AUC over seeded full-size resamples.

    Each replicate ``i`` draws with replacement from its own generator keyed
    by ``(seed, i)``, so replicates are reproducible and order-independent.
    Single-class resamples are redrawn up to a bounded number of times, then
    skipped and counted.
    """
    if n_boot < 100:
        raise DomainError(f"n_boot must be at least 100, got {n_boot}")
    labels = s.labels
    p = int(labels.sum())
    if p == 0 or p == labels.size:
        raise DomainError("AUC requires at least one positive and one negative")
    n = int(labels.size)
    seed64 = seed & MASK64

    # The data are sorted once; each replicate is then scored from its
    # multiset of draw counts in O(n), with the same exact integer numerator
    # a direct AUC of the resampled arrays would produce.
    order = np.argsort(s.scores, kind="stable")
    sorted_scores = s.scores[order]
    sorted_pos = labels[order]
    new_group = np.empty(n, dtype=bool)
    new_group[0] = True
    new_group[1:] = sorted_scores[1:] != sorted_scores[:-1]
    starts = np.flatnonzero(new_group)

    aucs = []
    n_skipped = 0
    for i in range(n_boot):
        rng = np.random.default_rng((seed64, i))
        value = None
        for _ in range(_MAX_REDRAWS + 1):
            idx = rng.integers(0, n, size=n)
            counts = np.bincount(idx, minlength=n)[order]
            cp = counts * sorted_pos
            total_pos = int(cp.sum())
            if not 0 < total_pos < n:
                continue
            cn = counts - cp
            group_pos = np.add.reduceat(cp, starts)
            group_neg = np.add.reduceat(cn, starts)
            neg_below = np.concatenate(([0], np.cumsum(group_neg)[:-1]))
            wins = int((group_pos * neg_below).sum())
            ties = int((group_pos * group_neg).sum())
            value = (2 * wins + ties) / (2 * total_pos * (n - total_pos))
            break
        if value is None:
            n_skipped += 1
        else:
            aucs.append(value)
    if len(aucs) < 2:
        raise DomainError(
            f"all but {len(aucs)} resamples were single-class; cannot estimate spread"
        )
    return BootstrapResult(
        std=float(np.std(aucs, ddof=1)), n_used=len(aucs), n_skipped=n_skipped
    )


def parse_score_table(stream: str | IO[str]) -> ScoreTable:
    """Parse a score CSV with header ``model,cv_all,cv_2020,private_lb,public_lb``."""
    reader = csv.reader(_as_line_iter(stream))
    header = next(reader, None)
    if header is None:
        raise FormatError("empty score stream: no header row")
    if header != ["model", *METRIC_NAMES]:
        raise FormatError(f"unrecognized score header: {','.join(header)}")
    rows = []
    for row_num, row in enumerate(reader, start=1):
        if not row:
            continue
        if len(row) != 5:
            raise FormatError(f"row {row_num}: expected 5 fields, got {len(row)}")
        try:
            values = [float(cell) for cell in row[1:]]
        except ValueError:
            raise FormatError(f"row {row_num}: non-numeric score") from None
        rows.append(ScoreRow(row[0], *values))
    return ScoreTable(tuple(rows))


def write_score_table(t: ScoreTable) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["model", *METRIC_NAMES])
    for r in t.rows:
        writer.writerow(
            [r.model_id]
            + [repr(getattr(r, m)) for m in METRIC_NAMES]
        )
    return out.getvalue()


def load_reference_scores() -> ScoreTable:
    """The 18-model reference score table shipped with the package."""
    text = (
        resources.files("lesionbench")
        .joinpath(f"data/{REFERENCE_SCORES_RESOURCE}")
        .read_text(encoding="utf-8")
    )
    return parse_score_table(text)
