"""Trainable fusion head: metadata MLP branch, optional external feature
block, and a softmax classifier.

The metadata vector passes through two fully connected ReLU layers, is
concatenated with an externally supplied feature block of dimension D
(D = 0 gives a pure-metadata model), and a final linear layer produces class
logits. Training is mini-batch Adam under a cosine-annealed learning-rate
schedule with a single warm-up epoch, in float64 throughout so gradient
checks and rerun determinism are exact.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from decimal import Decimal
from typing import IO, Sequence

import numpy as np

from .datamodel import Dataset, PredictionSet
from .errors import CoverageError, DomainError, FormatError, ShapeError
from .features import N_METADATA_FEATURES, FeatureTable, read_feature_csv
from .folds import FoldAssignment
from .hashing import MASK64
from .metrics import auc_or_none
from .targets import DiagnosisClass, TargetScheme, class_index, map_diagnosis

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

WEIGHTS_MAGIC = b"LSNB"
WEIGHTS_VERSION = 1

_HEADER = struct.Struct("<4sHBIIII")  # magic, version, scheme tag, h1, h2, d, c

PROB_FLOOR = 1e-12

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for fold-wise training.

    ``epochs`` counts the warm-up epoch, so it must be at least 2. The two
    stock hidden-layer configurations are (512, 128) and (128, 32); any
    positive pair is accepted.
    """

    epochs: int = 15
    batch_size: int = 64
    lr_peak: float = 3e-4
    seed: int = 42
    hidden: tuple[int, int] = (512, 128)
    scheme: TargetScheme = TargetScheme.NINE_CLASS

    def __post_init__(self) -> None:
        if self.epochs < 2:
            raise DomainError(
                "epochs must be >= 2: one warm-up epoch plus at least one "
                "cosine epoch"
            )
        if self.batch_size < 1:
            raise DomainError("batch_size must be positive")
        if not self.lr_peak > 0:
            raise DomainError("lr_peak must be positive")
        if len(self.hidden) != 2 or min(self.hidden) < 1:
            raise DomainError("hidden must be a pair of positive widths")


@dataclass(frozen=True, eq=False)
class FusionHeadModel:
    """Weights of the fusion head; immutable once constructed.

    Shapes: w1 (H1, 14), w2 (H2, H1), w3 (C, H2 + D), with matching bias
    vectors. C is fixed by the scheme; D >= 0 is the external feature width.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    scheme: TargetScheme

    def __post_init__(self) -> None:
        arrays = {}
        for name in PARAM_NAMES:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise DomainError(f"parameter {name} contains non-finite values")
            arrays[name] = arr
        w1, b1, w2, b2, w3, b3 = (arrays[n] for n in PARAM_NAMES)
        if w1.ndim != 2 or w1.shape[1] != N_METADATA_FEATURES:
            raise ShapeError(f"w1 must be (H1, {N_METADATA_FEATURES}), got {w1.shape}")
        h1 = w1.shape[0]
        if b1.shape != (h1,):
            raise ShapeError(f"b1 must be ({h1},), got {b1.shape}")
        if w2.ndim != 2 or w2.shape[1] != h1:
            raise ShapeError(f"w2 must be (H2, {h1}), got {w2.shape}")
        h2 = w2.shape[0]
        if b2.shape != (h2,):
            raise ShapeError(f"b2 must be ({h2},), got {b2.shape}")
        if w3.ndim != 2 or w3.shape[1] < h2:
            raise ShapeError(f"w3 must be (C, >= {h2}), got {w3.shape}")
        c = w3.shape[0]
        if b3.shape != (c,):
            raise ShapeError(f"b3 must be ({c},), got {b3.shape}")
        if c != self.scheme.class_count:
            raise ShapeError(
                f"w3 has {c} output rows but scheme has "
                f"{self.scheme.class_count} classes"
            )
        for name, arr in arrays.items():
            frozen = arr.copy()
            frozen.flags.writeable = False
            object.__setattr__(self, name, frozen)

    @property
    def hidden(self) -> tuple[int, int]:
        return (int(self.w1.shape[0]), int(self.w2.shape[0]))

    @property
    def cnn_dim(self) -> int:
        return int(self.w3.shape[1] - self.w2.shape[0])

    @property
    def class_count(self) -> int:
        return int(self.w3.shape[0])

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FusionHeadModel):
            return NotImplemented
        return self.scheme is other.scheme and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in PARAM_NAMES
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class EpochStats:
    fold: int
    epoch: int
    lr: float
    train_loss: float
    val_auc: float | None


@dataclass(frozen=True)
class TrainResult:
    models: tuple[FusionHeadModel, ...]
    oof: PredictionSet
    history: tuple[EpochStats, ...]


def _one_tenth(x: float) -> float:
    # Divide by ten in decimal, then round once to binary. Plain x / 10
    # double-rounds and misses the decimal grid by one ulp (e.g. 3e-4 / 10
    # != 3e-5), which matters because warm-up rates are quoted in decimal.
    return float(Decimal(repr(x)) / 10)


def lr_schedule(epoch: int, total_epochs: int, lr_peak: float) -> float:
    """Learning rate for one epoch: warm-up, then a single cosine cycle.

    Epoch 0 runs at one tenth of the peak. Epochs 1..E-1 follow
    ``0.5 * lr_peak * (1 + cos(pi * (e - 1) / (E - 2)))``: the first cosine
    epoch is exactly the peak and the last is exactly 0. E = 2 degenerates
    to a single peak epoch after warm-up.
    """
    if total_epochs < 2:
        raise DomainError(f"total_epochs must be >= 2, got {total_epochs}")
    if not 0 <= epoch < total_epochs:
        raise DomainError(
            f"epoch {epoch} outside schedule range 0..{total_epochs - 1}"
        )
    if not lr_peak > 0:
        raise DomainError("lr_peak must be positive")
    if epoch == 0:
        return _one_tenth(lr_peak)
    if total_epochs == 2:
        return lr_peak
    phase = (epoch - 1) / (total_epochs - 2)
    return 0.5 * lr_peak * (1.0 + math.cos(math.pi * phase))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _stack_inputs(
    m: FusionHeadModel, x_meta: np.ndarray, x_cnn: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray, bool]:
    meta = np.asarray(x_meta, dtype=np.float64)
    single = meta.ndim == 1
    meta = np.atleast_2d(meta)
    if meta.shape[1] != N_METADATA_FEATURES:
        raise ShapeError(
            f"metadata input must have {N_METADATA_FEATURES} columns, "
            f"got {meta.shape[1]}"
        )
    d = m.cnn_dim
    if d == 0:
        cnn = np.zeros((meta.shape[0], 0), dtype=np.float64)
        if x_cnn is not None and np.asarray(x_cnn).size != 0:
            raise ShapeError("model has no external feature block but x_cnn was given")
    else:
        if x_cnn is None:
            raise ShapeError(f"model expects a {d}-dimensional external feature block")
        cnn = np.atleast_2d(np.asarray(x_cnn, dtype=np.float64))
        if cnn.shape != (meta.shape[0], d):
            raise ShapeError(
                f"external feature block must be ({meta.shape[0]}, {d}), "
                f"got {cnn.shape}"
            )
    return meta, cnn, single


def _forward_cached(
    params: dict[str, np.ndarray], meta: np.ndarray, cnn: np.ndarray
) -> dict[str, np.ndarray]:
    z1 = meta @ params["w1"].T + params["b1"]
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ params["w2"].T + params["b2"]
    h2 = np.maximum(z2, 0.0)
    joint = np.concatenate([h2, cnn], axis=1)
    logits = joint @ params["w3"].T + params["b3"]
    probs = _softmax(logits)
    return {
        "meta": meta, "z1": z1, "h1": h1, "z2": z2, "h2": h2,
        "joint": joint, "logits": logits, "probs": probs,
    }


def forward(
    m: FusionHeadModel,
    x_meta: np.ndarray | Sequence[float],
    x_cnn: np.ndarray | Sequence[float] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Compute (logits, probs) for one sample or a batch.

    Softmax subtracts the row maximum first, so arbitrarily large logits
    produce valid probabilities.
    """
    meta, cnn, single = _stack_inputs(
        m, np.asarray(x_meta, dtype=np.float64),
        None if x_cnn is None else np.asarray(x_cnn, dtype=np.float64),
    )
    cache = _forward_cached(m.params(), meta, cnn)
    logits, probs = cache["logits"], cache["probs"]
    if single:
        return logits[0], probs[0]
    return logits, probs


def cross_entropy(probs: np.ndarray | Sequence[float], target: int) -> float:
    """Negative log-probability of the target class, floored at 1e-12."""
    vec = np.asarray(probs, dtype=np.float64)
    if vec.ndim != 1:
        raise ShapeError(f"probs must be a vector, got shape {vec.shape}")
    if not 0 <= target < vec.shape[0]:
        raise DomainError(
            f"target {target} out of range for {vec.shape[0]} classes"
        )
    return float(-np.log(max(float(vec[target]), PROB_FLOOR)))


def mean_cross_entropy(probs: np.ndarray, targets: np.ndarray) -> float:
    """Mean cross-entropy of a batch of probability rows."""
    picked = probs[np.arange(probs.shape[0]), targets]
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())


def _backward(
    params: dict[str, np.ndarray],
    cache: dict[str, np.ndarray],
    targets: np.ndarray,
) -> dict[str, np.ndarray]:
    n, _ = cache["probs"].shape
    h2_width = params["w2"].shape[0]

    delta3 = cache["probs"].copy()
    delta3[np.arange(n), targets] -= 1.0
    delta3 /= n

    gw3 = delta3.T @ cache["joint"]
    gb3 = delta3.sum(axis=0)
    d_joint = delta3 @ params["w3"]

    dz2 = d_joint[:, :h2_width] * (cache["z2"] > 0)
    gw2 = dz2.T @ cache["h1"]
    gb2 = dz2.sum(axis=0)

    dz1 = (dz2 @ params["w2"]) * (cache["z1"] > 0)
    gw1 = dz1.T @ cache["meta"]
    gb1 = dz1.sum(axis=0)
    return {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2, "w3": gw3, "b3": gb3}


def backward(
    m: FusionHeadModel,
    x_meta: np.ndarray,
    x_cnn: np.ndarray | None,
    targets: np.ndarray | Sequence[int],
) -> dict[str, np.ndarray]:
    """Analytic gradient of mean batch cross-entropy w.r.t. every parameter.

    Returns arrays keyed and shaped like the model's parameters.
    """
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.ndim != 1 or tgt.size == 0:
        raise DomainError("targets must be a non-empty 1-D array")
    if tgt.min() < 0 or tgt.max() >= m.class_count:
        raise DomainError(f"targets out of range for {m.class_count} classes")
    meta, cnn, _ = _stack_inputs(m, x_meta, x_cnn)
    if meta.shape[0] != tgt.size:
        raise ShapeError(
            f"batch has {meta.shape[0]} rows but {tgt.size} targets"
        )
    cache = _forward_cached(m.params(), meta, cnn)
    return _backward(m.params(), cache, tgt)


def init_fusion_head(
    scheme: TargetScheme,
    hidden: tuple[int, int],
    cnn_dim: int,
    rng: np.random.Generator,
) -> FusionHeadModel:
    """He-scaled random weights (std sqrt(2/fan_in)), zero biases."""
    h1, h2 = hidden
    c = scheme.class_count
    params = _init_params(h1, h2, cnn_dim, c, rng)
    return FusionHeadModel(scheme=scheme, **params)


def _init_params(
    h1: int, h2: int, d: int, c: int, rng: np.random.Generator
) -> dict[str, np.ndarray]:
    def layer(rows: int, cols: int) -> np.ndarray:
        return rng.normal(0.0, math.sqrt(2.0 / cols), size=(rows, cols))

    return {
        "w1": layer(h1, N_METADATA_FEATURES),
        "b1": np.zeros(h1),
        "w2": layer(h2, h1),
        "b2": np.zeros(h2),
        "w3": layer(c, h2 + d),
        "b3": np.zeros(c),
    }


class _AdamState:
    def __init__(self, params: dict[str, np.ndarray]) -> None:
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(
        self,
        params: dict[str, np.ndarray],
        grads: dict[str, np.ndarray],
        lr: float,
    ) -> None:
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1**self.t
        bc2 = 1.0 - ADAM_BETA2**self.t
        for k in params:
            g = grads[k]
            self.m[k] = ADAM_BETA1 * self.m[k] + (1.0 - ADAM_BETA1) * g
            self.v[k] = ADAM_BETA2 * self.v[k] + (1.0 - ADAM_BETA2) * g * g
            params[k] -= lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + ADAM_EPS)


def train(
    d: Dataset,
    feats: FeatureTable,
    cnn: FeatureTable | None,
    f: FoldAssignment,
    cfg: TrainConfig,
    max_workers: int = 1,
) -> TrainResult:
    """Train one fusion head per fold and assemble out-of-fold predictions.

    For each fold k a model is trained on every record outside k and then
    scores fold k; the union of those melanoma probabilities is the OOF
    prediction set, in dataset order. Per-fold work is seeded with
    ``cfg.seed + k``, so results are identical whether folds run
    sequentially or concurrently.
    """
    if not d.records:
        raise DomainError("cannot train on an empty dataset")
    names = d.image_names
    if feats.width != N_METADATA_FEATURES:
        raise ShapeError(
            f"metadata features must have width {N_METADATA_FEATURES}, "
            f"got {feats.width}"
        )
    _require_names(names, feats, "feature table")
    if cnn is not None:
        _require_names(names, cnn, "external feature table")
    missing = [n for n in names if n not in f.assignment]
    if missing:
        raise CoverageError(
            f"fold assignment missing {len(missing)} image(s), first: {missing[0]!r}"
        )

    x_meta = feats.select(names)
    x_cnn = cnn.select(names) if cnn is not None else np.zeros((len(names), 0))
    y = np.array(
        [
            class_index(map_diagnosis(r.diagnosis, cfg.scheme), cfg.scheme)
            for r in d.records
        ],
        dtype=np.int64,
    )
    y_bin = np.array([int(r.is_positive) for r in d.records], dtype=np.int64)
    fold_of = np.array([f.assignment[n] for n in names], dtype=np.int64)
    mel_col = class_index(DiagnosisClass.MEL, cfg.scheme)

    def run_fold(k: int) -> tuple[FusionHeadModel, np.ndarray, list[EpochStats]]:
        return _train_one_fold(
            k, x_meta, x_cnn, y, y_bin, fold_of, cfg, mel_col
        )

    fold_ids = list(range(f.k))
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            outcomes = list(pool.map(run_fold, fold_ids))
    else:
        outcomes = [run_fold(k) for k in fold_ids]

    oof = np.empty(len(names), dtype=np.float64)
    models: list[FusionHeadModel] = []
    history: list[EpochStats] = []
    for k, (model, val_scores, stats) in zip(fold_ids, outcomes):
        val_idx = np.flatnonzero(fold_of == k)
        oof[val_idx] = val_scores
        models.append(model)
        history.extend(stats)
    return TrainResult(
        models=tuple(models),
        oof=PredictionSet.from_scores(names, oof),
        history=tuple(history),
    )


def _require_names(names: Sequence[str], table: FeatureTable, what: str) -> None:
    missing = [n for n in names if n not in table]
    if missing:
        raise CoverageError(
            f"{what} missing {len(missing)} image(s), first: {missing[0]!r}"
        )


def _train_one_fold(
    k: int,
    x_meta: np.ndarray,
    x_cnn: np.ndarray,
    y: np.ndarray,
    y_bin: np.ndarray,
    fold_of: np.ndarray,
    cfg: TrainConfig,
    mel_col: int,
) -> tuple[FusionHeadModel, np.ndarray, list[EpochStats]]:
    train_idx = np.flatnonzero(fold_of != k)
    val_idx = np.flatnonzero(fold_of == k)
    if train_idx.size == 0:
        raise DomainError(f"fold {k} leaves an empty training set")

    rng = np.random.default_rng((cfg.seed & MASK64) + k)
    params = _init_params(
        cfg.hidden[0], cfg.hidden[1], x_cnn.shape[1], cfg.scheme.class_count, rng
    )
    adam = _AdamState(params)
    stats: list[EpochStats] = []

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg.epochs, cfg.lr_peak)
        perm = rng.permutation(train_idx.size)
        loss_sum = 0.0
        for start in range(0, train_idx.size, cfg.batch_size):
            batch = train_idx[perm[start : start + cfg.batch_size]]
            cache = _forward_cached(params, x_meta[batch], x_cnn[batch])
            loss_sum += mean_cross_entropy(cache["probs"], y[batch]) * batch.size
            grads = _backward(params, cache, y[batch])
            adam.step(params, grads, lr)

        if val_idx.size:
            val_probs = _forward_cached(params, x_meta[val_idx], x_cnn[val_idx])["probs"]
            val_auc = auc_or_none(val_probs[:, mel_col], y_bin[val_idx])
        else:
            val_auc = None
        stats.append(
            EpochStats(
                fold=k,
                epoch=epoch,
                lr=lr,
                train_loss=loss_sum / train_idx.size,
                val_auc=val_auc,
            )
        )

    model = FusionHeadModel(scheme=cfg.scheme, **params)
    if val_idx.size:
        val_probs = _forward_cached(params, x_meta[val_idx], x_cnn[val_idx])["probs"]
        val_scores = val_probs[:, mel_col]
    else:
        val_scores = np.zeros(0, dtype=np.float64)
    return model, val_scores, stats


def save_model(m: FusionHeadModel) -> bytes:
    """Serialize to the versioned binary weight format (magic ``LSNB``)."""
    h1, h2 = m.hidden
    header = _HEADER.pack(
        WEIGHTS_MAGIC, WEIGHTS_VERSION, m.scheme.class_count,
        h1, h2, m.cnn_dim, m.class_count,
    )
    chunks = [header]
    for name in PARAM_NAMES:
        chunks.append(np.ascontiguousarray(getattr(m, name), dtype="<f8").tobytes())
    return b"".join(chunks)


def load_model(data: bytes) -> FusionHeadModel:
    """Parse the binary weight format; exact inverse of :func:`save_model`."""
    if len(data) < _HEADER.size:
        raise FormatError(
            f"weight stream truncated: {len(data)} bytes, header needs "
            f"{_HEADER.size}"
        )
    magic, version, scheme_tag, h1, h2, d, c = _HEADER.unpack_from(data, 0)
    if magic != WEIGHTS_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {WEIGHTS_MAGIC!r}")
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weight format version {version}")
    try:
        scheme = TargetScheme(scheme_tag)
    except ValueError:
        raise FormatError(f"unknown scheme tag {scheme_tag}") from None
    if c != scheme.class_count:
        raise FormatError(
            f"class count {c} contradicts scheme tag {scheme_tag}"
        )
    shapes = {
        "w1": (h1, N_METADATA_FEATURES),
        "b1": (h1,),
        "w2": (h2, h1),
        "b2": (h2,),
        "w3": (c, h2 + d),
        "b3": (c,),
    }
    n_values = sum(int(np.prod(s)) for s in shapes.values())
    expected = _HEADER.size + 8 * n_values
    if len(data) != expected:
        raise FormatError(
            f"weight stream has {len(data)} bytes, expected {expected}"
        )
    offset = _HEADER.size
    params: dict[str, np.ndarray] = {}
    for name in PARAM_NAMES:
        shape = shapes[name]
        count = int(np.prod(shape))
        params[name] = (
            np.frombuffer(data, dtype="<f8", count=count, offset=offset)
            .astype(np.float64)
            .reshape(shape)
        )
        offset += 8 * count
    return FusionHeadModel(scheme=scheme, **params)


def read_cnn_csv(stream: str | IO[str]) -> FeatureTable:
    """Parse an external feature CSV with header ``image_name,c0,...``."""
    return read_feature_csv(stream, prefix="c")
