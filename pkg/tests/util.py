"""Shared test helpers: record factories and independent oracles."""

from __future__ import annotations

import numpy as np

from lesionbench import fusion
from lesionbench.datamodel import (
    BinaryTarget,
    Dataset,
    SampleRecord,
    Sex,
    SourceYear,
)


def make_record(
    image_name: str,
    patient_id: str = "P1",
    sex: Sex = Sex.MALE,
    age: float | None = 50.0,
    site: str | None = "torso",
    diagnosis: str | None = "nevus",
    malignant: bool = False,
    year: int = 2020,
    size: int | None = None,
) -> SampleRecord:
    return SampleRecord(
        image_name=image_name,
        patient_id=patient_id,
        sex=sex,
        age_approx=age,
        anatom_site=site,
        diagnosis=diagnosis,
        target_binary=BinaryTarget.MALIGNANT if malignant else BinaryTarget.BENIGN,
        source_year=SourceYear.Y2019 if year == 2019 else SourceYear.Y2020,
        image_size_bytes=size,
    )


def make_dataset(records) -> Dataset:
    return Dataset.from_records(records)


def auc_pair_counting(scores, labels) -> float:
    """O(P*N) pair-counting AUC: the independent oracle.

    Enumerates every (positive, negative) pair; ties count half.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos = s[y == 1]
    neg = s[y == 0]
    wins = int(np.sum(pos[:, None] > neg[None, :]))
    ties = int(np.sum(pos[:, None] == neg[None, :]))
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def numeric_gradients(model, x_meta, x_cnn, targets, eps=1e-5):
    """Central finite differences of mean batch cross-entropy.

    Independent of the analytic backward pass: evaluates only the forward
    pass at perturbed parameters.
    """
    base = {k: np.array(v) for k, v in model.params().items()}
    tgt = np.asarray(targets, dtype=np.int64)

    def loss_at(name, flat_idx, delta):
        params = {k: v.copy() for k, v in base.items()}
        params[name].flat[flat_idx] += delta
        m = fusion.FusionHeadModel(scheme=model.scheme, **params)
        _, probs = fusion.forward(m, x_meta, x_cnn)
        return fusion.mean_cross_entropy(np.atleast_2d(probs), tgt)

    grads = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        for idx in range(arr.size):
            g.flat[idx] = (
                loss_at(name, idx, eps) - loss_at(name, idx, -eps)
            ) / (2.0 * eps)
        grads[name] = g
    return grads


def gradient_rel_error(analytic: dict, numeric: dict) -> float:
    """Inf-norm relative error between two gradient bundles."""
    diff = 0.0
    scale = 0.0
    for name in analytic:
        diff = max(diff, float(np.max(np.abs(analytic[name] - numeric[name]))))
        scale = max(
            scale,
            float(np.max(np.abs(analytic[name]))),
            float(np.max(np.abs(numeric[name]))),
        )
    return diff / max(scale, 1e-12)


def random_fusion_instance(rng, max_hidden=16, max_cnn=8, max_batch=8, margin=1e-4):
    """Random small model + batch whose pre-activations avoid the ReLU kink.

    Finite differences with step 1e-5 would straddle the kink if some
    pre-activation were within the step of zero, so instances closer than
    ``margin`` are redrawn.
    """
    from lesionbench.targets import TargetScheme

    while True:
        h1 = int(rng.integers(2, max_hidden + 1))
        h2 = int(rng.integers(2, max_hidden + 1))
        d = int(rng.integers(0, max_cnn + 1))
        n = int(rng.integers(1, max_batch + 1))
        scheme = TargetScheme.NINE_CLASS if rng.random() < 0.5 else TargetScheme.FOUR_CLASS
        model = fusion.init_fusion_head(scheme, (h1, h2), d, rng)
        x_meta = rng.normal(size=(n, 14))
        x_cnn = rng.normal(size=(n, d)) if d else None
        targets = rng.integers(0, scheme.class_count, size=n)
        cache = fusion._forward_cached(
            model.params(), x_meta, x_cnn if x_cnn is not None else np.zeros((n, 0))
        )
        z_min = min(
            float(np.min(np.abs(cache["z1"]))), float(np.min(np.abs(cache["z2"])))
        )
        if z_min > margin:
            return model, x_meta, x_cnn, targets
