"""Confidence signals attached to test predictions.

Six signal kinds: count-based (observation counts), ensemble disagreement,
recency-feature, learned residual-predictor, a combined structural+recency
model, and a seeded random control.  Higher scores always mean more
confident.  Learned signals follow a leakage-avoiding protocol: the test
block is split in half by seeded interleaving, the confidence model is
trained on one half, and scores are produced for the other half only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import RatingRecord, SplitDataset
from .errors import ConvergenceError, DegenerateInputError
from .models import BaselineModel, MfModel, fit_als, predict_many
from .stats import fit_logistic

__all__ = [
    "ConfidenceSignal",
    "RecencyFeatures",
    "SIGNAL_KINDS",
    "count_confidence",
    "raw_counts",
    "count_normalizer",
    "ensemble_confidence",
    "recency_confidence",
    "residual_predicted_confidence",
    "combined_confidence",
    "random_confidence",
    "build_recency_features",
    "half_split",
]

SIGNAL_KINDS = (
    "count_based",
    "ensemble",
    "recency",
    "residual_predicted",
    "combined_struct_recency",
    "random_control",
)

SECONDS_PER_DAY = 86400.0
DEFAULT_VELOCITY_WINDOW_DAYS = 30.0


@dataclass
class ConfidenceSignal:
    """Scores for a subset of test cases, keyed by test-case index.

    `case_indices` are positions into the split's test list; full-coverage
    signals carry every index, learned signals carry the evaluation half.
    `predictions` optionally overrides the backbone prediction per case
    (used by the ensemble-mean).  `warnings` collects degeneracy notices
    that do not invalidate the signal.
    """

    kind: str
    scores: np.ndarray
    case_indices: np.ndarray
    warnings: list[str] = field(default_factory=list)
    predictions: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in SIGNAL_KINDS:
            raise ValueError(f"unknown signal kind {self.kind!r}")
        self.scores = np.asarray(self.scores, dtype=float)
        self.case_indices = np.asarray(self.case_indices, dtype=np.int64)
        if len(self.scores) != len(self.case_indices):
            raise ValueError("scores and case_indices differ in length")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("confidence scores must be finite")


def raw_counts(split: SplitDataset, records: Sequence[RatingRecord]) -> np.ndarray:
    """Split-specific raw observation count per record, from train-side counts.

    temporal: min(user count, item count); cold_user: item count alone (all
    test users are unseen); cold_item: user count alone.
    """
    kind = split.spec.kind
    uc = split.user_counts
    ic = split.item_counts
    if kind == "temporal":
        values = (min(uc.get(r.user_id, 0), ic.get(r.item_id, 0)) for r in records)
    elif kind == "cold_user":
        values = (ic.get(r.item_id, 0) for r in records)
    else:
        values = (uc.get(r.user_id, 0) for r in records)
    return np.fromiter(values, dtype=float, count=len(records))


def count_normalizer(split: SplitDataset) -> tuple[float, float]:
    """(min, max) of the raw test-set counts; the affine map used by
    count_confidence, exposed so other record sets can be put on its scale."""
    raw = raw_counts(split, split.test)
    return float(raw.min()), float(raw.max())


def count_confidence(split: SplitDataset) -> ConfidenceSignal:
    """Observation-count confidence, min-max normalized over the test set.

    If every test case carries the same count the signal is degenerate: the
    scores pin to 0.5 and a warning is attached instead of raising.
    """
    raw = raw_counts(split, split.test)
    lo, hi = float(raw.min()), float(raw.max())
    warnings = []
    if hi == lo:
        scores = np.full(len(raw), 0.5)
        warnings.append("degenerate signal: all observation counts identical")
    else:
        scores = (raw - lo) / (hi - lo)
    return ConfidenceSignal("count_based", scores, np.arange(len(raw)), warnings)


def ensemble_confidence(train: Sequence[RatingRecord], test: Sequence[RatingRecord],
                        rank: int = 10, lam: float = 0.1, iterations: int = 20,
                        seeds: Sequence[int] = (0, 1, 2, 3, 4),
                        resample: bool = True) -> ConfidenceSignal:
    """Disagreement of factorization models fit with different seeds.

    Each member's seed drives both its factor initialization and (by
    default) a bootstrap resample of the training ratings; resampling is
    what gives an exactly-solved factorization meaningful member
    disagreement, since initialization alone washes out after the
    alternating solves converge.  Confidence is the negated per-case
    standard deviation of the member predictions; `predictions` carries the
    ensemble mean, which is also the prediction evaluated in the ensemble
    abstention curve.
    """
    if len(seeds) < 2:
        raise ValueError("need at least 2 ensemble seeds")
    member_preds = []
    for seed in seeds:
        member_train = train
        if resample:
            rng = np.random.default_rng(seed)
            idx = rng.integers(0, len(train), len(train))
            member_train = [train[i] for i in idx]
        try:
            member = fit_als(member_train, rank=rank, lam=lam, iterations=iterations, seed=seed)
        except ConvergenceError as exc:
            raise ConvergenceError(f"ensemble member with seed {seed} failed: {exc}") from exc
        member_preds.append(predict_many(member, test))
    stacked = np.vstack(member_preds)
    std = stacked.std(axis=0)
    mean = stacked.mean(axis=0)
    return ConfidenceSignal("ensemble", -std, np.arange(len(test)), predictions=mean)


@dataclass
class RecencyFeatures:
    """Temporal-context features per test case (columnar).

    Times are seconds since the entity's most recent earlier train rating;
    velocities are train ratings per day over the trailing window ending at
    the case's own timestamp.  Entities with no earlier observation carry a
    sentinel flag and a zero-imputed time rather than an arbitrary number.
    """

    time_since_user: np.ndarray
    time_since_item: np.ndarray
    user_velocity: np.ndarray
    item_velocity: np.ndarray
    user_unseen: np.ndarray
    item_unseen: np.ndarray
    window_days: float

    def matrix(self) -> np.ndarray:
        """Feature matrix in days/rates with the sentinel flags as columns."""
        return np.column_stack([
            self.time_since_user / SECONDS_PER_DAY,
            self.time_since_item / SECONDS_PER_DAY,
            self.user_velocity,
            self.item_velocity,
            self.user_unseen.astype(float),
            self.item_unseen.astype(float),
        ])


def build_recency_features(split: SplitDataset,
                           window_days: float = DEFAULT_VELOCITY_WINDOW_DAYS) -> RecencyFeatures:
    user_lists: dict[int, list[int]] = {}
    item_lists: dict[int, list[int]] = {}
    for r in split.train:
        user_lists.setdefault(r.user_id, []).append(r.timestamp)
        item_lists.setdefault(r.item_id, []).append(r.timestamp)
    user_times = {k: np.sort(np.asarray(v, dtype=float)) for k, v in user_lists.items()}
    item_times = {k: np.sort(np.asarray(v, dtype=float)) for k, v in item_lists.items()}

    n = split.n_test
    window_seconds = window_days * SECONDS_PER_DAY
    since_u = np.zeros(n)
    since_i = np.zeros(n)
    vel_u = np.zeros(n)
    vel_i = np.zeros(n)
    unseen_u = np.zeros(n, dtype=bool)
    unseen_i = np.zeros(n, dtype=bool)

    def scan(times: np.ndarray | None, t: float) -> tuple[float, float, bool]:
        # only observations at or before t count: the features must be
        # computable at prediction time
        if times is None:
            return 0.0, 0.0, True
        pos = int(np.searchsorted(times, t, side="right"))
        if pos == 0:
            return 0.0, 0.0, True
        last = times[pos - 1]
        lo = int(np.searchsorted(times, t - window_seconds, side="right"))
        return t - last, (pos - lo) / window_days, False

    for k, r in enumerate(split.test):
        t = float(r.timestamp)
        since_u[k], vel_u[k], unseen_u[k] = scan(user_times.get(r.user_id), t)
        since_i[k], vel_i[k], unseen_i[k] = scan(item_times.get(r.item_id), t)

    return RecencyFeatures(since_u, since_i, vel_u, vel_i, unseen_u, unseen_i, window_days)


def half_split(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded interleaving split of range(n) into (fit half, evaluation half)."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    return np.sort(perm[0::2]), np.sort(perm[1::2])


def _learned_signal(kind: str, features: np.ndarray, abs_error: np.ndarray,
                    l2: float, seed: int) -> ConfidenceSignal:
    """Shared fit/evaluate protocol for learned confidence models.

    Label: indicator of above-median absolute error, with the median taken
    on the fit half to keep the evaluation half untouched.  Confidence is
    1 - predicted error probability on the evaluation half.
    """
    n = len(abs_error)
    fit_idx, eval_idx = half_split(n, seed)
    median = float(np.median(abs_error[fit_idx]))
    labels = (abs_error[fit_idx] > median).astype(int)
    if labels.min() == labels.max():
        raise DegenerateInputError(
            "degenerate labels: every fit-half error on the same side of the median")
    model = fit_logistic(features[fit_idx], labels, l2=l2)
    p_err = model.predict_proba(features[eval_idx])
    signal = ConfidenceSignal(kind, 1.0 - p_err, eval_idx)
    constant_cols = int(np.sum(features[fit_idx].std(axis=0) == 0.0))
    if constant_cols:
        signal.warnings.append(
            f"degenerate features: {constant_cols} constant column(s) in the fit half")
    return signal


def recency_confidence(split: SplitDataset, model: MfModel | BaselineModel,
                       window_days: float = DEFAULT_VELOCITY_WINDOW_DAYS,
                       l2: float = 1.0, seed: int = 0) -> ConfidenceSignal:
    """Temporal-context-only learned confidence (staleness and velocity)."""
    feats = build_recency_features(split, window_days).matrix()
    pred = predict_many(model, split.test)
    actual = np.fromiter((r.rating for r in split.test), dtype=float, count=split.n_test)
    return _learned_signal("recency", feats, np.abs(pred - actual), l2, seed)


def residual_predicted_confidence(split: SplitDataset, model: MfModel | BaselineModel,
                                  l2: float = 1.0, seed: int = 0) -> ConfidenceSignal:
    """Learned confidence from backbone features: prediction value, squared
    prediction, and the normalized split-specific observation count."""
    pred = predict_many(model, split.test)
    actual = np.fromiter((r.rating for r in split.test), dtype=float, count=split.n_test)
    raw = raw_counts(split, split.test)
    span = raw.max() - raw.min()
    norm = (raw - raw.min()) / span if span > 0 else np.zeros_like(raw)
    feats = np.column_stack([pred, pred**2, norm])
    return _learned_signal("residual_predicted", feats, np.abs(pred - actual), l2, seed)


def combined_confidence(split: SplitDataset, model: MfModel | BaselineModel,
                        window_days: float = DEFAULT_VELOCITY_WINDOW_DAYS,
                        l2: float = 1.0, seed: int = 0) -> ConfidenceSignal:
    """Structural (count) and recency features in one logistic model."""
    recency = build_recency_features(split, window_days).matrix()
    raw = raw_counts(split, split.test)
    span = raw.max() - raw.min()
    norm = (raw - raw.min()) / span if span > 0 else np.zeros_like(raw)
    feats = np.column_stack([recency, norm])
    pred = predict_many(model, split.test)
    actual = np.fromiter((r.rating for r in split.test), dtype=float, count=split.n_test)
    return _learned_signal("combined_struct_recency", feats, np.abs(pred - actual), l2, seed)


def random_confidence(n: int, seed: int = 0) -> ConfidenceSignal:
    """Seeded uniform scores; the control arm for every comparison."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    return ConfidenceSignal("random_control", rng.uniform(size=n), np.arange(n))
