"""Residual-defined exception labels and their instability under shift.

Exceptions are the cases whose absolute residual exceeds the training-set
95th percentile.  Under distribution shift the residual distribution moves,
the exception set is not preserved, and a classifier trained to predict
exception membership loses discriminative power on the test side.  The
false-positive/false-negative ratio of binarized predictions completes the
picture: the direction of error is a labeling artifact of the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .confidence import raw_counts
from .data import SplitDataset
from .models import BaselineModel, MfModel, predict_many
from .stats import TestResult, fit_logistic, ks_two_sample, roc_auc

__all__ = [
    "ExceptionReport",
    "FpFnReport",
    "FpFnEntry",
    "EXCEPTION_QUANTILE",
    "label_exceptions",
    "residual_shift_test",
    "exception_classifier",
    "analyze_exceptions",
    "fp_fn_ratio",
]

EXCEPTION_QUANTILE = 0.95
DEFAULT_BINARIZATION_THRESHOLDS = (3.5, 4.0, 4.5)


@dataclass
class ExceptionReport:
    """Threshold, rates, shift test, and classifier AUC on both sides."""

    tau: float
    train_rate: float
    test_rate: float
    ks_stat: float | None = None
    ks_p: float | None = None
    auc_train: float | None = None
    auc_test: float | None = None


def label_exceptions(train_residuals, test_residuals) -> ExceptionReport:
    """tau = 95th percentile of |train residuals| (linear-interpolation
    quantile); rates = fraction strictly exceeding tau on each side."""
    train_abs = np.abs(np.asarray(train_residuals, dtype=float))
    test_abs = np.abs(np.asarray(test_residuals, dtype=float))
    if len(train_abs) == 0 or len(test_abs) == 0:
        raise ValueError("residual sets must be nonempty")
    tau = float(np.quantile(train_abs, EXCEPTION_QUANTILE))
    return ExceptionReport(
        tau=tau,
        train_rate=float((train_abs > tau).mean()),
        test_rate=float((test_abs > tau).mean()))


def residual_shift_test(train_residuals, test_residuals) -> TestResult:
    """Two-sample KS on the absolute residual distributions."""
    return ks_two_sample(np.abs(np.asarray(train_residuals, dtype=float)),
                         np.abs(np.asarray(test_residuals, dtype=float)))


def _classifier_features(split: SplitDataset, predictions: np.ndarray,
                         records) -> np.ndarray:
    # count feature shares the confidence module's split-specific definition;
    # the min-max map is anchored on the train-side counts so train and test
    # go through the same transform
    raw_train = raw_counts(split, split.train)
    lo, hi = float(raw_train.min()), float(raw_train.max())
    span = hi - lo if hi > lo else 1.0
    raw = raw_counts(split, records)
    norm = (raw - lo) / span
    return np.column_stack([predictions, predictions**2, norm])


def exception_classifier(split: SplitDataset, model: MfModel | BaselineModel,
                         l2: float = 1.0) -> tuple[float, float]:
    """Fit the exception classifier on train, report AUC on train and test.

    Features: prediction value, squared prediction, normalized observation
    count.  Labels use the train-side tau on both sides.
    """
    report = analyze_exceptions(split, model, l2=l2, with_shift_test=False)
    assert report.auc_train is not None and report.auc_test is not None
    return report.auc_train, report.auc_test


def analyze_exceptions(split: SplitDataset, model: MfModel | BaselineModel,
                       l2: float = 1.0, with_shift_test: bool = True) -> ExceptionReport:
    """Full pipeline: residuals, tau and rates, KS shift test, classifier AUC."""
    pred_train = predict_many(model, split.train)
    pred_test = predict_many(model, split.test)
    actual_train = np.fromiter((r.rating for r in split.train), dtype=float, count=split.n_train)
    actual_test = np.fromiter((r.rating for r in split.test), dtype=float, count=split.n_test)
    res_train = pred_train - actual_train
    res_test = pred_test - actual_test

    report = label_exceptions(res_train, res_test)
    if with_shift_test:
        ks = residual_shift_test(res_train, res_test)
        report.ks_stat, report.ks_p = ks.statistic, ks.p_value

    labels_train = (np.abs(res_train) > report.tau).astype(int)
    labels_test = (np.abs(res_test) > report.tau).astype(int)
    features_train = _classifier_features(split, pred_train, split.train)
    features_test = _classifier_features(split, pred_test, split.test)
    clf = fit_logistic(features_train, labels_train, l2=l2)
    report.auc_train = roc_auc(clf.predict_proba(features_train), labels_train)
    report.auc_test = roc_auc(clf.predict_proba(features_test), labels_test)
    return report


@dataclass
class FpFnEntry:
    threshold: float
    tp: int
    fp: int
    fn: int
    tn: int
    ratio: float | None  # FP/FN, None when FN == 0


@dataclass
class FpFnReport:
    entries: list[FpFnEntry] = field(default_factory=list)


def fp_fn_ratio(predicted, actual,
                thresholds: Sequence[float] = DEFAULT_BINARIZATION_THRESHOLDS) -> FpFnReport:
    """Binarize both sides at each threshold (>= is positive) and count errors.

    FP = predicted positive & actual negative; FN = the converse.  The ratio
    is reported as None when FN = 0 rather than a division blowup.
    """
    pred = np.asarray(predicted, dtype=float)
    act = np.asarray(actual, dtype=float)
    if len(pred) != len(act) or len(pred) == 0:
        raise ValueError("predicted and actual must be nonempty and equal length")
    report = FpFnReport()
    for threshold in thresholds:
        pred_pos = pred >= threshold
        act_pos = act >= threshold
        tp = int((pred_pos & act_pos).sum())
        fp = int((pred_pos & ~act_pos).sum())
        fn = int((~pred_pos & act_pos).sum())
        tn = int((~pred_pos & ~act_pos).sum())
        ratio = fp / fn if fn > 0 else None
        report.entries.append(FpFnEntry(float(threshold), tp, fp, fn, tn, ratio))
    return report
