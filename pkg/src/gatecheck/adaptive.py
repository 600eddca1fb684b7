"""Sliding-window threshold recalibration and its block experiment.

Recalibration re-estimates per-bin quality on a trailing window, merges any
bin that beats its upper tail into that neighbor until no inversion zones
remain, and places the acting threshold at the lowest bin whose merged
quality meets the target.  The block experiment replays this over
sequential test blocks with the model and confidence function frozen,
comparing against the static drop-lowest-confidence gate.

Quality proxy for regression: per-bin mean absolute error on the window;
"meets the target" means bin MAE at or below the window's alpha-quantile
absolute error.  The adaptive gate abstains bin-by-bin from worst window
MAE downward until the requested fraction of the current block is dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .confidence import ConfidenceSignal, count_normalizer, raw_counts
from .data import SplitDataset
from .diagnostics import NEGLIGIBLE_STEP, AbstentionCurve, abstention_curve
from .models import BaselineModel, MfModel, predict_many

__all__ = [
    "ScoredPrediction",
    "RecalState",
    "BlockResult",
    "recalibrate",
    "block_experiment",
]

DEFAULT_RECAL_BINS = 10
DEFAULT_ALPHA = 0.5
TRAIN_TAIL_WINDOW = 5000


@dataclass(frozen=True)
class ScoredPrediction:
    """One test-case record: prediction, truth, residual, and confidence.

    `signals` optionally carries every other confidence score attached to
    the case, keyed by signal kind.
    """

    predicted: float
    actual: float
    residual: float
    confidence: float
    signals: dict[str, float] = field(default_factory=dict)


@dataclass
class RecalState:
    """Windowed quality mapping after inversion-merging.

    `merged_map[i]` is the merged-tier index of original bin i.  `threshold`
    is the confidence edge above which the gate acts; None means no merged
    tier met the target ("never act").
    """

    bin_edges: np.ndarray
    bin_quality: np.ndarray
    merged_map: list[int]
    merged_edges: np.ndarray
    merged_quality: np.ndarray
    merged_counts: np.ndarray
    alpha: float
    target_quality: float
    threshold: float | None

    @property
    def never_act(self) -> bool:
        return self.threshold is None

    def tier_of(self, confidence: float) -> int:
        """Merged-tier index for a confidence value (clamped to the range)."""
        idx = int(np.searchsorted(self.merged_edges, confidence, side="right")) - 1
        return min(max(idx, 0), len(self.merged_quality) - 1)


def _bin_stats(conf: np.ndarray, abs_err: np.ndarray, edges: np.ndarray):
    idx = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, len(edges) - 2)
    counts = np.bincount(idx, minlength=len(edges) - 1)
    sums = np.bincount(idx, weights=abs_err, minlength=len(edges) - 1)
    return counts, sums


def recalibrate(window: Sequence[ScoredPrediction], n_bins: int = DEFAULT_RECAL_BINS,
                alpha: float = DEFAULT_ALPHA) -> RecalState:
    """Re-estimate the confidence-quality mapping on a window.

    Step 1: per-bin window MAE over equal-width bins of the window's
    confidence range (empty bins merged rightward).  Step 2: while any bin
    has MAE strictly below its upper tail's MAE (an inversion zone: lower
    confidence, better quality), merge it with its upper neighbor.  Step 3:
    the threshold is the left edge of the lowest merged tier whose MAE meets
    the alpha-quantile target; None when no tier qualifies.
    """
    if not window:
        raise ValueError("window must be nonempty")
    if not (0.0 < alpha <= 1.0):
        raise ValueError("alpha must lie in (0, 1]")
    conf = np.asarray([c.confidence for c in window], dtype=float)
    abs_err = np.abs(np.asarray([c.residual for c in window], dtype=float))

    lo, hi = float(conf.min()), float(conf.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, n_bins + 1)
    counts, sums = _bin_stats(conf, abs_err, edges)
    keep = [edges[0]]
    for i in range(len(counts)):
        if counts[i] > 0 or i == len(counts) - 1:
            keep.append(edges[i + 1])
    edges = np.asarray(keep)
    counts, sums = _bin_stats(conf, abs_err, edges)
    if counts[-1] == 0 and len(counts) > 1:
        edges = np.delete(edges, len(edges) - 2)
        counts, sums = _bin_stats(conf, abs_err, edges)
    bin_quality = sums / counts

    # iterative inversion merge: bins as (left_edge_index, count, sum) groups
    groups = [[i, int(counts[i]), float(sums[i])] for i in range(len(counts))]
    while True:
        merged_any = False
        for i in range(len(groups) - 1):
            tail_count = sum(g[1] for g in groups[i + 1 :])
            tail_sum = sum(g[2] for g in groups[i + 1 :])
            mae_i = groups[i][2] / groups[i][1]
            mae_tail = tail_sum / tail_count
            if mae_i < mae_tail:  # lower-confidence bin beats its upper tail
                groups[i + 1] = [groups[i][0],
                                 groups[i][1] + groups[i + 1][1],
                                 groups[i][2] + groups[i + 1][2]]
                del groups[i]
                merged_any = True
                break
        if not merged_any:
            break

    merged_map = []
    tier = -1
    starts = {g[0] for g in groups}
    for i in range(len(counts)):
        if i in starts:
            tier += 1
        merged_map.append(tier)
    merged_edges = np.asarray([edges[g[0]] for g in groups] + [edges[-1]])
    merged_counts = np.asarray([g[1] for g in groups])
    merged_quality = np.asarray([g[2] / g[1] for g in groups])

    target = float(np.quantile(abs_err, alpha))
    threshold = None
    for i, quality in enumerate(merged_quality):
        if quality <= target:
            threshold = float(merged_edges[i])
            break

    return RecalState(bin_edges=edges, bin_quality=bin_quality, merged_map=merged_map,
                      merged_edges=merged_edges, merged_quality=merged_quality,
                      merged_counts=merged_counts, alpha=alpha, target_quality=target,
                      threshold=threshold)


@dataclass
class BlockResult:
    index: int
    n_cases: int
    full_rmse: float
    static_curve: AbstentionCurve
    adaptive_curve: AbstentionCurve
    recal_state: RecalState

    @property
    def static_violations(self) -> int:
        return self.static_curve.violation_count

    @property
    def adaptive_violations(self) -> int:
        return self.adaptive_curve.violation_count


def _adaptive_curve(cases: list[ScoredPrediction], state: RecalState,
                    fractions) -> AbstentionCurve:
    """Abstain tier-by-tier from worst window MAE downward.

    Within a tier, cases drop in (confidence, case index) order; the drop
    stops exactly at the requested count so retained sizes match the static
    gate's.  Metric values are then assembled into the shared curve shape.
    """
    n = len(cases)
    conf = np.asarray([c.confidence for c in cases])
    pred = np.asarray([c.predicted for c in cases])
    act = np.asarray([c.actual for c in cases])
    tiers = np.asarray([state.tier_of(c) for c in conf])
    worst_first = np.argsort(state.merged_quality)[::-1]

    drop_order = []
    for tier in worst_first:
        members = np.where(tiers == tier)[0]
        members = members[np.lexsort((members, conf[members]))]
        drop_order.extend(members.tolist())
    drop_order = np.asarray(drop_order, dtype=int)

    fr = tuple(float(f) for f in fractions)
    values = []
    retained = []
    for k_frac in fr:
        keep = int(math.ceil((1.0 - k_frac) * n))
        dropped = drop_order[: n - keep]
        mask = np.ones(n, dtype=bool)
        mask[dropped] = False
        values.append(float(np.sqrt(np.mean((pred[mask] - act[mask]) ** 2))))
        retained.append(keep)

    adverse = [b - a for a, b in zip(values, values[1:]) if b > a]
    return AbstentionCurve(
        metric="rmse", fractions=fr, values=np.asarray(values),
        coverages=np.asarray(retained, dtype=float) / n,
        retained_counts=np.asarray(retained), violation_count=len(adverse),
        negligible_violation_count=sum(1 for s in adverse if s < NEGLIGIBLE_STEP),
        adverse_steps=adverse)


def block_experiment(split: SplitDataset, model: MfModel | BaselineModel,
                     signal: ConfidenceSignal, n_blocks: int = 4,
                     fractions=(0.0, 0.05, 0.10, 0.15, 0.20, 0.25),
                     n_bins: int = DEFAULT_RECAL_BINS,
                     alpha: float = DEFAULT_ALPHA) -> list[BlockResult]:
    """Sequential-block comparison of static vs. recalibrated gating.

    Test cases (already in timestamp order) split into n_blocks equal
    blocks.  The static gate drops the lowest-confidence K% of each block.
    The adaptive gate recalibrates on the preceding block; block 1, having
    no predecessor, recalibrates on the most recent train-tail records
    scored with the same model and put on the same confidence scale.
    Model and confidence function stay fixed throughout.
    """
    if n_blocks < 1:
        raise ValueError("n_blocks must be >= 1")
    if len(signal.case_indices) != split.n_test or np.any(
            signal.case_indices != np.arange(split.n_test)):
        raise ValueError("block experiment needs a full-coverage confidence signal")
    if split.n_test < n_blocks * 1000:
        raise ValueError(f"need at least {n_blocks * 1000} test cases, got {split.n_test}")

    pred = predict_many(model, split.test)
    actual = np.fromiter((r.rating for r in split.test), dtype=float, count=split.n_test)
    cases = [ScoredPrediction(float(p), float(a), float(p - a), float(c))
             for p, a, c in zip(pred, actual, signal.scores)]

    boundaries = np.linspace(0, split.n_test, n_blocks + 1).astype(int)
    blocks = [cases[boundaries[k]: boundaries[k + 1]] for k in range(n_blocks)]

    results: list[BlockResult] = []
    previous: list[ScoredPrediction] | None = None
    for k, block in enumerate(blocks):
        window = previous if previous is not None else _train_tail_window(split, model)
        state = recalibrate(window, n_bins=n_bins, alpha=alpha)
        block_pred = np.asarray([c.predicted for c in block])
        block_act = np.asarray([c.actual for c in block])
        block_conf = np.asarray([c.confidence for c in block])
        static = abstention_curve(block_pred, block_act, block_conf, fractions)
        adaptive = _adaptive_curve(block, state, fractions)
        results.append(BlockResult(
            index=k, n_cases=len(block),
            full_rmse=float(np.sqrt(np.mean((block_pred - block_act) ** 2))),
            static_curve=static, adaptive_curve=adaptive, recal_state=state))
        previous = block
    return results


def _train_tail_window(split: SplitDataset, model: MfModel | BaselineModel,
                       size: int = TRAIN_TAIL_WINDOW) -> list[ScoredPrediction]:
    """Most recent train records, scored in-sample, on the signal's count scale."""
    tail = split.train[-size:]
    pred = predict_many(model, tail)
    raw = raw_counts(split, tail)
    lo, hi = count_normalizer(split)
    span = hi - lo if hi > lo else 1.0
    conf = (raw - lo) / span
    return [ScoredPrediction(float(p), float(r.rating), float(p - r.rating), float(c))
            for p, r, c in zip(pred, tail, conf)]
