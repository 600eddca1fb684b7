"""Gate-safety diagnostics: C1/C2 verification, abstention curves, the
coverage decomposition identity, selective-accuracy curves, expected
calibration error, tier separation, and confidence-variance decomposition.

C1 (rank-accuracy alignment) is checked by rank correlation between
confidence and outcome quality.  C2 (no inversion zones) is checked by
binning confidence and comparing every bin against its entire upper tail:
a bin whose mean quality beats the tail is an inversion zone, the witness
that raising the gate threshold can make things worse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError
from .stats import chi_squared_independence, fit_ols_r2, kendall_tau, spearman

__all__ = [
    "C1Report",
    "ZoneReport",
    "AbstentionCurve",
    "SelectiveAccuracyCurve",
    "CalibrationReport",
    "TierReport",
    "VarianceDecomposition",
    "NEGLIGIBLE_STEP",
    "check_c1",
    "check_c2",
    "abstention_curve",
    "decomposition_identity_check",
    "selective_accuracy_curve",
    "ece",
    "tier_report",
    "variance_decomposition",
]

# adverse steps smaller than this are counted but reported as negligible
NEGLIGIBLE_STEP = 5e-4

TIER_ORDER = ("HIGH", "MED", "LOW")


@dataclass
class C1Report:
    """Rank-correlation evidence for confidence/quality alignment.

    The verdict is advisory: positive and significant correlation passes.
    """

    spearman_rho: float
    spearman_p: float
    kendall: float
    kendall_p: float
    alpha: float
    passed: bool


def check_c1(confidence, quality, alpha: float = 0.05) -> C1Report:
    """Spearman and Kendall correlation between confidence and a quality
    sequence ({0,1} accuracy, or e.g. negated squared error for regression)."""
    conf = np.asarray(confidence, dtype=float)
    qual = np.asarray(quality, dtype=float)
    if len(conf) < 3:
        raise ValueError("need at least 3 cases")
    rho = spearman(conf, qual)
    tau = kendall_tau(conf, qual)
    passed = rho.statistic > 0 and rho.p_value < alpha
    return C1Report(rho.statistic, rho.p_value, tau.statistic, tau.p_value, alpha, passed)


@dataclass
class ZoneReport:
    """Confidence zones and their tail comparisons (the C2 verdict).

    `inversion_count` counts zones whose mean quality beats the combined
    quality of everything above them, exactly the condition whose failure
    breaks monotone selective accuracy.  `adjacent_inversion_count` is the
    looser neighbor-only comparison, reported for readability.
    `merged_empty_bins` lists original equal-width bins that were empty and
    absorbed into their right neighbor.
    """

    mode: str
    bin_edges: np.ndarray
    counts: np.ndarray
    means: np.ndarray
    inversion_count: int
    inversion_locations: list[tuple[int, int]]
    adjacent_inversion_count: int
    merged_empty_bins: list[int]

    @property
    def n_bins(self) -> int:
        return len(self.counts)


def _bin_assign(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(edges, values, side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


def check_c2(confidence, outcome, n_bins: int = 5, mode: str = "accuracy",
             bin_edges=None) -> ZoneReport:
    """Bin confidence and flag every zone that outperforms its upper tail.

    Default bins are equal-width over the observed confidence range; empty
    bins are merged rightward (a trailing empty bin merges leftward).  In
    accuracy mode higher outcome means better, so an inversion is a bin mean
    strictly above its tail mean; in error mode the comparison is reversed.
    """
    conf = np.asarray(confidence, dtype=float)
    out = np.asarray(outcome, dtype=float)
    if len(conf) != len(out):
        raise ValueError("confidence and outcome differ in length")
    if mode not in ("accuracy", "error"):
        raise ValueError(f"mode must be 'accuracy' or 'error', got {mode!r}")
    if bin_edges is None:
        if n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        if len(conf) < n_bins:
            raise ValueError(f"need at least n_bins={n_bins} cases, got {len(conf)}")
        lo, hi = float(conf.min()), float(conf.max())
        if hi == lo:
            hi = lo + 1.0  # all mass in one bin; report degenerates gracefully
        edges = np.linspace(lo, hi, n_bins + 1)
    else:
        edges = np.asarray(bin_edges, dtype=float)
        if len(edges) < 2 or np.any(np.diff(edges) <= 0):
            raise ValueError("bin_edges must be strictly increasing with >= 2 entries")

    assignment = _bin_assign(conf, edges)
    raw_counts = np.bincount(assignment, minlength=len(edges) - 1)

    # merge empty bins rightward: an empty bin's span joins the next bin
    merged_empty = [int(i) for i in np.where(raw_counts == 0)[0]]
    keep_edges = [edges[0]]
    for i in range(len(raw_counts)):
        if raw_counts[i] > 0 or i == len(raw_counts) - 1:
            keep_edges.append(edges[i + 1])
    edges = np.asarray(keep_edges)
    if len(edges) < 2:
        raise DegenerateInputError("no nonempty bins")
    assignment = _bin_assign(conf, edges)
    counts = np.bincount(assignment, minlength=len(edges) - 1)
    if counts[-1] == 0 and len(counts) > 1:  # trailing empty bin merges leftward
        edges = np.delete(edges, len(edges) - 2)
        assignment = _bin_assign(conf, edges)
        counts = np.bincount(assignment, minlength=len(edges) - 1)
    merged_empty = sorted(set(merged_empty))

    sums = np.bincount(assignment, weights=out, minlength=len(counts))
    means = sums / counts

    inversions: list[tuple[int, int]] = []
    tail_sum = 0.0
    tail_count = 0
    adjacent = 0
    for i in range(len(counts) - 1, -1, -1):
        if tail_count > 0:
            tail_mean = tail_sum / tail_count
            beats_tail = means[i] > tail_mean if mode == "accuracy" else means[i] < tail_mean
            if beats_tail:
                inversions.append((i, i + 1))
            beats_next = means[i] > means[i + 1] if mode == "accuracy" else means[i] < means[i + 1]
            if beats_next:
                adjacent += 1
        tail_sum += float(sums[i])
        tail_count += int(counts[i])
    inversions.reverse()

    return ZoneReport(mode=mode, bin_edges=edges, counts=counts, means=means,
                      inversion_count=len(inversions), inversion_locations=inversions,
                      adjacent_inversion_count=adjacent, merged_empty_bins=merged_empty)


@dataclass
class AbstentionCurve:
    """Retained metric vs. abstention fraction, with adverse-step counts.

    At fraction K the ceil((1-K)*n) highest-confidence cases are retained
    (confidence ties broken by case index, stable).  A violation is an
    adjacent step where the retained metric moves adversely; adverse steps
    smaller than NEGLIGIBLE_STEP are also tallied separately.
    """

    metric: str
    fractions: tuple[float, ...]
    values: np.ndarray
    coverages: np.ndarray
    retained_counts: np.ndarray
    violation_count: int
    negligible_violation_count: int
    adverse_steps: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def abstention_curve(predicted, actual, confidence, fractions=(0.0, 0.05, 0.10, 0.15, 0.20, 0.25),
                     metric: str = "rmse") -> AbstentionCurve:
    """Selective metric after dropping the K*n lowest-confidence cases.

    metric 'rmse' treats (predicted, actual) as regression pairs and counts
    increases as adverse; metric 'accuracy' treats `actual` as a {0,1}
    correctness sequence ignoring `predicted`, and counts decreases.
    """
    pred = np.asarray(predicted, dtype=float)
    act = np.asarray(actual, dtype=float)
    conf = np.asarray(confidence, dtype=float)
    n = len(conf)
    if len(act) != n or len(pred) != n:
        raise ValueError("predicted, actual, and confidence must share a length")
    if n == 0:
        raise ValueError("empty input")
    fr = tuple(float(f) for f in fractions)
    if any(f < 0 or f >= 1 for f in fr):
        raise ValueError("fractions must lie in [0, 1)")
    if list(fr) != sorted(fr) or fr[0] != 0.0:
        raise ValueError("fractions must be sorted ascending and start at 0")

    order = np.lexsort((np.arange(n), conf))  # confidence asc, then case index
    values = []
    retained = []
    for k_frac in fr:
        keep = int(math.ceil((1.0 - k_frac) * n))
        idx = order[n - keep:]
        if metric == "rmse":
            values.append(float(np.sqrt(np.mean((pred[idx] - act[idx]) ** 2))))
        elif metric == "accuracy":
            values.append(float(np.mean(act[idx])))
        else:
            raise ValueError(f"metric must be 'rmse' or 'accuracy', got {metric!r}")
        retained.append(keep)

    adverse = []
    for a, b in zip(values, values[1:]):
        step = (b - a) if metric == "rmse" else (a - b)
        if step > 0:
            adverse.append(step)
    negligible = sum(1 for s in adverse if s < NEGLIGIBLE_STEP)

    return AbstentionCurve(
        metric=metric, fractions=fr, values=np.asarray(values),
        coverages=np.asarray(retained, dtype=float) / n,
        retained_counts=np.asarray(retained), violation_count=len(adverse),
        negligible_violation_count=negligible, adverse_steps=adverse)


def decomposition_identity_check(confidence, accuracy, t1: float, t2: float) -> float:
    """Residual of the coverage decomposition (law of total expectation).

    |SA(t1)*cov(t1) - SA(t2)*cov(t2) - (cov(t1)-cov(t2)) * band mean| where
    the band is t1 <= c < t2.  Empty selections contribute exactly zero.
    Must vanish to float rounding on any finite sample.
    """
    conf = np.asarray(confidence, dtype=float)
    acc = np.asarray(accuracy, dtype=float)
    if t1 >= t2:
        raise ValueError("need t1 < t2")
    n = len(conf)
    if n == 0:
        raise ValueError("empty input")
    sel1 = conf >= t1
    if not sel1.any():
        raise ValueError("coverage(t1) must be positive")
    sel2 = conf >= t2
    band = sel1 & ~sel2

    def mass(mask: np.ndarray) -> float:
        if not mask.any():
            return 0.0
        return float(acc[mask].mean()) * (int(mask.sum()) / n)

    return abs(mass(sel1) - mass(sel2) - mass(band))


@dataclass
class SelectiveAccuracyCurve:
    thresholds: np.ndarray
    coverages: np.ndarray
    accuracies: np.ndarray  # NaN where coverage is zero (empty-set verdict)

    def is_monotone(self) -> bool:
        vals = self.accuracies[self.coverages > 0]
        return bool(np.all(np.diff(vals) >= 0))


def selective_accuracy_curve(confidence, accuracy, thresholds) -> SelectiveAccuracyCurve:
    """Mean accuracy and coverage over cases with confidence >= t, per t.

    A threshold beyond the maximum confidence yields coverage zero and a NaN
    accuracy entry rather than an error.
    """
    conf = np.asarray(confidence, dtype=float)
    acc = np.asarray(accuracy, dtype=float)
    if len(conf) != len(acc) or len(conf) == 0:
        raise ValueError("confidence and accuracy must be nonempty and equal length")
    ts = np.asarray(thresholds, dtype=float)
    coverages = np.empty(len(ts))
    accuracies = np.empty(len(ts))
    for i, t in enumerate(ts):
        sel = conf >= t
        coverages[i] = sel.mean()
        accuracies[i] = acc[sel].mean() if sel.any() else np.nan
    return SelectiveAccuracyCurve(ts, coverages, accuracies)


@dataclass
class CalibrationReport:
    """Per-bin confidence vs. empirical accuracy and the resulting ECE."""

    bin_edges: np.ndarray
    bin_confidence: np.ndarray  # NaN for empty bins
    bin_accuracy: np.ndarray
    counts: np.ndarray
    ece: float


def ece(confidence, accuracy, n_bins: int = 10) -> CalibrationReport:
    """Expected calibration error over equal-width bins of [0, 1].

    ece = sum_b (count_b / n) * |mean confidence_b - mean accuracy_b|.
    """
    conf = np.asarray(confidence, dtype=float)
    acc = np.asarray(accuracy, dtype=float)
    if len(conf) != len(acc) or len(conf) == 0:
        raise ValueError("confidence and accuracy must be nonempty and equal length")
    if conf.min() < 0.0 or conf.max() > 1.0:
        raise ValueError("confidence must lie in [0, 1]")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    assignment = np.minimum((conf * n_bins).astype(int), n_bins - 1)
    counts = np.bincount(assignment, minlength=n_bins)
    with np.errstate(invalid="ignore"):
        bin_conf = np.bincount(assignment, weights=conf, minlength=n_bins) / counts
        bin_acc = np.bincount(assignment, weights=acc, minlength=n_bins) / counts
    nonempty = counts > 0
    total = float(np.sum(counts[nonempty] / len(conf)
                         * np.abs(bin_conf[nonempty] - bin_acc[nonempty])))
    return CalibrationReport(edges, bin_conf, bin_acc, counts, total)


@dataclass
class TierReport:
    """HIGH/MED/LOW outcome rates, lift, monotonicity, and independence test.

    `lift` is HIGH rate / MED rate, None when MED is empty or has zero rate.
    `monotonic` requires strictly decreasing rates across the nonempty tiers
    in HIGH > MED > LOW order.  chi-squared is computed on the nonempty
    tier-by-outcome table; it is None (with a note) when degenerate.
    """

    counts: dict[str, int]
    rates: dict[str, float | None]
    lift: float | None
    monotonic: bool
    chi2: float | None
    chi2_p: float | None
    notes: list[str] = field(default_factory=list)


def tier_report(tiers, outcomes) -> TierReport:
    tier_arr = [str(t).upper() for t in tiers]
    out = np.asarray(outcomes, dtype=float)
    if len(tier_arr) != len(out) or len(out) == 0:
        raise ValueError("tiers and outcomes must be nonempty and equal length")
    unknown = sorted(set(tier_arr) - set(TIER_ORDER))
    if unknown:
        raise ValueError(f"unknown tier labels: {unknown}; expected {TIER_ORDER}")
    if not np.all(np.isin(out, (0.0, 1.0))):
        raise ValueError("outcomes must be 0/1")

    notes: list[str] = []
    counts: dict[str, int] = {}
    positives: dict[str, int] = {}
    rates: dict[str, float | None] = {}
    for name in TIER_ORDER:
        mask = np.asarray([t == name for t in tier_arr])
        counts[name] = int(mask.sum())
        positives[name] = int(out[mask].sum())
        rates[name] = float(out[mask].mean()) if mask.any() else None

    if rates["HIGH"] is not None and rates["MED"] is not None and rates["MED"] > 0:
        lift = rates["HIGH"] / rates["MED"]
    else:
        lift = None
        notes.append("lift undefined: MED tier empty or zero rate")

    present = [rates[name] for name in TIER_ORDER if rates[name] is not None]
    monotonic = len(present) >= 2 and all(a > b for a, b in zip(present, present[1:]))

    chi2 = chi2_p = None
    table = [[positives[name], counts[name] - positives[name]]
             for name in TIER_ORDER if counts[name] > 0]
    if len(table) >= 2:
        try:
            result = chi_squared_independence(table)
            chi2, chi2_p = result.statistic, result.p_value
        except DegenerateInputError as exc:
            notes.append(f"chi-squared unavailable: {exc}")
    else:
        notes.append("chi-squared unavailable: fewer than 2 nonempty tiers")

    return TierReport(counts=counts, rates=rates, lift=lift, monotonic=monotonic,
                      chi2=chi2, chi2_p=chi2_p, notes=notes)


@dataclass
class VarianceDecomposition:
    """How much confidence variance each feature group explains (via OLS R^2).

    `structural_fraction` = r2_structural / (r2_structural + r2_contextual);
    None when both are ~zero (nothing to apportion).
    """

    r2_structural: float
    r2_contextual: float
    structural_fraction: float | None


_FRACTION_FLOOR = 1e-9


def variance_decomposition(confidence, structural_features, contextual_features) -> VarianceDecomposition:
    conf = np.asarray(confidence, dtype=float)
    s = np.asarray(structural_features, dtype=float)
    c = np.asarray(contextual_features, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    if c.ndim == 1:
        c = c[:, None]
    if s.shape[1] == 0 or c.shape[1] == 0:
        raise ValueError("both feature groups must be nonempty")
    r2_s = fit_ols_r2(s, conf).r_squared
    r2_c = fit_ols_r2(c, conf).r_squared
    total = r2_s + r2_c
    fraction = r2_s / total if total > _FRACTION_FLOOR else None
    return VarianceDecomposition(r2_s, r2_c, fraction)
