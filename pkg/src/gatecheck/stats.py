"""Self-contained statistical primitives used by every diagnostic.

Rank correlations (tie-aware), two-sample Kolmogorov-Smirnov, Pearson
chi-squared independence, ROC AUC, L2-penalized logistic regression, and
ordinary least squares with R-squared.  All functions are pure; conventions
(tie handling, p-value approximations, solver tolerances) are fixed here and
documented so downstream numbers are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import special

from .errors import ConvergenceError, DegenerateInputError

__all__ = [
    "CorrelationResult",
    "TestResult",
    "LogisticModel",
    "OlsResult",
    "average_ranks",
    "spearman",
    "kendall_tau",
    "ks_two_sample",
    "chi_squared_independence",
    "roc_auc",
    "fit_logistic",
    "fit_ols_r2",
]


class CorrelationResult(NamedTuple):
    statistic: float
    p_value: float


class TestResult(NamedTuple):
    statistic: float
    p_value: float


def _as_1d(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _check_paired(x, y) -> tuple[np.ndarray, np.ndarray]:
    xa = _as_1d(x, "x")
    ya = _as_1d(y, "y")
    if len(xa) != len(ya):
        raise ValueError(f"paired sequences differ in length: {len(xa)} vs {len(ya)}")
    return xa, ya


def average_ranks(values: Sequence[float] | np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the average rank of their group."""
    arr = _as_1d(values, "values")
    order = np.argsort(arr, kind="mergesort")
    ranks = np.empty(len(arr), dtype=float)
    sorted_vals = arr[order]
    i = 0
    n = len(arr)
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> CorrelationResult:
    """Spearman rho on average ranks, with the large-sample t approximation.

    Requires n >= 3 and non-constant sequences on both sides: a constant
    sequence has no ranking, so it raises DegenerateInputError rather than
    returning a silent zero.
    """
    xa, ya = _check_paired(x, y)
    n = len(xa)
    if n < 3:
        raise ValueError(f"need at least 3 pairs, got {n}")
    if np.all(xa == xa[0]) or np.all(ya == ya[0]):
        raise DegenerateInputError("constant sequence has no rank ordering")
    rx = average_ranks(xa)
    ry = average_ranks(ya)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    rho = float(rx @ ry) / denom
    rho = max(-1.0, min(1.0, rho))
    if abs(rho) == 1.0:
        p = 0.0
    else:
        t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
        # two-sided tail of Student t with n-2 degrees of freedom
        p = 2.0 * float(special.stdtr(n - 2, -abs(t)))
    return CorrelationResult(rho, min(1.0, p))


def kendall_tau(x, y) -> CorrelationResult:
    """Kendall tau-b (tie-corrected) with the normal-approximation p-value.

    Concordant/discordant counting is O(n log n): sort by (x, y) and count
    strict inversions of y by mergesort.
    """
    xa, ya = _check_paired(x, y)
    n = len(xa)
    if n < 2:
        raise ValueError(f"need at least 2 pairs, got {n}")
    if np.all(xa == xa[0]) or np.all(ya == ya[0]):
        raise DegenerateInputError("constant sequence has no rank ordering")

    order = np.lexsort((ya, xa))
    xs = xa[order]
    ys = ya[order]

    n0 = n * (n - 1) // 2
    xtie = _tie_pair_count(xs)  # xs is sorted
    ytie = _tie_pair_count(np.sort(ya))
    both = _joint_tie_pair_count(xs, ys)
    swaps = _count_inversions(ys)

    con_minus_dis = n0 - xtie - ytie + both - 2 * swaps
    denom = math.sqrt(float(n0 - xtie)) * math.sqrt(float(n0 - ytie))
    if denom == 0.0:
        raise DegenerateInputError("all pairs tied; tau-b undefined")
    tau = con_minus_dis / denom
    tau = max(-1.0, min(1.0, tau))
    # classic large-sample normal approximation for tau under independence
    var = (4.0 * n + 10.0) / (9.0 * n * (n - 1.0))
    z = tau / math.sqrt(var)
    p = float(special.erfc(abs(z) / math.sqrt(2.0)))
    return CorrelationResult(tau, min(1.0, p))


def _tie_pair_count(sorted_vals: np.ndarray) -> int:
    total = 0
    i = 0
    n = len(sorted_vals)
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        t = j - i + 1
        total += t * (t - 1) // 2
        i = j + 1
    return total


def _joint_tie_pair_count(xs: np.ndarray, ys: np.ndarray) -> int:
    total = 0
    i = 0
    n = len(xs)
    while i < n:
        j = i
        while j + 1 < n and xs[j + 1] == xs[i] and ys[j + 1] == ys[i]:
            j += 1
        t = j - i + 1
        total += t * (t - 1) // 2
        i = j + 1
    return total


def _count_inversions(values: np.ndarray) -> int:
    """Number of index pairs i < j with values[i] > values[j] (strict)."""
    vals = list(values)
    _, inv = _merge_count(vals)
    return inv


def _merge_count(vals: list) -> tuple[list, int]:
    n = len(vals)
    if n <= 1:
        return vals, 0
    mid = n // 2
    left, invl = _merge_count(vals[:mid])
    right, invr = _merge_count(vals[mid:])
    merged = []
    inv = invl + invr
    i = j = 0
    while i < len(left) and j < len(right):
        if left[i] <= right[j]:
            merged.append(left[i])
            i += 1
        else:
            merged.append(right[j])
            inv += len(left) - i
            j += 1
    merged.extend(left[i:])
    merged.extend(right[j:])
    return merged, inv


_KS_SERIES_TERMS = 100


def _kolmogorov_sf(lam: float) -> float:
    """Asymptotic Kolmogorov survival function, series truncated at 100 terms."""
    if lam <= 0.0:
        return 1.0
    total = 0.0
    for k in range(1, _KS_SERIES_TERMS + 1):
        term = math.exp(-2.0 * k * k * lam * lam)
        total += -term if k % 2 == 0 else term
        if term == 0.0:
            break
    return min(1.0, max(0.0, 2.0 * total))


def ks_two_sample(a, b) -> TestResult:
    """Two-sample KS statistic and asymptotic p-value.

    The statistic is the sup over the pooled support of |F_a - F_b|; the
    p-value uses the asymptotic Kolmogorov distribution with effective sample
    size n_a*n_b/(n_a+n_b).
    """
    aa = _as_1d(a, "a")
    ba = _as_1d(b, "b")
    if len(aa) == 0 or len(ba) == 0:
        raise ValueError("both samples must be nonempty")
    a_sorted = np.sort(aa)
    b_sorted = np.sort(ba)
    pooled = np.concatenate([a_sorted, b_sorted])
    cdf_a = np.searchsorted(a_sorted, pooled, side="right") / len(aa)
    cdf_b = np.searchsorted(b_sorted, pooled, side="right") / len(ba)
    stat = float(np.max(np.abs(cdf_a - cdf_b)))
    n_eff = len(aa) * len(ba) / (len(aa) + len(ba))
    p = _kolmogorov_sf(math.sqrt(n_eff) * stat)
    return TestResult(stat, p)


def chi_squared_independence(table) -> TestResult:
    """Pearson chi-squared test of independence on a 2-D count table.

    Requires at least 2 rows and 2 columns with positive marginals; a zero
    marginal makes the expected counts degenerate and raises.
    """
    counts = np.asarray(table, dtype=float)
    if counts.ndim != 2:
        raise ValueError("table must be two-dimensional")
    if np.any(counts < 0) or not np.all(np.isfinite(counts)):
        raise ValueError("counts must be finite and non-negative")
    row_sums = counts.sum(axis=1)
    col_sums = counts.sum(axis=0)
    if np.any(row_sums == 0) or np.any(col_sums == 0):
        raise DegenerateInputError("zero marginal row or column")
    if counts.shape[0] < 2 or counts.shape[1] < 2:
        raise ValueError("table must have at least 2 rows and 2 columns")
    total = counts.sum()
    expected = np.outer(row_sums, col_sums) / total
    stat = float(((counts - expected) ** 2 / expected).sum())
    dof = (counts.shape[0] - 1) * (counts.shape[1] - 1)
    p = float(special.chdtrc(dof, stat))
    return TestResult(stat, p)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores contribute 1/2.

    Both classes must be present, otherwise the quantity is undefined.
    """
    s = _as_1d(scores, "scores")
    y = np.asarray(labels)
    if len(s) != len(y):
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0/1")
    y = y.astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("AUC needs at least one positive and one negative label")
    ranks = average_ranks(s)
    rank_sum_pos = float(ranks[y].sum())
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


@dataclass
class LogisticModel:
    """Fitted L2-penalized logistic regression.

    Weights are stored in standardized feature space together with the
    scaler; `weights` / `intercept` expose the equivalent original-scale
    parameters.  `objective_history` records the penalized log-likelihood
    after every accepted step (non-decreasing by construction).
    """

    weights_std: np.ndarray
    intercept_std: float
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    l2: float
    converged: bool
    n_iter: int
    gradient_norm: float
    objective_history: list[float] = field(default_factory=list)

    @property
    def weights(self) -> np.ndarray:
        return self.weights_std / self.feature_scale

    @property
    def intercept(self) -> float:
        return float(self.intercept_std - (self.weights_std * self.feature_mean / self.feature_scale).sum())

    def decision_function(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=float)
        z = (x - self.feature_mean) / self.feature_scale
        return z @ self.weights_std + self.intercept_std

    def predict_proba(self, features) -> np.ndarray:
        return _sigmoid(self.decision_function(features))

    def penalized_log_likelihood(self, features, labels) -> float:
        y = np.asarray(labels, dtype=float)
        eta = self.decision_function(features)
        return _logistic_objective(eta, y, self.weights_std, self.l2)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _logistic_objective(eta: np.ndarray, y: np.ndarray, w: np.ndarray, l2: float) -> float:
    # log-likelihood written as y*eta - log(1+exp(eta)), stable for large |eta|
    ll = float((y * eta).sum() - np.logaddexp(0.0, eta).sum())
    return ll - 0.5 * l2 * float(w @ w)


_LOGISTIC_MAX_ITER = 200
_LOGISTIC_GRAD_TOL = 1e-8


def fit_logistic(features, labels, l2: float = 1.0) -> LogisticModel:
    """Maximize the L2-penalized log-likelihood by damped Newton (IRLS).

    Features are z-scored internally (zero-variance columns pinned to scale
    1) and the scaler is retained for inference; the penalty applies to the
    weights only, never the intercept.  The start point is always the zero
    vector, so the fit is deterministic.  Steps are halved until the
    objective does not decrease; if the Hessian solve fails or goes
    non-finite, the step falls back to plain gradient ascent.  Convergence
    is gradient max-norm < 1e-8 within 200 iterations, otherwise
    ConvergenceError carries the last iterate and gradient norm.
    """
    x = np.asarray(features, dtype=float)
    if x.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    y = np.asarray(labels, dtype=float)
    if len(y) != x.shape[0]:
        raise ValueError("rows(features) must equal len(labels)")
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ValueError("labels must be 0/1")
    if l2 < 0:
        raise ValueError("l2 must be non-negative")

    n, d = x.shape
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0.0] = 1.0
    z = (x - mean) / scale

    beta = np.zeros(d + 1)  # weights then intercept
    design = np.hstack([z, np.ones((n, 1))])
    penalty = np.zeros(d + 1)
    penalty[:d] = l2

    obj = _logistic_objective(design @ beta, y, beta[:d], l2)
    history = [obj]
    grad_norm = math.inf

    for iteration in range(1, _LOGISTIC_MAX_ITER + 1):
        eta = design @ beta
        p = _sigmoid(eta)
        grad = design.T @ (y - p) - penalty * beta
        grad_norm = float(np.max(np.abs(grad)))
        if grad_norm < _LOGISTIC_GRAD_TOL:
            return LogisticModel(beta[:d].copy(), float(beta[d]), mean, scale, l2,
                                 True, iteration - 1, grad_norm, history)

        w = p * (1.0 - p)
        hess = design.T @ (design * w[:, None]) + np.diag(penalty)
        step = None
        if np.all(np.isfinite(hess)):
            try:
                step = np.linalg.solve(hess, grad)
            except np.linalg.LinAlgError:
                step = None
        if step is None or not np.all(np.isfinite(step)):
            step = grad / max(1.0, float(np.abs(w @ design**2).max()))  # gradient fallback

        # damping: halve until the objective does not decrease
        t = 1.0
        improved = False
        for _ in range(50):
            candidate = beta + t * step
            cand_obj = _logistic_objective(design @ candidate, y, candidate[:d], l2)
            if math.isfinite(cand_obj) and cand_obj >= obj:
                beta = candidate
                obj = cand_obj
                improved = True
                break
            t *= 0.5
        if not improved:
            # no ascent direction left at float precision: treat as converged
            # only if the gradient is already tiny, else report failure
            if grad_norm < 1e-6:
                return LogisticModel(beta[:d].copy(), float(beta[d]), mean, scale, l2,
                                     True, iteration, grad_norm, history)
            raise ConvergenceError(
                f"logistic fit stalled at gradient max-norm {grad_norm:.3e}",
                last_iterate=beta, gradient_norm=grad_norm)
        history.append(obj)

    raise ConvergenceError(
        f"logistic fit did not converge in {_LOGISTIC_MAX_ITER} iterations "
        f"(gradient max-norm {grad_norm:.3e})",
        last_iterate=beta, gradient_norm=grad_norm)


class OlsResult(NamedTuple):
    weights: np.ndarray  # intercept first, then one weight per column
    r_squared: float


def fit_ols_r2(features, target) -> OlsResult:
    """Least squares with intercept; R^2 = 1 - SSR/SST.

    The design (with intercept prepended) must have full column rank and more
    rows than columns; a constant target makes R^2 undefined.  Both raise
    DegenerateInputError.
    """
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = _as_1d(target, "target")
    if x.shape[0] != len(y):
        raise ValueError("features and target differ in length")
    n, d = x.shape
    if n <= d + 1:
        raise ValueError(f"need more rows ({n}) than columns including intercept ({d + 1})")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    design = np.hstack([np.ones((n, 1)), x])
    rank = np.linalg.matrix_rank(design)
    if rank < d + 1:
        raise DegenerateInputError(f"rank-deficient design: rank {rank} < {d + 1} columns")
    sst = float(((y - y.mean()) ** 2).sum())
    if sst == 0.0:
        raise DegenerateInputError("constant target: R^2 undefined")
    weights, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
    ssr = float(((y - design @ weights) ** 2).sum())
    r2 = 1.0 - ssr / sst
    return OlsResult(weights, r2)
