"""Synthetic worlds with controllable structural vs. contextual uncertainty.

The generative law: each (user, item) pair x has a stable value f(x) from
seeded low-rank factors, a contextual term g_x(t) following an independent
Brownian drift path per pair (step variance drift_step^2 per time unit),
and i.i.d. Gaussian observation noise.  Per-pair observation counts follow
a discrete power law, train draws land at uniform times in the training
horizon, and one test observation per pair lands at a later fixed time.

With drift_step = 0 all uncertainty is structural (estimation error of the
per-pair mean scales as obs_noise/sqrt(count)); with a large drift_step the
dominant error is contextual and historical counts stop ranking it.  Two
pinned default specs (structural / high-drift) make the pass/fail claims of
the gating experiments reproducible statements about fixed worlds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .confidence import ConfidenceSignal
from .data import RATING_MAX, RATING_MIN, RatingRecord
from .diagnostics import AbstentionCurve, abstention_curve
from .errors import ConfigError

__all__ = [
    "WorldSpec",
    "SyntheticWorld",
    "ContextualComparison",
    "generate",
    "structural_experiment",
    "contextual_experiment",
    "default_world_spec",
    "DEFAULT_FRACTIONS",
]

DEFAULT_FRACTIONS = (0.0, 0.05, 0.10, 0.15, 0.20, 0.25)

SPEC_VERSION = 1

SECONDS_PER_DAY = 86400.0


@dataclass(frozen=True)
class WorldSpec:
    """Complete recipe for one synthetic world; regeneration is bit-exact."""

    n_users: int = 100
    n_items: int = 100
    rank: int = 3
    count_exponent: float = 1.5
    count_min: int = 1
    count_max: int = 50
    train_horizon: float = 100.0
    test_offset: float = 20.0
    drift_step: float = 0.0
    obs_noise: float = 0.5
    base_value: float = 3.0
    signal_scale: float = 0.6
    seed: int = 0
    version: int = SPEC_VERSION

    def __post_init__(self):
        if self.n_users * self.n_items < 100:
            raise ValueError("need n_users * n_items >= 100")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if not (1 <= self.count_min <= self.count_max):
            raise ValueError("need 1 <= count_min <= count_max")
        for name in ("drift_step", "obs_noise", "signal_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.train_horizon <= 0 or self.test_offset <= 0:
            raise ValueError("train_horizon and test_offset must be > 0")
        if self.version != SPEC_VERSION:
            raise ConfigError(f"unsupported world spec version {self.version}")

    @property
    def test_time(self) -> float:
        return self.train_horizon + self.test_offset

    def count_pmf(self) -> np.ndarray:
        support = np.arange(self.count_min, self.count_max + 1, dtype=float)
        weights = support ** (-self.count_exponent)
        return weights / weights.sum()

    def structural_mse(self) -> float:
        """Mean squared estimation error of the per-pair mean estimator:
        obs_noise^2 * E[1/count] under the count distribution."""
        support = np.arange(self.count_min, self.count_max + 1, dtype=float)
        return float(self.obs_noise**2 * (self.count_pmf() / support).sum())

    def drift_variance(self) -> float:
        """Variance of the drift term at test time: drift_step^2 * elapsed."""
        return self.drift_step**2 * self.test_time

    def drift_dominance(self) -> float:
        """Ratio of drift variance to structural error; >= 10 counts as the
        high-drift regime."""
        mse = self.structural_mse()
        return math.inf if mse == 0 else self.drift_variance() / mse

    def to_file(self, path: str | Path) -> None:
        lines = ["# synthetic world spec (key = value)"]
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)!r}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def from_file(cls, path: str | Path) -> "WorldSpec":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def from_text(cls, text: str) -> WorldSpec:
        int_fields = {"n_users", "n_items", "rank", "count_min", "count_max", "seed", "version"}
        known = {f.name for f in fields(cls)}
        values: dict[str, float | int] = {}
        for line_no, line in enumerate(text.splitlines(), start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"line {line_no}: expected 'key = value', got {body!r}")
            key, raw = (part.strip() for part in body.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {line_no}: unknown key {key!r}")
            try:
                values[key] = int(raw) if key in int_fields else float(raw)
            except ValueError as exc:
                raise ConfigError(f"line {line_no}: {exc}") from exc
        return cls(**values)  # type: ignore[arg-type]


@dataclass
class SyntheticWorld:
    """Realized world: truths, drift paths, and observations.

    Flat layout: pair p = (user_ids[p], item_ids[p]); its train draws occupy
    positions offsets[p]:offsets[p+1] of the *_flat arrays.
    """

    spec: WorldSpec
    user_ids: np.ndarray
    item_ids: np.ndarray
    f_values: np.ndarray
    counts: np.ndarray
    offsets: np.ndarray
    train_times: np.ndarray
    train_g: np.ndarray
    train_values: np.ndarray
    test_g: np.ndarray
    test_values: np.ndarray

    @property
    def n_pairs(self) -> int:
        return len(self.f_values)

    def pair_mean_estimates(self) -> np.ndarray:
        sums = np.add.reduceat(self.train_values, self.offsets[:-1])
        return sums / self.counts

    def mean_train_g(self) -> np.ndarray:
        sums = np.add.reduceat(self.train_g, self.offsets[:-1])
        return sums / self.counts

    def last_train_times(self) -> np.ndarray:
        return self.train_times[self.offsets[1:] - 1]

    def drift_displacement(self) -> np.ndarray:
        """True contextual error per pair: test-time drift minus the drift
        already baked into the pair's training window."""
        return self.test_g - self.mean_train_g()

    def to_rating_records(self, clip: bool = True) -> tuple[list[RatingRecord], list[RatingRecord]]:
        """(train, test) in the ratings layout: values clipped to the rating
        range, times scaled day->seconds and rounded to ints."""

        def rec(user: int, item: int, value: float, t: float) -> RatingRecord:
            v = min(RATING_MAX, max(RATING_MIN, value)) if clip else value
            return RatingRecord(int(user), int(item), float(v), int(round(t * SECONDS_PER_DAY)))

        pair_idx = np.repeat(np.arange(self.n_pairs), self.counts)
        train = [rec(self.user_ids[p], self.item_ids[p], self.train_values[j], self.train_times[j])
                 for j, p in enumerate(pair_idx)]
        test = [rec(self.user_ids[p], self.item_ids[p], self.test_values[p], self.spec.test_time)
                for p in range(self.n_pairs)]
        return train, test

    def export_ratings(self, path: str | Path) -> None:
        """Write train+test in the tab-separated ratings wire format."""
        train, test = self.to_rating_records()
        with open(path, "w", encoding="utf-8") as handle:
            for r in train + test:
                handle.write(f"{r.user_id}\t{r.item_id}\t{r.rating!r}\t{r.timestamp}\n")


def generate(spec: WorldSpec) -> SyntheticWorld:
    """Materialize a world; the rng draw order is fixed so regeneration is
    bit-exact: factors, counts, draw times, drift steps, test drift steps,
    train noise, test noise."""
    rng = np.random.default_rng(spec.seed)
    n_pairs = spec.n_users * spec.n_items
    factor_scale = math.sqrt(spec.signal_scale) / spec.rank**0.25

    u = rng.normal(0.0, factor_scale, size=(spec.n_users, spec.rank))
    v = rng.normal(0.0, factor_scale, size=(spec.n_items, spec.rank))
    user_ids, item_ids = np.divmod(np.arange(n_pairs), spec.n_items)
    user_ids = user_ids + 1
    item_ids = item_ids + 1
    f_values = spec.base_value + np.einsum("pk,pk->p", u[user_ids - 1], v[item_ids - 1])

    support = np.arange(spec.count_min, spec.count_max + 1)
    counts = rng.choice(support, size=n_pairs, p=spec.count_pmf())
    offsets = np.zeros(n_pairs + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    total = int(offsets[-1])
    pair_idx = np.repeat(np.arange(n_pairs), counts)

    times = rng.uniform(0.0, spec.train_horizon, size=total)
    # sort within each pair without a per-pair loop: offset by pair index
    order = np.argsort(pair_idx * (2.0 * spec.train_horizon) + times, kind="stable")
    times = times[order]

    starts = offsets[:-1]
    prev = np.empty(total)
    prev[1:] = times[:-1]
    prev[starts] = 0.0
    dt = times - prev

    steps = rng.normal(0.0, 1.0, size=total) * spec.drift_step * np.sqrt(dt)
    cumulative = np.cumsum(steps)
    bases = np.where(starts > 0, cumulative[starts - 1], 0.0)
    train_g = cumulative - np.repeat(bases, counts)

    last_g = train_g[offsets[1:] - 1]
    last_t = times[offsets[1:] - 1]
    test_steps = rng.normal(0.0, 1.0, size=n_pairs)
    test_g = last_g + test_steps * spec.drift_step * np.sqrt(spec.test_time - last_t)

    train_eps = rng.normal(0.0, spec.obs_noise, size=total)
    test_eps = rng.normal(0.0, spec.obs_noise, size=n_pairs)

    train_values = np.repeat(f_values, counts) + train_g + train_eps
    test_values = f_values + test_g + test_eps

    return SyntheticWorld(spec=spec, user_ids=user_ids, item_ids=item_ids,
                          f_values=f_values, counts=counts.astype(np.int64),
                          offsets=offsets, train_times=times, train_g=train_g,
                          train_values=train_values, test_g=test_g,
                          test_values=test_values)


def _count_signal(counts: np.ndarray) -> ConfidenceSignal:
    raw = counts.astype(float)
    lo, hi = float(raw.min()), float(raw.max())
    warnings = []
    if hi == lo:
        scores = np.full(len(raw), 0.5)
        warnings.append("degenerate signal: all observation counts identical")
    else:
        scores = (raw - lo) / (hi - lo)
    return ConfidenceSignal("count_based", scores, np.arange(len(raw)), warnings)


def structural_experiment(spec: WorldSpec, fractions=DEFAULT_FRACTIONS) -> AbstentionCurve:
    """Gate the per-pair-mean estimator with count confidence in a pure
    structural world (drift_step must be 0)."""
    if spec.drift_step != 0.0:
        raise ValueError("structural experiment requires drift_step = 0")
    world = generate(spec)
    signal = _count_signal(world.counts)
    curve = abstention_curve(world.pair_mean_estimates(), world.test_values,
                             signal.scores, fractions)
    curve.warnings.extend(signal.warnings)
    return curve


@dataclass
class ContextualComparison:
    """Count-based vs. recency-proxy vs. oracle curves on one drifting world.

    `drift_dominance` restates the premise: how many times the drift
    variance exceeds the structural estimation error.
    """

    curves: dict[str, AbstentionCurve]
    drift_dominance: float
    warnings: list[str]


def contextual_experiment(spec: WorldSpec, fractions=DEFAULT_FRACTIONS) -> ContextualComparison:
    """Same world, three confidence signals: historical counts, negated
    staleness of the last observation, and the oracle (negated magnitude of
    the true drift displacement)."""
    if spec.drift_step <= 0.0:
        raise ValueError("contextual experiment requires drift_step > 0")
    world = generate(spec)
    estimates = world.pair_mean_estimates()
    signal = _count_signal(world.counts)
    staleness = spec.test_time - world.last_train_times()
    curves = {
        "count_based": abstention_curve(estimates, world.test_values, signal.scores, fractions),
        "recency": abstention_curve(estimates, world.test_values, -staleness, fractions),
        "oracle": abstention_curve(estimates, world.test_values,
                                   -np.abs(world.drift_displacement()), fractions),
    }
    curves["count_based"].warnings.extend(signal.warnings)
    return ContextualComparison(curves=curves, drift_dominance=spec.drift_dominance(),
                                warnings=list(signal.warnings))


def default_world_spec(kind: str) -> WorldSpec:
    """Load one of the two pinned world specs shipped with the package."""
    if kind not in ("structural", "contextual"):
        raise ValueError(f"kind must be 'structural' or 'contextual', got {kind!r}")
    text = resources.files("gatecheck").joinpath(f"worlds/{kind}_default.cfg").read_text("utf-8")
    return WorldSpec.from_text(text)
