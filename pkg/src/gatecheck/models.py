"""Ranked-decision backbone: ALS matrix factorization and mean baselines.

The factorization trains on mean-centered ratings with per-entity ridge
solves over an intercept (bias) plus `rank` factors; the global mean is added
back at prediction time and predictions are clipped to the rating range.
Regularization uses the observation-weighted convention (penalty
lambda * n_obs per entity parameter vector), which keeps every per-entity
normal equation non-singular for lambda > 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import RATING_MAX, RATING_MIN, RatingRecord
from .errors import ConvergenceError, DataFormatError

__all__ = [
    "MfModel",
    "BaselineModel",
    "BASELINE_KINDS",
    "fit_als",
    "fit_baseline",
    "predict_many",
    "rmse",
    "save_model",
    "load_model",
]

BASELINE_KINDS = ("global_mean", "user_mean", "item_mean")

_MODEL_FORMAT_HEADER = "gatecheck-mf 1"


def _clip(value: float) -> float:
    return min(RATING_MAX, max(RATING_MIN, value))


@dataclass
class MfModel:
    """Low-rank factors and biases keyed by entity id.

    A missing entity contributes nothing, so cold predictions fall back
    toward the global mean.
    """

    rank: int
    lam: float
    global_mean: float
    user_factors: dict[int, np.ndarray] = field(repr=False)
    item_factors: dict[int, np.ndarray] = field(repr=False)
    user_bias: dict[int, float] = field(repr=False)
    item_bias: dict[int, float] = field(repr=False)
    objective_history: list[float] = field(default_factory=list, repr=False)

    def predict(self, user_id: int, item_id: int) -> float:
        value = self.global_mean
        u = self.user_factors.get(user_id)
        v = self.item_factors.get(item_id)
        if u is not None:
            value += self.user_bias[user_id]
        if v is not None:
            value += self.item_bias[item_id]
        if u is not None and v is not None:
            value += float(u @ v)
        return _clip(value)


@dataclass
class BaselineModel:
    """Per-entity mean with global fallback (or the global mean alone)."""

    kind: str
    global_mean: float
    means: dict[int, float] = field(repr=False)

    def predict(self, user_id: int, item_id: int) -> float:
        if self.kind == "global_mean":
            return _clip(self.global_mean)
        key = user_id if self.kind == "user_mean" else item_id
        return _clip(self.means.get(key, self.global_mean))


def fit_als(train: Sequence[RatingRecord], rank: int = 10, lam: float = 0.1,
            iterations: int = 20, seed: int = 0) -> MfModel:
    """Alternating exact ridge solves on mean-centered ratings.

    Each half-iteration solves, for every entity, the (1 + rank)-dimensional
    ridge problem over its bias and factor vector with the other side held
    fixed.  Factors start from seeded uniform(0, 1) entries scaled by
    1/sqrt(rank); biases start at zero.  The penalized squared error is
    recorded after every half-iteration and is non-increasing because each
    half solve is exact.
    """
    if not train:
        raise ValueError("train must be nonempty")
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if lam <= 0:
        raise ValueError("lambda must be > 0")

    users = sorted({r.user_id for r in train})
    items = sorted({r.item_id for r in train})
    u_index = {u: i for i, u in enumerate(users)}
    i_index = {m: i for i, m in enumerate(items)}

    n_obs = len(train)
    u_idx = np.fromiter((u_index[r.user_id] for r in train), dtype=np.int64, count=n_obs)
    i_idx = np.fromiter((i_index[r.item_id] for r in train), dtype=np.int64, count=n_obs)
    ratings = np.fromiter((r.rating for r in train), dtype=float, count=n_obs)
    global_mean = float(ratings.mean())
    centered = ratings - global_mean

    rng = np.random.default_rng(seed)
    user_mat = rng.uniform(0.0, 1.0, size=(len(users), rank)) / np.sqrt(rank)
    item_mat = rng.uniform(0.0, 1.0, size=(len(items), rank)) / np.sqrt(rank)
    user_bias = np.zeros(len(users))
    item_bias = np.zeros(len(items))

    by_user = _grouping(u_idx, len(users))
    by_item = _grouping(i_idx, len(items))
    n_user_obs = np.bincount(u_idx, minlength=len(users)).astype(float)
    n_item_obs = np.bincount(i_idx, minlength=len(items)).astype(float)

    def objective() -> float:
        pred = (np.einsum("ij,ij->i", user_mat[u_idx], item_mat[i_idx])
                + user_bias[u_idx] + item_bias[i_idx])
        err = float(((centered - pred) ** 2).sum())
        pen_u = float(n_user_obs @ ((user_mat**2).sum(axis=1) + user_bias**2))
        pen_i = float(n_item_obs @ ((item_mat**2).sum(axis=1) + item_bias**2))
        return err + lam * (pen_u + pen_i)

    history: list[float] = [objective()]
    for _ in range(iterations):
        _solve_side(user_mat, user_bias, item_mat, item_bias, by_user, i_idx, centered, lam)
        history.append(objective())
        _solve_side(item_mat, item_bias, user_mat, user_bias, by_item, u_idx, centered, lam)
        history.append(objective())

    if not (np.all(np.isfinite(user_mat)) and np.all(np.isfinite(item_mat))
            and np.all(np.isfinite(user_bias)) and np.all(np.isfinite(item_bias))):
        raise ConvergenceError("ALS produced non-finite factors")

    return MfModel(
        rank=rank, lam=lam, global_mean=global_mean,
        user_factors={u: user_mat[i].copy() for u, i in u_index.items()},
        item_factors={m: item_mat[i].copy() for m, i in i_index.items()},
        user_bias={u: float(user_bias[i]) for u, i in u_index.items()},
        item_bias={m: float(item_bias[i]) for m, i in i_index.items()},
        objective_history=history)


def _grouping(idx: np.ndarray, n_groups: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sort observation positions by group and return (order, starts, group ids)."""
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    group_ids, starts = np.unique(sorted_idx, return_index=True)
    return order, starts, group_ids


def _solve_side(target: np.ndarray, target_bias: np.ndarray,
                other: np.ndarray, other_bias: np.ndarray,
                grouping, other_idx: np.ndarray,
                centered: np.ndarray, lam: float) -> None:
    """Exact ridge solve for every (bias, factor) row of `target`."""
    order, starts, group_ids = grouping
    rank = target.shape[1]
    factors = other[other_idx[order]]
    design = np.hstack([np.ones((len(factors), 1)), factors])
    values = (centered - other_bias[other_idx])[order]
    gram = np.add.reduceat(design[:, :, None] * design[:, None, :], starts, axis=0)
    rhs = np.add.reduceat(design * values[:, None], starts, axis=0)
    counts = np.diff(np.append(starts, len(order))).astype(float)
    eye = np.eye(rank + 1)
    gram = gram + (lam * counts)[:, None, None] * eye
    solution = np.linalg.solve(gram, rhs[:, :, None])[:, :, 0]
    target_bias[group_ids] = solution[:, 0]
    target[group_ids] = solution[:, 1:]


def fit_baseline(train: Sequence[RatingRecord], kind: str) -> BaselineModel:
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}; expected one of {BASELINE_KINDS}")
    if not train:
        raise ValueError("train must be nonempty")
    ratings = np.fromiter((r.rating for r in train), dtype=float, count=len(train))
    global_mean = float(ratings.mean())
    means: dict[int, float] = {}
    if kind != "global_mean":
        sums: dict[int, float] = {}
        counts: dict[int, int] = {}
        for r in train:
            key = r.user_id if kind == "user_mean" else r.item_id
            sums[key] = sums.get(key, 0.0) + r.rating
            counts[key] = counts.get(key, 0) + 1
        means = {k: sums[k] / counts[k] for k in sums}
    return BaselineModel(kind=kind, global_mean=global_mean, means=means)


def predict_many(model: MfModel | BaselineModel, records: Sequence[RatingRecord]) -> np.ndarray:
    return np.fromiter((model.predict(r.user_id, r.item_id) for r in records),
                       dtype=float, count=len(records))


def rmse(predicted, actual) -> float:
    pred = np.asarray(predicted, dtype=float)
    act = np.asarray(actual, dtype=float)
    if len(pred) != len(act):
        raise ValueError("predicted and actual differ in length")
    if len(pred) == 0:
        raise ValueError("rmse of an empty set is undefined")
    return float(np.sqrt(np.mean((pred - act) ** 2)))


def save_model(model: MfModel, path: str | Path) -> None:
    """Write the versioned flat text format: header, scalars, one line per entity."""
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(f"{_MODEL_FORMAT_HEADER}\n")
        handle.write(f"rank {model.rank}\n")
        handle.write(f"lambda {model.lam!r}\n")
        handle.write(f"global_mean {model.global_mean!r}\n")
        handle.write(f"users {len(model.user_factors)}\n")
        handle.write(f"items {len(model.item_factors)}\n")
        for entity_id in sorted(model.user_factors):
            vec = " ".join(repr(v) for v in model.user_factors[entity_id])
            handle.write(f"u {entity_id} {model.user_bias[entity_id]!r} {vec}\n")
        for entity_id in sorted(model.item_factors):
            vec = " ".join(repr(v) for v in model.item_factors[entity_id])
            handle.write(f"i {entity_id} {model.item_bias[entity_id]!r} {vec}\n")


def load_model(path: str | Path) -> MfModel:
    with open(path, "r", encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    if not lines or lines[0] != _MODEL_FORMAT_HEADER:
        raise DataFormatError(
            f"line 1: expected header {_MODEL_FORMAT_HEADER!r}", line_number=1)

    def scalar(line_no: int, name: str) -> str:
        parts = lines[line_no - 1].split(" ", 1)
        if len(parts) != 2 or parts[0] != name:
            raise DataFormatError(f"line {line_no}: expected '{name} <value>'",
                                  line_number=line_no)
        return parts[1]

    rank = int(scalar(2, "rank"))
    lam = float(scalar(3, "lambda"))
    global_mean = float(scalar(4, "global_mean"))
    n_users = int(scalar(5, "users"))
    n_items = int(scalar(6, "items"))
    user_factors: dict[int, np.ndarray] = {}
    item_factors: dict[int, np.ndarray] = {}
    user_bias: dict[int, float] = {}
    item_bias: dict[int, float] = {}
    for line_no, line in enumerate(lines[6:], start=7):
        parts = line.split()
        if len(parts) != rank + 3 or parts[0] not in ("u", "i"):
            raise DataFormatError(f"line {line_no}: malformed factor line", line_number=line_no)
        entity_id = int(parts[1])
        bias = float(parts[2])
        vec = np.asarray([float(v) for v in parts[3:]], dtype=float)
        if parts[0] == "u":
            user_factors[entity_id] = vec
            user_bias[entity_id] = bias
        else:
            item_factors[entity_id] = vec
            item_bias[entity_id] = bias
    if len(user_factors) != n_users or len(item_factors) != n_items:
        raise DataFormatError(
            f"factor count mismatch: header says {n_users} users / {n_items} items, "
            f"found {len(user_factors)} / {len(item_factors)}")
    return MfModel(rank=rank, lam=lam, global_mean=global_mean,
                   user_factors=user_factors, item_factors=item_factors,
                   user_bias=user_bias, item_bias=item_bias)
