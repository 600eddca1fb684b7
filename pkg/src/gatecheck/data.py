"""Rating-file ingestion, distribution-shift splits, and generic score streams.

Wire formats:
  * MovieLens 100K ratings: tab-separated ``user \\t item \\t rating \\t
    timestamp``, one record per line, ratings in [1, 5], integer timestamps.
  * Generic outcome stream: CSV with header ``confidence,outcome`` and an
    optional third ``tier`` column; confidence must lie in [0, 1].
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DataFormatError

__all__ = [
    "RatingRecord",
    "SplitSpec",
    "SplitDataset",
    "OutcomeStream",
    "SPLIT_KINDS",
    "load_movielens",
    "make_split",
    "load_outcome_stream",
    "write_outcome_stream",
]

RATING_MIN = 1.0
RATING_MAX = 5.0

SPLIT_KINDS = ("temporal", "cold_user", "cold_item")


class RatingRecord(NamedTuple):
    user_id: int
    item_id: int
    rating: float
    timestamp: int


def load_movielens(path: str | Path) -> list[RatingRecord]:
    """Parse a MovieLens-format ratings file, reporting bad lines by number."""
    records: list[RatingRecord] = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataFormatError(
                    f"line {line_no}: expected 4 tab-separated fields, got {len(parts)}",
                    line_number=line_no)
            try:
                user = int(parts[0])
                item = int(parts[1])
                rating = float(parts[2])
                timestamp = int(parts[3])
            except ValueError as exc:
                raise DataFormatError(f"line {line_no}: {exc}", line_number=line_no) from exc
            if not (RATING_MIN <= rating <= RATING_MAX):
                raise DataFormatError(
                    f"line {line_no}: rating {rating} outside [{RATING_MIN}, {RATING_MAX}]",
                    line_number=line_no)
            if timestamp < 0:
                raise DataFormatError(
                    f"line {line_no}: negative timestamp {timestamp}", line_number=line_no)
            records.append(RatingRecord(user, item, rating, timestamp))
    return records


@dataclass(frozen=True)
class SplitSpec:
    kind: str
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SPLIT_KINDS:
            raise ValueError(f"unknown split kind {self.kind!r}; expected one of {SPLIT_KINDS}")
        if not (0.0 < self.test_fraction < 1.0):
            raise ValueError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")


@dataclass
class SplitDataset:
    """Train/test partition plus train-side observation counts.

    Both halves are sorted by (timestamp, user_id, item_id) so downstream
    experiments that consume test cases in time order are deterministic.
    """

    spec: SplitSpec
    train: list[RatingRecord]
    test: list[RatingRecord]
    user_counts: dict[int, int] = field(repr=False)
    item_counts: dict[int, int] = field(repr=False)

    @property
    def n_train(self) -> int:
        return len(self.train)

    @property
    def n_test(self) -> int:
        return len(self.test)


def _time_order(records: Iterable[RatingRecord]) -> list[RatingRecord]:
    return sorted(records, key=lambda r: (r.timestamp, r.user_id, r.item_id))


def make_split(records: Sequence[RatingRecord], spec: SplitSpec) -> SplitDataset:
    """Build one of the three distribution-shift splits.

    temporal: sort by timestamp (ties broken by user then item id so the cut
    is deterministic) and hold out the last test_fraction of records.
    cold_user / cold_item: shuffle entity ids with the spec seed and hold out
    whole entities until the held-out ratings first reach or exceed
    test_fraction of the total.
    """
    if not records:
        raise ValueError("records must be nonempty")
    n = len(records)

    if spec.kind == "temporal":
        ordered = _time_order(records)
        n_test = int(round(n * spec.test_fraction))
        if n_test < 1 or n_test >= n:
            raise ValueError(
                f"test_fraction {spec.test_fraction} yields empty train or test for n={n}")
        train = ordered[: n - n_test]
        test = ordered[n - n_test :]
    else:
        key = 0 if spec.kind == "cold_user" else 1
        per_entity: Counter[int] = Counter(r[key] for r in records)
        entities = sorted(per_entity)
        rng = np.random.default_rng(spec.seed)
        rng.shuffle(entities)
        target = spec.test_fraction * n
        held: set[int] = set()
        held_ratings = 0
        for entity in entities:
            held.add(entity)
            held_ratings += per_entity[entity]
            if held_ratings >= target:
                break
        if held_ratings == 0 or held_ratings == n:
            raise ValueError(
                f"test_fraction {spec.test_fraction} yields empty train or test for n={n}")
        train = _time_order(r for r in records if r[key] not in held)
        test = _time_order(r for r in records if r[key] in held)

    user_counts = Counter(r.user_id for r in train)
    item_counts = Counter(r.item_id for r in train)
    return SplitDataset(spec, train, test, dict(user_counts), dict(item_counts))


@dataclass
class OutcomeStream:
    """Parsed confidence/outcome pairs with an optional tier label per row."""

    confidence: np.ndarray
    outcome: np.ndarray
    tiers: list[str] | None = None

    def __len__(self) -> int:
        return len(self.confidence)


def load_outcome_stream(path: str | Path) -> OutcomeStream:
    """Read a ``confidence,outcome[,tier]`` CSV, rejecting out-of-range rows."""
    confidences: list[float] = []
    outcomes: list[float] = []
    tiers: list[str] = []
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("empty file: missing header", line_number=1)
        header = [h.strip().lower() for h in header]
        if header[:2] != ["confidence", "outcome"] or len(header) > 3 or (
                len(header) == 3 and header[2] != "tier"):
            raise DataFormatError(
                f'line 1: expected header "confidence,outcome[,tier]", got {",".join(header)}',
                line_number=1)
        has_tier = len(header) == 3
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(
                    f"line {line_no}: expected {len(header)} fields, got {len(row)}",
                    line_number=line_no)
            try:
                conf = float(row[0])
                out = float(row[1])
            except ValueError as exc:
                raise DataFormatError(f"line {line_no}: {exc}", line_number=line_no) from exc
            if not (0.0 <= conf <= 1.0):
                raise DataFormatError(
                    f"line {line_no}: confidence {conf} outside [0, 1]", line_number=line_no)
            confidences.append(conf)
            outcomes.append(out)
            if has_tier:
                tiers.append(row[2].strip())
    return OutcomeStream(
        np.asarray(confidences, dtype=float),
        np.asarray(outcomes, dtype=float),
        tiers if tiers else None)


def write_outcome_stream(path: str | Path, confidence, outcome, tiers=None) -> None:
    """Write the generic stream with full float precision (repr round-trip)."""
    conf = np.asarray(confidence, dtype=float)
    out = np.asarray(outcome, dtype=float)
    if len(conf) != len(out):
        raise ValueError("confidence and outcome differ in length")
    with open(path, "w", encoding="utf-8", newline="") as handle:
        if tiers is None:
            handle.write("confidence,outcome\n")
            for c, o in zip(conf, out):
                handle.write(f"{c!r},{o!r}\n")
        else:
            handle.write("confidence,outcome,tier\n")
            for c, o, t in zip(conf, out, tiers):
                handle.write(f"{c!r},{o!r},{t}\n")
