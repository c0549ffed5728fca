"""Marked event sequences: data model, JSON Lines I/O, preprocessing and splits."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence as Seq

import numpy as np


class DatasetError(ValueError):
    """Raised for malformed or invalid event data."""


@dataclass(frozen=True)
class Event:
    t: float
    k: int


@dataclass(frozen=True)
class Sequence:
    events: tuple[Event, ...]
    horizon: float
    seq_id: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))

    def __len__(self) -> int:
        return len(self.events)

    @property
    def times(self) -> np.ndarray:
        return np.array([e.t for e in self.events], dtype=float)

    @property
    def marks(self) -> np.ndarray:
        return np.array([e.k for e in self.events], dtype=int)

    def validate(self, index: int = 0, n_marks: Optional[int] = None) -> None:
        prev = None
        for e in self.events:
            if not math.isfinite(e.t):
                raise DatasetError(f"non-finite arrival time at sequence {index}")
            if e.t < 0:
                raise DatasetError(f"negative arrival time at sequence {index}")
            if e.k < 0:
                raise DatasetError(f"negative mark at sequence {index}")
            if n_marks is not None and e.k >= n_marks:
                raise DatasetError(f"mark {e.k} >= K={n_marks} at sequence {index}")
            if prev is not None and e.t <= prev:
                raise DatasetError(f"non-increasing arrival times at sequence {index}")
            prev = e.t
        if self.events and self.events[-1].t > self.horizon:
            raise DatasetError(f"event after horizon at sequence {index}")


@dataclass(frozen=True)
class Dataset:
    sequences: tuple[Sequence, ...]
    n_marks: int

    def __post_init__(self):
        object.__setattr__(self, "sequences", tuple(self.sequences))
        if self.n_marks < 1:
            raise DatasetError("K must be >= 1")
        for i, s in enumerate(self.sequences):
            s.validate(i, self.n_marks)

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def n_events(self) -> int:
        return sum(len(s) for s in self.sequences)


@dataclass(frozen=True)
class SplitDataset:
    train: Dataset
    val: Dataset
    cal: Dataset
    test: Dataset


@dataclass(frozen=True)
class PredictionPair:
    history: tuple[Event, ...]
    tau: float
    k: int
    seq_index: int
    seq_id: Optional[str] = None


def _parse_sequence(obj: dict, lineno: int) -> Sequence:
    try:
        events = [Event(float(e["t"]), int(e["k"])) for e in obj["events"]]
        horizon = float(obj["T"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"line {lineno}: malformed sequence record ({exc})") from exc
    seq_id = obj.get("seq_id")
    return Sequence(tuple(events), horizon, None if seq_id is None else str(seq_id))


def load_jsonl(path: str | Path) -> Dataset:
    """Read one sequence per line; K is inferred as 1 + the largest mark."""
    sequences = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: {exc.msg}") from exc
            seq = _parse_sequence(obj, lineno)
            seq.validate(len(sequences))
            sequences.append(seq)
    max_k = max((e.k for s in sequences for e in s.events), default=0)
    return Dataset(tuple(sequences), max_k + 1)


def write_jsonl(d: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in d.sequences:
            obj = {"events": [{"t": e.t, "k": e.k} for e in s.events], "T": s.horizon}
            if s.seq_id is not None:
                obj["seq_id"] = s.seq_id
            # repr-based float serialization round-trips exactly
            fh.write(json.dumps(obj) + "\n")


def preprocess(d: Dataset, max_marks: int = 50, scale_upper: float = 10.0) -> Dataset:
    """Keep the `max_marks` most frequent marks and rescale times so the
    largest arrival time in the dataset equals `scale_upper`.

    Marks are re-indexed densely by descending frequency (ties by original
    id). Sequences left with fewer than two events are dropped.
    """
    if max_marks < 1:
        raise ValueError("max_marks must be >= 1")
    if scale_upper <= 0:
        raise ValueError("scale_upper must be > 0")
    counts = Counter(e.k for s in d.sequences for e in s.events)
    if not counts:
        raise DatasetError("dataset has zero events")
    ranked = sorted(counts, key=lambda k: (-counts[k], k))[:max_marks]
    remap = {k: i for i, k in enumerate(ranked)}

    filtered = []
    for s in d.sequences:
        kept = [Event(e.t, remap[e.k]) for e in s.events if e.k in remap]
        if len(kept) >= 2:
            filtered.append((s, kept))
    if not filtered:
        raise DatasetError("no sequence with >= 2 events survives mark filtering")

    t_max = max(kept[-1].t for _, kept in filtered)
    if t_max <= 0:
        raise DatasetError("all arrival times are zero; cannot rescale")
    factor = scale_upper / t_max
    out = []
    for s, kept in filtered:
        events = tuple(Event(e.t * factor, e.k) for e in kept)
        # the rescaled last event can exceed the rescaled horizon by rounding
        horizon = max(s.horizon * factor, events[-1].t)
        out.append(Sequence(events, horizon, s.seq_id))
    return Dataset(tuple(out), len(ranked))


def split(
    d: Dataset,
    fracs: Seq[float] = (0.65, 0.10, 0.15, 0.10),
    seed: int = 0,
) -> SplitDataset:
    """Random sequence-level partition into train/val/cal/test.

    Bucket sizes are floor(frac * n); the remainder goes to train.
    """
    if len(fracs) != 4 or any(f < 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
        raise ValueError("fracs must be 4 non-negative numbers summing to 1")
    n = len(d)
    if n < sum(1 for f in fracs if f > 0):
        raise DatasetError("fewer sequences than non-empty split buckets")
    sizes = [int(math.floor(f * n + 1e-9)) for f in fracs]
    sizes[0] += n - sum(sizes)
    perm = np.random.default_rng(seed).permutation(n)
    parts = []
    start = 0
    for size in sizes:
        idx = sorted(perm[start:start + size].tolist())
        parts.append(Dataset(tuple(d.sequences[i] for i in idx), d.n_marks))
        start += size
    return SplitDataset(*parts)


def make_pairs(d: Dataset | Iterable[Sequence]) -> list[PredictionPair]:
    """One (history, last event) pair per sequence."""
    seqs = d.sequences if isinstance(d, Dataset) else tuple(d)
    pairs = []
    for i, s in enumerate(seqs):
        if len(s) < 2:
            raise DatasetError(f"sequence {i} has fewer than 2 events")
        last, prev = s.events[-1], s.events[-2]
        pairs.append(PredictionPair(s.events[:-1], last.t - prev.t, last.k, i, s.seq_id))
    return pairs
