"""Model-ready tensors from transition logs: encoding, balancing, scaling, splitting."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from poltwin.abm import TransitionRecord, TrajectoryPoint
from poltwin.vocab import N_CLASSES, N_TAGS, Tag, UserClass

log = logging.getLogger(__name__)

TagVocabulary = Tag

N_FEATURES = N_TAGS + N_CLASSES + 1
TARGET_EPS = 1e-4
SCALER_SCHEMA_VERSION = 1

TRANSITIONS_HEADER = [
    "run_id", "agent_id", "user_class", "source_tag", "dest_tag",
    "seconds_since_entry", "stay_duration_s",
]
TRAJECTORIES_HEADER = [
    "run_id", "agent_id", "user_class", "minute", "x", "y", "x_norm", "y_norm", "location_id",
]
DATASET_HEADER = TRANSITIONS_HEADER + [
    "source_idx", "class_idx", "dest_idx", "time_norm", "stay_target",
]


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Scaler:
    time_min: float
    time_max: float
    stay_min: float
    stay_max: float

    def __post_init__(self) -> None:
        if not (self.time_max > self.time_min and self.stay_max > self.stay_min):
            raise DatasetError("scaler requires max > min for time and stay")

    def scale_time(self, t):
        return np.clip((np.asarray(t, float) - self.time_min) / (self.time_max - self.time_min), 0.0, 1.0)

    def scale_stay(self, s):
        return (np.asarray(s, float) - self.stay_min) / (self.stay_max - self.stay_min) + TARGET_EPS

    def unscale_stay(self, target):
        return (np.asarray(target, float) - TARGET_EPS) * (self.stay_max - self.stay_min) + self.stay_min

    def to_dict(self) -> dict:
        return {
            "schema_version": SCALER_SCHEMA_VERSION,
            "time_min": self.time_min,
            "time_max": self.time_max,
            "stay_min": self.stay_min,
            "stay_max": self.stay_max,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Scaler":
        if doc.get("schema_version") != SCALER_SCHEMA_VERSION:
            raise DatasetError(f"unsupported scaler schema_version {doc.get('schema_version')!r}")
        return cls(float(doc["time_min"]), float(doc["time_max"]),
                   float(doc["stay_min"]), float(doc["stay_max"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Scaler":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class DatasetSplit:
    train: list[TransitionRecord]
    validation: list[TransitionRecord]
    test: list[TransitionRecord]


def features(tag, user_class, seconds_since_entry, scaler: Scaler) -> np.ndarray:
    """Feature matrix for arrays of (tag, class, time); one row per element."""
    tag = np.atleast_1d(np.asarray(tag, dtype=int))
    cls = np.atleast_1d(np.asarray(user_class, dtype=int))
    t = np.atleast_1d(np.asarray(seconds_since_entry, dtype=float))
    n = len(tag)
    x = np.zeros((n, N_FEATURES))
    x[np.arange(n), tag] = 1.0
    x[np.arange(n), N_TAGS + cls] = 1.0
    x[:, -1] = scaler.scale_time(t)
    return x


def encode_for_next_destination(record: TransitionRecord, scaler: Scaler) -> tuple[np.ndarray, int]:
    x = features(record.source_tag, record.user_class, record.seconds_since_entry, scaler)[0]
    return x, int(record.dest_tag)


def encode_for_stay_duration(record: TransitionRecord, scaler: Scaler) -> tuple[np.ndarray, float]:
    if record.dest_tag == Tag.END:
        raise DatasetError("END has no stay duration")
    x = features(record.dest_tag, record.user_class, record.seconds_since_entry, scaler)[0]
    return x, float(scaler.scale_stay(record.stay_duration))


def next_destination_arrays(records: Sequence[TransitionRecord], scaler: Scaler):
    """Batch form of :func:`encode_for_next_destination`: ``(X, labels)``."""
    src = [r.source_tag for r in records]
    cls = [r.user_class for r in records]
    t = [r.seconds_since_entry for r in records]
    return features(src, cls, t, scaler), np.array([int(r.dest_tag) for r in records], dtype=int)


def stay_duration_arrays(records: Sequence[TransitionRecord], scaler: Scaler):
    """Batch form of :func:`encode_for_stay_duration`; END rows are rejected."""
    if any(r.dest_tag == Tag.END for r in records):
        raise DatasetError("END has no stay duration")
    dst = [r.dest_tag for r in records]
    cls = [r.user_class for r in records]
    t = [r.seconds_since_entry for r in records]
    y = scaler.scale_stay([r.stay_duration for r in records])
    return features(dst, cls, t, scaler), np.asarray(y, float)


def without_end(records: Iterable[TransitionRecord]) -> list[TransitionRecord]:
    return [r for r in records if r.dest_tag != Tag.END]


def rebalance(records: Sequence[TransitionRecord], target_n: int = 17000, *,
              rng: np.random.Generator) -> list[TransitionRecord]:
    """Stratified resample on destination tag to ``target_n`` rows.

    Every tag gets ``target_n // 6`` rows; the remainder goes one row each to
    the tags with the most original rows. A tag draws without replacement
    when it has enough rows, with replacement otherwise.
    """
    if not records:
        raise DatasetError("cannot rebalance an empty record set")
    if target_n < 1:
        raise DatasetError("target_n must be positive")
    groups: dict[Tag, list[int]] = {tag: [] for tag in Tag}
    for i, r in enumerate(records):
        groups[Tag(r.dest_tag)].append(i)
    empty = [t.name for t, idx in groups.items() if not idx]
    if empty:
        raise DatasetError(f"cannot balance: no rows with dest_tag {', '.join(empty)}")
    base, rem = divmod(target_n, N_TAGS)
    by_size = sorted(Tag, key=lambda t: (-len(groups[t]), int(t)))
    quota = {t: base for t in Tag}
    for t in by_size[:rem]:
        quota[t] += 1
    chosen = []
    for tag in Tag:
        idx = np.asarray(groups[tag])
        replace = len(idx) < quota[tag]
        if replace:
            log.warning("dest_tag %s has %d rows < quota %d; sampling with replacement",
                        tag.name, len(idx), quota[tag])
        chosen.append(rng.choice(idx, size=quota[tag], replace=replace))
    order = np.concatenate(chosen)
    order = order[rng.permutation(len(order))]
    return [records[i] for i in order]


def needs_replacement(records: Sequence[TransitionRecord], target_n: int) -> bool:
    counts = np.bincount([int(r.dest_tag) for r in records], minlength=N_TAGS)
    return bool(counts.min() * N_TAGS < target_n)


def fit_scaler(train_records: Sequence[TransitionRecord]) -> Scaler:
    """Min-max bounds from training rows; END rows do not inform the stay range."""
    times = np.array([r.seconds_since_entry for r in train_records], float)
    stays = np.array([r.stay_duration for r in train_records if r.dest_tag != Tag.END], float)
    if times.size < 2 or times.min() == times.max():
        raise DatasetError("degenerate field: seconds_since_entry is constant")
    if stays.size < 2 or stays.min() == stays.max():
        raise DatasetError("degenerate field: stay_duration is constant")
    return Scaler(float(times.min()), float(times.max()), float(stays.min()), float(stays.max()))


def split(records: Sequence[TransitionRecord],
          fractions: tuple[float, float, float] = (0.70, 0.15, 0.15), *,
          rng: np.random.Generator) -> DatasetSplit:
    """Shuffle, then cut: floor for train and validation, remainder to test."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise DatasetError(f"invalid split fractions {fractions}")
    n = len(records)
    n_train = int(math.floor(fractions[0] * n + 1e-9))
    n_val = int(math.floor(fractions[1] * n + 1e-9))
    perm = rng.permutation(n)
    shuffled = [records[i] for i in perm]
    return DatasetSplit(
        shuffled[:n_train],
        shuffled[n_train:n_train + n_val],
        shuffled[n_train + n_val:],
    )


CORRELATION_COLUMNS = ("source_tag", "user_class", "seconds_since_entry", "dest_tag", "stay_duration")


def correlation_matrix(records: Sequence[TransitionRecord]) -> np.ndarray:
    """Pearson correlations of the five transition variables (ordinal codes).

    A constant column correlates 0 with everything else; the diagonal is 1.
    """
    if len(records) < 2:
        raise DatasetError("correlation needs at least 2 rows")
    data = np.array(
        [[int(r.source_tag), int(r.user_class), r.seconds_since_entry, int(r.dest_tag),
          r.stay_duration] for r in records],
        dtype=float,
    )
    centered = data - data.mean(axis=0)
    norms = np.sqrt((centered**2).sum(axis=0))
    ok = norms > 0
    z = np.zeros_like(centered)
    z[:, ok] = centered[:, ok] / norms[ok]
    corr = z.T @ z
    corr = np.clip(corr, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return corr


# -- CSV interchange --------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_transitions(path, records: Iterable[TransitionRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRANSITIONS_HEADER)
        for r in records:
            w.writerow([r.run_id, r.agent_id, UserClass(r.user_class).name, Tag(r.source_tag).name,
                        Tag(r.dest_tag).name, r.seconds_since_entry, r.stay_duration])


def _record_from_row(row: dict) -> TransitionRecord:
    try:
        return TransitionRecord(
            run_id=int(row["run_id"]),
            agent_id=int(row["agent_id"]),
            user_class=UserClass[row["user_class"]],
            source_tag=Tag[row["source_tag"]],
            dest_tag=Tag[row["dest_tag"]],
            seconds_since_entry=int(row["seconds_since_entry"]),
            stay_duration=int(row["stay_duration_s"]),
        )
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"malformed transition row {row}: {exc}") from exc


def read_transitions(path) -> list[TransitionRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(TRANSITIONS_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise DatasetError(f"{path}: missing columns {sorted(missing)}")
        return [_record_from_row(row) for row in reader]


def write_trajectories(path, points: Iterable[TrajectoryPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORIES_HEADER)
        for p in points:
            w.writerow([p.run_id, p.agent_id, UserClass(p.user_class).name, p.minute,
                        _fmt(p.x), _fmt(p.y), _fmt(p.x_norm), _fmt(p.y_norm),
                        p.location_id or ""])


def read_trajectories(path) -> list[TrajectoryPoint]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(TRAJECTORIES_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise DatasetError(f"{path}: missing columns {sorted(missing)}")
        return [
            TrajectoryPoint(int(r["run_id"]), int(r["agent_id"]), UserClass[r["user_class"]],
                            int(r["minute"]), float(r["x"]), float(r["y"]),
                            float(r["x_norm"]), float(r["y_norm"]), r["location_id"] or None)
            for r in reader
        ]


def write_dataset(path, records: Sequence[TransitionRecord], scaler: Scaler) -> None:
    """Raw columns plus encoded indices, scaled time and (non-END) stay target."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DATASET_HEADER)
        for r in records:
            target = "" if r.dest_tag == Tag.END else _fmt(float(scaler.scale_stay(r.stay_duration)))
            w.writerow([r.run_id, r.agent_id, UserClass(r.user_class).name, Tag(r.source_tag).name,
                        Tag(r.dest_tag).name, r.seconds_since_entry, r.stay_duration,
                        int(r.source_tag), int(r.user_class), int(r.dest_tag),
                        _fmt(float(scaler.scale_time(r.seconds_since_entry))), target])


def read_dataset(path) -> list[TransitionRecord]:
    return read_transitions(path)
