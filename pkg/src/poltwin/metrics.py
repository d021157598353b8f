"""Quantitative comparisons between models, baselines and simulators."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from poltwin.abm import TransitionRecord, TrajectoryPoint
from poltwin.vocab import N_TAGS, WORK_TAGS, UserClass


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ClassificationReport:
    """Macro-averaged scores; a class with no support contributes 0."""

    accuracy: float
    precision: float
    recall: float
    f1: float
    class_index_mae: float

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "class_index_mae": self.class_index_mae,
        }


def confusion_matrix(predicted, actual, n_classes: int = N_TAGS) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(actual, int), np.asarray(predicted, int)), 1)
    return cm


def _safe_div(num, den):
    num = np.asarray(num, float)
    den = np.asarray(den, float)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


def classification_report(predicted, actual, n_classes: int = N_TAGS) -> ClassificationReport:
    predicted = np.asarray(predicted, int)
    actual = np.asarray(actual, int)
    if predicted.shape != actual.shape:
        raise MetricsError("predicted and actual lengths differ")
    if predicted.size == 0:
        raise MetricsError("empty predictions")
    cm = confusion_matrix(predicted, actual, n_classes)
    tp = np.diag(cm)
    precision = _safe_div(tp, cm.sum(axis=0))
    recall = _safe_div(tp, cm.sum(axis=1))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return ClassificationReport(
        accuracy=float(tp.sum() / predicted.size),
        precision=float(precision.mean()),
        recall=float(recall.mean()),
        f1=float(f1.mean()),
        class_index_mae=float(np.abs(predicted - actual).mean()),
    )


def wasserstein_1d(a, b) -> float:
    """Earth mover's distance between two empirical samples on the line."""
    a = np.sort(np.asarray(a, float).ravel())
    b = np.sort(np.asarray(b, float).ravel())
    if a.size == 0 or b.size == 0:
        raise MetricsError("wasserstein_1d needs non-empty samples")
    if a.size == b.size:
        return float(np.abs(a - b).mean())
    support = np.concatenate([a, b])
    support.sort(kind="mergesort")
    widths = np.diff(support)
    cdf_a = np.searchsorted(a, support[:-1], side="right") / a.size
    cdf_b = np.searchsorted(b, support[:-1], side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * widths))


@dataclass(frozen=True)
class MeanPositionSeries:
    """Per-minute mean normalized position; minutes with no agents are NaN."""

    minutes: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def defined(self) -> np.ndarray:
        return ~np.isnan(self.x)


def mean_position_series(points: Iterable[TrajectoryPoint], user_class: UserClass,
                         minute_range: tuple[int, int]) -> MeanPositionSeries:
    """Mean ``(x_norm, y_norm)`` per minute in ``[start, stop)`` over one class."""
    start, stop = minute_range
    n = stop - start
    sx = np.zeros(n)
    sy = np.zeros(n)
    cnt = np.zeros(n)
    for p in points:
        if p.user_class != user_class or not start <= p.minute < stop:
            continue
        i = p.minute - start
        sx[i] += p.x_norm
        sy[i] += p.y_norm
        cnt[i] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        mx = np.where(cnt > 0, sx / np.where(cnt > 0, cnt, 1), np.nan)
        my = np.where(cnt > 0, sy / np.where(cnt > 0, cnt, 1), np.nan)
    return MeanPositionSeries(np.arange(start, stop), mx, my)


def mse_series(a: MeanPositionSeries, b: MeanPositionSeries) -> float:
    """MSE over commonly-defined minutes, x and y separately, then averaged."""
    common_minutes, ia, ib = np.intersect1d(a.minutes, b.minutes, return_indices=True)
    ok = a.defined()[ia] & b.defined()[ib]
    if not ok.any():
        raise MetricsError("series share no defined minutes")
    ia, ib = ia[ok], ib[ok]
    mse_x = np.mean((a.x[ia] - b.x[ib]) ** 2)
    mse_y = np.mean((a.y[ia] - b.y[ib]) ** 2)
    return float((mse_x + mse_y) / 2)


def work_duration_by_class(records: Sequence[TransitionRecord]) -> dict[UserClass, np.ndarray]:
    """Stay durations (seconds) at work-area destinations, grouped by class."""
    out: dict[UserClass, list[float]] = {cls: [] for cls in UserClass}
    work = {int(t) for t in WORK_TAGS}
    for r in records:
        if int(r.dest_tag) in work:
            out[UserClass(r.user_class)].append(float(r.stay_duration))
    return {cls: np.asarray(v, float) for cls, v in out.items()}
