"""Weekday baselines, fractional-change series, and impact/recovery summaries."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import IO, Iterable

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

CALENDAR = (date(2021, 8, 1), date(2021, 9, 30))
BASELINE_WINDOW = (date(2021, 8, 1), date(2021, 8, 21))
STUDY_WINDOW = (date(2021, 8, 22), date(2021, 9, 30))
EVENT_WINDOW = (date(2021, 8, 26), date(2021, 9, 2))
POST_START = date(2021, 9, 2)
RECOVERY_THRESHOLD = 0.05
RECOVERY_CONSECUTIVE = 2

CHANGE_FIELDS = ("metric", "date", "value", "baseline", "change", "defined")
RECOVERY_FIELDS = ("metric", "max_impact", "impact_date", "recovery_days", "cutoff_date")
NOT_RECOVERED = "not_recovered"


def date_range(start: date, end: date) -> list[date]:
    return [start + timedelta(days=i) for i in range((end - start).days + 1)]


def weekday_index(d: date) -> int:
    """1 = Sunday ... 7 = Saturday."""
    return d.isoweekday() % 7 + 1


@dataclass
class DailySeries:
    metric: str
    values: dict[date, float] = field(default_factory=dict)

    def get(self, d: date) -> float | None:
        v = self.values.get(d)
        return None if v is None or (isinstance(v, float) and math.isnan(v)) else v

    def scaled(self, k: float) -> "DailySeries":
        return DailySeries(self.metric, {d: v * k for d, v in self.values.items()})

    def to_pandas(self) -> pd.Series:
        idx = pd.DatetimeIndex(sorted(self.values))
        return pd.Series([self.values[d.date()] for d in idx], index=idx, name=self.metric, dtype=float)


@dataclass
class BaselineTable:
    metric: str
    values: dict[int, float]
    complete: dict[int, bool]
    samples: dict[int, int]

    def __getitem__(self, weekday: int) -> float:
        return self.values[weekday]

    def for_date(self, d: date) -> float:
        return self.values[weekday_index(d)]


def compute_baseline(
    series: DailySeries,
    window: tuple[date, date] = BASELINE_WINDOW,
    allow_multiple_weeks: bool = False,
) -> BaselineTable:
    """Per-weekday mean of the series over the baseline window.

    The window must be 21 consecutive days (three of each weekday) unless
    *allow_multiple_weeks* is set, in which case any whole number of weeks is
    accepted.  Missing days reduce that weekday's sample and clear its
    ``complete`` flag.
    """
    start, end = window
    ndays = (end - start).days + 1
    if allow_multiple_weeks:
        if ndays < 7 or ndays % 7:
            raise ValueError(f"baseline window of {ndays} days is not a whole number of weeks")
    elif ndays != 21:
        raise ValueError(f"baseline window must span 21 consecutive days, got {ndays}")
    per_day: dict[int, list[float]] = {j: [] for j in range(1, 8)}
    for d in date_range(start, end):
        v = series.get(d)
        if v is not None:
            per_day[weekday_index(d)].append(float(v))
    expected = ndays // 7
    values = {j: (float(np.mean(vs)) if vs else math.nan) for j, vs in per_day.items()}
    complete = {j: len(vs) == expected for j, vs in per_day.items()}
    samples = {j: len(vs) for j, vs in per_day.items()}
    return BaselineTable(series.metric, values, complete, samples)


@dataclass(frozen=True)
class ChangeEntry:
    value: float
    baseline: float
    change: float | None

    @property
    def defined(self) -> bool:
        return self.change is not None


@dataclass
class ChangeSeries:
    metric: str
    entries: dict[date, ChangeEntry] = field(default_factory=dict)

    def change(self, d: date) -> float | None:
        e = self.entries.get(d)
        return None if e is None else e.change

    def defined_items(self) -> list[tuple[date, float]]:
        return [(d, e.change) for d, e in sorted(self.entries.items()) if e.change is not None]


def pct_change(
    series: DailySeries,
    baselines: BaselineTable,
    study_window: tuple[date, date] = STUDY_WINDOW,
) -> ChangeSeries:
    """Fractional change of each study-window value against its weekday baseline.

    Days without a value are omitted; a zero or missing baseline leaves the
    entry undefined.
    """
    out = ChangeSeries(series.metric)
    for d in date_range(*study_window):
        v = series.get(d)
        if v is None:
            continue
        b = baselines.for_date(d)
        ok = math.isfinite(b) and b != 0 and math.isfinite(v)
        out.entries[d] = ChangeEntry(float(v), b, (v - b) / b if ok else None)
    return out


@dataclass(frozen=True)
class Impact:
    change: float
    date: date


def max_impact(change: ChangeSeries, event_window: tuple[date, date] = EVENT_WINDOW) -> Impact:
    """Signed change with the largest magnitude inside the window (earliest on ties)."""
    best: Impact | None = None
    for d, c in change.defined_items():
        if event_window[0] <= d <= event_window[1] and (best is None or abs(c) > abs(best.change)):
            best = Impact(c, d)
    if best is None:
        raise ValueError(f"{change.metric}: no defined change inside {event_window[0]}..{event_window[1]}")
    return best


@dataclass(frozen=True)
class RecoveryReport:
    metric: str
    max_impact: Impact | None
    recovery_days: int | None
    cutoff_date: date | None

    @property
    def recovered(self) -> bool:
        return self.recovery_days is not None


def recovery_duration(
    change: ChangeSeries,
    event_start: date = EVENT_WINDOW[0],
    post_start: date = POST_START,
    threshold: float = RECOVERY_THRESHOLD,
    consecutive: int = RECOVERY_CONSECUTIVE,
) -> RecoveryReport:
    """Days from *event_start* to the last day of the first qualifying run.

    A run is *consecutive* calendar days from *post_start* on with a defined
    change of magnitude at most *threshold*; a missing or undefined day
    breaks the run.
    """
    if not change.entries:
        return RecoveryReport(change.metric, None, None, None)
    last = max(change.entries)
    run = 0
    for d in date_range(post_start, last):
        c = change.change(d)
        run = run + 1 if c is not None and abs(c) <= threshold else 0
        if run >= consecutive:
            return RecoveryReport(change.metric, None, (d - event_start).days, d)
    return RecoveryReport(change.metric, None, None, None)


def summarize(
    change: ChangeSeries,
    event_window: tuple[date, date] = EVENT_WINDOW,
    post_start: date = POST_START,
    threshold: float = RECOVERY_THRESHOLD,
    consecutive: int = RECOVERY_CONSECUTIVE,
) -> RecoveryReport:
    """Max impact plus recovery; impact is None when the window has no defined change."""
    try:
        impact = max_impact(change, event_window)
    except ValueError:
        impact = None
    rec = recovery_duration(change, event_window[0], post_start, threshold, consecutive)
    return RecoveryReport(change.metric, impact, rec.recovery_days, rec.cutoff_date)


def _fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def write_changes_csv(changes: Iterable[ChangeSeries], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CHANGE_FIELDS)
    for cs in changes:
        for d, e in sorted(cs.entries.items()):
            w.writerow((cs.metric, d.isoformat(), _fmt(e.value), _fmt(e.baseline), _fmt(e.change), int(e.defined)))


def read_changes_csv(fh: IO[str]) -> list[ChangeSeries]:
    out: dict[str, ChangeSeries] = {}
    for row in csv.DictReader(fh):
        cs = out.setdefault(row["metric"], ChangeSeries(row["metric"]))
        change = float(row["change"]) if row["defined"] == "1" else None
        base = float(row["baseline"]) if row["baseline"] else math.nan
        cs.entries[date.fromisoformat(row["date"])] = ChangeEntry(float(row["value"]), base, change)
    return list(out.values())


def write_recovery_csv(reports: Iterable[RecoveryReport], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(RECOVERY_FIELDS)
    for r in reports:
        w.writerow((
            r.metric,
            _fmt(r.max_impact.change) if r.max_impact else "",
            r.max_impact.date.isoformat() if r.max_impact else "",
            r.recovery_days if r.recovered else NOT_RECOVERED,
            r.cutoff_date.isoformat() if r.cutoff_date else "",
        ))


def recovery_to_dict(r: RecoveryReport) -> dict:
    return {
        "max_impact": r.max_impact.change if r.max_impact else None,
        "impact_date": r.max_impact.date.isoformat() if r.max_impact else None,
        "recovery_days": r.recovery_days if r.recovered else NOT_RECOVERED,
        "cutoff_date": r.cutoff_date.isoformat() if r.cutoff_date else None,
    }


def _frame_dates(X: pd.DataFrame) -> list[date]:
    return [pd.Timestamp(i).date() for i in X.index]


class WeekdayBaseline(BaseEstimator, TransformerMixin):
    """Learn per-weekday baselines on a window; transform values to fractional change.

    ``X`` is a DataFrame indexed by date with one column per metric.  Undefined
    changes (zero or missing baseline) come out as NaN.
    """

    def __init__(self, baseline_window=BASELINE_WINDOW, study_window=STUDY_WINDOW, allow_multiple_weeks=False):
        self.baseline_window = baseline_window
        self.study_window = study_window
        self.allow_multiple_weeks = allow_multiple_weeks

    def _series(self, X: pd.DataFrame, col) -> DailySeries:
        if not isinstance(X, pd.DataFrame):
            raise TypeError("WeekdayBaseline expects a date-indexed DataFrame")
        vals = X[col].to_numpy(dtype=float)
        return DailySeries(str(col), {d: v for d, v in zip(_frame_dates(X), vals) if not math.isnan(v)})

    def fit(self, X: pd.DataFrame, y=None):
        self.baselines_ = {
            col: compute_baseline(self._series(X, col), self.baseline_window, self.allow_multiple_weeks)
            for col in X.columns
        }
        self.feature_names_in_ = np.asarray(X.columns, dtype=object)
        return self

    def transform(self, X: pd.DataFrame) -> pd.DataFrame:
        check_is_fitted(self, "baselines_")
        window = self.study_window
        if window is None:
            dates = _frame_dates(X)
            window = (min(dates), max(dates))
        cols = {}
        for col in X.columns:
            cs = pct_change(self._series(X, col), self.baselines_[col], window)
            cols[col] = {pd.Timestamp(d): (np.nan if e.change is None else e.change) for d, e in cs.entries.items()}
        idx = pd.DatetimeIndex([pd.Timestamp(d) for d in date_range(*window)])
        return pd.DataFrame(cols, index=idx, columns=list(X.columns), dtype=float)

    def get_feature_names_out(self, input_features=None):
        return np.asarray(self.feature_names_in_, dtype=object)
