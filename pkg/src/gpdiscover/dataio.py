"""Time-series ingestion, timestamp encoding, normalization, and splitting.

Timestamps of the form YYYY-MM-DD (optionally with a time component) are
encoded as seconds since the UNIX epoch, interpreted at 00:00:00 UTC, so
unequal month lengths survive the encoding; numeric time columns pass
through unchanged.  Training times are mapped affinely onto [0, 1] and
values are demeaned then divided by their range; the transform record
inverts both maps exactly.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

__all__ = [
    "DataError",
    "Transform",
    "TimeSeries",
    "encode_timestamp",
    "load_csv",
    "normalize",
    "denormalize_values",
    "denormalize_scale",
    "split",
    "next_query_times",
]

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
_DATE_RE = re.compile(r"^\d{4}-\d{2}-\d{2}([ T]\d{2}:\d{2}:\d{2})?$")


class DataError(ValueError):
    """Unreadable, unparsable, or structurally invalid input data."""


@dataclass(frozen=True)
class Transform:
    """Invertible affine maps applied to times and values.

    normalized_t = (t - t_offset) / t_scale
    normalized_y = (y - y_mean) / y_scale
    """

    t_offset: float
    t_scale: float
    y_mean: float
    y_scale: float


@dataclass(frozen=True)
class TimeSeries:
    """Paired time points and values, strictly increasing in time.

    ``raw_times`` keeps the original timestamp strings when the series was
    loaded from dated CSV (used for calendar-aware forecast stepping);
    ``transform`` records the normalization applied to produce this series,
    or None for raw data.
    """

    times: np.ndarray
    values: np.ndarray
    raw_times: tuple[str, ...] | None = None
    transform: Transform | None = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        y = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", y)
        if t.shape != y.shape or t.ndim != 1:
            raise DataError("times and values must be 1-d arrays of equal length")
        if t.size and not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
            raise DataError("times and values must be finite")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise DataError("times must be strictly increasing")

    @property
    def n(self) -> int:
        return self.times.size

    def prefix(self, m: int) -> "TimeSeries":
        """First m observations (shares the transform record)."""
        raw = self.raw_times[:m] if self.raw_times is not None else None
        return TimeSeries(self.times[:m], self.values[:m], raw, self.transform)


def encode_timestamp(stamp: str) -> float:
    """Seconds since 1970-01-01 00:00:00 UTC for an ISO date stamp."""
    text = stamp.strip()
    if not _DATE_RE.match(text):
        raise DataError(f"unrecognized timestamp {stamp!r}")
    if len(text) == 10:
        dt = datetime.strptime(text, "%Y-%m-%d")
    else:
        dt = datetime.strptime(text.replace("T", " "), "%Y-%m-%d %H:%M:%S")
    return (dt.replace(tzinfo=timezone.utc) - _EPOCH).total_seconds()


def _parse_time_cell(cell: str, time_format: str):
    """Return (encoded_seconds, raw_or_none) for one time cell."""
    text = cell.strip()
    if time_format == "date" or (time_format == "auto" and _DATE_RE.match(text)):
        return encode_timestamp(text), text
    try:
        return float(text), None
    except ValueError:
        raise DataError(f"cannot parse time value {cell!r}") from None


def load_csv(
    path,
    time_column: str = "time",
    value_column: str = "value",
    time_format: str = "auto",
) -> TimeSeries:
    """Load a UTF-8 CSV with a header row into a TimeSeries.

    ``time_format`` is 'auto', 'date' (ISO stamps required), or 'numeric'.
    Rows are sorted by encoded time; duplicate times and non-finite cells
    are rejected with the offending row number.
    """
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise DataError(f"{path}: missing header row")
        for col in (time_column, value_column):
            if col not in reader.fieldnames:
                raise DataError(f"{path}: no column named {col!r}")
        rows = []
        for lineno, record in enumerate(reader, start=2):
            try:
                t, raw = _parse_time_cell(record[time_column], time_format)
                v = float(record[value_column].strip())
            except (DataError, ValueError, AttributeError) as exc:
                raise DataError(f"{path}: row {lineno}: {exc}") from None
            if not (math.isfinite(t) and math.isfinite(v)):
                raise DataError(f"{path}: row {lineno}: non-finite time or value")
            rows.append((t, v, raw, lineno))
    if not rows:
        raise DataError(f"{path}: no data rows")
    rows.sort(key=lambda r: r[0])
    for prev, cur in zip(rows, rows[1:]):
        if prev[0] == cur[0]:
            raise DataError(f"{path}: row {cur[3]}: duplicate time {cur[0]}")
    times = np.array([r[0] for r in rows])
    values = np.array([r[1] for r in rows])
    raws = tuple(r[2] for r in rows)
    raw_times = raws if all(r is not None for r in raws) else None
    return TimeSeries(times, values, raw_times)


def normalize(series: TimeSeries) -> TimeSeries:
    """Map times onto [0, 1] and demean/range-scale the values.

    Requires at least two points for a nondegenerate time map.  A constant
    value vector gets a unit scale guard so the map stays invertible.
    """
    if series.n < 2:
        raise DataError("normalization needs at least two observations")
    t = series.times
    y = series.values
    t_offset = float(t[0])
    t_scale = float(t[-1] - t[0])
    if t_scale <= 0:
        raise DataError("constant time vector cannot be normalized")
    y_mean = float(np.mean(y))
    y_scale = max(float(np.max(y) - np.min(y)), 1e-12)
    tr = Transform(t_offset, t_scale, y_mean, y_scale)
    return TimeSeries(
        (t - t_offset) / t_scale,
        (y - y_mean) / y_scale,
        series.raw_times,
        tr,
    )


def denormalize_values(values: np.ndarray, tr: Transform) -> np.ndarray:
    """Invert the value map (applies to means and interval bounds alike)."""
    return np.asarray(values) * tr.y_scale + tr.y_mean


def denormalize_scale(scales: np.ndarray, tr: Transform) -> np.ndarray:
    """Invert the value map for scale quantities (standard deviations)."""
    return np.asarray(scales) * tr.y_scale


def split(series: TimeSeries, horizon: int) -> tuple[TimeSeries, TimeSeries]:
    """Hold out the last ``horizon`` points as a test set.

    The returned halves carry no transform: normalize the training half
    afterwards so the test values never leak into the record.
    """
    if horizon < 0:
        raise DataError("horizon must be >= 0")
    if horizon >= series.n:
        raise DataError(f"horizon {horizon} must be smaller than n={series.n}")
    cut = series.n - horizon
    raw = series.raw_times
    train = TimeSeries(series.times[:cut], series.values[:cut], raw[:cut] if raw else None)
    test = TimeSeries(series.times[cut:], series.values[cut:], raw[cut:] if raw else None)
    return train, test


def _add_months(dt: datetime, months: int) -> datetime:
    month_index = dt.month - 1 + months
    year = dt.year + month_index // 12
    month = month_index % 12 + 1
    # Clamp the day for short months (e.g. Jan 31 + 1 month -> Feb 28).
    day = min(dt.day, [31, 29 if year % 4 == 0 and (year % 100 != 0 or year % 400 == 0) else 28,
                       31, 30, 31, 30, 31, 31, 30, 31, 30, 31][month - 1])
    return dt.replace(year=year, month=month, day=day)


def next_query_times(series: TimeSeries, horizon: int) -> np.ndarray:
    """Encoded times for the next ``horizon`` steps after the series ends.

    Dated series with roughly monthly spacing advance by true calendar
    months (so unequal month lengths are preserved); everything else steps
    by the median observed spacing.
    """
    if horizon == 0:
        return np.empty(0)
    if series.n == 0:
        raise DataError("cannot extend an empty series")
    if series.raw_times is not None and series.n >= 2:
        seconds = np.diff(series.times)
        median_days = float(np.median(seconds)) / 86400.0
        if 27.0 <= median_days <= 32.0:
            last = datetime.strptime(series.raw_times[-1][:10], "%Y-%m-%d").replace(
                tzinfo=timezone.utc
            )
            return np.array(
                [(_add_months(last, i) - _EPOCH).total_seconds() for i in range(1, horizon + 1)]
            )
    step = float(np.median(np.diff(series.times))) if series.n >= 2 else 1.0
    return series.times[-1] + step * np.arange(1, horizon + 1)
