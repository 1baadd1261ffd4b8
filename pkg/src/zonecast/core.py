"""Shared domain vocabulary: zones, plant kinds, hourly series and sample matrices.

Timestamps are UTC ``datetime64[h]`` values. An hourly value stamped ``t``
is the average power over the hour *ending* at ``t`` (period-ending), so the
value stamped ``2016-06-01T00`` belongs to 31 May. Calendar attribution for
monthly and daily aggregation goes through :func:`period_start`.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

HORIZON_HOURS = 360
HOUR = np.timedelta64(1, "h")


class ZoneId(str, enum.Enum):
    NORD = "NORD"
    CNOR = "CNOR"
    CSUD = "CSUD"
    SUD = "SUD"
    SICI = "SICI"
    SARD = "SARD"

    def __str__(self) -> str:
        return self.value


class PlantKind(str, enum.Enum):
    PV = "PV"
    WD = "WD"

    def __str__(self) -> str:
        return self.value


ITALY = "ITALY"


class ZonecastError(Exception):
    """Base class for all package errors."""


class InsufficientDataError(ZonecastError):
    pass


class ConfigurationError(ZonecastError):
    pass


def to_hours(values) -> np.ndarray:
    """Coerce timestamps (strings, datetimes, datetime64) to ``datetime64[h]``."""
    arr = np.asarray(values)
    if arr.dtype.kind == "M":
        out = arr.astype("datetime64[h]")
        if np.any(out != arr):
            raise ValueError("timestamps must fall on whole hours")
        return out
    arr = np.asarray([str(v).rstrip("Z") for v in np.atleast_1d(arr)], dtype="datetime64[s]")
    out = arr.astype("datetime64[h]")
    if np.any(out != arr):
        raise ValueError("timestamps must fall on whole hours")
    return out


def hour_of_day(times: np.ndarray) -> np.ndarray:
    t = np.asarray(times, dtype="datetime64[h]")
    return (t - t.astype("datetime64[D]")).astype(np.int64)


def month_of(times: np.ndarray) -> np.ndarray:
    """Calendar month 1..12 of each timestamp (no period shift)."""
    t = np.asarray(times, dtype="datetime64[h]")
    return t.astype("datetime64[M]").astype(np.int64) % 12 + 1


def year_of(times: np.ndarray) -> np.ndarray:
    t = np.asarray(times, dtype="datetime64[h]")
    return t.astype("datetime64[Y]").astype(np.int64) + 1970


def period_start(times: np.ndarray) -> np.ndarray:
    """Start of the averaging hour for period-ending stamps."""
    return np.asarray(times, dtype="datetime64[h]") - HOUR


def period_month_key(times: np.ndarray) -> np.ndarray:
    """``datetime64[M]`` month each hourly value belongs to."""
    return period_start(times).astype("datetime64[M]")


def circular_distance(a: int, b: int, modulus: int) -> int:
    """Distance between two positions on a cycle of length ``modulus``.

    Works for 0-based hours and 1-based months alike, since only the
    difference matters.
    """
    if modulus < 2:
        raise ValueError(f"modulus must be >= 2, got {modulus}")
    d = abs(int(a) - int(b)) % modulus
    return min(d, modulus - d)


def circular_distance_array(a: np.ndarray, b: int, modulus: int) -> np.ndarray:
    if modulus < 2:
        raise ValueError(f"modulus must be >= 2, got {modulus}")
    d = np.abs(np.asarray(a, dtype=np.int64) - int(b)) % modulus
    return np.minimum(d, modulus - d)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class HourlySeries:
    """Timestamped hourly values with an explicit missing flag.

    Missing points keep a NaN in ``values`` but are identified only by
    ``missing``; learners never see them.
    """

    times: np.ndarray
    values: np.ndarray
    missing: np.ndarray = None
    is_power: bool = False

    def __post_init__(self):
        times = np.asarray(self.times, dtype="datetime64[h]")
        values = np.asarray(self.values, dtype=np.float64)
        if self.missing is None:
            missing = np.zeros(len(values), dtype=bool)
        else:
            missing = np.asarray(self.missing, dtype=bool)
        if not (len(times) == len(values) == len(missing)):
            raise ValueError("times, values and missing must have equal length")
        values = np.where(missing, np.nan, values)
        object.__setattr__(self, "times", _frozen(times))
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "missing", _frozen(missing))

    def __len__(self) -> int:
        return len(self.times)

    def __eq__(self, other) -> bool:
        if not isinstance(other, HourlySeries):
            return NotImplemented
        return (
            self.is_power == other.is_power
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.missing, other.missing)
            and np.array_equal(self.values[~self.missing], other.values[~other.missing])
        )

    @property
    def present(self) -> np.ndarray:
        return ~self.missing

    def window(self, start, end) -> "HourlySeries":
        """Points with ``start <= t <= end`` (inclusive, hour resolution)."""
        start = np.datetime64(start, "h")
        end = np.datetime64(end, "h")
        sel = (self.times >= start) & (self.times <= end)
        return HourlySeries(self.times[sel], self.values[sel], self.missing[sel], self.is_power)

    def as_regular(self) -> "HourlySeries":
        """Reindex onto a gap-free hourly grid; absent hours become missing."""
        if len(self) == 0:
            return self
        grid = np.arange(self.times[0], self.times[-1] + HOUR, HOUR)
        if len(grid) == len(self):
            return self
        pos = (self.times - self.times[0]).astype(np.int64)
        values = np.full(len(grid), np.nan)
        missing = np.ones(len(grid), dtype=bool)
        values[pos] = self.values
        missing[pos] = self.missing
        return HourlySeries(grid, values, missing, self.is_power)

    def lookup(self, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values at ``times`` and a mask of which were present."""
        times = np.asarray(times, dtype="datetime64[h]")
        idx = np.searchsorted(self.times, times)
        idx_c = np.minimum(idx, max(len(self) - 1, 0))
        found = np.zeros(len(times), dtype=bool)
        if len(self):
            found = (idx < len(self)) & (self.times[idx_c] == times)
            found &= ~self.missing[idx_c]
        vals = np.where(found, self.values[idx_c] if len(self) else np.nan, np.nan)
        return vals, found


@dataclass(frozen=True)
class Violation:
    index: int
    reason: str


def validate_hourly_series(s: HourlySeries) -> list[Violation]:
    """Check the series invariants; never raises."""
    out: list[Violation] = []
    try:
        times = np.asarray(s.times)
        values = np.asarray(s.values, dtype=np.float64)
        missing = np.asarray(s.missing, dtype=bool)
    except Exception as exc:  # malformed object
        return [Violation(-1, f"unreadable series: {exc}")]
    if times.dtype != np.dtype("datetime64[h]"):
        out.append(Violation(-1, f"timestamps not at hour resolution ({times.dtype})"))
        return out
    for i in range(1, len(times)):
        if times[i] <= times[i - 1]:
            kind = "duplicate" if times[i] == times[i - 1] else "decreasing"
            out.append(Violation(i, f"{kind} timestamp {times[i]}"))
    for i in range(len(values)):
        if missing[i]:
            continue
        v = values[i]
        if not np.isfinite(v):
            out.append(Violation(i, f"non-finite value {v} not flagged missing"))
        elif s.is_power and v < 0:
            out.append(Violation(i, f"negative power value {v}"))
    return out


@dataclass(frozen=True, eq=False)
class SampleMatrix:
    """Aligned (timestamp, features, target) rows for one zone and plant kind."""

    times: np.ndarray
    features: np.ndarray
    target: np.ndarray
    feature_names: tuple[str, ...]
    zone: ZoneId | str | None = None
    kind: PlantKind | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype="datetime64[h]")
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(len(times), -1) if len(times) else feats.reshape(0, len(self.feature_names))
        target = np.asarray(self.target, dtype=np.float64)
        names = tuple(self.feature_names)
        if feats.shape[0] != len(times) or len(target) != len(times):
            raise ValueError("row counts of times, features and target differ")
        if feats.shape[1] != len(names):
            raise ValueError(f"feature width {feats.shape[1]} != {len(names)} names")
        if not (np.all(np.isfinite(feats)) and np.all(np.isfinite(target))):
            raise ValueError("sample matrix contains missing entries")
        object.__setattr__(self, "times", _frozen(times))
        object.__setattr__(self, "features", _frozen(feats))
        object.__setattr__(self, "target", _frozen(target))
        object.__setattr__(self, "feature_names", names)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def width(self) -> int:
        return self.features.shape[1]

    def subset(self, mask: np.ndarray) -> "SampleMatrix":
        return SampleMatrix(self.times[mask], self.features[mask], self.target[mask],
                            self.feature_names, self.zone, self.kind)


@dataclass(frozen=True, eq=False)
class ForecastRun:
    """One run date's 360 hourly forecasts for a zone and plant kind."""

    run_date: np.datetime64
    zone: str
    kind: PlantKind
    values: np.ndarray
    persistence_flag: np.ndarray
    k_prod: float | None = None
    notes: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        run_date = np.datetime64(self.run_date, "D")
        values = np.asarray(self.values, dtype=np.float64)
        flags = np.asarray(self.persistence_flag, dtype=bool)
        if len(values) != HORIZON_HOURS or len(flags) != HORIZON_HOURS:
            raise ValueError(f"forecast runs carry exactly {HORIZON_HOURS} hourly values")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("forecast values must be finite and non-negative")
        object.__setattr__(self, "run_date", run_date)
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "persistence_flag", _frozen(flags))

    @property
    def times(self) -> np.ndarray:
        return lead_times(self.run_date)

    def replace(self, **changes) -> "ForecastRun":
        kw = dict(run_date=self.run_date, zone=self.zone, kind=self.kind, values=self.values,
                  persistence_flag=self.persistence_flag, k_prod=self.k_prod, notes=self.notes)
        kw.update(changes)
        return ForecastRun(**kw)


def lead_times(run_date, horizon: int = HORIZON_HOURS) -> np.ndarray:
    """Timestamps of lead hours 1..horizon for a run issued at 00:00 of ``run_date``."""
    start = np.datetime64(run_date, "D").astype("datetime64[h]")
    return start + np.arange(1, horizon + 1).astype("timedelta64[h]")


def parse_zone(text: str) -> ZoneId:
    try:
        return ZoneId(text.strip().upper())
    except ValueError:
        raise ValueError(f"unknown zone {text!r}") from None


def parse_kind(text: str) -> PlantKind:
    try:
        return PlantKind(text.strip().upper())
    except ValueError:
        raise ValueError(f"unknown plant kind {text!r}") from None


def month_range(first: tuple[int, int], last: tuple[int, int]) -> list[tuple[int, int]]:
    y, m = first
    out = []
    while (y, m) <= last:
        out.append((y, m))
        y, m = (y + 1, 1) if m == 12 else (y, m + 1)
    return out


def days_in_month(year: int, month: int) -> int:
    start = np.datetime64(f"{year:04d}-{month:02d}", "M")
    return int(((start + 1).astype("datetime64[D]") - start.astype("datetime64[D]")).astype(int))


def zone_sequence(zones: Sequence[str]) -> list[ZoneId]:
    return [parse_zone(z) for z in zones]
