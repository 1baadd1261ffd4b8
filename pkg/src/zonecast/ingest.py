"""CSV ingestion, grid-to-province aggregation and sample alignment.

File formats (all UTF-8, comma separated, one header line):

* power:          ``timestamp,zone,kind,power_mw`` (empty power = missing)
* meteorological: ``timestamp,province_id,variable,value``
* grid field:     ``lat,lon,value``
* province mask:  ``lat,lon,province_id``
* monthly totals: ``year,month,kind,energy_mwh``
* province zones: ``province_id,zone``

Timestamps are ISO-8601 UTC at whole hours, ``YYYY-MM-DDTHH:00:00Z``.
"""
from __future__ import annotations

import csv
import functools
import io
import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .core import (
    ConfigurationError,
    HourlySeries,
    PlantKind,
    SampleMatrix,
    ZoneId,
    ZonecastError,
    parse_kind,
    parse_zone,
)

log = logging.getLogger(__name__)

MET_VARIABLES = ("GHI", "GHI_CS", "UGRD", "VGRD")
N_PROVINCES = 110

POWER_HEADER = ("timestamp", "zone", "kind", "power_mw")
MET_HEADER = ("timestamp", "province_id", "variable", "value")
GRID_HEADER = ("lat", "lon", "value")
MASK_HEADER = ("lat", "lon", "province_id")
TOTALS_HEADER = ("year", "month", "kind", "energy_mwh")
ZONES_HEADER = ("province_id", "zone")


class FormatError(ZonecastError):
    """The file does not follow the expected layout (bad header)."""


@dataclass(frozen=True)
class RowError:
    line: int
    message: str

    def __str__(self) -> str:
        return f"line {self.line}: {self.message}"


class CsvRowError(ZonecastError):
    """One or more data rows were rejected."""

    def __init__(self, source: str, errors: Sequence[RowError]):
        self.errors = list(errors)
        shown = "; ".join(str(e) for e in self.errors[:10])
        more = f" (+{len(self.errors) - 10} more)" if len(self.errors) > 10 else ""
        super().__init__(f"{source}: {len(self.errors)} rejected row(s): {shown}{more}")


@dataclass(frozen=True)
class MonthlyNationalTotal:
    year: int
    month: int
    kind: PlantKind
    energy: float

    def __post_init__(self):
        if not 1 <= self.month <= 12:
            raise ValueError(f"month out of range: {self.month}")
        if not (self.energy >= 0):
            raise ValueError(f"energy must be >= 0, got {self.energy}")


@dataclass(frozen=True)
class GridField:
    lat: np.ndarray
    lon: np.ndarray
    value: np.ndarray
    variable: str = "GHI"
    timestamp: np.datetime64 | None = None

    def __post_init__(self):
        if self.variable not in MET_VARIABLES:
            raise ValueError(f"unknown variable {self.variable!r}")
        keys = set(zip(_coord_key(self.lat), _coord_key(self.lon)))
        if len(keys) != len(self.lat):
            raise ValueError("grid field has duplicate (lat, lon) points")


@dataclass(frozen=True)
class ProvinceMask:
    lat: np.ndarray
    lon: np.ndarray
    province: np.ndarray

    def lookup(self) -> dict[tuple[float, float], int]:
        table: dict[tuple[float, float], int] = {}
        for key, pid in zip(zip(_coord_key(self.lat), _coord_key(self.lon)), self.province):
            if key in table and table[key] != pid:
                raise ValueError(f"mask assigns point {key} to two provinces")
            table[key] = int(pid)
        return table


def _coord_key(values) -> list[float]:
    return [round(float(v), 6) for v in np.atleast_1d(values)]


def _open_text(source) -> tuple[IO[str], str]:
    """Accept a path, raw bytes, CSV text or an open file."""
    if isinstance(source, bytes):
        return io.StringIO(source.decode("utf-8")), "<bytes>"
    if isinstance(source, os.PathLike) or (isinstance(source, str) and "\n" not in source
                                           and os.path.exists(source)):
        return open(source, newline="", encoding="utf-8"), str(source)
    if isinstance(source, str):
        return io.StringIO(source), "<text>"
    name = getattr(source, "name", "<stream>")
    data = source.read()
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return io.StringIO(data), str(name)


def _rows(source, header: Sequence[str]):
    fh, name = _open_text(source)
    with fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or tuple(c.strip() for c in first) != tuple(header):
            raise FormatError(f"{name}: expected header {','.join(header)!r}, got {first!r}")
        rows = [(reader.line_num, row) for row in reader if row]
    return name, rows


@functools.lru_cache(maxsize=1 << 17)
def parse_timestamp(text: str) -> np.datetime64:
    text = text.strip()
    if not text.endswith("Z") or len(text) != 20 or text[13:19] != ":00:00":
        raise ValueError(f"timestamp {text!r} is not YYYY-MM-DDTHH:00:00Z")
    return np.datetime64(text[:-1], "h")


def format_timestamp(t) -> str:
    return str(np.datetime64(t, "h")) + ":00:00Z"


def _parse_float(text: str, what: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ValueError(f"{what} {text!r} is not a number") from None
    if not math.isfinite(v):
        raise ValueError(f"{what} {text!r} is not finite")
    return v


def _build_series(points: dict, is_power: bool) -> HourlySeries:
    keys = sorted(points)
    times = np.array(keys, dtype="datetime64[h]")
    vals = np.array([np.nan if points[t] is None else points[t] for t in keys], dtype=np.float64)
    return HourlySeries(times, vals, np.isnan(vals), is_power=is_power)


def read_power_csv(source) -> tuple[dict[tuple[ZoneId, PlantKind], HourlySeries], list[RowError]]:
    """Lenient power parser: returns the accepted series and the rejected rows."""
    name, rows = _rows(source, POWER_HEADER)
    points: dict[tuple[ZoneId, PlantKind], dict] = defaultdict(dict)
    errors: list[RowError] = []
    for line, row in rows:
        try:
            if len(row) != 4:
                raise ValueError(f"expected 4 fields, got {len(row)}")
            ts = parse_timestamp(row[0])
            zone = parse_zone(row[1])
            kind = parse_kind(row[2])
            if row[3].strip() == "":
                value = None
            else:
                value = _parse_float(row[3], "power_mw")
                if value < 0:
                    raise ValueError(f"negative power {value}")
            key = (zone, kind)
            if ts in points[key]:
                raise ValueError(f"duplicate timestamp {row[0]} for {zone}/{kind}")
            points[key][ts] = value
        except ValueError as exc:
            errors.append(RowError(line, str(exc)))
    series = {key: _build_series(p, is_power=True) for key, p in points.items() if p}
    return series, errors


def parse_power_csv(source) -> dict[tuple[ZoneId, PlantKind], HourlySeries]:
    """Parse a power CSV into one series per (zone, kind); any bad row raises."""
    series, errors = read_power_csv(source)
    if errors:
        raise CsvRowError("power csv", errors)
    return series


def read_met_csv(source) -> tuple[dict[tuple[int, str], HourlySeries], list[RowError]]:
    name, rows = _rows(source, MET_HEADER)
    points: dict[tuple[int, str], dict] = defaultdict(dict)
    errors: list[RowError] = []
    for line, row in rows:
        try:
            if len(row) != 4:
                raise ValueError(f"expected 4 fields, got {len(row)}")
            ts = parse_timestamp(row[0])
            try:
                pid = int(row[1])
            except ValueError:
                raise ValueError(f"province_id {row[1]!r} is not an integer") from None
            if not 1 <= pid <= N_PROVINCES:
                raise ValueError(f"province_id {pid} outside 1..{N_PROVINCES}")
            var = row[2].strip()
            if var not in MET_VARIABLES:
                raise ValueError(f"unknown variable {var!r}")
            value = None if row[3].strip() == "" else _parse_float(row[3], "value")
            key = (pid, var)
            if ts in points[key]:
                raise ValueError(f"duplicate row for province {pid}, {var} at {row[0]}")
            points[key][ts] = value
        except ValueError as exc:
            errors.append(RowError(line, str(exc)))
    series = {key: _build_series(p, is_power=False) for key, p in points.items() if p}
    return series, errors


def parse_met_csv(source) -> dict[tuple[int, str], HourlySeries]:
    series, errors = read_met_csv(source)
    if errors:
        raise CsvRowError("met csv", errors)
    return series


def parse_monthly_totals_csv(source) -> list[MonthlyNationalTotal]:
    name, rows = _rows(source, TOTALS_HEADER)
    out, errors, seen = [], [], set()
    for line, row in rows:
        try:
            if len(row) != 4:
                raise ValueError(f"expected 4 fields, got {len(row)}")
            total = MonthlyNationalTotal(int(row[0]), int(row[1]), parse_kind(row[2]),
                                         _parse_float(row[3], "energy_mwh"))
            key = (total.year, total.month, total.kind)
            if key in seen:
                raise ValueError(f"duplicate total for {key}")
            seen.add(key)
            out.append(total)
        except ValueError as exc:
            errors.append(RowError(line, str(exc)))
    if errors:
        raise CsvRowError(name, errors)
    return out


def parse_grid_csv(source, variable: str = "GHI", timestamp=None) -> GridField:
    name, rows = _rows(source, GRID_HEADER)
    try:
        arr = np.array([[_parse_float(c, h) for c, h in zip(row, GRID_HEADER)] for _, row in rows],
                       dtype=np.float64).reshape(-1, 3)
    except ValueError as exc:
        raise FormatError(f"{name}: {exc}") from None
    return GridField(arr[:, 0], arr[:, 1], arr[:, 2], variable, timestamp)


def parse_mask_csv(source) -> ProvinceMask:
    name, rows = _rows(source, MASK_HEADER)
    lat, lon, pid = [], [], []
    for line, row in rows:
        try:
            lat.append(_parse_float(row[0], "lat"))
            lon.append(_parse_float(row[1], "lon"))
            p = int(row[2])
            if not 1 <= p <= N_PROVINCES:
                raise ValueError(f"province_id {p} outside 1..{N_PROVINCES}")
            pid.append(p)
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{name}: line {line}: {exc}") from None
    mask = ProvinceMask(np.array(lat), np.array(lon), np.array(pid, dtype=np.int64))
    mask.lookup()
    return mask


def parse_zones_csv(source) -> dict[int, ZoneId]:
    """Province-to-zone assignment."""
    name, rows = _rows(source, ZONES_HEADER)
    out: dict[int, ZoneId] = {}
    errors = []
    for line, row in rows:
        try:
            pid = int(row[0])
            if pid in out:
                raise ValueError(f"province {pid} listed twice")
            out[pid] = parse_zone(row[1])
        except (ValueError, IndexError) as exc:
            errors.append(RowError(line, str(exc)))
    if errors:
        raise CsvRowError(name, errors)
    return out


def provinces_by_zone(assignment: Mapping[int, ZoneId]) -> dict[ZoneId, list[int]]:
    out: dict[ZoneId, list[int]] = defaultdict(list)
    for pid, zone in sorted(assignment.items()):
        out[zone].append(pid)
    return dict(out)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_power_csv(series: Mapping[tuple[ZoneId, PlantKind], HourlySeries], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(POWER_HEADER)
    for (zone, kind) in sorted(series, key=lambda k: (str(k[0]), str(k[1]))):
        s = series[(zone, kind)]
        for t, v, m in zip(s.times, s.values, s.missing):
            w.writerow((format_timestamp(t), str(zone), str(kind), "" if m else _fmt(v)))


def write_met_csv(series: Mapping[tuple[int, str], HourlySeries], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(MET_HEADER)
    for (pid, var) in sorted(series):
        s = series[(pid, var)]
        for t, v, m in zip(s.times, s.values, s.missing):
            w.writerow((format_timestamp(t), pid, var, "" if m else _fmt(v)))


def write_monthly_totals_csv(totals: Iterable[MonthlyNationalTotal], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TOTALS_HEADER)
    for t in sorted(totals, key=lambda t: (t.year, t.month, str(t.kind))):
        w.writerow((t.year, t.month, str(t.kind), _fmt(t.energy)))


def write_zones_csv(assignment: Mapping[int, ZoneId], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(ZONES_HEADER)
    for pid in sorted(assignment):
        w.writerow((pid, str(assignment[pid])))


def aggregate_grid_to_provinces(field: GridField, mask: ProvinceMask) -> dict[int, float]:
    """Mean of the grid values falling in each province.

    Grid points absent from the mask are dropped and counted in a warning.
    """
    table = mask.lookup()
    sums: dict[int, list[float]] = defaultdict(list)
    dropped = 0
    for key, v in zip(zip(_coord_key(field.lat), _coord_key(field.lon)), field.value):
        pid = table.get(key)
        if pid is None:
            dropped += 1
            continue
        sums[pid].append(float(v))
    if dropped:
        log.warning("%d grid point(s) not covered by the province mask were dropped", dropped)
    return {pid: math.fsum(vals) / len(vals) for pid, vals in sorted(sums.items())}


def aggregate_grid_fields(fields: Iterable[GridField], mask: ProvinceMask) -> dict[tuple[int, str], HourlySeries]:
    """Aggregate a stack of timestamped grid fields into per-province met series."""
    points: dict[tuple[int, str], dict] = defaultdict(dict)
    for f in fields:
        if f.timestamp is None:
            raise ValueError("grid field without timestamp cannot become a series")
        for pid, v in aggregate_grid_to_provinces(f, mask).items():
            points[(pid, f.variable)][np.datetime64(f.timestamp, "h")] = v
    return {key: _build_series(p, is_power=False) for key, p in sorted(points.items())}


def align(series: Sequence[HourlySeries]) -> tuple[np.ndarray, list[np.ndarray]]:
    """Timestamps present (and not missing) in every series, with the aligned values."""
    if not series:
        return np.array([], dtype="datetime64[h]"), []
    common = series[0].times[series[0].present]
    for s in series[1:]:
        common = np.intersect1d(common, s.times[s.present], assume_unique=True)
    values = []
    for s in series:
        idx = np.searchsorted(s.times, common)
        values.append(np.asarray(s.values[idx], dtype=np.float64))
    return common, values


def join_samples(power: HourlySeries, met: Mapping[tuple[int, str], HourlySeries],
                 feature_spec: Sequence[tuple[int, str]], zone=None, kind=None) -> SampleMatrix:
    """Pair the power target with raw (province, variable) predictors, hour by hour."""
    if not feature_spec:
        raise ConfigurationError("feature_spec must not be empty")
    absent = [key for key in feature_spec if key not in met]
    if absent:
        raise ConfigurationError(f"feature_spec references absent met series: {absent}")
    times, vals = align([power] + [met[key] for key in feature_spec])
    names = tuple(f"P{pid}_{var}" for pid, var in feature_spec)
    feats = np.column_stack(vals[1:]) if len(times) else np.zeros((0, len(names)))
    return SampleMatrix(times, feats, vals[0], names, zone, kind)
