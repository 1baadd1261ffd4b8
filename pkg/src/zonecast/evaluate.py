"""Semi-moving-window backtest and NMBE / NRMSE scoring.

The training window starts on a fixed date and ends the day before each test
month; models are refit once per test month and issue one 360-hour run per
day of the month. Errors at a given lead day pool the 24 hours of that lead
day over all runs in the month.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import (
    HORIZON_HOURS,
    HOUR,
    ITALY,
    HourlySeries,
    PlantKind,
    ZonecastError,
    days_in_month,
    lead_times,
    period_start,
)
from .ingest import FormatError, MonthlyNationalTotal, align, provinces_by_zone
from .pipeline import PipelineParams, StageError, clean_met, clean_power, fit_zone, run_forecast

log = logging.getLogger(__name__)

METRICS_HEADER = ("year", "month", "zone", "kind", "lead_day", "nmbe", "nrmse", "n_samples", "m_norm")
HORIZON_DAYS = HORIZON_HOURS // 24


class CoverageError(ZonecastError):
    """Input data do not cover the period the backtest needs."""


def _check(pred, actual, m_norm) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    a = np.asarray(actual, dtype=np.float64).ravel()
    if len(p) != len(a):
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(a)} actuals")
    if len(p) == 0:
        raise ValueError("need at least one pair")
    if not m_norm > 0:
        raise ValueError(f"m_norm must be > 0, got {m_norm}")
    return p, a


def nmbe(pred, actual, m_norm: float) -> float:
    """Mean of (pred - actual) / m_norm; positive means overestimation."""
    p, a = _check(pred, actual, m_norm)
    return math.fsum(((p - a) / m_norm).tolist()) / len(p)


def nrmse(pred, actual, m_norm: float) -> float:
    p, a = _check(pred, actual, m_norm)
    e = (p - a) / m_norm
    big = float(np.max(np.abs(e)))
    if big == 0.0:
        return 0.0
    e = e / big  # squaring tiny errors would underflow
    return math.sqrt(math.fsum((e * e).tolist()) / len(p)) * big


def monthly_norm(measured: HourlySeries, month: int) -> float:
    """Largest measured power among all occurrences of calendar ``month``."""
    months = period_start(measured.times).astype("datetime64[M]").astype(np.int64) % 12 + 1
    sel = (months == month) & measured.present
    if not sel.any():
        raise ValueError(f"no measured data for month {month}")
    return float(np.max(measured.values[sel]))


@dataclass(frozen=True)
class MetricRecord:
    year: int
    month: int
    zone: str
    kind: PlantKind
    lead_day: int  # 0 = all lead days
    nmbe: float
    nrmse: float
    n_samples: int
    m_norm: float

    def __post_init__(self):
        if self.n_samples <= 0 or not self.m_norm > 0:
            raise ValueError("metric records need n_samples > 0 and m_norm > 0")


def write_metrics_csv(records: Sequence[MetricRecord], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in records:
        w.writerow((r.year, r.month, r.zone, str(r.kind), r.lead_day, repr(r.nmbe), repr(r.nrmse),
                    r.n_samples, repr(r.m_norm)))


def read_metrics_csv(fh) -> list[MetricRecord]:
    reader = csv.reader(fh)
    if tuple(next(reader, ())) != METRICS_HEADER:
        raise FormatError(f"metrics csv must start with {','.join(METRICS_HEADER)}")
    return [MetricRecord(int(r[0]), int(r[1]), r[2], PlantKind(r[3]), int(r[4]), float(r[5]),
                         float(r[6]), int(r[7]), float(r[8])) for r in reader if r]


@dataclass(frozen=True)
class BacktestConfig:
    train_start: str = "2015-05-01"
    test_months: tuple[tuple[int, int], ...] = ((2017, 1), (2017, 2), (2017, 3), (2017, 4), (2017, 5), (2017, 6))
    kinds: tuple[PlantKind, ...] = (PlantKind.PV, PlantKind.WD)
    zones: tuple[str, ...] | None = None  # None: every zone with data
    horizon_days: int = HORIZON_DAYS

    def __post_init__(self):
        if self.horizon_days != HORIZON_DAYS:
            raise ValueError(f"horizon is fixed at {HORIZON_DAYS} days")
        start = np.datetime64(self.train_start, "D")
        for y, m in self.test_months:
            if np.datetime64(f"{y:04d}-{m:02d}-01") <= start:
                raise ValueError(f"test month {y}-{m:02d} does not follow train_start")
        if list(self.test_months) != sorted(set(self.test_months)):
            raise ValueError("test months must be strictly increasing")


@dataclass
class BacktestData:
    power: Mapping[tuple, HourlySeries]
    met: Mapping[tuple[int, str], HourlySeries]
    zones: Mapping[int, str]  # province -> zone
    forecasts: Mapping | Callable  # run date -> met dict, or a loader
    totals: Sequence[MonthlyNationalTotal] | None = None

    def forecast(self, run_date) -> Mapping:
        d = np.datetime64(run_date, "D")
        if callable(self.forecasts):
            return self.forecasts(d)
        return self.forecasts[d]

    def has_forecast(self, run_date) -> bool:
        d = np.datetime64(run_date, "D")
        if callable(self.forecasts):
            probe = getattr(self.forecasts, "available", None)
            return True if probe is None else d in probe()
        return d in self.forecasts


@dataclass
class BacktestResult:
    records: list[MetricRecord]
    runs: dict = field(default_factory=dict)  # (run_date, zone, kind) -> ForecastRun
    actuals: dict = field(default_factory=dict)  # (zone, kind) -> HourlySeries
    training_windows: list = field(default_factory=list)  # (kind, year, month, start, end)


def _month_start(y: int, m: int) -> np.datetime64:
    return np.datetime64(f"{y:04d}-{m:02d}-01", "D")


def _ranges(times: np.ndarray) -> list[str]:
    if len(times) == 0:
        return []
    out, a, prev = [], times[0], times[0]
    for t in times[1:]:
        if t != prev + HOUR:
            out.append(f"{a}..{prev}")
            a = t
        prev = t
    out.append(f"{a}..{prev}")
    return out


def check_coverage(data: BacktestData, cfg: BacktestConfig, zones_by_kind) -> None:
    problems = []
    start = np.datetime64(cfg.train_start, "D").astype("datetime64[h]")
    for kind, zones in zones_by_kind.items():
        for zone in zones:
            s = data.power[(zone, kind)]
            if len(s) == 0 or s.times[0] > start + 24 * HOUR:
                problems.append(f"{zone}/{kind}: power starts after train_start {cfg.train_start}")
                continue
            need = np.concatenate([
                lead_times(_month_start(y, m), (days_in_month(y, m) + HORIZON_DAYS - 1) * 24)
                for y, m in cfg.test_months])
            need = np.unique(need)
            _, found = s.lookup(need)
            if not found.all():
                problems.append(f"{zone}/{kind}: measured power missing for {', '.join(_ranges(need[~found])[:5])}")
    missing_runs = []
    for y, m in cfg.test_months:
        first = _month_start(y, m)
        for d in range(days_in_month(y, m)):
            if not data.has_forecast(first + d):
                missing_runs.append(str(first + d))
    if missing_runs:
        problems.append(f"no met forecast for run date(s) {', '.join(missing_runs[:10])}"
                        + (f" (+{len(missing_runs) - 10} more)" if len(missing_runs) > 10 else ""))
    if problems:
        raise CoverageError("; ".join(problems))


def _norm(train: HourlySeries, month: int) -> float:
    """M_m from the training data; a calendar month not yet seen falls back to the overall max."""
    try:
        return monthly_norm(train, month)
    except ValueError:
        log.warning("training data lack calendar month %d; normalizing by the overall maximum", month)
        return float(np.max(train.values[train.present]))


def _sum_series(series: Sequence[HourlySeries]) -> HourlySeries:
    times, vals = align(series)
    return HourlySeries(times, np.sum(vals, axis=0), is_power=True)


def _score(pred: np.ndarray, actual: np.ndarray, m_norm: float, y: int, m: int, zone: str,
           kind: PlantKind) -> list[MetricRecord]:
    """``pred``/``actual`` are (runs, 360); one record per lead day plus the pooled one."""
    out = []
    for d in range(1, HORIZON_DAYS + 1):
        sl = slice(24 * (d - 1), 24 * d)
        p, a = pred[:, sl].ravel(), actual[:, sl].ravel()
        out.append(MetricRecord(y, m, zone, kind, d, nmbe(p, a, m_norm), nrmse(p, a, m_norm), len(p), m_norm))
    out.append(MetricRecord(y, m, zone, kind, 0, nmbe(pred, actual, m_norm), nrmse(pred, actual, m_norm),
                            pred.size, m_norm))
    return out


def backtest(data: BacktestData, cfg: BacktestConfig = BacktestConfig(),
             params: PipelineParams = PipelineParams(), n_jobs: int = 1,
             progress: Callable[[str], None] | None = None) -> BacktestResult:
    """Run the monthly-refit backtest and score every zone and the national sum."""
    provinces = provinces_by_zone(data.zones)
    zones_by_kind = {}
    for kind in cfg.kinds:
        kind = PlantKind(kind)
        have = sorted({str(z) for (z, k) in data.power if PlantKind(k) == kind})
        wanted = have if cfg.zones is None else [z for z in have if z in {str(x) for x in cfg.zones}]
        if wanted:
            zones_by_kind[kind] = wanted
    if not zones_by_kind:
        raise CoverageError("no power series match the requested kinds and zones")
    power = {(str(z), PlantKind(k)): s for (z, k), s in data.power.items()}
    data = BacktestData(power, data.met, data.zones, data.forecasts, data.totals)
    check_coverage(data, cfg, zones_by_kind)
    prov = {str(z): p for z, p in provinces.items()}

    result = BacktestResult([])
    train_start = np.datetime64(cfg.train_start, "D").astype("datetime64[h]") + HOUR
    for kind, zones in zones_by_kind.items():
        all_zones = sorted({z for (z, k) in power if k == kind})
        for y, m in cfg.test_months:
            first = _month_start(y, m)
            train_end = first.astype("datetime64[h]")
            result.training_windows.append((kind, y, m, train_start, train_end))
            raw = {z: power[(z, kind)].window(train_start, train_end) for z in all_zones}
            try:
                cleaned = clean_power(raw, data.totals, kind, params.preprocess)
            except ZonecastError as exc:
                raise StageError("preprocess", exc) from exc
            variables = ("GHI", "GHI_CS") if kind == PlantKind.PV else ("UGRD", "VGRD")
            met_keys = [(p, v) for z in zones for p in prov[z] for v in variables]
            met = clean_met({k: data.met[k].window(train_start, train_end) for k in met_keys
                             if k in data.met}, params.preprocess)
            n_days = days_in_month(y, m)
            preds, acts = {}, {}
            for zone in zones:
                if progress:
                    progress(f"{kind} {y}-{m:02d} {zone}: fitting")
                models = fit_zone(cleaned[zone], met, prov[zone], zone, kind, params, n_jobs=n_jobs)
                P = np.empty((n_days, HORIZON_HOURS))
                A = np.empty((n_days, HORIZON_HOURS))
                for d in range(n_days):
                    run_date = first + d
                    run = run_forecast(models, data.forecast(run_date), run_date, prov[zone], params)
                    result.runs[(run_date, zone, kind)] = run
                    P[d] = run.values
                    A[d], _ = power[(zone, kind)].lookup(run.times)
                preds[zone], acts[zone] = P, A
                result.records.extend(_score(P, A, _norm(raw[zone], m), y, m, zone, kind))
            national = _sum_series([raw[z] for z in zones])
            result.records.extend(_score(sum(preds[z] for z in zones), sum(acts[z] for z in zones),
                                         _norm(national, m), y, m, ITALY, kind))
        for z in zones:
            result.actuals[(z, kind)] = power[(z, kind)]
    return result
