"""Deterministic synthetic PV and wind datasets with known generating functions.

PV power is a linear function of zone-mean GHI; wind power follows a
cut-in / cubic ramp / rated / cut-out curve of zone-mean wind speed. The
"forecast" meteorology is the truth plus errors whose standard deviation
grows linearly with the lead day.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .core import HOUR, HourlySeries, PlantKind, ZoneId, lead_times, parse_zone, period_month_key
from .ingest import (
    MonthlyNationalTotal,
    write_met_csv,
    write_monthly_totals_csv,
    write_power_csv,
    write_zones_csv,
)

# rough centroids of the bidding zones (deg N, deg E)
ZONE_CENTRES = {
    ZoneId.NORD: (45.5, 10.5),
    ZoneId.CNOR: (43.5, 11.3),
    ZoneId.CSUD: (41.9, 13.5),
    ZoneId.SUD: (40.8, 16.0),
    ZoneId.SICI: (37.5, 14.0),
    ZoneId.SARD: (40.0, 9.0),
}
_KIND_CODE = {PlantKind.PV: 1, PlantKind.WD: 2}


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 7
    start: str = "2015-05-01"
    end: str = "2016-11-16"  # exclusive day
    zones: tuple[str, ...] = ("NORD", "SUD")
    provinces_per_zone: int = 3
    pv_capacity: float = 6000.0  # MW per zone, scaled by zone order
    pv_efficiency: float = 0.8
    cloudiness_persistence: float = 0.6
    capacity_growth: float = 0.0  # fractional PV capacity change per year
    wd_capacity: float = 3000.0
    ar_coefficient: float = 0.97
    cut_in: float = 3.5
    rated: float = 13.0
    cut_out: float = 25.0
    noise_frac: float = 0.02
    forecast_noise_growth: float = 0.04
    wind_forecast_scale: float = 6.0  # m/s of wind error per unit of growth and lead day
    forecast_start: str | None = "2016-05-01"
    forecast_end: str | None = "2016-10-31"  # inclusive run date
    forecast_hours: int = 240

    def __post_init__(self):
        if self.pv_capacity <= 0 or self.wd_capacity <= 0:
            raise ValueError("capacities must be > 0")
        if not 0 <= self.ar_coefficient < 1:
            raise ValueError("ar_coefficient must lie in [0, 1)")
        if not 0 <= self.cloudiness_persistence < 1:
            raise ValueError("cloudiness_persistence must lie in [0, 1)")
        if not self.cut_in < self.rated < self.cut_out:
            raise ValueError("need cut_in < rated < cut_out")
        if self.noise_frac < 0 or self.forecast_noise_growth < 0:
            raise ValueError("noise levels must be >= 0")
        if self.provinces_per_zone < 1:
            raise ValueError("provinces_per_zone must be >= 1")
        if self.forecast_hours < 24 or self.forecast_hours % 24:
            raise ValueError("forecast_hours must be a positive multiple of 24")
        if np.datetime64(self.end, "D") <= np.datetime64(self.start, "D"):
            raise ValueError("end must be after start")
        if len(self.zone_ids) * self.provinces_per_zone > 110:
            raise ValueError("more than 110 provinces requested")

    @property
    def zone_ids(self) -> list[ZoneId]:
        return [parse_zone(z) for z in self.zones]

    def times(self) -> np.ndarray:
        start = np.datetime64(self.start, "D").astype("datetime64[h]")
        end = np.datetime64(self.end, "D").astype("datetime64[h]")
        return np.arange(start + HOUR, end + HOUR, HOUR)

    def run_dates(self) -> np.ndarray:
        if self.forecast_start is None:
            return np.array([], dtype="datetime64[D]")
        last = np.datetime64(self.forecast_end or self.end, "D")
        return np.arange(np.datetime64(self.forecast_start, "D"), last + 1)

    def provinces(self) -> dict[int, ZoneId]:
        out = {}
        for zi, zone in enumerate(self.zone_ids):
            for j in range(self.provinces_per_zone):
                out[zi * self.provinces_per_zone + j + 1] = zone
        return out


@dataclass
class SynthDataset:
    power: dict = field(default_factory=dict)
    met: dict = field(default_factory=dict)
    totals: list = field(default_factory=list)
    forecasts: dict = field(default_factory=dict)  # run date -> met dict
    zones: dict = field(default_factory=dict)

    def merge(self, other: "SynthDataset") -> "SynthDataset":
        forecasts = {d: dict(m) for d, m in self.forecasts.items()}
        for d, m in other.forecasts.items():
            forecasts.setdefault(d, {}).update(m)
        return SynthDataset({**self.power, **other.power}, {**self.met, **other.met},
                            self.totals + other.totals, forecasts, {**self.zones, **other.zones})

    def write(self, out_dir) -> dict[str, str]:
        """Write the CSV files; returns the paths keyed by config name."""
        os.makedirs(os.path.join(out_dir, "forecast_met"), exist_ok=True)
        paths = {
            "power": os.path.join(out_dir, "power.csv"),
            "met": os.path.join(out_dir, "met.csv"),
            "monthly_totals": os.path.join(out_dir, "monthly_totals.csv"),
            "zones": os.path.join(out_dir, "zones.csv"),
            "forecast_dir": os.path.join(out_dir, "forecast_met"),
        }
        with open(paths["power"], "w", newline="") as fh:
            write_power_csv(self.power, fh)
        with open(paths["met"], "w", newline="") as fh:
            write_met_csv(self.met, fh)
        with open(paths["monthly_totals"], "w", newline="") as fh:
            write_monthly_totals_csv(self.totals, fh)
        with open(paths["zones"], "w", newline="") as fh:
            write_zones_csv(self.zones, fh)
        for d in sorted(self.forecasts):
            with open(os.path.join(paths["forecast_dir"], f"{d}.csv"), "w", newline="") as fh:
                write_met_csv(self.forecasts[d], fh)
        return paths


def _rng(cfg: SynthConfig, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, *stream]))


def clear_sky_ghi(times: np.ndarray, lat: float, lon: float) -> np.ndarray:
    """Hour-averaged clear-sky GHI (W/m^2) from solar geometry at the hour midpoint."""
    mid = np.asarray(times, dtype="datetime64[h]").astype("datetime64[m]") - np.timedelta64(30, "m")
    day = mid.astype("datetime64[D]")
    doy = (day - day.astype("datetime64[Y]").astype("datetime64[D]")).astype(np.float64) + 1
    utc_hour = (mid - day.astype("datetime64[m]")).astype(np.float64) / 60.0
    decl = np.radians(23.45) * np.sin(2 * np.pi * (284 + doy) / 365.0)
    omega = np.radians(15.0 * (utc_hour + lon / 15.0 - 12.0))
    phi = np.radians(lat)
    cz = np.sin(phi) * np.sin(decl) + np.cos(phi) * np.cos(decl) * np.cos(omega)
    out = np.zeros_like(cz)
    up = cz > 0.01
    out[up] = 1098.0 * cz[up] * np.exp(-0.057 / cz[up])
    return out


def pv_power_curve(ghi_zone: np.ndarray, capacity: float, efficiency: float) -> np.ndarray:
    """Noiseless PV generation (MW) from zone-mean GHI."""
    return capacity * efficiency * np.asarray(ghi_zone) / 1000.0


def wind_power_curve(speed: np.ndarray, capacity: float, cut_in: float, rated: float,
                     cut_out: float) -> np.ndarray:
    v = np.asarray(speed, dtype=np.float64)
    frac = np.where(v < cut_in, 0.0, (v**3 - cut_in**3) / (rated**3 - cut_in**3))
    frac = np.where(v >= rated, 1.0, frac)
    frac = np.where(v > cut_out, 0.0, frac)
    return capacity * frac


def _totals(power: Mapping, kind: PlantKind) -> list[MonthlyNationalTotal]:
    by_month: dict = {}
    for s in power.values():
        keys = period_month_key(s.times)
        for m in np.unique(keys):
            by_month.setdefault(m, []).extend(s.values[(keys == m) & s.present].tolist())
    out = []
    for m, vals in sorted(by_month.items()):
        y, mo = int(str(m)[:4]), int(str(m)[5:7])
        out.append(MonthlyNationalTotal(y, mo, kind, math.fsum(vals)))
    return out


def _ar1(rng, n: int, phi: float, size=()) -> np.ndarray:
    eps = rng.standard_normal((n, *size))
    out = np.empty_like(eps)
    out[0] = eps[0]
    scale = math.sqrt(1 - phi * phi)
    for i in range(1, n):
        out[i] = phi * out[i - 1] + scale * eps[i]
    return out


def _province_coords(cfg: SynthConfig) -> dict[int, tuple[float, float]]:
    coords = {}
    for pid, zone in cfg.provinces().items():
        lat, lon = ZONE_CENTRES[zone]
        j = (pid - 1) % cfg.provinces_per_zone
        off = (j - (cfg.provinces_per_zone - 1) / 2) * 0.6
        coords[pid] = (lat + off, lon - off)
    return coords


def _r(x, nd):
    return np.round(np.asarray(x, dtype=np.float64), nd)


def generate_pv_dataset(cfg: SynthConfig = SynthConfig()) -> SynthDataset:
    times = cfg.times()
    n = len(times)
    days = (times - HOUR).astype("datetime64[D]")
    day_index = (days - days[0]).astype(np.int64)
    n_days = int(day_index[-1]) + 1
    years = (times - times[0]).astype(np.float64) / (24 * 365.25)
    coords = _province_coords(cfg)
    zones = cfg.provinces()
    ds = SynthDataset(zones=dict(zones))
    clearness: dict[int, np.ndarray] = {}
    cs: dict[int, np.ndarray] = {}

    for zi, zone in enumerate(cfg.zone_ids):
        rng = _rng(cfg, 1, zi)
        daily = _ar1(rng, n_days, cfg.cloudiness_persistence)
        k_day = 1.0 / (1.0 + np.exp(-(1.0 + 1.6 * daily)))
        hourly = _ar1(rng, n, 0.8) * 0.04
        k_zone = k_day[day_index] + hourly
        pids = [p for p, z in zones.items() if z == zone]
        ghis = []
        for p in pids:
            cs[p] = _r(clear_sky_ghi(times, *coords[p]), 2)
            clearness[p] = np.clip(k_zone + 0.03 * rng.standard_normal(n), 0.05, 1.0)
            ghi = _r(clearness[p] * cs[p], 2)
            ds.met[(p, "GHI")] = HourlySeries(times, ghi)
            ds.met[(p, "GHI_CS")] = HourlySeries(times, cs[p])
            ghis.append(ghi)
        capacity = cfg.pv_capacity * (1.0 + 0.5 * zi) * (1.0 + cfg.capacity_growth * years)
        base = pv_power_curve(np.mean(ghis, axis=0), capacity, cfg.pv_efficiency)
        noisy = base * (1.0 + cfg.noise_frac * rng.standard_normal(n))
        ds.power[(zone, PlantKind.PV)] = HourlySeries(times, _r(np.maximum(noisy, 0.0), 3), is_power=True)
    ds.totals = _totals(ds.power, PlantKind.PV)

    for r, run in enumerate(cfg.run_dates()):
        lt = lead_times(run, cfg.forecast_hours)
        pos = ((lt - times[0]) // HOUR).astype(np.int64)
        if pos[-1] >= n:
            raise ValueError(f"forecast run {run} reaches beyond the generated period")
        lead_day = (np.arange(cfg.forecast_hours) // 24 + 1).astype(np.float64)
        sd = cfg.forecast_noise_growth * lead_day
        met = {}
        for zi, zone in enumerate(cfg.zone_ids):
            rng = _rng(cfg, 10 + _KIND_CODE[PlantKind.PV], r, zi)
            day_err = rng.standard_normal(cfg.forecast_hours // 24)[lead_day.astype(int) - 1]
            for p in [p for p, z in zones.items() if z == zone]:
                err = sd * (day_err + 0.3 * rng.standard_normal(cfg.forecast_hours))
                k_f = np.clip(clearness[p][pos] + err, 0.05, 1.0) if cfg.forecast_noise_growth > 0 \
                    else clearness[p][pos]
                ghi_f = _r(k_f * cs[p][pos], 2) if cfg.forecast_noise_growth > 0 \
                    else ds.met[(p, "GHI")].values[pos]
                met[(p, "GHI")] = HourlySeries(lt, ghi_f)
                met[(p, "GHI_CS")] = HourlySeries(lt, cs[p][pos])
        ds.forecasts[run] = met
    return ds


def generate_wd_dataset(cfg: SynthConfig = SynthConfig()) -> SynthDataset:
    times = cfg.times()
    n = len(times)
    zones = cfg.provinces()
    ds = SynthDataset(zones=dict(zones))
    truth: dict[tuple[int, str], np.ndarray] = {}

    for zi, zone in enumerate(cfg.zone_ids):
        rng = _rng(cfg, 2, zi)
        mean_u, mean_v = 1.5 + 0.5 * zi, -0.5 + 0.8 * zi
        uv = _ar1(rng, n, cfg.ar_coefficient, size=(2,)) * 4.5
        pids = [p for p, z in zones.items() if z == zone]
        speeds = []
        for p in pids:
            u = _r(mean_u + uv[:, 0] + 0.4 * rng.standard_normal(n), 3)
            v = _r(mean_v + uv[:, 1] + 0.4 * rng.standard_normal(n), 3)
            truth[(p, "UGRD")], truth[(p, "VGRD")] = u, v
            ds.met[(p, "UGRD")] = HourlySeries(times, u)
            ds.met[(p, "VGRD")] = HourlySeries(times, v)
            speeds.append(np.hypot(u, v))
        capacity = cfg.wd_capacity * (1.0 + 0.5 * zi)
        base = wind_power_curve(np.mean(speeds, axis=0), capacity, cfg.cut_in, cfg.rated, cfg.cut_out)
        noisy = base * (1.0 + cfg.noise_frac * rng.standard_normal(n))
        ds.power[(zone, PlantKind.WD)] = HourlySeries(times, _r(np.maximum(noisy, 0.0), 3), is_power=True)
    ds.totals = _totals(ds.power, PlantKind.WD)

    for r, run in enumerate(cfg.run_dates()):
        lt = lead_times(run, cfg.forecast_hours)
        pos = ((lt - times[0]) // HOUR).astype(np.int64)
        if pos[-1] >= n:
            raise ValueError(f"forecast run {run} reaches beyond the generated period")
        lead_day = (np.arange(cfg.forecast_hours) // 24 + 1).astype(np.float64)
        sd = cfg.forecast_noise_growth * cfg.wind_forecast_scale * lead_day
        met = {}
        for zi, zone in enumerate(cfg.zone_ids):
            rng = _rng(cfg, 10 + _KIND_CODE[PlantKind.WD], r, zi)
            n_d = cfg.forecast_hours // 24
            day_err = rng.standard_normal((n_d, 2))[lead_day.astype(int) - 1]
            for p in [p for p, z in zones.items() if z == zone]:
                for c, var in enumerate(("UGRD", "VGRD")):
                    err = sd * (day_err[:, c] + 0.3 * rng.standard_normal(cfg.forecast_hours))
                    met[(p, var)] = HourlySeries(lt, _r(truth[(p, var)][pos] + err, 3))
        ds.forecasts[run] = met
    return ds


def generate_dataset(cfg: SynthConfig = SynthConfig(), kinds=(PlantKind.PV, PlantKind.WD)) -> SynthDataset:
    out = SynthDataset(zones=cfg.provinces())
    for kind in kinds:
        gen = generate_pv_dataset if PlantKind(kind) == PlantKind.PV else generate_wd_dataset
        out = out.merge(gen(cfg))
    return out
