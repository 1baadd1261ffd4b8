"""Training-data cleaning: monthly rescaling, safety-cone outliers, short-gap filling."""
from __future__ import annotations

import logging
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np
from scipy.interpolate import CubicSpline

from .core import HourlySeries, InsufficientDataError, PlantKind, ZonecastError, period_month_key
from .ingest import MonthlyNationalTotal

log = logging.getLogger(__name__)


class MissingTotalError(ZonecastError):
    pass


class DegenerateMonthError(ZonecastError):
    pass


@dataclass(frozen=True)
class PreprocessConfig:
    cone_threshold: float = 5.0
    ghi_floor: float = 20.0
    max_gap_hours: int = 6
    mad_fallback_frac: float = 0.1

    def __post_init__(self):
        if not self.cone_threshold > 0:
            raise ValueError("cone_threshold must be > 0")
        if not self.ghi_floor >= 0:
            raise ValueError("ghi_floor must be >= 0")
        if int(self.max_gap_hours) != self.max_gap_hours or self.max_gap_hours < 1:
            raise ValueError("max_gap_hours must be an integer >= 1")
        if not 0 < self.mad_fallback_frac < 1:
            raise ValueError("mad_fallback_frac must lie in (0, 1)")


def monthly_rescale(zonal: Mapping, totals: Iterable[MonthlyNationalTotal],
                    kind: PlantKind) -> dict:
    """Scale hourly zone power so each month's national sum matches the reported total.

    One factor per month, shared by all zones. Hourly MW values count as MWh.
    """
    kind = PlantKind(kind)
    table = {(t.year, t.month): t.energy for t in totals if t.kind == kind}
    per_month: dict[np.datetime64, list[np.ndarray]] = defaultdict(list)
    keys = {}
    for zone, s in zonal.items():
        keys[zone] = period_month_key(s.times)
        for m in np.unique(keys[zone][s.present]):
            per_month[m].append(s.values[(keys[zone] == m) & s.present])

    factors: dict[np.datetime64, float] = {}
    for m, chunks in sorted(per_month.items()):
        y, mo = int(str(m)[:4]), int(str(m)[5:7])
        if (y, mo) not in table:
            raise MissingTotalError(f"no national {kind} total for {y:04d}-{mo:02d}")
        energy = table[(y, mo)]
        s_m = math.fsum(np.concatenate(chunks).tolist())
        if s_m == 0:
            if energy > 0:
                raise DegenerateMonthError(
                    f"{y:04d}-{mo:02d}: hourly sum is zero but the national total is {energy}")
            factors[m] = 1.0
        else:
            factors[m] = energy / s_m

    out = {}
    for zone, s in zonal.items():
        scale = np.ones(len(s))
        for m, f in factors.items():
            scale[keys[zone] == m] = f
        values = np.where(s.missing, np.nan, s.values * scale)
        out[zone] = HourlySeries(s.times, values, s.missing, s.is_power)
    return out


def cone_filter(pairs, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Flag (zone-mean GHI, power) pairs outside a robust cone through the origin.

    The cone is a median +/- threshold * MAD band on power/GHI. Pairs below
    ``ghi_floor`` (night) are never flagged.
    """
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    if len(arr) == 0:
        raise ValueError("cone_filter needs at least one pair")
    ghi, power = arr[:, 0], arr[:, 1]
    flags = np.zeros(len(arr), dtype=bool)
    day = ghi >= cfg.ghi_floor
    if not day.any():
        warnings.warn("cone_filter: every pair is below ghi_floor; nothing tested", RuntimeWarning)
        return flags
    ratio = power[day] / ghi[day]
    centre = np.median(ratio)
    mad = np.median(np.abs(ratio - centre))
    if mad > 0:
        bound = cfg.cone_threshold * mad
    else:
        bound = cfg.cone_threshold * cfg.mad_fallback_frac * abs(centre)
    flags[day] = np.abs(ratio - centre) > bound
    return flags


def _missing_runs(missing: np.ndarray) -> list[tuple[int, int]]:
    """Half-open [start, stop) index ranges of consecutive missing points."""
    if not missing.any():
        return []
    padded = np.concatenate(([False], missing, [False])).astype(np.int8)
    edges = np.diff(padded)
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def spline_fill(s: HourlySeries, max_gap_hours: int = 6) -> HourlySeries:
    """Fill interior gaps up to ``max_gap_hours`` long with a natural cubic spline.

    Absent hours count as gaps, so the result is on a regular hourly grid.
    Leading and trailing gaps are left alone (that would be extrapolation).
    """
    if max_gap_hours < 1:
        raise ValueError("max_gap_hours must be >= 1")
    reg = s.as_regular()
    runs = [(a, b) for a, b in _missing_runs(reg.missing)
            if a > 0 and b < len(reg) and b - a <= max_gap_hours]
    if not runs:
        return reg
    known = np.flatnonzero(reg.present)
    if len(known) < 4:
        raise InsufficientDataError(
            f"spline_fill needs >= 4 present points to fill gaps, got {len(known)}")
    spline = CubicSpline(known.astype(np.float64), reg.values[known], bc_type="natural")
    values = reg.values.copy()
    missing = reg.missing.copy()
    for a, b in runs:
        pos = np.arange(a, b)
        filled = spline(pos.astype(np.float64))
        if reg.is_power:
            filled = np.maximum(filled, 0.0)
        values[pos] = filled
        missing[pos] = False
    return HourlySeries(reg.times, values, missing, reg.is_power)
