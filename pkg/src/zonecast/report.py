"""Metrics CSV plus SVG charts of a backtest."""
from __future__ import annotations

import os
from collections import defaultdict
from typing import Mapping, Sequence

import numpy as np

from . import plotting
from .core import ITALY, ForecastRun, HourlySeries, PlantKind
from .evaluate import HORIZON_DAYS, MetricRecord, write_metrics_csv


def _by(records, **match):
    return [r for r in records if all(getattr(r, k) == v for k, v in match.items())]


def lead_day_chart(records: Sequence[MetricRecord], kind: PlantKind, year: int, month: int, path) -> None:
    """NMBE and NRMSE against lead day for one test month (national line, zones faint)."""
    recs = [r for r in records if r.kind == kind and (r.year, r.month) == (year, month) and r.lead_day > 0]
    zones = sorted({r.zone for r in recs} - {ITALY})
    days = np.arange(1, HORIZON_DAYS + 1)
    with plotting.style():
        fig, (ax_b, ax_r) = plotting.new(1, 2, scale=1.3, aspect=0.4)
        for zone in zones + ([ITALY] if any(r.zone == ITALY for r in recs) else []):
            rs = {r.lead_day: r for r in recs if r.zone == zone}
            if not rs:
                continue
            main = zone == ITALY
            kw = dict(color=plotting.ZONE_COLOURS.get(zone, "grey"), label=zone,
                      alpha=1.0 if main else 0.45, lw=1.6 if main else 0.9,
                      marker="D" if main else None)
            ax_b.plot(days, [100 * rs[d].nmbe for d in days], **kw)
            ax_r.plot(days, [100 * rs[d].nrmse for d in days], **kw)
        ax_b.axhline(0, color="k", lw=0.6)
        ax_b.set_ylabel("NMBE [%]")
        ax_r.set_ylabel("NRMSE [%]")
        for ax in (ax_b, ax_r):
            ax.set_xlabel("lead day")
            ax.set_xticks(days)
        ax_r.legend(loc="upper left")
        fig.suptitle(f"{kind} {year}-{month:02d}")
        plotting.save(fig, path)


def zone_chart(records: Sequence[MetricRecord], kind: PlantKind, path) -> None:
    """Whole-horizon NRMSE per test month for every zone, national mean overlaid."""
    recs = [r for r in records if r.kind == kind and r.lead_day == 0]
    months = sorted({(r.year, r.month) for r in recs})
    labels = [f"{y}-{m:02d}" for y, m in months]
    x = np.arange(len(months))
    with plotting.style():
        fig, ax = plotting.new()
        for zone in sorted({r.zone for r in recs} - {ITALY}) + [ITALY]:
            rs = {(r.year, r.month): r.nrmse for r in recs if r.zone == zone}
            if not rs:
                continue
            y = [100 * rs.get(k, np.nan) for k in months]
            if zone == ITALY:
                ax.plot(x, y, "D", color=plotting.ZONE_COLOURS[ITALY], label=ITALY, ms=6)
            else:
                ax.plot(x, y, "-o", color=plotting.ZONE_COLOURS.get(zone, "grey"), label=zone)
        ax.set_xticks(x, labels)
        ax.set_xlabel("test month")
        ax.set_ylabel("NRMSE, 15-day horizon [%]")
        ax.set_title(f"{kind} per bidding zone")
        ax.legend(ncol=2)
        plotting.save(fig, path)


def forecast_chart(run: ForecastRun, actual: HourlySeries, path) -> None:
    """One 360-hour run against the metered power."""
    meas, found = actual.lookup(run.times)
    hours = np.arange(1, len(run.values) + 1)
    with plotting.style():
        fig, ax = plotting.new(scale=1.3, aspect=0.35)
        ax.plot(hours, np.where(found, meas, np.nan), color="#1f77b4", label="metering")
        ax.plot(hours, run.values, color="#ff7f0e", label="forecast")
        if run.persistence_flag.any():
            first = int(np.argmax(run.persistence_flag)) + 1
            ax.axvspan(first, hours[-1], color="grey", alpha=0.12, lw=0, label="persistence inputs")
        ax.set_xticks(np.arange(0, hours[-1] + 1, 24))
        ax.set_xlabel(f"lead hour from {run.run_date}")
        ax.set_ylabel("power [MW]")
        ax.set_title(f"{run.kind} {run.zone}, run {run.run_date}")
        ax.legend(loc="upper right")
        plotting.save(fig, path)


def pick_showcase_runs(runs: Mapping, actuals: Mapping) -> list[ForecastRun]:
    """Per kind: first run of the last test month, for the most productive zone."""
    out = []
    by_kind = defaultdict(list)
    for (date, zone, kind), run in runs.items():
        by_kind[kind].append(run)
    for kind, rs in sorted(by_kind.items(), key=lambda kv: str(kv[0])):
        zones = sorted({r.zone for r in rs})
        best = max(zones, key=lambda z: np.nanmean(actuals[(z, kind)].values) if (z, kind) in actuals else 0.0)
        last = max(r.run_date for r in rs)
        first_of_month = last.astype("datetime64[M]").astype("datetime64[D]")
        cands = [r for r in rs if r.zone == best and r.run_date >= first_of_month]
        out.append(min(cands, key=lambda r: r.run_date))
    return out


def emit_report(records: Sequence[MetricRecord], out_dir, runs: Mapping | None = None,
                actuals: Mapping | None = None, showcase: Sequence[ForecastRun] | None = None) -> list[str]:
    """Write ``metrics.csv`` and the SVG charts; returns the written paths."""
    if not records:
        raise ValueError("no metric records to report")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    path = os.path.join(out_dir, "metrics.csv")
    with open(path, "w", newline="") as fh:
        write_metrics_csv(records, fh)
    written.append(path)
    for kind in sorted({r.kind for r in records}, key=str):
        for y, m in sorted({(r.year, r.month) for r in records if r.kind == kind}):
            path = os.path.join(out_dir, f"lead_days_{kind}_{y:04d}-{m:02d}.svg")
            lead_day_chart(records, kind, y, m, path)
            written.append(path)
        path = os.path.join(out_dir, f"zones_{kind}.svg")
        zone_chart(records, kind, path)
        written.append(path)
    if runs and actuals:
        for run in (showcase if showcase is not None else pick_showcase_runs(runs, actuals)):
            path = os.path.join(out_dir, f"forecast_{run.kind}_{run.zone}_{run.run_date}.svg")
            forecast_chart(run, actuals[(run.zone, run.kind)], path)
            written.append(path)
    return written
