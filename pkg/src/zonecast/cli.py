"""Command-line entry point: ``zonecast <command> [options]``.

Exit status is 0 on success, 2 on usage errors and 1 on data errors; data
errors are reported as ``zonecast: error [stage]: message`` on stderr.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import itertools
import logging
import os
import re
import sys
import warnings
from dataclasses import replace

import numpy as np

from . import __version__
from .config import RunConfig, load_config, render_config
from .core import (
    HORIZON_HOURS,
    HOUR,
    ConfigurationError,
    PlantKind,
    ZonecastError,
    days_in_month,
    lead_times,
    parse_kind,
    parse_zone,
    validate_hourly_series,
)
from .evaluate import BacktestConfig, BacktestData, backtest, monthly_norm, nrmse
from .ingest import (
    aggregate_grid_fields,
    parse_grid_csv,
    parse_mask_csv,
    parse_met_csv,
    parse_monthly_totals_csv,
    parse_power_csv,
    parse_zones_csv,
    provinces_by_zone,
    read_met_csv,
    read_power_csv,
    write_met_csv,
    write_power_csv,
)
from .pipeline import (
    KNN,
    FeatureSpec,
    PostprocessSkipped,
    StageError,
    clean_met,
    clean_power,
    fit_zone,
    load_zone_models,
    run_forecast,
    save_zone_models,
    training_matrix,
    write_forecast_csv,
)
from .preprocess import cone_filter
from .synth import generate_dataset

log = logging.getLogger("zonecast")

COMMANDS = ("ingest", "preprocess", "train", "forecast", "backtest", "synth", "tune")
TUNE_HEADER = ("rank", "cone_threshold", "quantile", "k", "n_weeks", "nrmse")
_GRID_NAME = re.compile(r"^(GHI|GHI_CS|UGRD|VGRD)_(\d{4})(\d{2})(\d{2})(\d{2})\.csv$")


class CliError(Exception):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(message)


@contextlib.contextmanager
def stage(name: str):
    """Turn data errors raised inside the block into a :class:`CliError`."""
    try:
        yield
    except CliError:
        raise
    except StageError as exc:
        raise CliError(f"{name}/{exc.stage}", f"{type(exc.cause).__name__}: {exc.cause}") from exc
    except (ZonecastError, ValueError, KeyError, OSError) as exc:
        raise CliError(name, str(exc) or type(exc).__name__) from exc


class ForecastDir:
    """Lazy loader of ``<dir>/YYYY-MM-DD.csv`` met forecasts, one file per run date."""

    def __init__(self, directory):
        self.directory = os.fspath(directory)
        self._dates = None

    def available(self) -> set:
        if self._dates is None:
            names = os.listdir(self.directory) if os.path.isdir(self.directory) else []
            self._dates = {np.datetime64(n[:10], "D") for n in names
                           if re.fullmatch(r"\d{4}-\d{2}-\d{2}\.csv", n)}
        return self._dates

    def path(self, run_date) -> str:
        return os.path.join(self.directory, f"{np.datetime64(run_date, 'D')}.csv")

    def __call__(self, run_date):
        p = self.path(run_date)
        if not os.path.isfile(p):
            raise FileNotFoundError(f"no met forecast file {p}")
        return parse_met_csv(p)


# --- argument handling ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat section.key = value config file")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides paths.out)")
    common.add_argument("--kind", choices=[k.value for k in PlantKind], help="restrict to one plant kind")
    common.add_argument("--zone", metavar="ZONE", help="bidding zone or ALL")
    common.add_argument("--threads", type=int, default=1, metavar="N", help="worker cap for forest fitting")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="zonecast", description="Zonal PV and wind power forecasting.")
    parser.add_argument("--version", action="version", version=f"zonecast {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    helps = {
        "ingest": "parse and validate the input CSVs",
        "preprocess": "rescale, cone-filter and gap-fill; write cleaned CSVs",
        "train": "fit and save the zone models",
        "forecast": "issue 360-hour forecasts for one run date",
        "backtest": "monthly-refit backtest with metrics CSV and charts",
        "synth": "generate a synthetic dataset and matching config",
        "tune": "grid sweep over cone threshold, quantile, k and n_weeks",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
        p.add_argument("--run-date", metavar="YYYY-MM-DD", required=name == "forecast",
                       help="run date (forecast); training cut-off (train, tune)")
    return parser


def _threads(n: int) -> int:
    if n < 1:
        raise CliError("usage", "--threads must be >= 1")
    return n


def _out_dir(args, cfg: RunConfig) -> str:
    out = args.out or cfg.paths.get("out")
    if not out:
        raise CliError("config", "no output directory: pass --out or set paths.out")
    os.makedirs(out, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    if not args.config:
        if args.command == "synth":
            return RunConfig()
        raise CliError("config", f"{args.command} needs --config")
    with stage("config"):
        return load_config(args.config)


def _kinds(args, cfg: RunConfig) -> tuple[PlantKind, ...]:
    return (parse_kind(args.kind),) if args.kind else tuple(PlantKind(k) for k in cfg.backtest.kinds)


def _zone_filter(args, cfg_zones):
    if args.zone and args.zone.upper() != "ALL":
        with stage("usage"):
            return (str(parse_zone(args.zone)),)
    if args.zone:
        return None
    return cfg_zones


def _run_date(args):
    if args.run_date is None:
        return None
    try:
        return np.datetime64(args.run_date, "D")
    except ValueError:
        raise CliError("usage", f"--run-date {args.run_date!r} is not YYYY-MM-DD") from None


class Inputs:
    """The parsed input CSVs named in the config."""

    def __init__(self, cfg: RunConfig, need_met: bool = True):
        with stage("ingest"):
            self.power = {(str(z), PlantKind(k)): s for (z, k), s in parse_power_csv(cfg.path("power")).items()}
            self.met = parse_met_csv(cfg.path("met")) if need_met else {}
            self.zones = parse_zones_csv(cfg.path("zones"))
            self.totals = None
            if cfg.rescale and "monthly_totals" in cfg.paths:
                self.totals = parse_monthly_totals_csv(cfg.path("monthly_totals"))
        self.provinces = {str(z): p for z, p in provinces_by_zone(self.zones).items()}

    def zones_for(self, kind: PlantKind, wanted) -> list[str]:
        have = sorted(z for (z, k) in self.power if k == kind)
        return have if wanted is None else [z for z in have if z in wanted]


def _train_bounds(cfg: RunConfig, inputs: Inputs, cutoff) -> tuple:
    start = np.datetime64(cfg.backtest.train_start, "D").astype("datetime64[h]") + HOUR
    if cutoff is not None:
        end = np.datetime64(cutoff, "D").astype("datetime64[h]")
    else:
        end = max(s.times[-1] for s in inputs.power.values())
    if end <= start:
        raise CliError("train", f"training window {start}..{end} is empty")
    return start, end


def _fit_kind(inputs: Inputs, cfg: RunConfig, kind, zones, start, end, n_jobs, params=None,
              reuse=None) -> dict:
    params = params or cfg.params
    raw = {z: inputs.power[(z, kind)].window(start, end) for z in inputs.zones_for(kind, None)}
    with stage("preprocess"):
        cleaned = clean_power(raw, inputs.totals, kind, params.preprocess)
        keys = [(p, v) for z in zones for p in inputs.provinces.get(z, []) for v in FeatureSpec(kind, KNN).variables]
        met = clean_met({k: inputs.met[k].window(start, end) for k in keys if k in inputs.met}, params.preprocess)
    out = {}
    with stage("train"):
        for z in zones:
            if z not in inputs.provinces:
                raise ConfigurationError(f"zone {z} has no provinces in the zones file")
            qrf_model = reuse[z].qrf if reuse else None
            out[z] = fit_zone(cleaned[z], met, inputs.provinces[z], z, kind, params, n_jobs, qrf_model)
    return out


# --- commands ---------------------------------------------------------------

def cmd_ingest(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    lines, failures = [], 0
    with stage("ingest"):
        power, perr = read_power_csv(cfg.path("power"))
        met, merr = read_met_csv(cfg.path("met"))
        zones = parse_zones_csv(cfg.path("zones"))
        totals = parse_monthly_totals_csv(cfg.path("monthly_totals")) if "monthly_totals" in cfg.paths else []
    for label, errs in (("power", perr), ("met", merr)):
        for e in errs:
            lines.append(f"{label} line {e.line}: {e.message}")
        failures += len(errs)
    for label, series in (("power", power), ("met", met)):
        for key, s in sorted(series.items(), key=lambda kv: str(kv[0])):
            for v in validate_hourly_series(s):
                lines.append(f"{label} {key}: index {v.index}: {v.reason}")
                failures += 1
    for (z, k), s in sorted(power.items(), key=lambda kv: str(kv[0])):
        lines.append(f"power {z}/{k}: {len(s)} hours {s.times[0]}..{s.times[-1]}, "
                     f"{int((~s.present).sum())} missing")
    lines.append(f"met: {len(met)} province series")
    lines.append(f"zones: {len(zones)} provinces in {len(set(zones.values()))} zones")
    lines.append(f"monthly totals: {len(totals)} rows")
    if "grid_dir" in cfg.paths:
        with stage("ingest/grid"):
            mask = parse_mask_csv(cfg.path("mask"))
            fields = []
            for name in sorted(os.listdir(cfg.path("grid_dir"))):
                m = _GRID_NAME.match(name)
                if not m:
                    continue
                ts = np.datetime64(f"{m[2]}-{m[3]}-{m[4]}T{m[5]}", "h")
                fields.append(parse_grid_csv(os.path.join(cfg.path("grid_dir"), name), m[1], ts))
            agg = aggregate_grid_fields(fields, mask)
            with open(os.path.join(out, "met_from_grid.csv"), "w", newline="") as fh:
                write_met_csv(agg, fh)
        lines.append(f"grid: {len(fields)} fields aggregated to {len(agg)} province series")
    lines.append(f"status: {'FAILED' if failures else 'ok'} ({failures} problem(s))")
    with open(os.path.join(out, "ingest_report.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    if failures:
        raise CliError("ingest", f"{failures} invalid row(s); see {os.path.join(out, 'ingest_report.txt')}")
    return 0


def cmd_preprocess(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    inputs = Inputs(cfg)
    wanted = _zone_filter(args, cfg.backtest.zones)
    cleaned_all, lines = {}, []
    for kind in _kinds(args, cfg):
        raw = {z: inputs.power[(z, kind)] for z in inputs.zones_for(kind, None)}
        if not raw:
            continue
        with stage("preprocess"):
            cleaned = clean_power(raw, inputs.totals, kind, cfg.params.preprocess)
        for z in inputs.zones_for(kind, wanted):
            s = cleaned[z]
            filled = int(raw[z].present.size - raw[z].present.sum()) - int((~s.present).sum())
            cleaned_all[(z, kind)] = s
            msg = f"{kind} {z}: {filled} hour(s) gap-filled, {int((~s.present).sum())} still missing"
            if kind == PlantKind.PV:
                with stage("preprocess/cone"):
                    m = training_matrix(s, inputs.met, inputs.provinces[z], FeatureSpec(kind, KNN), z)
                    pairs = np.column_stack([m.features[:, 0], m.target])
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", RuntimeWarning)
                        n_out = int(cone_filter(pairs, cfg.params.preprocess).sum()) if len(pairs) else 0
                msg += f", {n_out} cone outlier(s)"
            lines.append(msg)
    with stage("preprocess"):
        met = clean_met(inputs.met, cfg.params.preprocess)
    with open(os.path.join(out, "cleaned_power.csv"), "w", newline="") as fh:
        write_power_csv(cleaned_all, fh)
    with open(os.path.join(out, "cleaned_met.csv"), "w", newline="") as fh:
        write_met_csv(met, fh)
    print("\n".join(lines))
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    models_dir = args.out or cfg.paths.get("models")
    if not models_dir:
        raise CliError("config", "no model directory: pass --out or set paths.models")
    inputs = Inputs(cfg)
    start, end = _train_bounds(cfg, inputs, _run_date(args))
    wanted = _zone_filter(args, cfg.backtest.zones)
    n = 0
    for kind in _kinds(args, cfg):
        zones = inputs.zones_for(kind, wanted)
        models = _fit_kind(inputs, cfg, kind, zones, start, end, _threads(args.threads))
        with stage("train/save"):
            for z, m in models.items():
                paths = save_zone_models(m, models_dir)
                print(f"{kind} {z}: trained on {start}..{end} -> {paths['qrf']}")
                n += 1
    if n == 0:
        raise CliError("train", "no power series match the requested kinds and zones")
    return 0


def cmd_forecast(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    run_date = _run_date(args)
    with stage("config"):
        models_dir = cfg.path("models")
        zones_map = parse_zones_csv(cfg.path("zones"))
    provinces = {str(z): p for z, p in provinces_by_zone(zones_map).items()}
    wanted = _zone_filter(args, cfg.backtest.zones)
    zones = sorted(provinces) if wanted is None else [z for z in wanted if z in provinces]
    if not zones:
        raise CliError("forecast", "no zones selected")
    with stage("forecast/models"):
        models = [load_zone_models(models_dir, z, kind) for kind in _kinds(args, cfg) for z in zones]
    with stage("forecast/met"):
        met = ForecastDir(cfg.path("forecast_dir"))(run_date)
    runs = []
    with stage("forecast"), warnings.catch_warnings():
        warnings.simplefilter("ignore", PostprocessSkipped)
        for m in models:
            runs.append(run_forecast(m, met, run_date, provinces[m.zone], cfg.params))
    path = os.path.join(out, f"forecast_{run_date}.csv")
    with open(path, "w", newline="") as fh:
        write_forecast_csv(runs, fh)
    print(f"{len(runs)} run(s) written to {path}")
    return 0


def cmd_backtest(args, cfg: RunConfig) -> int:
    from .report import emit_report

    out = _out_dir(args, cfg)
    inputs = Inputs(cfg)
    bt = replace(cfg.backtest, kinds=_kinds(args, cfg), zones=_zone_filter(args, cfg.backtest.zones))
    data = BacktestData(inputs.power, inputs.met, inputs.zones, ForecastDir(cfg.path("forecast_dir")),
                        inputs.totals)
    with stage("backtest"), warnings.catch_warnings():
        warnings.simplefilter("ignore", PostprocessSkipped)
        result = backtest(data, bt, cfg.params, n_jobs=_threads(args.threads),
                          progress=log.info if args.verbose else None)
    with stage("report"):
        written = emit_report(result.records, out, result.runs, result.actuals)
    for p in written:
        print(p)
    return 0


def _synth_months(cfg) -> tuple:
    """Test months whose every run date has a forecast and whose horizon has actuals."""
    dates = set(cfg.run_dates().tolist())
    end = np.datetime64(cfg.end, "D")
    months = []
    for m in sorted({np.datetime64(d, "M") for d in dates}):
        y, mo = int(str(m)[:4]), int(str(m)[5:7])
        first = np.datetime64(m, "D")
        days = [first + i for i in range(days_in_month(y, mo))]
        if all(d.tolist() in dates for d in days) and days[-1] + 15 <= end:
            months.append((y, mo))
    return tuple(months)


def cmd_synth(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    with stage("synth"):
        kinds = _kinds(args, cfg)
        ds = generate_dataset(cfg.synth, kinds)
        paths = ds.write(out)
    paths["models"] = os.path.join(out, "models")
    months = _synth_months(cfg.synth)
    bt = BacktestConfig(cfg.synth.start, months, kinds) if months else cfg.backtest
    run_cfg = replace(cfg, paths={k: os.path.relpath(v, out) for k, v in paths.items()}, backtest=bt)
    with open(os.path.join(out, "zonecast.cfg"), "w") as fh:
        fh.write("# written by zonecast synth\n" + render_config(run_cfg))
    print(f"synthetic dataset written to {out} (config: {os.path.join(out, 'zonecast.cfg')})")
    return 0


def _holdout_score(inputs: Inputs, models: dict, params, kind, hold_start, hold_end) -> float:
    """Mean zonal NRMSE of one run issued at ``hold_start`` using measured met as its input."""
    run_date = hold_start.astype("datetime64[D]")
    n_hours = int((hold_end - hold_start) / HOUR)
    scores = []
    for z, m in models.items():
        prov = inputs.provinces[z]
        met = {(p, v): inputs.met[(p, v)].window(hold_start + HOUR, hold_end)
               for p in prov for v in FeatureSpec(kind, KNN).variables}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", PostprocessSkipped)
            run = run_forecast(m, met, run_date, prov, params)
        actual, found = inputs.power[(z, kind)].lookup(lead_times(run_date, n_hours))
        if not found.all():
            raise ConfigurationError(f"measured {kind} power for {z} has gaps in the holdout")
        series = inputs.power[(z, kind)]
        train = series.window(series.times[0], hold_start)
        month = int(str(run_date)[5:7])
        try:
            m_norm = monthly_norm(train, month)
        except ValueError:
            m_norm = float(np.nanmax(train.values))
        scores.append(nrmse(run.values[:n_hours], actual, m_norm))
    return float(np.mean(scores))


def cmd_tune(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    tc = cfg.tune
    kind = parse_kind(args.kind) if args.kind else PlantKind(tc.kind)
    inputs = Inputs(cfg)
    cutoff = _run_date(args)
    if cutoff is None and cfg.backtest.test_months:
        y, m = cfg.backtest.test_months[0]
        cutoff = np.datetime64(f"{y:04d}-{m:02d}-01", "D")
    start, end = _train_bounds(cfg, inputs, cutoff)
    if not 1 <= tc.holdout_days <= HORIZON_HOURS // 24:
        raise CliError("config", f"tune.holdout_days must lie in 1..{HORIZON_HOURS // 24}")
    hold_start = end - tc.holdout_days * 24 * HOUR
    zones = inputs.zones_for(kind, _zone_filter(args, tc.zones))
    if not zones:
        raise CliError("tune", f"no {kind} zones to tune on")
    n_jobs = _threads(args.threads)
    base = cfg.params
    rows = []
    for theta in tc.cone_threshold:
        forest = None
        for k in tc.k:
            p = replace(base, preprocess=replace(base.preprocess, cone_threshold=theta),
                        knn=replace(base.knn, k=k))
            # the forest does not depend on k, so grow it once per threshold
            forest = _fit_kind(inputs, cfg, kind, zones, start, hold_start, n_jobs, p, forest)
            for q, nw in itertools.product(tc.quantile, tc.n_weeks):
                pq = replace(p, qrf=replace(p.qrf, quantile=q), postprocess=replace(p.postprocess, n_weeks=nw))
                with stage("tune"):
                    score = _holdout_score(inputs, forest, pq, kind, hold_start, end)
                rows.append((theta, q, k, nw, score))
    order = sorted(range(len(rows)), key=lambda i: (rows[i][4], i))
    path = os.path.join(out, f"tune_{kind}.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TUNE_HEADER)
        for rank, i in enumerate(order, start=1):
            theta, q, k, nw, score = rows[i]
            w.writerow((rank, repr(theta), repr(q), k, nw, repr(score)))
    print(f"{'rank':>4} {'theta':>7} {'q':>5} {'k':>3} {'n':>2} {'nrmse':>8}")
    for rank, i in enumerate(order, start=1):
        theta, q, k, nw, score = rows[i]
        print(f"{rank:>4} {theta:>7g} {q:>5g} {k:>3} {nw:>2} {100 * score:>7.3f}%")
    print(f"holdout {hold_start + HOUR}..{end}, table written to {path}")
    return 0


HANDLERS = {
    "ingest": cmd_ingest,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "forecast": cmd_forecast,
    "backtest": cmd_backtest,
    "synth": cmd_synth,
    "tune": cmd_tune,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return HANDLERS[args.command](args, cfg)
    except CliError as exc:
        print(f"zonecast: error [{exc.stage}]: {exc}", file=sys.stderr)
        return 2 if exc.stage == "usage" else 1


if __name__ == "__main__":
    sys.exit(main())
