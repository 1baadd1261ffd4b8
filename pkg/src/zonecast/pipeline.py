"""Feature assembly, training, persistence extension, ensembling and PV post-processing."""
from __future__ import annotations

import csv
import logging
import math
import os
import warnings
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .core import (
    HORIZON_HOURS,
    HOUR,
    ConfigurationError,
    ForecastRun,
    HourlySeries,
    InsufficientDataError,
    PlantKind,
    SampleMatrix,
    ZonecastError,
    hour_of_day,
    lead_times,
    month_of,
)
from .ingest import FormatError, MonthlyNationalTotal, align, format_timestamp, parse_timestamp
from .knn import KnnModel, KnnParams, fit_knn, knn_predict_many, load_knn, save_knn
from .preprocess import PreprocessConfig, cone_filter, monthly_rescale, spline_fill
from .qrf import QrfModel, QrfParams, fit_qrf, load_qrf, qrf_predict, save_qrf

log = logging.getLogger(__name__)

KNN, QRF = "KNN", "QRF"


class StageError(ZonecastError):
    """An error raised inside a named pipeline stage."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")


class PostprocessSkipped(UserWarning):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    kind: PlantKind
    learner: str

    @property
    def names(self) -> tuple[str, ...]:
        return _FEATURE_NAMES[(PlantKind(self.kind), self.learner)]

    @property
    def variables(self) -> tuple[str, ...]:
        return ("GHI", "GHI_CS") if PlantKind(self.kind) == PlantKind.PV else ("UGRD", "VGRD")


_FEATURE_NAMES = {
    (PlantKind.PV, KNN): ("GHI", "GHI_CS"),
    (PlantKind.PV, QRF): ("GHI", "GHI_CS", "month_sin", "month_cos", "hour_sin", "hour_cos"),
    (PlantKind.WD, KNN): ("wind_speed",),
    (PlantKind.WD, QRF): ("UGRD", "VGRD"),
}


@dataclass(frozen=True)
class PostprocessParams:
    n_weeks: int = 2
    enabled: bool = True

    def __post_init__(self):
        if self.n_weeks < 1:
            raise ValueError("n_weeks must be >= 1")


@dataclass(frozen=True)
class EnsembleParams:
    weight_knn: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.weight_knn <= 1.0:
            raise ValueError("weight_knn must lie in [0, 1]")


@dataclass(frozen=True)
class PipelineParams:
    preprocess: PreprocessConfig = PreprocessConfig()
    knn: KnnParams = KnnParams(k=10, month_window=1, hour_window=1)
    qrf: QrfParams = QrfParams()
    ensemble: EnsembleParams = EnsembleParams()
    postprocess: PostprocessParams = PostprocessParams()
    postprocess_first: bool = True

    def knn_for(self, kind: PlantKind) -> KnnParams:
        # calendar windowing is a PV-only device
        if PlantKind(kind) == PlantKind.WD:
            return replace(self.knn, month_window=None, hour_window=None)
        return self.knn


# --- features ---------------------------------------------------------------

def zone_mean(met: Mapping[tuple[int, str], HourlySeries], provinces: Sequence[int],
              variable: str) -> HourlySeries:
    """Hourly mean of one variable over a zone's provinces (hours present in all)."""
    try:
        series = [met[(p, variable)] for p in provinces]
    except KeyError as exc:
        raise ConfigurationError(f"met variable {variable} missing for province {exc.args[0][0]}") from None
    times, vals = align(series)
    return HourlySeries(times, np.mean(vals, axis=0) if vals else np.array([]))


def _wind_speed(met, provinces) -> HourlySeries:
    per = []
    for p in provinces:
        try:
            u, v = met[(p, "UGRD")], met[(p, "VGRD")]
        except KeyError:
            raise ConfigurationError(f"UGRD/VGRD missing for province {p}") from None
        t, (uu, vv) = align([u, v])
        per.append(HourlySeries(t, np.hypot(uu, vv)))
    times, vals = align(per)
    return HourlySeries(times, np.mean(vals, axis=0))


def calendar_encoding(times: np.ndarray) -> np.ndarray:
    """(sin, cos) pairs of month and hour of day, so splits respect wrap-around."""
    m = month_of(times).astype(np.float64)
    h = hour_of_day(times).astype(np.float64)
    return np.column_stack([np.sin(2 * np.pi * m / 12), np.cos(2 * np.pi * m / 12),
                            np.sin(2 * np.pi * h / 24), np.cos(2 * np.pi * h / 24)])


def build_features(met: Mapping[tuple[int, str], HourlySeries], provinces: Sequence[int],
                   spec: FeatureSpec) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
    """Timestamps and zone-level feature rows for one learner."""
    if not provinces:
        raise ConfigurationError("zone has no provinces")
    kind = PlantKind(spec.kind)
    if kind == PlantKind.WD and spec.learner == KNN:
        cols = [_wind_speed(met, provinces)]
    else:
        cols = [zone_mean(met, provinces, v) for v in spec.variables]
    times, vals = align(cols)
    X = np.column_stack(vals) if len(times) else np.zeros((0, len(vals)))
    if kind == PlantKind.PV and spec.learner == QRF:
        X = np.column_stack([X, calendar_encoding(times)])
    return times, X, spec.names


def training_matrix(power: HourlySeries, met, provinces, spec: FeatureSpec, zone=None) -> SampleMatrix:
    times, X, names = build_features(met, provinces, spec)
    target, found = power.lookup(times)
    return SampleMatrix(times[found], X[found], target[found], names, zone, PlantKind(spec.kind))


# --- persistence ------------------------------------------------------------

def persistence_extend(values, horizon: int = HORIZON_HOURS) -> tuple[np.ndarray, np.ndarray]:
    """Tile the last available 24-hour block forward to ``horizon`` lead hours.

    ``values[h - 1]`` is lead hour ``h``. Returns the extended values and a
    flag array marking the filled hours.
    """
    values = np.asarray(values, dtype=np.float64)
    H = len(values)
    if H < 24:
        raise InsufficientDataError(f"need at least one full forecast day, got {H} hours")
    if H % 24:
        raise ValueError(f"forecast length {H} is not a whole number of days")
    if H >= horizon:
        return values[:horizon].copy(), np.zeros(horizon, dtype=bool)
    h = np.arange(H + 1, horizon + 1)
    src = H - 24 + 1 + (h - H - 1) % 24  # 1-based lead hour copied
    out = np.concatenate([values, values[src - 1]])
    flags = np.zeros(horizon, dtype=bool)
    flags[H:] = True
    return out, flags


def extend_series(s: HourlySeries, run_date, horizon: int = HORIZON_HOURS) -> tuple[HourlySeries, np.ndarray]:
    """Persistence-extend a forecast series stamped at lead hours 1..H of ``run_date``."""
    expected = lead_times(run_date, len(s))
    if len(s) == 0 or not np.array_equal(s.times, expected):
        raise InsufficientDataError(
            f"forecast series must cover consecutive lead hours 1..H from {run_date}")
    if s.missing.any():
        raise InsufficientDataError(f"forecast series for {run_date} has missing hours")
    vals, flags = persistence_extend(s.values, horizon)
    return HourlySeries(lead_times(run_date, horizon), vals), flags


# --- combination and post-processing ----------------------------------------

def ensemble_combine(knn_pred, qrf_pred, params: EnsembleParams = EnsembleParams()):
    """Convex combination ``w * knn + (1 - w) * qrf`` (scalars or arrays)."""
    k = np.asarray(knn_pred, dtype=np.float64)
    q = np.asarray(qrf_pred, dtype=np.float64)
    w = params.weight_knn
    out = q + w * (k - q)
    # rounding must not leave the segment between the two inputs
    out = np.clip(out, np.minimum(k, q), np.maximum(k, q))
    out = np.where(w == 1.0, k, out)
    return float(out) if out.ndim == 0 else out


def _peak_ratios(times, ghi, power, run_start, ghi_floor) -> list[float]:
    """power/GHI at the GHI peak of each 24-hour block counted from ``run_start``."""
    block = (times - run_start - HOUR) // np.timedelta64(24, "h")
    ratios = []
    for b in np.unique(block):
        sel = np.flatnonzero(block == b)
        j = sel[np.argmax(ghi[sel])]
        if ghi[j] < ghi_floor or ghi[j] <= 0:
            continue
        ratios.append(power[j] / ghi[j])
    return ratios


def pv_postprocess(forecast: ForecastRun, ghi_forecast, training_tail: SampleMatrix,
                   params: PostprocessParams = PostprocessParams(), ghi_floor: float = 20.0) -> ForecastRun:
    """Scale a PV forecast by K_prod = Q_train / Q_for.

    ``ghi_forecast`` holds the 360 zone-mean forecast GHI values. The tail's
    first feature column must be the measured zone-mean GHI, and only its
    rows in the ``n_weeks`` before the run date are used.
    """
    if not params.enabled:
        return forecast
    ghi_forecast = np.asarray(ghi_forecast, dtype=np.float64)
    if len(ghi_forecast) != HORIZON_HOURS:
        raise ValueError("ghi_forecast must have one value per lead hour")
    run_start = np.datetime64(forecast.run_date, "D").astype("datetime64[h]")
    lo = run_start - np.timedelta64(7 * 24 * params.n_weeks, "h")
    sel = (training_tail.times > lo) & (training_tail.times <= run_start)
    tail_ratios = _peak_ratios(training_tail.times[sel], training_tail.features[sel, 0],
                               training_tail.target[sel], run_start, ghi_floor)
    for_ratios = _peak_ratios(forecast.times, ghi_forecast, forecast.values, run_start, ghi_floor)
    if not tail_ratios or not for_ratios:
        warnings.warn("K_prod skipped: no day with peak GHI above the floor", PostprocessSkipped)
        return forecast.replace(notes=forecast.notes + ("postprocess-skipped",))
    q_train = math.fsum(tail_ratios) / len(tail_ratios)
    q_for = math.fsum(for_ratios) / len(for_ratios)
    if not (q_for > 0 and q_train > 0):
        warnings.warn(f"K_prod skipped: Q_train={q_train}, Q_for={q_for}", PostprocessSkipped)
        return forecast.replace(notes=forecast.notes + ("postprocess-skipped",))
    k_prod = q_train / q_for
    if k_prod == 1.0:
        return forecast.replace(k_prod=k_prod)
    return forecast.replace(values=forecast.values * k_prod, k_prod=k_prod)


# --- training ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ZoneModels:
    zone: str
    kind: PlantKind
    knn: KnnModel
    qrf: QrfModel
    tail: SampleMatrix  # measured PV-KNN rows used by K_prod (empty for WD)
    n_outliers: int = 0


def clean_power(power: Mapping, totals: Sequence[MonthlyNationalTotal] | None, kind: PlantKind,
                cfg: PreprocessConfig) -> dict:
    """Monthly rescale (when totals are given) followed by short-gap filling."""
    out = dict(power)
    if totals is not None:
        out = monthly_rescale(out, totals, kind)
    return {z: spline_fill(s, cfg.max_gap_hours) for z, s in out.items()}


def clean_met(met: Mapping, cfg: PreprocessConfig) -> dict:
    filled = {}
    for key, s in met.items():
        try:
            filled[key] = spline_fill(s, cfg.max_gap_hours)
        except InsufficientDataError:
            filled[key] = s
    return filled


def fit_zone(power: HourlySeries, met, provinces, zone, kind: PlantKind,
             params: PipelineParams = PipelineParams(), n_jobs: int = 1,
             qrf_model: QrfModel | None = None) -> ZoneModels:
    """Fit both learners for one zone on already cleaned series.

    ``qrf_model`` skips the forest fit; the caller vouches that it was grown on
    the same rows (same data and cone threshold).
    """
    kind = PlantKind(kind)
    try:
        knn_data = training_matrix(power, met, provinces, FeatureSpec(kind, KNN), zone)
        qrf_data = training_matrix(power, met, provinces, FeatureSpec(kind, QRF), zone)
    except ZonecastError as exc:
        raise StageError("features", exc) from exc
    n_out = 0
    tail = knn_data
    if kind == PlantKind.PV:
        pairs = np.column_stack([knn_data.features[:, 0], knn_data.target])
        if len(pairs):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                flags = cone_filter(pairs, params.preprocess)
            bad = knn_data.times[flags]
            n_out = int(flags.sum())
            knn_data = knn_data.subset(~flags)
            qrf_data = qrf_data.subset(~np.isin(qrf_data.times, bad))
            tail = knn_data
    else:
        tail = knn_data.subset(np.zeros(len(knn_data), dtype=bool))
    try:
        knn = fit_knn(knn_data, params.knn_for(kind))
    except ZonecastError as exc:
        raise StageError("knn-fit", exc) from exc
    if qrf_model is not None:
        return ZoneModels(str(zone), kind, knn, qrf_model, tail, n_out)
    try:
        qrf = fit_qrf(qrf_data, params.qrf, n_jobs=n_jobs)
    except (ZonecastError, ValueError) as exc:
        raise StageError("qrf-fit", exc) from exc
    return ZoneModels(str(zone), kind, knn, qrf, tail, n_out)


def model_paths(models_dir, zone, kind) -> dict[str, str]:
    stem = os.path.join(os.fspath(models_dir), f"{PlantKind(kind)}_{zone}")
    return {"knn": stem + ".knn.npz", "qrf": stem + ".qrf.npz", "tail": stem + ".tail.npz"}


def save_zone_models(models: ZoneModels, models_dir) -> dict[str, str]:
    os.makedirs(models_dir, exist_ok=True)
    paths = model_paths(models_dir, models.zone, models.kind)
    save_knn(models.knn, paths["knn"])
    save_qrf(models.qrf, paths["qrf"])
    t = models.tail
    np.savez(paths["tail"], format_version=np.int64(1), times=t.times.astype(np.int64),
             features=t.features, target=t.target, feature_names=np.array(t.feature_names, dtype=str),
             n_outliers=np.int64(models.n_outliers))
    return paths


def load_zone_models(models_dir, zone, kind) -> ZoneModels:
    """Load what :func:`save_zone_models` wrote; a missing file raises naming its path."""
    kind = PlantKind(kind)
    paths = model_paths(models_dir, zone, kind)
    for p in paths.values():
        if not os.path.isfile(p):
            raise FileNotFoundError(f"missing model file {p}")
    with np.load(paths["tail"], allow_pickle=False) as z:
        if int(z["format_version"]) != 1:
            raise ValueError(f"unsupported tail format {int(z['format_version'])}")
        tail = SampleMatrix(z["times"].astype("datetime64[h]"), z["features"], z["target"],
                            tuple(str(s) for s in z["feature_names"]), str(zone), kind)
        n_out = int(z["n_outliers"])
    return ZoneModels(str(zone), kind, load_knn(paths["knn"]), load_qrf(paths["qrf"]), tail, n_out)


# --- forecasting ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ForecastDetail:
    run: ForecastRun
    knn: ForecastRun
    qrf: ForecastRun
    ghi: np.ndarray | None = None


def extend_met_forecast(met_forecast: Mapping[tuple[int, str], HourlySeries], run_date,
                        provinces, variables) -> tuple[dict, np.ndarray]:
    out, flags = {}, np.zeros(HORIZON_HOURS, dtype=bool)
    for p in provinces:
        for v in variables:
            if (p, v) not in met_forecast:
                raise ConfigurationError(f"forecast for {run_date} lacks province {p} {v}")
            out[(p, v)], f = extend_series(met_forecast[(p, v)], run_date)
            flags |= f
    return out, flags


def run_forecast(models: ZoneModels, met_forecast, run_date, provinces,
                 params: PipelineParams = PipelineParams(), detail: bool = False):
    """Produce the 360-hour forecast for one zone and plant kind."""
    kind = PlantKind(models.kind)
    run_date = np.datetime64(run_date, "D")
    times = lead_times(run_date)
    try:
        ext, flags = extend_met_forecast(met_forecast, run_date, provinces, FeatureSpec(kind, KNN).variables)
    except ZonecastError as exc:
        raise StageError("persistence", exc) from exc
    try:
        t_k, X_k, _ = build_features(ext, provinces, FeatureSpec(kind, KNN))
        t_q, X_q, _ = build_features(ext, provinces, FeatureSpec(kind, QRF))
        if len(t_k) != HORIZON_HOURS or len(t_q) != HORIZON_HOURS:
            raise InsufficientDataError("forecast features do not cover all lead hours")
    except ZonecastError as exc:
        raise StageError("features", exc) from exc
    try:
        knn_vals = knn_predict_many(models.knn, X_k, month_of(times), hour_of_day(times))
        q, _ = qrf_predict(models.qrf, X_q, [params.qrf.quantile])
        qrf_vals = np.maximum(q[:, 0], 0.0)
    except (ZonecastError, ValueError) as exc:
        raise StageError("predict", exc) from exc

    def as_run(v):
        return ForecastRun(run_date, models.zone, kind, v, flags)

    knn_run, qrf_run = as_run(knn_vals), as_run(qrf_vals)
    ghi = None
    if kind == PlantKind.PV and params.postprocess.enabled:
        ghi = X_k[:, 0]
        post = lambda r: pv_postprocess(r, ghi, models.tail, params.postprocess,  # noqa: E731
                                        params.preprocess.ghi_floor)
        if params.postprocess_first:
            knn_run, qrf_run = post(knn_run), post(qrf_run)
            run = as_run(ensemble_combine(knn_run.values, qrf_run.values, params.ensemble))
            run = run.replace(notes=knn_run.notes + qrf_run.notes)
        else:
            run = post(as_run(ensemble_combine(knn_run.values, qrf_run.values, params.ensemble)))
    else:
        run = as_run(ensemble_combine(knn_vals, qrf_vals, params.ensemble))
    if detail:
        return ForecastDetail(run, knn_run, qrf_run, ghi)
    return run


FORECAST_HEADER = ("run_date", "zone", "kind", "lead_hour", "timestamp", "power_mw", "persistence_flag")


def write_forecast_csv(runs: Sequence[ForecastRun], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(FORECAST_HEADER)
    for r in runs:
        for h, (t, v, f) in enumerate(zip(r.times, r.values, r.persistence_flag), start=1):
            w.writerow((str(r.run_date), r.zone, str(r.kind), h, format_timestamp(t), repr(float(v)),
                        int(bool(f))))


def read_forecast_csv(fh) -> list[ForecastRun]:
    reader = csv.reader(fh)
    if tuple(next(reader, ())) != FORECAST_HEADER:
        raise FormatError(f"forecast csv must start with {','.join(FORECAST_HEADER)}")
    groups: dict[tuple, list] = {}
    for row in reader:
        if row:
            groups.setdefault((row[0], row[1], row[2]), []).append(row)
    runs = []
    for (run_date, zone, kind), rows in groups.items():
        rows.sort(key=lambda r: int(r[3]))
        if [int(r[3]) for r in rows] != list(range(1, HORIZON_HOURS + 1)):
            raise FormatError(f"run {run_date} {zone} {kind} does not list lead hours 1..{HORIZON_HOURS}")
        run = ForecastRun(np.datetime64(run_date, "D"), zone, PlantKind(kind),
                          [float(r[5]) for r in rows], [r[6] == "1" for r in rows])
        if not np.array_equal(run.times, [parse_timestamp(r[4]) for r in rows]):
            raise FormatError(f"run {run_date} {zone} {kind}: timestamps disagree with lead hours")
        runs.append(run)
    return runs
