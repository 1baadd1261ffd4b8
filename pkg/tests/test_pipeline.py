import io
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import hours, matrix
from zonecast.core import HORIZON_HOURS, ForecastRun, HourlySeries, InsufficientDataError, PlantKind, lead_times
from zonecast.ingest import provinces_by_zone
from zonecast.knn import KnnParams
from zonecast.pipeline import (
    KNN,
    QRF,
    EnsembleParams,
    FeatureSpec,
    PipelineParams,
    PostprocessParams,
    PostprocessSkipped,
    StageError,
    build_features,
    calendar_encoding,
    clean_met,
    ensemble_combine,
    extend_series,
    fit_zone,
    load_zone_models,
    persistence_extend,
    pv_postprocess,
    read_forecast_csv,
    run_forecast,
    save_zone_models,
    write_forecast_csv,
)
from zonecast.qrf import QrfParams
from zonecast.synth import SynthConfig, generate_pv_dataset, generate_wd_dataset

RUN = np.datetime64("2017-05-01")


def _met(start, n, **vars_):
    return {(1, v): HourlySeries(hours(start, n), np.full(n, float(x)) if np.isscalar(x) else x)
            for v, x in vars_.items()}


def test_wind_speed_feature():
    met = _met("2017-05-01T00", 3, UGRD=3.0, VGRD=4.0)
    _, X, names = build_features(met, [1], FeatureSpec(PlantKind.WD, KNN))
    assert names == ("wind_speed",) and np.array_equal(X, [[5.0]] * 3)
    _, X, _ = build_features(met, [1], FeatureSpec(PlantKind.WD, QRF))
    assert np.array_equal(X[0], [3.0, 4.0])


def test_pv_feature_widths_and_calendar():
    met = _met("2017-05-01T11", 2, GHI=500.0, GHI_CS=800.0)
    t, X, _ = build_features(met, [1], FeatureSpec(PlantKind.PV, KNN))
    assert X.shape == (2, 2)
    t, X, names = build_features(met, [1], FeatureSpec(PlantKind.PV, QRF))
    assert X.shape == (2, 6) and names[2:] == ("month_sin", "month_cos", "hour_sin", "hour_cos")
    i = int(np.flatnonzero(t == np.datetime64("2017-05-01T12"))[0])
    assert X[i, 2:] == pytest.approx([np.sin(2 * np.pi * 5 / 12), np.cos(2 * np.pi * 5 / 12),
                                      np.sin(np.pi), np.cos(np.pi)], abs=1e-15)


def test_calendar_encoding_wraps():
    enc = calendar_encoding(np.array(["2017-01-01T01", "2017-12-31T23"], dtype="datetime64[h]"))
    jan_dec = np.hypot(*(enc[0, :2] - enc[1, :2]))
    assert jan_dec == pytest.approx(2 * np.sin(np.pi / 12), rel=1e-12)


def test_missing_variable_is_configuration_error():
    from zonecast.core import ConfigurationError
    with pytest.raises(ConfigurationError):
        build_features(_met("2017-05-01T00", 3, GHI=1.0), [1], FeatureSpec(PlantKind.PV, KNN))


def test_persistence_240_tiling():
    vals = np.arange(1.0, 241.0)  # lead hour h carries value h
    out, flags = persistence_extend(vals)
    assert len(out) == HORIZON_HOURS
    assert out[241 - 1] == 217 and out[264 - 1] == 240 and out[265 - 1] == 217
    assert np.array_equal(out[:240], vals)
    assert np.array_equal(out[240:], np.tile(vals[216:240], 5))
    assert np.array_equal(np.flatnonzero(flags) + 1, np.arange(241, 361))


def test_persistence_identity_and_errors():
    vals = np.random.default_rng(0).uniform(size=360)
    out, flags = persistence_extend(vals)
    assert np.array_equal(out, vals) and not flags.any()
    with pytest.raises(InsufficientDataError):
        persistence_extend(np.ones(23))
    c, f = persistence_extend(np.full(48, 3.5))
    assert np.all(c == 3.5) and f.sum() == 312


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 15), st.integers(0, 2**31))
def test_persistence_matches_definition(days, seed):
    H = 24 * days
    vals = np.random.default_rng(seed).uniform(size=H)
    out, flags = persistence_extend(vals)
    for h in range(H + 1, 361):
        assert out[h - 1] == vals[H - 24 + 1 + ((h - H - 1) % 24) - 1]
    assert flags.sum() == 360 - H


def test_extend_series_requires_aligned_leads():
    s = HourlySeries(lead_times(RUN, 48), np.ones(48))
    ext, flags = extend_series(s, RUN)
    assert np.array_equal(ext.times, lead_times(RUN)) and flags.sum() == 312
    with pytest.raises(InsufficientDataError):
        extend_series(HourlySeries(lead_times(RUN, 48) + np.timedelta64(1, "h"), np.ones(48)), RUN)


def test_ensemble_examples():
    assert ensemble_combine(10, 20) == 15
    assert ensemble_combine(10, 20, EnsembleParams(1.0)) == 10
    assert ensemble_combine(10, 20, EnsembleParams(0.0)) == 20
    with pytest.raises(ValueError):
        EnsembleParams(1.5)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1e5), st.floats(0, 1e5), st.floats(0, 1))
def test_ensemble_convex(a, b, w):
    out = ensemble_combine(a, b, EnsembleParams(w))
    assert min(a, b) <= out <= max(a, b)
    assert ensemble_combine(a, a, EnsembleParams(w)) == a


# --- K_prod ---

def _tail(ratio, days=14, ghi_peak=800.0):
    """Measured tail with one peak per day at hour 12 and power = ratio * GHI."""
    t = hours(str(RUN - days) + "T00", 24 * days)
    h = (t - t.astype("datetime64[D]")).astype(int)
    ghi = np.maximum(0, ghi_peak * np.sin(np.pi * (h - 6) / 12))
    return matrix(np.column_stack([ghi, ghi + 50]), ratio * ghi, start=str(RUN - days) + "T00")


def _pv_run(ratio=1.6, ghi_peak=700.0):
    t = lead_times(RUN)
    h = (t - t.astype("datetime64[D]")).astype(int)
    ghi = np.maximum(0, ghi_peak * np.sin(np.pi * (h - 6) / 12))
    return ForecastRun(RUN, "NORD", PlantKind.PV, ratio * ghi, np.zeros(360, bool)), ghi


def test_kprod_hand_ratio():
    run, ghi = _pv_run(1.6)
    out = pv_postprocess(run, ghi, _tail(2.0))
    assert out.k_prod == pytest.approx(1.25, rel=1e-12)
    i = int(np.argmax(run.values))
    assert out.values[i] == pytest.approx(run.values[i] * 1.25, rel=1e-12)
    one = ForecastRun(RUN, "NORD", PlantKind.PV, np.full(360, 100.0), np.zeros(360, bool))
    assert pv_postprocess(one, ghi, _tail(2.0), ghi_floor=20).values[0] == pytest.approx(100 * 2.0 / (100 / 700))


def test_kprod_identity_is_bitwise():
    run, ghi = _pv_run(2.0)
    out = pv_postprocess(run, ghi, _tail(2.0))
    assert out.k_prod == 1.0 and out.values.tobytes() == run.values.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10), st.floats(0.1, 10))
def test_kprod_preserves_ratios(r_train, r_for):
    run, ghi = _pv_run(r_for)
    out = pv_postprocess(run, ghi, _tail(r_train))
    pos = run.values > 0
    k = out.values[pos] / run.values[pos]
    assert np.allclose(k, k[0], rtol=1e-12)


def test_kprod_skip_when_overcast():
    run, _ = _pv_run(1.0)
    with pytest.warns(PostprocessSkipped):
        out = pv_postprocess(run, np.full(360, 5.0), _tail(2.0), ghi_floor=20)
    assert out.values.tobytes() == run.values.tobytes() and "postprocess-skipped" in out.notes
    zero = ForecastRun(RUN, "NORD", PlantKind.PV, np.zeros(360), np.zeros(360, bool))
    with pytest.warns(PostprocessSkipped):
        out = pv_postprocess(zero, _pv_run()[1], _tail(2.0))
    assert not out.values.any()


def test_kprod_only_uses_last_n_weeks():
    run, ghi = _pv_run(1.0)
    old = _tail(5.0, days=28)
    tail = old.subset(old.times > np.datetime64(RUN, "h") - np.timedelta64(14 * 24, "h"))
    a = pv_postprocess(run, ghi, old, PostprocessParams(n_weeks=2))
    b = pv_postprocess(run, ghi, tail, PostprocessParams(n_weeks=2))
    assert a.k_prod == b.k_prod


# --- end-to-end ---

SMALL = SynthConfig(start="2016-03-01", end="2016-05-20", forecast_start="2016-05-01",
                    forecast_end="2016-05-03", noise_frac=0.0, forecast_noise_growth=0.0, zones=("NORD",),
                    provinces_per_zone=2)
FAST = PipelineParams(qrf=QrfParams(n_trees=20, seed=1), knn=KnnParams(k=5, month_window=1, hour_window=1))


@pytest.fixture(scope="module")
def pv_small():
    ds = generate_pv_dataset(SMALL)
    prov = {str(z): p for z, p in provinces_by_zone(ds.zones).items()}["NORD"]
    power = ds.power[("NORD", PlantKind.PV)]
    met = clean_met(ds.met, FAST.preprocess)
    models = fit_zone(power, met, prov, "NORD", PlantKind.PV, FAST)
    return ds, prov, models


def test_noiseless_pv_day_within_one_percent(pv_small):
    ds, prov, models = pv_small
    run_date = np.datetime64("2016-05-02")
    with warnings.catch_warnings():
        warnings.simplefilter("error", PostprocessSkipped)
        run = run_forecast(models, ds.forecasts[run_date], run_date, prov, FAST)
    truth, _ = ds.power[("NORD", PlantKind.PV)].lookup(run.times[:24])
    rel = np.abs(run.values[:24] - truth).sum() / truth.sum()
    assert rel <= 0.01
    assert np.array_equal(np.flatnonzero(run.persistence_flag) + 1, np.arange(241, 361))


def test_forecast_csv_round_trip(pv_small):
    ds, prov, models = pv_small
    run = run_forecast(models, ds.forecasts[np.datetime64("2016-05-01")], "2016-05-01", prov, FAST)
    buf = io.StringIO()
    write_forecast_csv([run], buf)
    (again,) = read_forecast_csv(io.StringIO(buf.getvalue()))
    assert np.array_equal(again.values, run.values)
    assert np.array_equal(again.persistence_flag, run.persistence_flag)


def test_zone_models_save_load(tmp_path, pv_small):
    ds, prov, models = pv_small
    save_zone_models(models, tmp_path)
    again = load_zone_models(tmp_path, "NORD", PlantKind.PV)
    d = np.datetime64("2016-05-03")
    a = run_forecast(models, ds.forecasts[d], d, prov, FAST)
    b = run_forecast(again, ds.forecasts[d], d, prov, FAST)
    assert a.values.tobytes() == b.values.tobytes()
    with pytest.raises(FileNotFoundError, match="missing model file"):
        load_zone_models(tmp_path, "SUD", PlantKind.PV)


def test_wind_pipeline_skips_postprocess():
    cfg = SynthConfig(start="2016-03-01", end="2016-05-20", forecast_start="2016-05-01",
                      forecast_end="2016-05-01", zones=("SUD",), provinces_per_zone=1)
    ds = generate_wd_dataset(cfg)
    models = fit_zone(ds.power[("SUD", PlantKind.WD)], ds.met, [1], "SUD", PlantKind.WD, FAST)
    assert len(models.tail) == 0 and models.n_outliers == 0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        det = run_forecast(models, ds.forecasts[np.datetime64("2016-05-01")], "2016-05-01", [1], FAST,
                           detail=True)
    assert det.run.k_prod is None and det.ghi is None
    assert np.allclose(det.run.values, 0.5 * det.knn.values + 0.5 * det.qrf.values, rtol=1e-12)


def test_stage_errors_name_the_stage(pv_small):
    ds, prov, models = pv_small
    short = {k: HourlySeries(s.times[:12], s.values[:12]) for k, s in ds.forecasts[np.datetime64("2016-05-01")].items()}
    with pytest.raises(StageError) as err:
        run_forecast(models, short, "2016-05-01", prov, FAST)
    assert err.value.stage == "persistence"
    with pytest.raises(StageError) as err:
        fit_zone(ds.power[("NORD", PlantKind.PV)], {}, prov, "NORD", PlantKind.PV, FAST)
    assert err.value.stage == "features"
