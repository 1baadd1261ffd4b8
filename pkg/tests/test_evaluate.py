import io
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import backtest_data, fast_params, series, tiny_synth
from zonecast.core import ITALY, HourlySeries, PlantKind
from zonecast.evaluate import (
    BacktestConfig,
    BacktestData,
    CoverageError,
    MetricRecord,
    backtest,
    monthly_norm,
    nmbe,
    nrmse,
    read_metrics_csv,
    write_metrics_csv,
)
from zonecast.pipeline import PostprocessSkipped
from zonecast.synth import generate_dataset

APRIL = BacktestConfig(train_start="2016-02-01", test_months=((2016, 4),))


def test_metric_hand_examples():
    assert nmbe([5, 5, 5], [0, 0, 0], 50) == pytest.approx(0.1, abs=1e-12)
    assert nrmse([5, 5, 5], [0, 0, 0], 50) == pytest.approx(0.1, abs=1e-12)
    assert nmbe([10, -10], [0, 0], 100) == 0.0
    assert nrmse([10, -10], [0, 0], 100) == pytest.approx(0.1, abs=1e-12)
    assert nmbe([3, 4], [3, 4], 7) == 0.0 == nrmse([3, 4], [3, 4], 7)
    assert nmbe([2.0], [1.0], 1.0) > 0  # overestimation is positive


def test_metric_argument_errors():
    for args in (([1, 2], [1], 1.0), ([1], [1], 0.0), ([], [], 1.0), ([1], [1], -2.0)):
        with pytest.raises(ValueError):
            nmbe(*args)
        with pytest.raises(ValueError):
            nrmse(*args)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1e4), st.floats(0, 1e4)), min_size=1, max_size=50),
       st.floats(1, 1e4), st.integers(0, 2**31))
def test_metric_properties(pairs, m_norm, seed):
    p = np.array([a for a, _ in pairs])
    a = np.array([b for _, b in pairs])
    b_, r_ = nmbe(p, a, m_norm), nrmse(p, a, m_norm)
    assert r_ >= abs(b_) * (1 - 1e-12)
    perm = np.random.default_rng(seed).permutation(len(p))
    assert nmbe(p[perm], a[perm], m_norm) == pytest.approx(b_, rel=1e-12, abs=1e-15)
    assert nrmse(p[perm], a[perm], m_norm) == pytest.approx(r_, rel=1e-12, abs=1e-15)
    assert nrmse(p * 8, a * 8, m_norm * 8) == pytest.approx(r_, rel=1e-12, abs=1e-15)
    assert nmbe(p * 8, a * 8, m_norm * 8) == pytest.approx(b_, rel=1e-12, abs=1e-15)


def test_monthly_norm():
    t = np.array(["2015-03-10T05", "2016-03-02T01", "2016-03-20T10", "2016-04-01T00", "2016-04-02T00"],
                 dtype="datetime64[h]")
    s = HourlySeries(t, [10.0, 50.0, 30.0, 99.0, 7.0], is_power=True)
    assert monthly_norm(s, 3) == 99.0  # 04-01T00 closes the last hour of March
    assert monthly_norm(s, 4) == 7.0
    with pytest.raises(ValueError):
        monthly_norm(s, 5)
    assert monthly_norm(series([42.0], start="2016-06-01T00", power=True), 6) == 42.0
    gap = series([1.0, 2.0], start="2016-06-01T00", missing=[True, True], power=True)
    with pytest.raises(ValueError):
        monthly_norm(gap, 6)


def test_metric_record_validation_and_csv_round_trip():
    with pytest.raises(ValueError):
        MetricRecord(2017, 1, "NORD", PlantKind.PV, 1, 0.0, 0.0, 0, 1.0)
    recs = [MetricRecord(2017, 1, "NORD", PlantKind.PV, d, 0.1 / 3 * d, math.pi / (d + 1), 744, 1234.5678)
            for d in range(0, 16)]
    buf = io.StringIO()
    write_metrics_csv(recs, buf)
    assert buf.getvalue().splitlines()[0] == "year,month,zone,kind,lead_day,nmbe,nrmse,n_samples,m_norm"
    assert read_metrics_csv(io.StringIO(buf.getvalue())) == recs


def test_config_validation():
    with pytest.raises(ValueError):
        BacktestConfig(train_start="2016-05-01", test_months=((2016, 4),))
    with pytest.raises(ValueError):
        BacktestConfig(test_months=((2017, 2), (2017, 1)))
    with pytest.raises(ValueError):
        BacktestConfig(horizon_days=10)


@pytest.fixture(scope="module")
def april():
    ds = generate_dataset(tiny_synth())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PostprocessSkipped)
        return ds, backtest(backtest_data(ds), APRIL, fast_params())


def test_record_counts_and_samples(april):
    _, res = april
    recs = res.records
    assert len(recs) == 2 * 2 * 16  # kinds x (zone + ITALY) x (15 lead days + ALL)
    for r in recs:
        assert r.n_samples == (30 * 24 if r.lead_day else 30 * 360)
    assert len(res.runs) == 2 * 30
    assert all(r.m_norm > 0 for r in recs)


def test_scores_recompute_from_runs(april):
    ds, res = april
    power = ds.power[("NORD", PlantKind.PV)]
    d1 = next(r for r in res.records if r.zone == "NORD" and r.kind == PlantKind.PV and r.lead_day == 3)
    pred, act = [], []
    for (date, zone, kind), run in sorted(res.runs.items(), key=lambda kv: str(kv[0])):
        if zone == "NORD" and kind == PlantKind.PV:
            pred.extend(run.values[48:72])
            act.extend(power.lookup(run.times[48:72])[0])
    assert d1.nrmse == pytest.approx(nrmse(pred, act, d1.m_norm), rel=1e-12)
    assert d1.nmbe == pytest.approx(nmbe(pred, act, d1.m_norm), rel=1e-12, abs=1e-15)


def test_single_zone_italy_equals_zone(april):
    _, res = april
    for kind in (PlantKind.PV, PlantKind.WD):
        z = {r.lead_day: r for r in res.records if r.zone == "NORD" and r.kind == kind}
        it = {r.lead_day: r for r in res.records if r.zone == ITALY and r.kind == kind}
        assert all(it[d].nrmse == pytest.approx(z[d].nrmse, rel=1e-12) for d in z)


def _duplicate_zone(ds):
    """Copy NORD onto SUD with its own provinces carrying identical met."""
    offset = max(ds.zones)
    zones = dict(ds.zones)
    met = dict(ds.met)
    for p in list(ds.zones):
        zones[p + offset] = "SUD"
        for (q, v), s in ds.met.items():
            if q == p:
                met[(p + offset, v)] = s
    forecasts = {}
    for d, m in ds.forecasts.items():
        forecasts[d] = dict(m)
        forecasts[d].update({(q + offset, v): s for (q, v), s in m.items()})
    power = dict(ds.power)
    for (z, k), s in ds.power.items():
        power[("SUD", k)] = s
    return BacktestData(power, met, zones, forecasts, None)


def test_identical_zones_italy_matches_each_zone(april):
    ds, _ = april
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PostprocessSkipped)
        res = backtest(_duplicate_zone(ds), BacktestConfig("2016-02-01", ((2016, 4),), kinds=(PlantKind.WD,)),
                       fast_params())
    by = {(r.zone, r.lead_day): r for r in res.records}
    for d in range(16):
        assert by[("NORD", d)].nrmse == by[("SUD", d)].nrmse
        assert by[(ITALY, d)].nrmse == pytest.approx(by[("NORD", d)].nrmse, rel=1e-12)
        assert by[(ITALY, d)].m_norm == 2 * by[("NORD", d)].m_norm


def test_perfect_forecast_scores_zero():
    p = np.arange(48.0)
    assert nmbe(p, p, 10.0) == 0.0 and nrmse(p, p, 10.0) == 0.0


def test_training_windows_nested():
    ds = generate_dataset(tiny_synth(end="2016-06-16", forecast_end="2016-05-31"), kinds=(PlantKind.WD,))
    res = backtest(backtest_data(ds), BacktestConfig("2016-02-01", ((2016, 4), (2016, 5)), kinds=(PlantKind.WD,)),
                   fast_params())
    (k1, _, _, s1, e1), (k2, _, _, s2, e2) = res.training_windows
    assert s1 == s2 and e1 < e2
    assert e1 == np.datetime64("2016-04-01T00") and e2 == np.datetime64("2016-05-01T00")


def test_coverage_errors_list_missing_ranges(april):
    ds, _ = april
    data = backtest_data(ds)
    with pytest.raises(CoverageError, match="2016-05-01"):
        backtest(data, BacktestConfig("2016-02-01", ((2016, 4), (2016, 5))), fast_params())
    cut = dict(ds.power)
    s = cut[("NORD", PlantKind.WD)]
    keep = (s.times < np.datetime64("2016-04-10T00")) | (s.times > np.datetime64("2016-04-10T05"))
    cut[("NORD", PlantKind.WD)] = HourlySeries(s.times[keep], s.values[keep], is_power=True)
    with pytest.raises(CoverageError, match="2016-04-10T00..2016-04-10T05"):
        backtest(BacktestData(cut, ds.met, ds.zones, ds.forecasts), APRIL, fast_params())


def test_january_lead_day_pools_744_hours():
    from zonecast.evaluate import _score

    rng = np.random.default_rng(0)
    recs = _score(rng.uniform(size=(31, 360)), rng.uniform(size=(31, 360)), 1.0, 2017, 1, "NORD", PlantKind.PV)
    assert [r.n_samples for r in recs if r.lead_day == 1] == [744]
    assert [r.lead_day for r in recs] == list(range(1, 16)) + [0]
