import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import hours, series
from zonecast.core import (
    HORIZON_HOURS,
    ForecastRun,
    HourlySeries,
    PlantKind,
    SampleMatrix,
    ZoneId,
    circular_distance,
    hour_of_day,
    lead_times,
    month_of,
    month_range,
    parse_kind,
    parse_zone,
    period_start,
    validate_hourly_series,
)


def test_zone_and_kind_sets_are_closed():
    assert [z.value for z in ZoneId] == ["NORD", "CNOR", "CSUD", "SUD", "SICI", "SARD"]
    assert {k.value for k in PlantKind} == {"PV", "WD"}
    assert parse_zone(" nord ") == ZoneId.NORD
    with pytest.raises(ValueError):
        parse_zone("NORTH")
    with pytest.raises(ValueError):
        parse_kind("HYDRO")


@pytest.mark.parametrize("a,b,m,expected", [(3, 3, 12, 0), (1, 12, 12, 1), (0, 23, 24, 1), (2, 8, 12, 6)])
def test_circular_distance_examples(a, b, m, expected):
    assert circular_distance(a, b, m) == expected


def test_circular_distance_rejects_small_modulus():
    with pytest.raises(ValueError):
        circular_distance(0, 1, 1)


@given(st.integers(2, 60), st.data())
def test_circular_distance_properties(m, data):
    a = data.draw(st.integers(0, m - 1))
    b = data.draw(st.integers(0, m - 1))
    d = circular_distance(a, b, m)
    assert d == circular_distance(b, a, m)
    assert 0 <= d <= m // 2
    assert circular_distance(a, a, m) == 0


def test_period_ending_calendar():
    t = np.array(["2017-01-01T00", "2017-01-01T01", "2017-05-01T12"], dtype="datetime64[h]")
    # midnight closes the last hour of the previous day and month
    assert period_start(t)[0] == np.datetime64("2016-12-31T23")
    assert list(month_of(t)) == [1, 1, 5]
    assert list(hour_of_day(t)) == [0, 1, 12]


def test_lead_times_start_one_hour_after_run():
    lt = lead_times("2017-05-01")
    assert len(lt) == HORIZON_HOURS
    assert lt[0] == np.datetime64("2017-05-01T01")
    assert lt[-1] == np.datetime64("2017-05-16T00")


def test_month_range():
    assert month_range((2016, 11), (2017, 2)) == [(2016, 11), (2016, 12), (2017, 1), (2017, 2)]


def test_validate_clean_series():
    assert validate_hourly_series(series(np.arange(24.0), power=True)) == []


def test_validate_duplicate_timestamp_at_index_5():
    t = hours("2016-01-01T00", 10)
    t[5] = t[4]
    v = validate_hourly_series(HourlySeries(t, np.ones(10)))
    assert [x.index for x in v] == [5]
    assert "duplicate" in v[0].reason


def test_validate_negative_power():
    vals = np.ones(6)
    vals[2] = -1.0
    v = validate_hourly_series(series(vals, power=True))
    assert len(v) == 1 and v[0].index == 2 and "negative" in v[0].reason
    # met variables may be negative (wind components)
    assert validate_hourly_series(series(vals)) == []


def test_missing_points_are_flags_not_sentinels():
    s = series([1.0, 2.0, 3.0], missing=[False, True, False])
    assert np.isnan(s.values[1])
    assert validate_hourly_series(s) == []
    vals, found = s.lookup(s.times)
    assert list(found) == [True, False, True]


@given(st.lists(st.floats(0, 1e4), min_size=2, max_size=40), st.data())
def test_validate_agrees_with_manual_check(values, data):
    t = hours("2016-01-01T00", len(values)).astype(np.int64)
    # corrupt a few points
    n_bad = data.draw(st.integers(0, 3))
    vals = np.array(values)
    for _ in range(n_bad):
        i = data.draw(st.integers(0, len(values) - 1))
        if data.draw(st.booleans()):
            vals[i] = -abs(vals[i]) - 1.0
        else:
            t[i] = t[i - 1] if i > 0 else t[i]
    s = HourlySeries(t.astype("datetime64[h]"), vals, is_power=True)
    manual_ok = bool(np.all(np.diff(t) > 0) and np.all(vals >= 0))
    assert (validate_hourly_series(s) == []) == manual_ok


def test_series_is_immutable():
    s = series([1.0, 2.0])
    with pytest.raises(ValueError):
        s.values[0] = 5.0


def test_window_and_regular_grid():
    s = HourlySeries(np.array(["2016-01-01T01", "2016-01-01T04"], dtype="datetime64[h]"), [1.0, 4.0])
    reg = s.as_regular()
    assert len(reg) == 4 and list(reg.missing) == [False, True, True, False]
    w = reg.window("2016-01-01T02", "2016-01-01T04")
    assert len(w) == 3


def test_sample_matrix_rejects_missing_and_bad_width():
    t = hours("2016-01-01T00", 3)
    with pytest.raises(ValueError):
        SampleMatrix(t, np.ones((3, 2)), [1.0, np.nan, 2.0], ("a", "b"))
    with pytest.raises(ValueError):
        SampleMatrix(t, np.ones((3, 2)), np.ones(3), ("a",))
    empty = SampleMatrix(t[:0], np.zeros((0, 2)), [], ("a", "b"))
    assert len(empty) == 0 and empty.width == 2


def test_forecast_run_invariants():
    ok = ForecastRun("2017-05-01", "NORD", PlantKind.PV, np.zeros(360), np.zeros(360, bool))
    assert ok.times[0] == np.datetime64("2017-05-01T01")
    with pytest.raises(ValueError):
        ForecastRun("2017-05-01", "NORD", PlantKind.PV, np.zeros(359), np.zeros(359, bool))
    with pytest.raises(ValueError):
        ForecastRun("2017-05-01", "NORD", PlantKind.PV, -np.ones(360), np.zeros(360, bool))
