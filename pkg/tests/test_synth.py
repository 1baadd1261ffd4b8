import filecmp
import math
import os

import numpy as np
import pytest

from conftest import tiny_synth
from zonecast.core import PlantKind, validate_hourly_series
from zonecast.ingest import (
    parse_met_csv,
    parse_monthly_totals_csv,
    parse_power_csv,
    parse_zones_csv,
    provinces_by_zone,
)
from zonecast.preprocess import monthly_rescale
from zonecast.synth import (
    SynthConfig,
    clear_sky_ghi,
    generate_dataset,
    generate_pv_dataset,
    generate_wd_dataset,
    wind_power_curve,
)


def test_config_validation():
    for bad in (dict(pv_capacity=0), dict(ar_coefficient=1.0), dict(cut_in=14.0), dict(noise_frac=-0.1),
                dict(end="2015-04-01"), dict(forecast_hours=25)):
        with pytest.raises(ValueError):
            SynthConfig(**bad)


def _write(tmp_path, name, cfg):
    out = tmp_path / name
    generate_dataset(cfg).write(out)
    return out


def test_same_seed_gives_identical_files(tmp_path):
    cfg = tiny_synth(forecast_end="2016-04-03")
    a, b = _write(tmp_path, "a", cfg), _write(tmp_path, "b", cfg)
    files = sorted(os.path.relpath(os.path.join(r, f), a) for r, _, fs in os.walk(a) for f in fs)
    assert len(files) == 4 + 3
    match, mismatch, errors = filecmp.cmpfiles(a, b, files, shallow=False)
    assert not mismatch and not errors
    c = _write(tmp_path, "c", tiny_synth(forecast_end="2016-04-03", seed=8))
    assert not filecmp.cmp(a / "power.csv", c / "power.csv", shallow=False)


def test_files_parse_and_validate(tmp_path):
    out = _write(tmp_path, "d", tiny_synth(zones=("NORD", "SICI"), provinces=2, forecast_end="2016-04-02"))
    power = parse_power_csv((out / "power.csv").read_bytes())
    met = parse_met_csv((out / "met.csv").read_bytes())
    zones = parse_zones_csv((out / "zones.csv").read_text())
    assert set(power) == {(z, k) for z in ("NORD", "SICI") for k in (PlantKind.PV, PlantKind.WD)}
    assert {v for _, v in met} == {"GHI", "GHI_CS", "UGRD", "VGRD"}
    assert sorted(zones) == [1, 2, 3, 4]
    for s in list(power.values()) + list(met.values()):
        assert validate_hourly_series(s) == []
    for f in sorted(os.listdir(out / "forecast_met")):
        fc = parse_met_csv((out / "forecast_met" / f).read_bytes())
        assert all(len(s) == 240 and validate_hourly_series(s) == [] for s in fc.values())


def test_totals_equal_hourly_sums(tmp_path):
    out = _write(tmp_path, "e", tiny_synth())
    power = parse_power_csv((out / "power.csv").read_bytes())
    totals = parse_monthly_totals_csv((out / "monthly_totals.csv").read_text())
    for kind in (PlantKind.PV, PlantKind.WD):
        zonal = {z: s for (z, k), s in power.items() if k == kind}
        again = monthly_rescale(zonal, totals, kind)
        assert all(np.array_equal(again[z].values, zonal[z].values) for z in zonal)


def test_night_ghi_and_power_are_zero():
    ds = generate_pv_dataset(tiny_synth(forecast_start=None))
    ghi = ds.met[(1, "GHI")]
    power = ds.power[("NORD", PlantKind.PV)]
    night = ghi.values == 0
    assert night.sum() > 0.3 * len(ghi)
    midnight = ghi.times.astype("datetime64[D]") == ghi.times  # stamp 00 closes 23:00..24:00 UTC
    assert np.all(ghi.values[midnight] == 0)
    # a zone of one province: zero zone GHI means zero power
    assert np.all(power.values[night] == 0)


def test_clear_sky_is_solar_shaped():
    t = np.datetime64("2016-06-21T00") + np.arange(1, 25) * np.timedelta64(1, "h")
    cs = clear_sky_ghi(t, 45.0, 12.0)
    assert 9 <= int(np.argmax(cs)) + 1 <= 13  # local noon is about 11:12 UTC
    winter = clear_sky_ghi(t - np.timedelta64(182, "D"), 45.0, 12.0)
    assert cs.sum() > 1.5 * winter.sum()
    assert cs.max() < 1100


def _curve_oracle(v, cap, ci, r, co):
    if v < ci or v > co:
        return 0.0
    if v >= r:
        return cap
    return cap * (v ** 3 - ci ** 3) / (r ** 3 - ci ** 3)


def test_wind_curve_edges():
    cap, ci, r, co = 100.0, 3.5, 13.0, 25.0
    assert np.all(wind_power_curve(np.linspace(0, 3.49, 20), cap, ci, r, co) == 0)
    assert np.all(wind_power_curve(np.full(5, 13.0), cap, ci, r, co) == cap)
    assert np.all(wind_power_curve(np.linspace(25.01, 40, 5), cap, ci, r, co) == 0)
    assert wind_power_curve(np.array([25.0]), cap, ci, r, co)[0] == cap
    v = np.linspace(0, 30, 301)
    got = wind_power_curve(v, cap, ci, r, co)
    want = [_curve_oracle(x, cap, ci, r, co) for x in v]
    assert np.allclose(got, want, rtol=1e-12, atol=1e-12)


def test_power_reproducible_from_met_truth(tmp_path):
    cfg = tiny_synth(zones=("NORD", "SUD"), provinces=2, noise_frac=0.0, forecast_start=None)
    out = _write(tmp_path, "f", cfg)
    power = parse_power_csv((out / "power.csv").read_bytes())
    met = parse_met_csv((out / "met.csv").read_bytes())
    by_zone = provinces_by_zone(parse_zones_csv((out / "zones.csv").read_text()))
    for zi, zone in enumerate(cfg.zone_ids):
        pids = by_zone[zone]
        ghi = np.mean([met[(p, "GHI")].values for p in pids], axis=0)
        pv = cfg.pv_capacity * (1 + 0.5 * zi) * cfg.pv_efficiency * ghi / 1000
        assert np.allclose(power[(zone, PlantKind.PV)].values, pv, rtol=0, atol=6e-4)
        speed = np.mean([np.hypot(met[(p, "UGRD")].values, met[(p, "VGRD")].values) for p in pids], axis=0)
        cap = cfg.wd_capacity * (1 + 0.5 * zi)
        wd = [_curve_oracle(v, cap, cfg.cut_in, cfg.rated, cfg.cut_out) for v in speed]
        assert np.allclose(power[(zone, PlantKind.WD)].values, wd, rtol=0, atol=6e-4)


def test_forecast_error_grows_with_lead_day():
    cfg = tiny_synth(forecast_noise_growth=0.05)
    wd = generate_wd_dataset(cfg)
    truth = wd.met[(1, "UGRD")]
    err = np.zeros(10)
    for run, met in wd.forecasts.items():
        f = met[(1, "UGRD")]
        t, _ = truth.lookup(f.times)
        err += [math.sqrt(np.mean((f.values[24 * d:24 * d + 24] - t[24 * d:24 * d + 24]) ** 2)) for d in range(10)]
    assert err[-1] > 3 * err[0]


def test_noiseless_forecasts_equal_truth():
    cfg = tiny_synth(forecast_noise_growth=0.0, forecast_end="2016-04-02")
    ds = generate_dataset(cfg)
    for run, met in ds.forecasts.items():
        for key, f in met.items():
            t, found = ds.met[key].lookup(f.times)
            assert found.all() and np.array_equal(t, f.values)
