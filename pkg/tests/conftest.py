import numpy as np
import pytest

from zonecast.core import HourlySeries, PlantKind, SampleMatrix

ACCEPTANCE_LINES: list[str] = []


def hours(start: str, n: int) -> np.ndarray:
    """``n`` consecutive period-ending stamps, the first one hour after ``start``."""
    t0 = np.datetime64(start, "h")
    return t0 + np.arange(1, n + 1) * np.timedelta64(1, "h")


def series(values, start="2016-01-01T00", missing=None, power=False) -> HourlySeries:
    values = np.asarray(values, dtype=np.float64)
    return HourlySeries(hours(start, len(values)), values, missing, is_power=power)


def matrix(X, y, start="2016-01-01T00", names=None, kind=PlantKind.PV) -> SampleMatrix:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    names = names or tuple(f"f{i}" for i in range(X.shape[1]))
    return SampleMatrix(hours(start, len(y)), X, np.asarray(y, dtype=np.float64), names, "NORD", kind)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def tiny_synth(zones=("NORD",), provinces=1, **kw):
    """Two months of training plus one April test month; small enough for unit tests."""
    from zonecast.synth import SynthConfig

    base = dict(start="2016-02-01", end="2016-05-16", forecast_start="2016-04-01", forecast_end="2016-04-30",
                zones=zones, provinces_per_zone=provinces)
    base.update(kw)
    return SynthConfig(**base)


def backtest_data(ds):
    from zonecast.evaluate import BacktestData

    return BacktestData(ds.power, ds.met, ds.zones, ds.forecasts, ds.totals)


def fast_params():
    from zonecast.knn import KnnParams
    from zonecast.pipeline import PipelineParams
    from zonecast.qrf import QrfParams

    return PipelineParams(qrf=QrfParams(n_trees=10, seed=3), knn=KnnParams(k=5, month_window=1, hour_window=1))
