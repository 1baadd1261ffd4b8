"""Day-ahead to 15-day zonal PV and wind power forecasting.

A kernel-weighted k-NN and a quantile regression forest are trained per
bidding zone on zone-averaged weather features, combined, and (for PV)
rescaled by a seasonal productivity factor.
"""
from .core import (
    HORIZON_HOURS,
    ITALY,
    ConfigurationError,
    ForecastRun,
    HourlySeries,
    InsufficientDataError,
    PlantKind,
    SampleMatrix,
    ZoneId,
    ZonecastError,
)
from .knn import KnnParams, fit_knn, knn_predict
from .qrf import QrfParams, fit_qrf, qrf_quantile

__version__ = "0.1.0"

__all__ = [
    "HORIZON_HOURS",
    "ITALY",
    "ConfigurationError",
    "ForecastRun",
    "HourlySeries",
    "InsufficientDataError",
    "KnnParams",
    "PlantKind",
    "QrfParams",
    "SampleMatrix",
    "ZoneId",
    "ZonecastError",
    "fit_knn",
    "fit_qrf",
    "knn_predict",
    "qrf_quantile",
    "__version__",
]
