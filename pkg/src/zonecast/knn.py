"""Kernel-weighted k-nearest-neighbour regression.

Distances are Euclidean in standardized feature space and neighbours are
combined with hyperbolic weights ``1 / (d + epsilon)``. For PV the candidate
rows can be restricted to training hours whose month and hour of day lie
within a circular window around the query's.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import InsufficientDataError, SampleMatrix, circular_distance_array, hour_of_day, month_of


@dataclass(frozen=True)
class KnnParams:
    k: int = 10
    epsilon: float = 1e-6
    month_window: int | None = None
    hour_window: int | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if (self.month_window is None) != (self.hour_window is None):
            raise ValueError("month_window and hour_window must be set together")
        if self.month_window is not None and (self.month_window < 0 or self.hour_window < 0):
            raise ValueError("calendar windows must be >= 0")

    @property
    def windowed(self) -> bool:
        return self.month_window is not None


@dataclass(frozen=True, eq=False)
class KnnModel:
    features: np.ndarray  # standardized
    mean: np.ndarray
    std: np.ndarray
    target: np.ndarray
    month: np.ndarray
    hour: np.ndarray
    params: KnnParams
    feature_names: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.target)

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @cached_property
    def _calendar_index(self) -> dict[tuple[int, int], np.ndarray]:
        return {}

    def standardize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


def fit_knn(data: SampleMatrix, params: KnnParams = KnnParams()) -> KnnModel:
    """Memorize standardized training instances."""
    n = len(data)
    if n < params.k:
        raise InsufficientDataError(f"k-NN needs at least k={params.k} rows, got {n}")
    feats = np.asarray(data.features, dtype=np.float64)
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    flat = ~(std > 0)
    if flat.any():
        names = [data.feature_names[i] for i in np.flatnonzero(flat)]
        warnings.warn(f"zero-variance feature(s) {names}: std set to 1", RuntimeWarning)
        std = np.where(flat, 1.0, std)
    z = (feats - mean) / std
    for arr in (z, mean, std):
        arr.flags.writeable = False
    return KnnModel(z, mean, std, data.target.copy(), month_of(data.times), hour_of_day(data.times),
                    params, tuple(data.feature_names))


def _candidates(model: KnnModel, month: int, hour: int) -> tuple[np.ndarray, bool]:
    """Row indices inside the calendar window, widening until at least k remain."""
    p = model.params
    if not p.windowed:
        return np.arange(len(model)), False
    key = (month, hour)
    cache = model._calendar_index
    if key in cache:
        return cache[key]
    dm_all = circular_distance_array(model.month, month, 12)
    dh_all = circular_distance_array(model.hour, hour, 24)
    dm, dh = p.month_window, p.hour_window
    widened = False
    turn_month = True
    while True:
        idx = np.flatnonzero((dm_all <= dm) & (dh_all <= dh))
        if len(idx) >= p.k or (dm >= 6 and dh >= 12):
            break
        widened = True
        # month first, then hour, alternating
        if (turn_month and dm < 6) or dh >= 12:
            dm += 1
        else:
            dh += 1
        turn_month = not turn_month
    cache[key] = (idx, widened)
    return idx, widened


def _select(dist: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k smallest distances, ties broken by position."""
    if len(dist) > k:
        kth = np.partition(dist, k - 1)[k - 1]
        pos = np.flatnonzero(dist <= kth)
    else:
        pos = np.arange(len(dist))
    order = np.lexsort((pos, dist[pos]))
    return pos[order[:k]]


def knn_predict(model: KnnModel, x, month: int, hour: int, *, return_flag: bool = False):
    """Hyperbolic-kernel weighted mean of the k nearest candidate targets, clipped at 0."""
    if len(model) == 0:
        raise InsufficientDataError("empty k-NN model")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.width,):
        raise ValueError(f"query width {x.shape} does not match model width {model.width}")
    if not (1 <= month <= 12 and 0 <= hour <= 23):
        raise ValueError(f"month/hour out of range: {month}, {hour}")
    idx, widened = _candidates(model, int(month), int(hour))
    diff = model.features[idx] - model.standardize(x)
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    sel = _select(dist, model.params.k)
    w = 1.0 / (dist[sel] + model.params.epsilon)
    pred = max(float(np.dot(w, model.target[idx[sel]]) / w.sum()), 0.0)
    return (pred, widened) if return_flag else pred


def knn_predict_many(model: KnnModel, X, months, hours) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return np.array([knn_predict(model, X[i], int(months[i]), int(hours[i])) for i in range(len(X))])


def save_knn(model: KnnModel, path) -> None:
    p = model.params
    np.savez(path, format_version=np.int64(1), features=model.features, mean=model.mean,
             std=model.std, target=model.target, month=model.month, hour=model.hour,
             k=np.int64(p.k), epsilon=np.float64(p.epsilon),
             month_window=np.int64(-1 if p.month_window is None else p.month_window),
             hour_window=np.int64(-1 if p.hour_window is None else p.hour_window),
             feature_names=np.array(model.feature_names, dtype=str))


def load_knn(path) -> KnnModel:
    with np.load(path, allow_pickle=False) as z:
        if int(z["format_version"]) != 1:
            raise ValueError(f"unsupported k-NN model format {int(z['format_version'])}")
        mw, hw = int(z["month_window"]), int(z["hour_window"])
        params = KnnParams(int(z["k"]), float(z["epsilon"]),
                           None if mw < 0 else mw, None if hw < 0 else hw)
        return KnnModel(z["features"], z["mean"], z["std"], z["target"], z["month"], z["hour"],
                        params, tuple(str(s) for s in z["feature_names"]))
