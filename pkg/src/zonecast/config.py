"""Flat ``section.key = value`` run configuration.

Blank lines and lines starting with ``#`` are ignored. Unknown keys are
rejected. Relative paths resolve against the config file's directory.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .core import ConfigurationError, PlantKind, month_range, parse_kind, parse_zone
from .evaluate import BacktestConfig
from .pipeline import EnsembleParams, PipelineParams, PostprocessParams
from .preprocess import PreprocessConfig
from .qrf import QrfParams
from .synth import SynthConfig

PATH_KEYS = ("power", "met", "monthly_totals", "zones", "forecast_dir", "models", "grid_dir", "mask", "out")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("none", "") else int(text)


def _list(conv):
    return lambda text: tuple(conv(t.strip()) for t in text.split(",") if t.strip())


def _months(text: str) -> tuple[tuple[int, int], ...]:
    """``2016-05..2016-10`` or a comma list of ``YYYY-MM``."""
    def ym(t):
        y, m = t.strip().split("-")
        return int(y), int(m)
    text = text.strip()
    if ".." in text:
        a, b = text.split("..")
        return tuple(month_range(ym(a), ym(b)))
    return tuple(ym(t) for t in text.split(",") if t.strip())


def _zones(text: str):
    if text.strip().upper() in ("ALL", ""):
        return None
    return tuple(str(parse_zone(t)) for t in text.split(",") if t.strip())


SCHEMA = {
    "preprocess.cone_threshold": float,
    "preprocess.ghi_floor": float,
    "preprocess.max_gap_hours": int,
    "preprocess.mad_fallback_frac": float,
    "preprocess.rescale": _bool,
    "knn.k": int,
    "knn.epsilon": float,
    "knn.month_window": _opt_int,
    "knn.hour_window": _opt_int,
    "qrf.n_trees": int,
    "qrf.min_leaf": int,
    "qrf.mtry": _opt_int,
    "qrf.max_depth": _opt_int,
    "qrf.seed": int,
    "qrf.quantile": float,
    "pipeline.weight_knn": float,
    "pipeline.n_weeks": int,
    "pipeline.postprocess": _bool,
    "pipeline.postprocess_first": _bool,
    "backtest.train_start": str,
    "backtest.test_months": _months,
    "backtest.kinds": _list(parse_kind),
    "backtest.zones": _zones,
    "tune.cone_threshold": _list(float),
    "tune.quantile": _list(float),
    "tune.k": _list(int),
    "tune.n_weeks": _list(int),
    "tune.holdout_days": int,
    "tune.kind": parse_kind,
    "tune.zones": _zones,
    **{f"paths.{k}": str for k in PATH_KEYS},
}
_SYNTH_TYPES = {"zones": _list(str), "forecast_start": str, "forecast_end": str, "start": str,
                "end": str, "seed": int, "provinces_per_zone": int, "forecast_hours": int}
for _f in fields(SynthConfig):
    SCHEMA[f"synth.{_f.name}"] = _SYNTH_TYPES.get(_f.name, float)


@dataclass(frozen=True)
class TuneConfig:
    cone_threshold: tuple[float, ...] = (3.0, 5.0)
    quantile: tuple[float, ...] = (0.4, 0.5)
    k: tuple[int, ...] = (5, 10)
    n_weeks: tuple[int, ...] = (1, 2)
    holdout_days: int = 15
    kind: PlantKind = PlantKind.PV
    zones: tuple[str, ...] | None = None


@dataclass(frozen=True)
class RunConfig:
    paths: dict = field(default_factory=dict)
    params: PipelineParams = PipelineParams()
    backtest: BacktestConfig = BacktestConfig()
    synth: SynthConfig = SynthConfig()
    tune: TuneConfig = TuneConfig()
    rescale: bool = True

    def path(self, key: str) -> str:
        if key not in self.paths:
            raise ConfigurationError(f"config lacks paths.{key}")
        return self.paths[key]


def parse_config_text(text: str, base_dir: str = ".") -> RunConfig:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigurationError(f"line {lineno}: {key} set twice")
        try:
            values[key] = SCHEMA[key](value)
        except (ValueError, TypeError) as exc:
            raise ConfigurationError(f"line {lineno}: bad value for {key}: {exc}") from None
    try:
        return _build(values, base_dir)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from None


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), os.path.dirname(os.path.abspath(path)))


def _section(values, name):
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)}


def _build(values: dict, base_dir: str) -> RunConfig:
    pre = _section(values, "preprocess")
    rescale = pre.pop("rescale", True)
    prep = PreprocessConfig(**pre)
    knn = _section(values, "knn")
    knn_params = replace(PipelineParams().knn, **knn)
    qrf = QrfParams(**_section(values, "qrf"))
    pipe = _section(values, "pipeline")
    params = PipelineParams(
        preprocess=prep,
        knn=knn_params,
        qrf=qrf,
        ensemble=EnsembleParams(pipe.get("weight_knn", 0.5)),
        postprocess=PostprocessParams(pipe.get("n_weeks", 2), pipe.get("postprocess", True)),
        postprocess_first=pipe.get("postprocess_first", True),
    )
    backtest = BacktestConfig(**_section(values, "backtest"))
    synth = SynthConfig(**_section(values, "synth"))
    tune = TuneConfig(**_section(values, "tune"))
    paths = {}
    for k, v in _section(values, "paths").items():
        paths[k] = v if os.path.isabs(v) else os.path.normpath(os.path.join(base_dir, v))
    return RunConfig(paths, params, backtest, synth, tune, rescale)


def render_config(cfg: RunConfig) -> str:
    """Inverse of :func:`parse_config_text` for the keys that differ from defaults."""
    lines = [f"paths.{k} = {v}" for k, v in sorted(cfg.paths.items())]
    p = cfg.params
    lines += [
        f"preprocess.cone_threshold = {p.preprocess.cone_threshold!r}",
        f"preprocess.ghi_floor = {p.preprocess.ghi_floor!r}",
        f"preprocess.max_gap_hours = {p.preprocess.max_gap_hours}",
        f"preprocess.mad_fallback_frac = {p.preprocess.mad_fallback_frac!r}",
        f"preprocess.rescale = {str(cfg.rescale).lower()}",
        f"knn.k = {p.knn.k}",
        f"knn.epsilon = {p.knn.epsilon!r}",
        f"knn.month_window = {p.knn.month_window}",
        f"knn.hour_window = {p.knn.hour_window}",
        f"qrf.n_trees = {p.qrf.n_trees}",
        f"qrf.min_leaf = {p.qrf.min_leaf}",
        f"qrf.mtry = {p.qrf.mtry}",
        f"qrf.max_depth = {p.qrf.max_depth}",
        f"qrf.seed = {p.qrf.seed}",
        f"qrf.quantile = {p.qrf.quantile!r}",
        f"pipeline.weight_knn = {p.ensemble.weight_knn!r}",
        f"pipeline.n_weeks = {p.postprocess.n_weeks}",
        f"pipeline.postprocess = {str(p.postprocess.enabled).lower()}",
        f"pipeline.postprocess_first = {str(p.postprocess_first).lower()}",
    ]
    b = cfg.backtest
    lines += [
        f"backtest.train_start = {b.train_start}",
        "backtest.test_months = " + ",".join(f"{y:04d}-{m:02d}" for y, m in b.test_months),
        "backtest.kinds = " + ",".join(str(k) for k in b.kinds),
        "backtest.zones = " + ("ALL" if b.zones is None else ",".join(b.zones)),
    ]
    return "\n".join(lines) + "\n"


def date_arg(text: str) -> np.datetime64:
    try:
        return np.datetime64(text, "D")
    except ValueError:
        raise ConfigurationError(f"not a date: {text!r}") from None
