"""Matplotlib defaults and helpers for the static report figures."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

REPORT_RC = {
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.2,
    "lines.markersize": 4,
    "figure.dpi": 100,
    # stable SVG output across runs
    "svg.hashsalt": "zonecast",
    "svg.fonttype": "path",
}

ZONE_COLOURS = {
    "NORD": "#1b9e77",
    "CNOR": "#d95f02",
    "CSUD": "#7570b3",
    "SUD": "#e7298a",
    "SICI": "#66a61e",
    "SARD": "#e6ab02",
    "ITALY": "#1f4e9c",
}


def size(scale: float = 1.0, aspect: float = 0.62) -> tuple[float, float]:
    width = 6.4 * scale
    return width, width * aspect


def style():
    """Context manager applying the report rc settings; wrap whole figures in it."""
    return plt.rc_context(REPORT_RC)


def new(nrows: int = 1, ncols: int = 1, scale: float = 1.0, aspect: float = 0.62, **kw):
    return plt.subplots(nrows, ncols, figsize=size(scale, aspect), **kw)


def save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
