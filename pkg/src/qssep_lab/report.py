"""
SVG figures for the experiment reports.

Rendering goes through the Agg backend with a fixed SVG hash salt and no
date metadata, so identical data gives identical bytes.
"""

import os
from typing import Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

from matplotlib.figure import Figure  # noqa: E402
import numpy as np  # noqa: E402

from fastmcp.utilities.logging import get_logger  # noqa: E402

logger = get_logger(__name__)

SVG_SALT = "qssep-lab"


def rcsetup() -> None:
    matplotlib.rcParams.update({
        "svg.hashsalt": SVG_SALT,
        "svg.fonttype": "none",
        "figure.figsize": (5.0, 3.5),
        "font.size": 10,
        "axes.grid": True,
        "grid.linestyle": ":",
    })


def _save(fig: Figure, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    logger.info(f"wrote {path}")
    return path


def _make_axes(title: str, xlabel: str, ylabel: str):
    rcsetup()
    fig = Figure()
    ax = fig.add_subplot(1, 1, 1)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_axisbelow(True)
    return fig, ax


def histogram_svg(path: str, values: np.ndarray, bins: int = 40, range_: Optional[Tuple[float, float]] = None,
                  title: str = "", xlabel: str = "", reference: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> str:
    """Density histogram of `values`, optionally overlaid with a reference curve (x, y)."""
    fig, ax = _make_axes(title, xlabel, "density")
    ax.hist(np.asarray(values, dtype=float), bins=bins, range=range_, density=True,
            color="0.75", edgecolor="0.35", linewidth=0.5)
    if reference is not None:
        ax.plot(reference[0], reference[1], color="C3", linewidth=1.2)
    return _save(fig, path)


def curves_svg(path: str, x: np.ndarray, curves: Sequence[Tuple[str, np.ndarray]], title: str = "",
               xlabel: str = "", ylabel: str = "") -> str:
    """Polylines sharing the x grid, one legend entry per curve."""
    fig, ax = _make_axes(title, xlabel, ylabel)
    for label, y in curves:
        ax.plot(x, y, linewidth=1.2, label=label)
    if curves:
        ax.legend(frameon=False)
    return _save(fig, path)
