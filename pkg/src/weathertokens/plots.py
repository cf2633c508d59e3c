"""SVG line plots for horizon profiles and forecast traces."""

from __future__ import annotations

import io
from typing import Mapping

import numpy as np


def line_plot_svg(x, series: Mapping[str, np.ndarray], title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    """Render named y-series against ``x`` and return the SVG document as text."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "weathertokens", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(7, 3.5))
        for name, y in series.items():
            ax.plot(x, np.asarray(y), marker="o", markersize=3, linewidth=1.2, label=name)
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
        ax.legend()
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    return buf.getvalue()
