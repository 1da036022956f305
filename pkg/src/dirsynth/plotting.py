"""Figures for the atlas-count sweep.

Rendering uses the Agg backend with a fixed size, DPI and no software
metadata, so reruns with the same numbers produce identical PNG bytes.
"""

from __future__ import annotations

import io as _io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import _atomic_write_bytes  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 100,
}


def _mean_sd(rows, method, metric, counts):
    means, sds = [], []
    for k in counts:
        vals = [r[metric] for r in rows if r["method"] == method and r["atlas_count"] == k and np.isfinite(r[metric])]
        means.append(np.mean(vals) if vals else np.nan)
        sds.append(np.std(vals) if vals else np.nan)
    return np.array(means), np.array(sds)


def sweep_figure(rows):
    """Mean masked PSNR and SSIM against atlas count, one line per fusion method.

    ``rows`` are dicts with ``method``, ``atlas_count``, ``psnr`` and ``ssim``.
    Shaded bands show one standard deviation across seeds.
    """
    counts = sorted({int(r["atlas_count"]) for r in rows})
    methods = sorted({r["method"] for r in rows})
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
        for ax, metric, label in zip(axes, ("psnr", "ssim"), ("PSNR (dB)", "SSIM")):
            for method in methods:
                mean, sd = _mean_sd(rows, method, metric, counts)
                line, = ax.plot(counts, mean, marker="o", ms=3, label=method)
                ax.fill_between(counts, mean - sd, mean + sd, color=line.get_color(), alpha=0.15, lw=0)
            ax.set_xlabel("number of atlases")
            ax.set_ylabel(label)
            ax.set_xticks(counts)
        axes[0].legend(frameon=False)
        fig.tight_layout()
    return fig


def render_png(fig) -> bytes:
    buf = _io.BytesIO()
    fig.savefig(buf, format="png", metadata={"Software": None})
    plt.close(fig)
    return buf.getvalue()


def save_sweep_figure(rows, path):
    """Render :func:`sweep_figure` to ``path`` atomically."""
    _atomic_write_bytes(path, render_png(sweep_figure(rows)))
