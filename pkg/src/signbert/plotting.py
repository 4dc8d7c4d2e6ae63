"""
Static plots of training logs and keypoint accuracy curves
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .records import read_metric_log  # noqa: E402

logger = logging.getLogger(__name__)

# keys in a metric log record that are not series
NON_SERIES = ("time", "phase", "epoch", "step")


def series_from_log(records: Sequence[Dict]) -> Dict[str, List[float]]:
    """Collect every numeric field into a per-epoch series"""
    series: Dict[str, List[float]] = {}
    for record in records:
        for key, value in record.items():
            if key in NON_SERIES or isinstance(value, bool) or not isinstance(value, (int, float)):
                continue
            series.setdefault(key, []).append(float(value))
    return series


def plot_metric_log(log_path: Union[str, Path], out_path: Union[str, Path],
                    keys: Optional[Sequence[str]] = None) -> Path:
    """
    Loss curves on the left, validation metrics on the right.

    Raises ValueError when the log holds no plottable series.
    """
    records = read_metric_log(log_path)
    series = series_from_log(records)
    if keys:
        series = {k: v for k, v in series.items() if k in keys}
    if not series:
        raise ValueError(f"no numeric series to plot in {log_path}")

    losses = {k: v for k, v in series.items() if k in ("loss", "rec", "reg")}
    others = {k: v for k, v in series.items() if k not in losses and k != "lr"}
    panels = [p for p in (losses, others) if p]

    fig, axes = plt.subplots(1, len(panels), figsize=(7 * len(panels), 5), squeeze=False)
    for ax, panel, title in zip(axes[0], panels, ("Loss", "Metrics") if losses else ("Metrics",)):
        for name, values in sorted(panel.items()):
            ax.plot(np.arange(len(values)), values, label=name)
        ax.set_xlabel("epoch")
        ax.set_title(title)
        ax.grid(True)
        ax.legend()
    phase = records[0].get("phase", "") if records else ""
    if phase:
        fig.suptitle(phase)

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    logger.info(f"Wrote plot {out_path}")
    return out_path


def plot_pck_curves(thresholds: Sequence[float], curves: Dict[str, Sequence[float]],
                    out_path: Union[str, Path], title: str = "PCK vs threshold") -> Path:
    """One line per named curve (e.g. input and output under each mask mode)"""
    fig, ax = plt.subplots(figsize=(7, 5))
    for name, values in curves.items():
        ax.plot(thresholds, values, marker="o", label=name)
    ax.set_xlabel("threshold (px)")
    ax.set_ylabel("PCK (%)")
    ax.set_ylim(0, 100)
    ax.set_title(title)
    ax.grid(True)
    ax.legend()

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    logger.info(f"Wrote plot {out_path}")
    return out_path
