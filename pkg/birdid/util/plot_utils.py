"""
Plotting utilities to visualize training histories and the experiment grid.
"""
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402


def plot_history(histories, path, title="Validation MAP"):
    '''
    Validation MAP per epoch for several trained models.

    :: Inputs - histories = mapping of label -> TrainHistory
              - path = PNG file to write

    :: Outputs - one line per model, the best epoch marked with a dot.
    '''
    if not histories:
        raise ValueError("plot_history needs at least one history")
    fig, ax = plt.subplots(figsize=(8, 5))
    for name, history in histories.items():
        line, = ax.plot(history.epochs, history.val_map, label=name)
        ax.plot([history.best_epoch], [history.best_map], "o", color=line.get_color())
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation MAP")
    ax.set_title(title)
    ax.legend()
    ax.grid(True, alpha=0.3)
    _save(fig, path)


def plot_grid(summary: pd.DataFrame, path, title="Test MAP by model and duration"):
    """Grouped bars: one group per duration, one bar per (model, channel)."""
    if summary.empty:
        raise ValueError("plot_grid needs a non-empty summary")
    durations = sorted(summary["duration_ms"].unique())
    variants = sorted({(m, c) for m, c in zip(summary["model"], summary["channel"])})
    width = 0.8 / len(variants)
    fig, ax = plt.subplots(figsize=(max(8, 1.5 * len(durations) * len(variants) / 3), 5))
    x = np.arange(len(durations))
    for i, (model, channel) in enumerate(variants):
        rows = summary[(summary["model"] == model) & (summary["channel"] == channel)]
        by_duration = dict(zip(rows["duration_ms"], rows["map"]))
        values = [by_duration.get(d, np.nan) for d in durations]
        ax.bar(x + (i - (len(variants) - 1) / 2) * width, values, width, label="{} {}".format(model, channel))
    ax.set_xticks(x)
    ax.set_xticklabels(["{} ms".format(d) for d in durations])
    ax.set_ylabel("test MAP")
    ax.set_ylim(0, 1.05)
    ax.set_title(title)
    ax.legend(fontsize="small", ncol=2)
    _save(fig, path)


def _save(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
