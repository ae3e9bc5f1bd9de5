"""PNG figures for experiment reports (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_experiment"]

_META = {"Software": None}  # keep PNG bytes independent of the matplotlib version


def _bars(ax, labels, series: dict[str, list[float]], log: bool = False):
    x = np.arange(len(labels))
    width = 0.8 / max(1, len(series))
    for i, (name, ys) in enumerate(series.items()):
        ax.bar(x + (i - (len(series) - 1) / 2) * width, ys, width, label=name)
    step = max(1, len(labels) // 25)
    ax.set_xticks(x[::step])
    ax.set_xticklabels(labels[::step], rotation=90, fontsize=6)
    if log:
        ax.set_yscale("symlog", linthresh=1)
    ax.legend(fontsize=7)


def _instrument(rows, ax):
    labels = [r["Programs"] for r in rows]
    _bars(ax, labels, {"Orig_Page": [r["Orig_Page"] for r in rows],
                       "RSB_Page": [r["RSB_Page"] for r in rows]})
    ax.set_ylabel("code pages")


def _attack(rows, ax):
    settings: dict[str, list[int]] = {}
    for r in rows:
        key = f"{r['Binary']}\n{r['Interval (ticks)']}"
        settings.setdefault(key, []).append(r["# of Gadgets"])
    keys = list(settings)
    ax.boxplot([settings[k] for k in keys], labels=keys)
    ax.set_ylabel("gadgets found by the attacker")
    ax.tick_params(axis="x", labelsize=7)


def _census(rows, ax):
    labels = [r["Programs"] for r in rows]
    _bars(ax, labels, {"original": [r["Original #Gadgets"] for r in rows],
                       "instrumented": [r["Instrumented #Gadgets"] for r in rows]})
    ax.set_ylabel("gadgets (k-suffixes at every offset)")


def _runtime(rows, ax):
    labels = [f"{r['Programs']}/{r['Seed']}" for r in rows]
    _bars(ax, labels, {"executions": [r["#RSI unit executions"] for r in rows],
                       "unique units": [r["#unique RSI units involved"] for r in rows]}, log=True)
    ax.set_ylabel("RSI units")


def _optimization(rows, ax):
    labels = [r["Programs"] for r in rows]
    _bars(ax, labels, {"before": [r["Before # of RSI unit executions"] for r in rows],
                       "after": [r["After # of RSI unit executions"] for r in rows]}, log=True)
    ax.set_ylabel("RSI unit executions")


_PLOTS = {
    "instrument_stats": (_instrument, "Code pages before and after instrumentation"),
    "attack_eval": (_attack, "Gadgets harvested per setting"),
    "gadget_census": (_census, "Static gadget census"),
    "runtime_stats": (_runtime, "RSI unit executions"),
    "optimization_eval": (_optimization, "RSI unit executions with and without optimization"),
}


def plot_experiment(experiment: str, rows: list[dict], out_dir: Path) -> Path:
    fn, title = _PLOTS[experiment]
    fig, ax = plt.subplots(figsize=(10, 4.5))
    if rows:
        fn(rows, ax)
    ax.set_title(title)
    fig.tight_layout()
    path = Path(out_dir) / f"{experiment}.png"
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
    return path
