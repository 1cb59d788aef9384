"""Figures written next to the CSV outputs of ``eval`` and ``run``."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "epsilon": {"color": "tab:cyan", "lw": 1.2},
    "epsilon_baseline": {"color": "0.3", "lw": 0.8},
}


def plot_epsilon(path, times, curves, labels=None, log_scale=True):
    """ε(t) curves, one line per entry of ``curves``."""
    labels = labels or {}
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    for name, values in curves.items():
        values = np.asarray(values)
        t, v = np.asarray(times), values
        if log_scale:
            keep = v > 0
            t, v = t[keep], v[keep]
        ax.plot(t, v, label=labels.get(name, name), **_STYLE.get(name, {}))
    if log_scale:
        ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.set_ylabel(r"$\epsilon(t)$")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_run(path, run, trajectory, components=None):
    """Truth, observations and filter means of one trajectory of a run file."""
    sel = run["trajectory"] == trajectory
    t = run["time"][sel]
    d = run["truth"].shape[1]
    components = list(range(min(d, 3))) if components is None else list(components)
    fig, axes = plt.subplots(len(components), 1, figsize=(6.0, 1.8 * len(components)), sharex=True, squeeze=False)
    for ax, i in zip(axes[:, 0], components):
        ax.plot(t, run["truth"][sel, i], "--", color="tab:cyan", lw=1.0, label="truth")
        ax.plot(t, run["analysis_mean"][sel, i], color="0.3", lw=0.8, label="analysis mean")
        if "corrected_mean" in run:
            ax.plot(t, run["corrected_mean"][sel, i], color="tab:pink", lw=1.2, label="corrected mean")
        ax.set_ylabel(f"x[{i}]")
    axes[0, 0].legend(frameon=False, fontsize=8, ncol=3)
    axes[-1, 0].set_xlabel("t")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
