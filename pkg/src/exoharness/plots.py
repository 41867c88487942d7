"""Static SVG figures; byte-stable for identical inputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .model import INTERFACES, LEG_JOINTS  # noqa: E402
from .simulation import WRENCH_COMPONENTS, tracking_series  # noqa: E402

plt.rcParams["svg.hashsalt"] = "exoharness"
plt.rcParams["svg.fonttype"] = "none"


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def plot_wrenches(trace, path) -> None:
    fig, axes = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    for f, iface in enumerate(INTERFACES):
        k = trace.interfaces.index(iface)
        axes[0].plot(trace.times, np.linalg.norm(trace.wrench[:, k, 3:], axis=1), label=iface, lw=1)
        axes[1].plot(trace.times, np.linalg.norm(trace.wrench[:, k, :3], axis=1), label=iface, lw=1)
    axes[0].set_ylabel("|force| [N]")
    axes[1].set_ylabel("|torque| [N m]")
    axes[1].set_xlabel("time [s]")
    axes[0].legend(fontsize=7, ncol=3)
    _save(fig, path)


def plot_tracking(trace, path) -> None:
    diff = np.degrees(tracking_series(trace)[trace.retained])
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.boxplot([diff[:, k] for k in range(diff.shape[1])])
    ax.set_xticks(range(1, len(LEG_JOINTS) + 1), LEG_JOINTS)
    ax.set_ylabel("exoskeleton - human [deg]")
    _save(fig, path)


def plot_comparison(rows, path) -> None:
    """Grouped bars of per-component wrench RMS, one panel per interface."""
    fig, axes = plt.subplots(2, 3, figsize=(11, 6), sharey=False)
    width = 0.8 / max(len(rows), 1)
    x = np.arange(len(WRENCH_COMPONENTS))
    for ax, iface in zip(axes.ravel(), INTERFACES):
        for r, row in enumerate(rows):
            vals = row["wrench_rms"].get(iface, [0.0] * 6)
            ax.bar(x + r * width, vals, width, label=row["config"])
        ax.set_title(iface, fontsize=9)
        ax.set_xticks(x + 0.4 - width / 2, WRENCH_COMPONENTS, fontsize=7)
    axes[0, 0].legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)
