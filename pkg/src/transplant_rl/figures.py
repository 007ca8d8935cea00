"""Learning-curve figures: per transfer mode, rows are k (largest first), columns child envs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .harness import MODE_WORDS  # noqa: E402

BASELINE_COLOR = "black"
PARENT_COLORS = ("tab:blue", "tab:red", "tab:green", "tab:orange", "tab:purple")

RC = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _panel(ax, groups, k, mode, colors):
    for g in groups:
        first = g.first
        is_baseline = g.series == "baseline"
        if not is_baseline and (first.k != k or first.mode != mode):
            continue
        steps, mean, std = g.curve()
        color = BASELINE_COLOR if is_baseline else colors[first.parent_env]
        label = "scratch (parent)" if is_baseline else g.series
        ax.plot(steps, mean, color=color, lw=1.4 if is_baseline else 1.1, label=label)
        ax.fill_between(steps, mean - std, mean + std, color=color, alpha=0.15, lw=0)


def plot_transfer_figures(groups: dict, stem) -> dict[str, Path]:
    """One PNG per mode present in ``groups`` (the output of report.group_records)."""
    envs = sorted(groups)
    parents = sorted({g.first.parent_env for gs in groups.values() for g in gs})
    colors = {p: PARENT_COLORS[i % len(PARENT_COLORS)] for i, p in enumerate(parents)}
    modes = [m for m in MODE_WORDS if any(g.first.mode == m for gs in groups.values() for g in gs)]
    ks = sorted({g.first.k for gs in groups.values() for g in gs if g.first.k is not None}, reverse=True)
    written = {}
    for mode in modes:
        with plt.rc_context(RC):
            fig, axes = plt.subplots(len(ks), len(envs), figsize=(3.2 * len(envs), 2.6 * len(ks)),
                                     squeeze=False, sharex="col")
            for i, k in enumerate(ks):
                for j, env in enumerate(envs):
                    ax = axes[i, j]
                    _panel(ax, groups[env], k, mode, colors)
                    ax.set_title(f"{env}: {k} layers {MODE_WORDS[mode]}")
                    if i == len(ks) - 1:
                        ax.set_xlabel("environment steps")
                    if j == 0:
                        ax.set_ylabel("eval return")
                    if ax.has_data():
                        ax.legend(frameon=False, loc="lower right")
            fig.tight_layout()
            path = Path(f"{stem}_{MODE_WORDS[mode]}.png")
            fig.savefig(path, dpi=120)
            plt.close(fig)
        written[mode] = path
    return written
