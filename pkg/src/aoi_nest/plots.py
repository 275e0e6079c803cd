"""Matplotlib rendering for report outputs (PNG next to each CSV)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["plot_timeseries", "plot_sweep", "plot_dual_curve", "plot_policy_bars"]

_RC = {
    "figure.figsize": (6.4, 4.0),
    "font.size": 9,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, path: str) -> str:
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_timeseries(
    mean_age: np.ndarray,
    nu_series: np.ndarray | None,
    nu_stride: int,
    path: str,
    nu_ref: np.ndarray | None = None,
) -> str:
    """Mean age and cost trajectories over the episode."""
    with plt.rc_context(_RC):
        n_panels = 2 if nu_series is not None else 1
        fig, axes = plt.subplots(n_panels, 1, sharex=True, figsize=(6.4, 2.6 * n_panels))
        axes = np.atleast_1d(axes)
        t = np.arange(1, len(mean_age) + 1)
        axes[0].plot(t, mean_age, lw=0.8)
        axes[0].set_ylabel("mean age")
        if nu_series is not None:
            ts = np.arange(nu_series.shape[0]) * nu_stride + 1
            show = min(8, nu_series.shape[1])
            for m in range(show):
                axes[1].plot(ts, nu_series[:, m], lw=0.8, label=f"server {m+1}")
            if nu_ref is not None:
                axes[1].axhline(float(np.mean(nu_ref)), ls="--", c="k", lw=0.8, label="relaxed")
            axes[1].set_ylabel("activating cost")
            axes[1].legend(ncol=4)
        axes[-1].set_xlabel("slot")
        return _save(fig, path)


def plot_sweep(rows, baselines: dict[int, float], path: str) -> str:
    """Normalized age versus system scale per policy, with the bound."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        policies = sorted({r.policy for r in rows})
        for policy in policies:
            pts = sorted((r.scale, r.mean_aoi, r.stderr) for r in rows if r.policy == policy)
            xs = [p[0] for p in pts]
            ys = [p[1] for p in pts]
            es = [p[2] for p in pts]
            ax.errorbar(xs, ys, yerr=es, marker="o", ms=3, lw=1, capsize=2, label=policy)
        scales = sorted(baselines)
        ax.plot(
            scales,
            [baselines[s] for s in scales],
            "k--",
            lw=1,
            label="lower bound",
        )
        ax.set_xlabel("scale r")
        ax.set_ylabel("normalized age")
        ax.set_xscale("log")
        ax.legend()
        return _save(fig, path)


def plot_dual_curve(curve, path: str) -> str:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        ax.plot(np.arange(1, len(curve) + 1), curve, lw=1)
        ax.set_xlabel("ascent iteration")
        ax.set_ylabel("dual objective")
        return _save(fig, path)


def plot_policy_bars(stats: dict[str, tuple[float, float]], bound: float, path: str) -> str:
    """Across-seed policy means with standard errors and the bound line."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        names = list(stats)
        means = [stats[n][0] for n in names]
        errs = [stats[n][1] for n in names]
        ax.bar(names, means, yerr=errs, capsize=3, color="tab:blue", alpha=0.8)
        ax.axhline(bound, ls="--", c="k", lw=1, label="lower bound")
        ax.set_ylabel("normalized age")
        ax.legend()
        return _save(fig, path)
