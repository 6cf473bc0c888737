"""Static figures written next to the CSV reports.

Every function takes already computed report data, draws one figure with
the non-interactive Agg backend and saves it to ``path`` (PNG).
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def convergence(logs, path, title: str = "") -> Path:
    """Test and train RMSE of energies and forces against the epoch."""
    epochs = np.array([e.epoch for e in logs])
    with plt.rc_context(STYLE):
        fig, (ax_e, ax_f) = plt.subplots(1, 2, figsize=(8.0, 3.4))
        for attr, style, label in (("rmse_e_test", "-", "test"), ("rmse_e_train", "--", "train")):
            ax_e.plot(epochs, [getattr(e, attr) for e in logs], style, label=label)
        for attr, style, label in (("rmse_f_test", "-", "test"), ("rmse_f_train", "--", "train")):
            ax_f.plot(epochs, [getattr(e, attr) for e in logs], style, label=label)
        ax_e.set(xlabel="epoch", ylabel="RMSE(E) / meV atom$^{-1}$", yscale="log")
        ax_f.set(xlabel="epoch", ylabel="RMSE(F) / meV Å$^{-1}$", yscale="log")
        ax_e.legend()
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def active_set(logs, path) -> Path:
    """Number of active training conformations and exclusions per epoch."""
    epochs = np.array([e.epoch for e in logs])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(epochs, [e.n_active for e in logs], label="active")
        ax.plot(epochs, [e.n_excluded_redundant for e in logs], label="excluded (redundant)")
        ax.plot(epochs, [e.n_excluded_inconsistent for e in logs], label="excluded (inconsistent)")
        ax.set(xlabel="epoch", ylabel="conformations")
        ax.legend()
        return _save(fig, path)


def optimizer_comparison(curves: dict, path) -> Path:
    """Median test RMSE(E) per optimizer with the inter-seed range shaded.

    ``curves`` maps optimizer name to ``(epochs, rmse)`` with ``rmse`` of
    shape (n_seeds, n_epochs).
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, (epochs, values) in curves.items():
            values = np.asarray(values, dtype=float)
            values = np.where(np.isfinite(values), values, np.nan)
            line, = ax.plot(epochs, np.nanmedian(values, axis=0), label=name)
            ax.fill_between(epochs, np.nanmin(values, axis=0), np.nanmax(values, axis=0),
                            color=line.get_color(), alpha=0.2, linewidth=0)
        ax.set(xlabel="epoch", ylabel="test RMSE(E) / meV atom$^{-1}$", yscale="log")
        ax.legend()
        return _save(fig, path)


def scan_surface(x, y, energy, path, xlabel="r_ab / Å", ylabel="r_cd / Å",
                 uncertainty=None) -> Path:
    """Energy (relative to the grid minimum) along one or two distances."""
    x = np.asarray(x)
    energy = np.asarray(energy)
    with plt.rc_context(STYLE):
        if y is None or len(np.unique(y)) == 1:
            fig, ax = plt.subplots()
            ax.plot(x, energy, "-o", markersize=3)
            if uncertainty is not None:
                ax.fill_between(x, energy - uncertainty, energy + uncertainty, alpha=0.25, linewidth=0)
            ax.set(xlabel=xlabel, ylabel="E - E_min / eV")
        else:
            fig, ax = plt.subplots()
            xs, ys = np.unique(x), np.unique(y)
            grid = energy.reshape(len(xs), len(ys)).T
            cs = ax.contourf(xs, ys, grid, levels=20, cmap="viridis")
            fig.colorbar(cs, ax=ax, label="E - E_min / eV")
            ax.set(xlabel=xlabel, ylabel=ylabel)
        return _save(fig, path)


def uncertainty_vs_error(uncertainty, error, path, threshold=None, unit="meV atom$^{-1}$") -> Path:
    """Predicted uncertainty against absolute error; points below the diagonal are covered."""
    u = np.asarray(uncertainty)
    err = np.abs(np.asarray(error))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 4.2))
        ax.scatter(u, err, s=6, alpha=0.6)
        top = max(float(u.max(initial=0.0)), float(err.max(initial=0.0)), 1e-12) * 1.05
        ax.plot([0, top], [0, top], "k--", linewidth=0.8)
        if threshold is not None:
            ax.axvline(threshold, color="0.5", linewidth=0.8)
        ax.set(xlim=(0, top), ylim=(0, top), xlabel=f"uncertainty / {unit}",
               ylabel=f"|error| / {unit}")
        return _save(fig, path)
