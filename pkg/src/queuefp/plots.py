"""SVG figures for the command-line tool (convenience output only)."""

from __future__ import annotations

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed ids and no timestamp, so reruns write identical files
matplotlib.rcParams["svg.hashsalt"] = "queuefp"
_META = {"Date": None, "Creator": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def profile_plot(profile, path) -> None:
    b = np.arange(1, profile.n_bins + 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(b, profile.vbar, "o", ms=3, label="mean volume")
    if profile.fit is not None:
        ax.plot(b, profile.fit(b, profile.n_bins), "-", label=f"fit (rmse {profile.fit.rmse:.3g})")
    ax.set_xlabel("bin")
    ax.set_ylabel("V̄")
    ax.legend()
    _save(fig, path)


def grid1d_plot(grid, path, label: str, truth=None) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ok = grid.defined
    x = grid.centers[ok]
    if grid.se is not None:
        ax.errorbar(x, grid.values[ok], yerr=grid.se[ok], fmt="o", ms=3, label=label)
    else:
        ax.plot(x, grid.values[ok], "o", ms=3, label=label)
    if truth is not None:
        xs = np.linspace(grid.edges[0], grid.edges[-1], 200)
        ax.plot(xs, truth(xs), "-", label="reference")
    ax.axhline(0.0, color="0.7", lw=0.8)
    ax.set_xlabel("x")
    ax.legend()
    _save(fig, path)


def stationary_plot(x, density, path, empirical=None, label: str = "solver") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    if empirical is not None:
        ok = empirical.defined
        ax.plot(empirical.centers[ok], empirical.values[ok], "o", ms=3, label="empirical")
    ax.plot(x, density, "-", label=label)
    ax.set_xlabel("x")
    ax.set_ylabel("density")
    ax.legend()
    _save(fig, path)


def field_plot(grid, path, title: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 4.5))
    v = np.ma.masked_invalid(grid.values)
    m = ax.pcolormesh(grid.x_edges, grid.y_edges, v.T, shading="flat")
    fig.colorbar(m, ax=ax)
    ax.set_xlabel("x (bid)")
    ax.set_ylabel("y (ask)")
    ax.set_title(title)
    _save(fig, path)


def quiver_plot(fx, fy, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    X, Y = np.meshgrid(fx.x_centers, fx.y_centers, indexing="ij")
    ok = fx.defined & fy.defined
    ax.quiver(X[ok], Y[ok], fx.values[ok], fy.values[ok], angles="xy")
    ax.set_xlabel("x (bid)")
    ax.set_ylabel("y (ask)")
    ax.set_aspect("equal")
    _save(fig, path)
