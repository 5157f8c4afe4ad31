"""Binned estimate containers."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


def uniform_edges(lo: float, hi: float, n: int) -> np.ndarray:
    if not hi > lo or n < 1:
        raise ConfigError(f"bad grid [{lo}, {hi}] with {n} bins")
    return np.linspace(lo, hi, n + 1)


def check_edges(edges) -> np.ndarray:
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ConfigError("grid edges must be strictly increasing with at least one bin")
    return edges


def bin_index(edges: np.ndarray, x) -> tuple[np.ndarray, np.ndarray]:
    """Bin of each ``x``; values beyond the last edge go to the last bin.

    Returns ``(index, overflow)``.  Values below the first edge are clamped
    into the first bin.
    """
    x = np.asarray(x, dtype=float)
    k = len(edges) - 1
    idx = np.searchsorted(edges, x, side="right") - 1
    overflow = x >= edges[-1]
    return np.clip(idx, 0, k - 1), overflow


def _jsonable(a) -> list:
    a = np.asarray(a, dtype=float)
    if a.ndim > 1:
        return [_jsonable(r) for r in a]
    return [None if not np.isfinite(v) else float(v) for v in a]


def _from_jsonable(a) -> np.ndarray:
    return np.array(a, dtype=float)  # None -> nan


@dataclass(frozen=True)
class Grid1D:
    edges: np.ndarray
    values: np.ndarray
    counts: np.ndarray
    se: np.ndarray | None = field(default=None, compare=False)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def defined(self) -> np.ndarray:
        return np.isfinite(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def with_values(self, values, se=None) -> Grid1D:
        return Grid1D(self.edges, np.asarray(values, dtype=float), self.counts, se)

    def __call__(self, x) -> np.ndarray:
        """Linear interpolation between defined bin centers, flat beyond."""
        ok = self.defined
        if not np.any(ok):
            raise ConfigError("grid has no defined values")
        return np.interp(np.asarray(x, dtype=float), self.centers[ok], self.values[ok])

    def integral(self) -> float:
        ok = self.defined
        return float(np.sum(self.values[ok] * self.widths[ok]))

    def to_json(self) -> dict:
        out = {"edges": _jsonable(self.edges), "values": _jsonable(self.values),
               "counts": [int(c) for c in self.counts]}
        if self.se is not None:
            out["se"] = _jsonable(self.se)
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> Grid1D:
        se = _from_jsonable(obj["se"]) if obj.get("se") is not None else None
        return cls(check_edges(obj["edges"]), _from_jsonable(obj["values"]),
                   np.asarray(obj["counts"], dtype=np.int64), se)


@dataclass(frozen=True)
class Grid2D:
    x_edges: np.ndarray
    y_edges: np.ndarray
    values: np.ndarray
    counts: np.ndarray
    se: np.ndarray | None = field(default=None, compare=False)
    filled: np.ndarray | None = field(default=None, compare=False)

    @property
    def x_centers(self) -> np.ndarray:
        return 0.5 * (self.x_edges[1:] + self.x_edges[:-1])

    @property
    def y_centers(self) -> np.ndarray:
        return 0.5 * (self.y_edges[1:] + self.y_edges[:-1])

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def defined(self) -> np.ndarray:
        return np.isfinite(self.values)

    @property
    def cell_area(self) -> np.ndarray:
        return np.outer(np.diff(self.x_edges), np.diff(self.y_edges))

    def with_values(self, values, se=None) -> Grid2D:
        return Grid2D(self.x_edges, self.y_edges, np.asarray(values, dtype=float), self.counts, se)

    def transposed(self) -> Grid2D:
        """Swap the roles of the two axes."""
        return Grid2D(self.y_edges, self.x_edges, self.values.T.copy(), self.counts.T.copy(),
                      None if self.se is None else self.se.T.copy())

    def infilled(self) -> Grid2D:
        """Nearest-defined-neighbour infill; ``filled`` marks the filled cells."""
        from scipy import ndimage

        ok = self.defined
        if not np.any(ok):
            raise ConfigError("grid has no defined values")
        if np.all(ok):
            return Grid2D(self.x_edges, self.y_edges, self.values, self.counts, self.se,
                          np.zeros(self.shape, dtype=bool))
        _, (ii, jj) = ndimage.distance_transform_edt(~ok, return_indices=True)
        return Grid2D(self.x_edges, self.y_edges, self.values[ii, jj], self.counts, self.se, ~ok)

    def __call__(self, x, y) -> np.ndarray:
        """Bilinear interpolation between cell centers (after infill), flat beyond."""
        from scipy.interpolate import RegularGridInterpolator

        g = self.infilled() if not np.all(self.defined) else self
        xc, yc = self.x_centers, self.y_centers
        interp = RegularGridInterpolator((xc, yc), g.values, bounds_error=False, fill_value=None)
        x = np.clip(np.asarray(x, dtype=float), xc[0], xc[-1])
        y = np.clip(np.asarray(y, dtype=float), yc[0], yc[-1])
        x, y = np.broadcast_arrays(x, y)
        return interp(np.stack([x.ravel(), y.ravel()], axis=-1)).reshape(x.shape)

    def to_json(self) -> dict:
        out = {"x_edges": _jsonable(self.x_edges), "y_edges": _jsonable(self.y_edges),
               "values": _jsonable(self.values), "counts": np.asarray(self.counts).astype(int).tolist()}
        if self.se is not None:
            out["se"] = _jsonable(self.se)
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> Grid2D:
        se = _from_jsonable(obj["se"]) if obj.get("se") is not None else None
        return cls(check_edges(obj["x_edges"]), check_edges(obj["y_edges"]),
                   _from_jsonable(obj["values"]), np.asarray(obj["counts"], dtype=np.int64), se)


def write_grid_csv(grid, path) -> None:
    """Rows of (center, value, count) for 1D; a value matrix for 2D."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if isinstance(grid, Grid1D):
            w.writerow(["x_lo", "x_hi", "value", "count"])
            for lo, hi, v, c in zip(grid.edges[:-1], grid.edges[1:], grid.values, grid.counts):
                w.writerow([lo, hi, "" if not np.isfinite(v) else v, int(c)])
        else:
            w.writerow(["x\\y"] + [f"{c:.6g}" for c in grid.y_centers])
            for xc, row in zip(grid.x_centers, grid.values):
                w.writerow([f"{xc:.6g}"] + ["" if not np.isfinite(v) else v for v in row])
