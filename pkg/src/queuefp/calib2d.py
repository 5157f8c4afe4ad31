"""Two-dimensional calibration on the (bid, ask) plane.

Time is counted in events of either side.  An event touches the bid or
the ask with (empirically) equal odds, so per event the bid moves by
``dv`` half of the time: the bid drift is ``½ E[dv | bid change]`` and
its diffusion ``¼ E[dv² | bid change]``; the ask components are defined
the same way.  Jump frequencies and replacement laws are pooled over the
two sides in (own, opposite) coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CalibrationError, ConfigError
from .events import Kind, RescaledEvents, Side
from .exactsum import ExactSum
from .grids import Grid2D, bin_index, check_edges, uniform_edges
from .potentials import DriftPotentials, RidgeProfile, decompose_drift, ridge_diagnostic

DEFAULT_EDGES_2D = uniform_edges(0.0, 4.0, 32)

__all__ = [
    "Accumulator2D", "Calib2D", "DEFAULT_EDGES_2D", "DriftPotentials", "RidgeProfile",
    "calibrate_2d", "decompose_drift", "estimate_2d", "ridge_diagnostic",
]


class _CellSums:
    """Exact per-cell power sums of one or two variables."""

    def __init__(self, n_cells: int, names: tuple[str, ...]):
        self.names = names
        self.sums = {k: ExactSum(n_cells) for k in names}

    def add(self, cells, **vals) -> None:
        for k in self.names:
            self.sums[k].add(cells, vals[k])

    def merge(self, other: _CellSums) -> _CellSums:
        out = _CellSums(0, ())
        out.names = self.names
        out.sums = {k: self.sums[k].merge(other.sums[k]) for k in self.names}
        return out

    def total(self, k: str) -> np.ndarray:
        return self.sums[k].total()


class Accumulator2D:
    """Mergeable sufficient statistics for ``Calib2D``.

    ``window`` is the number of consecutive events grouped when measuring
    the bid/ask cross-covariance; windows never straddle a batch or a day.
    """

    def __init__(self, x_edges=None, y_edges=None, density_edges=None, window: int = 2):
        self.x_edges = check_edges(DEFAULT_EDGES_2D if x_edges is None else x_edges)
        self.y_edges = check_edges(self.x_edges if y_edges is None else y_edges)
        self.density_edges = check_edges(self.x_edges if density_edges is None else density_edges)
        if window < 2:
            raise ConfigError("cross-covariance window must hold at least 2 events")
        self.window = int(window)
        kx, ky = len(self.x_edges) - 1, len(self.y_edges) - 1
        self.shape = (kx, ky)
        n = kx * ky
        # per side, volume-change moments in (x, y) cells
        self.n_vc = np.zeros((2, n), dtype=np.int64)
        self.moments = [_CellSums(n, ("s1", "s2", "s3", "s4")) for _ in (0, 1)]
        # own-side event counts by kind in (own, opp) cells
        self.kind_counts = np.zeros((len(Kind), n), dtype=np.int64)
        self.refills = 0
        self.recedes = 0
        nd = len(self.density_edges) - 1
        self.hist_plus = np.zeros(nd * nd, dtype=np.int64)
        self.hist_minus = np.zeros(nd * nd, dtype=np.int64)
        self.occupancy = np.zeros(n, dtype=np.int64)
        self.overflow = 0
        self.n_windows = np.zeros(n, dtype=np.int64)
        self.cross = _CellSums(n, ("a", "b", "ab", "a2", "b2", "ab2", "a2b", "ab_sq"))
        self.sides_seen = np.zeros(2, dtype=np.int64)

    def _cells(self, x, y):
        i, ox = bin_index(self.x_edges, x)
        j, oy = bin_index(self.y_edges, y)
        return i * self.shape[1] + j, ox | oy

    def _check_compatible(self, other: Accumulator2D) -> None:
        same = (np.array_equal(self.x_edges, other.x_edges) and np.array_equal(self.y_edges, other.y_edges)
                and np.array_equal(self.density_edges, other.density_edges) and self.window == other.window)
        if not same:
            raise ConfigError("cannot merge accumulators built on different grids")

    def add(self, ev: RescaledEvents) -> Accumulator2D:
        if len(ev) == 0:
            return self
        if np.any(~np.isfinite(ev.x)) or np.any(~np.isfinite(ev.y)):
            raise CalibrationError("events lack one side of the book; two-sided data required")
        n = self.shape[0] * self.shape[1]
        cell_xy, over = self._cells(ev.x, ev.y)
        self.overflow += int(np.count_nonzero(over))
        self.occupancy += np.bincount(cell_xy, minlength=n)
        self.sides_seen += np.bincount(ev.side, minlength=2)[:2]

        vc = ev.kind == Kind.VOLUME_CHANGE
        for s in (Side.BID, Side.ASK):
            sel = vc & (ev.side == s)
            c = cell_xy[sel]
            dv = ev.dv[sel]
            self.n_vc[s] += np.bincount(c, minlength=n)
            dv2 = dv * dv
            self.moments[s].add(c, s1=dv, s2=dv2, s3=dv2 * dv, s4=dv2 * dv2)

        own_cell, _ = self._cells(ev.own, ev.opp)
        for kind in Kind:
            self.kind_counts[kind] += np.bincount(own_cell[ev.kind == kind], minlength=n)
        self.refills += int(np.count_nonzero(ev.kind == Kind.DEPLETED_REFILL))
        self.recedes += int(np.count_nonzero(ev.kind == Kind.DEPLETED_RECEDE))

        nd = len(self.density_edges) - 1
        post_opp = ev.post_opp
        for sel, hist in (((ev.kind == Kind.OVERTAKEN) | (ev.kind == Kind.DEPLETED_REFILL), self.hist_plus),
                          (ev.kind == Kind.DEPLETED_RECEDE, self.hist_minus)):
            i, oi = bin_index(self.density_edges, ev.new[sel])
            j, oj = bin_index(self.density_edges, post_opp[sel])
            keep = ~(oi | oj)
            hist += np.bincount(i[keep] * nd + j[keep], minlength=nd * nd)
        self._add_windows(ev, cell_xy, over)
        return self

    def _add_windows(self, ev: RescaledEvents, cell_xy, over) -> None:
        """Bid/ask changes summed over consecutive event windows.

        A window counts when it contains no price change and at least one
        change on each side; it is filed under its starting (x, y).
        """
        w = self.window
        starts = []
        for day in np.unique(ev.day):
            idx = np.flatnonzero(ev.day == day)
            m = (idx.size // w) * w
            starts.append(idx[:m].reshape(-1, w))
        if not starts:
            return
        win = np.concatenate(starts)
        if win.size == 0:
            return
        kind = ev.kind[win]
        side = ev.side[win]
        dv = ev.dv[win]
        ok = np.all(kind == Kind.VOLUME_CHANGE, axis=1)
        ok &= np.any(side == Side.BID, axis=1) & np.any(side == Side.ASK, axis=1)
        ok &= ~over[win[:, 0]]
        a = np.sum(np.where(side == Side.BID, dv, 0.0), axis=1)[ok]
        b = np.sum(np.where(side == Side.ASK, dv, 0.0), axis=1)[ok]
        c = cell_xy[win[ok, 0]]
        k = self.shape[0] * self.shape[1]
        self.n_windows += np.bincount(c, minlength=k)
        ab = a * b
        self.cross.add(c, a=a, b=b, ab=ab, a2=a * a, b2=b * b, ab2=ab * b, a2b=ab * a, ab_sq=ab * ab)

    def merge(self, other: Accumulator2D) -> Accumulator2D:
        self._check_compatible(other)
        out = Accumulator2D(self.x_edges, self.y_edges, self.density_edges, self.window)
        out.n_vc = self.n_vc + other.n_vc
        out.moments = [self.moments[s].merge(other.moments[s]) for s in (0, 1)]
        out.kind_counts = self.kind_counts + other.kind_counts
        out.refills = self.refills + other.refills
        out.recedes = self.recedes + other.recedes
        out.hist_plus = self.hist_plus + other.hist_plus
        out.hist_minus = self.hist_minus + other.hist_minus
        out.occupancy = self.occupancy + other.occupancy
        out.overflow = self.overflow + other.overflow
        out.n_windows = self.n_windows + other.n_windows
        out.cross = self.cross.merge(other.cross)
        out.sides_seen = self.sides_seen + other.sides_seen
        return out

    @property
    def n_events(self) -> int:
        return int(self.occupancy.sum() + self.overflow)

    def finalize(self, min_count: int = 100, min_density_count: int = 100) -> Calib2D:
        if self.n_events == 0:
            raise CalibrationError("no events to calibrate")
        if np.any(self.sides_seen == 0):
            missing = "ask" if self.sides_seen[1] == 0 else "bid"
            raise CalibrationError(f"no {missing} events: two-dimensional calibration needs both sides")
        shape = self.shape
        xe, ye = self.x_edges, self.y_edges

        def grid(values, counts, se=None):
            r = lambda a: None if a is None else np.asarray(a, dtype=float).reshape(shape)
            return Grid2D(xe, ye, r(values), np.asarray(counts).reshape(shape), r(se))

        drift, diff = [], []
        with np.errstate(invalid="ignore", divide="ignore"):
            for s in (0, 1):
                nn = self.n_vc[s]
                ok = nn >= min_count
                m1, m2, m3, m4 = (self.moments[s].total(k) / nn for k in ("s1", "s2", "s3", "s4"))
                var1 = np.maximum(m2 - m1 * m1, 0.0)
                var2 = np.maximum(m4 - m2 * m2, 0.0)
                drift.append(grid(np.where(ok, 0.5 * m1, np.nan), nn, np.where(ok, 0.5 * np.sqrt(var1 / nn), np.nan)))
                diff.append(grid(np.where(ok, 0.25 * m2, np.nan), nn, np.where(ok, 0.25 * np.sqrt(var2 / nn), np.nan)))

            nw = self.n_windows
            okw = nw >= min_count
            t = {k: self.cross.total(k) / nw for k in self.cross.names}
            cov = t["ab"] - t["a"] * t["b"]
            # delta-method variance of the centered product
            ma, mb = t["a"], t["b"]
            e_z2 = (t["ab_sq"] - 2 * mb * t["a2b"] - 2 * ma * t["ab2"] + mb * mb * t["a2"]
                    + ma * ma * t["b2"] + 4 * ma * mb * t["ab"] - 3 * ma * ma * mb * mb)
            var_z = np.maximum(e_z2 - cov * cov, 0.0)
            rho = grid(np.where(okw, cov, np.nan), nw, np.where(okw, np.sqrt(var_z / nw), np.nan))

            n_all = self.kind_counts.sum(axis=0)
            ok_all = n_all >= min_count

            def freq(c):
                p = c / n_all
                return grid(np.where(ok_all, p, np.nan), n_all, np.where(ok_all, np.sqrt(p * (1 - p) / n_all), np.nan))

            pi0 = freq(self.kind_counts[Kind.VOLUME_CHANGE])
            qp = freq(self.kind_counts[Kind.OVERTAKEN])
            qm = freq(self.kind_counts[Kind.DEPLETED_RECEDE] + self.kind_counts[Kind.DEPLETED_REFILL])
            pst = grid(self.occupancy / (self.occupancy.sum() * np.outer(np.diff(xe), np.diff(ye)).ravel()),
                       self.occupancy)

        n_dep = self.refills + self.recedes
        return Calib2D(
            fx=drift[0], fy=drift[1], dx=diff[0], dy=diff[1], rho_ab=rho,
            pi0_xy=pi0, qplus_xy=qp, qminus_xy=qm,
            pplus_xy=self._density(self.hist_plus, min_density_count),
            pminus_xy=self._density(self.hist_minus, min_density_count),
            pst_xy=pst,
            pi_plus=self.refills / n_dep if n_dep else float("nan"),
            n_depleted=n_dep, overflow=self.overflow, window=self.window, min_count=min_count,
        )

    def _density(self, hist, min_count) -> Grid2D:
        e = self.density_edges
        nd = len(e) - 1
        h = hist.reshape(nd, nd)
        tot = int(h.sum())
        area = np.outer(np.diff(e), np.diff(e))
        vals = h / (tot * area) if tot >= max(min_count, 1) else np.full((nd, nd), np.nan)
        return Grid2D(e, e, vals, h)


@dataclass(frozen=True)
class Calib2D:
    fx: Grid2D
    fy: Grid2D
    dx: Grid2D
    dy: Grid2D
    rho_ab: Grid2D
    pi0_xy: Grid2D
    qplus_xy: Grid2D
    qminus_xy: Grid2D
    pplus_xy: Grid2D
    pminus_xy: Grid2D
    pst_xy: Grid2D
    pi_plus: float
    n_depleted: int = 0
    overflow: int = 0
    window: int = 2
    min_count: int = 100
    extra: dict = field(default_factory=dict, compare=False)

    _GRIDS = ("fx", "fy", "dx", "dy", "rho_ab", "pi0_xy", "qplus_xy", "qminus_xy",
              "pplus_xy", "pminus_xy", "pst_xy")

    @property
    def pi_plus_defined(self) -> bool:
        return bool(np.isfinite(self.pi_plus))

    def symmetry_gap(self) -> tuple[float, float]:
        """max |fx(x,y) - fy(y,x)| over cells defined in both, and the pooled SE there."""
        a, b = self.fx, self.fy.transposed()
        if a.shape != b.shape:
            raise ConfigError("symmetry check needs a square grid")
        ok = a.defined & b.defined
        if not np.any(ok):
            return float("nan"), float("nan")
        gap = np.abs(a.values - b.values)[ok]
        se = np.sqrt(a.se ** 2 + b.se ** 2)[ok]
        i = int(np.argmax(gap / se))
        return float(gap[i]), float(se[i])

    def decompose(self, tol: float = 1e-10) -> DriftPotentials:
        return decompose_drift(self.fx, self.fy, tol=tol)

    def to_spec(self, xmax: float = 5.0, n: int = 64):
        """Equation coefficients as a ``ModelSpec2D``.

        Drift and diffusion are multiplied by the own-side no-price-change
        probability; own-side jump frequencies become per-event hazards
        with the factor ½ of the side split.
        """
        from .models import ModelSpec2D

        pi0 = self.pi0_xy
        pi0_t = pi0.transposed()
        fx = self.fx.with_values(pi0.values * self.fx.values)
        dx = self.dx.with_values(pi0.values * self.dx.values)
        fy = self.fy.with_values(pi0_t.values * self.fy.values)
        dy = self.dy.with_values(pi0_t.values * self.dy.values)
        if not (np.any(fx.defined & dx.defined) and np.any(fy.defined & dy.defined)):
            raise CalibrationError("no cell has both drift and diffusion defined")
        has_q = bool(np.nansum(self.qplus_xy.values) > 0 or np.nansum(self.qminus_xy.values) > 0)
        return ModelSpec2D(
            fx=fx, fy=fy, dx=dx, dy=dy,
            qplus=self.qplus_xy.with_values(0.5 * self.qplus_xy.values) if has_q else 0.0,
            qminus=self.qminus_xy.with_values(0.5 * self.qminus_xy.values) if has_q else 0.0,
            pplus=self.pplus_xy if np.any(self.pplus_xy.defined) else None,
            pminus=self.pminus_xy if np.any(self.pminus_xy.defined) else None,
            pi_plus=self.pi_plus if self.pi_plus_defined else 0.0,
            xmax=xmax, n=n, name="calibrated",
        )

    def to_json(self) -> dict:
        return {
            "kind": "calib2d",
            "grids": {k: getattr(self, k).to_json() for k in self._GRIDS},
            "pi_plus": self.pi_plus if self.pi_plus_defined else None,
            "n_depleted": self.n_depleted,
            "overflow": self.overflow,
            "window": self.window,
            "min_count": self.min_count,
            **self.extra,
        }

    @classmethod
    def from_json(cls, obj: dict) -> Calib2D:
        g = {k: Grid2D.from_json(v) for k, v in obj["grids"].items()}
        pp = obj.get("pi_plus")
        return cls(**g, pi_plus=float("nan") if pp is None else float(pp),
                   n_depleted=int(obj.get("n_depleted", 0)), overflow=int(obj.get("overflow", 0)),
                   window=int(obj.get("window", 2)), min_count=int(obj.get("min_count", 100)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> Calib2D:
        return cls.from_json(json.loads(Path(path).read_text()))


def estimate_2d(events: RescaledEvents, edges=None, density_edges=None, window: int = 2,
                min_count: int = 100, min_density_count: int = 100) -> Calib2D:
    acc = Accumulator2D(edges, edges, density_edges, window).add(events)
    return acc.finalize(min_count, min_density_count)


calibrate_2d = estimate_2d
