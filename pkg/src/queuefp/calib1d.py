"""One-dimensional calibration from rescaled events.

Every event is attributed to the queue it touched: ``x`` below is that
queue's pre-event rescaled volume.  Volume changes feed the conditional
moments ``f`` and ``d``; jump events feed the price-change frequencies and
the replacement-volume histograms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CalibrationError, ConfigError
from .events import Kind, RescaledEvents
from .exactsum import ExactSum
from .grids import Grid1D, bin_index, check_edges, uniform_edges

DEFAULT_EDGES = uniform_edges(0.0, 5.0, 50)
N_KINDS = len(Kind)


class Accumulator1D:
    """Mergeable sufficient statistics for ``Calib1D``.

    Sums are held exactly (see ``ExactSum``) so that any split of a stream
    into batches merges to the single-pass result bit for bit.
    """

    def __init__(self, edges=None, density_edges=None, n_tail: int = 500):
        self.edges = check_edges(DEFAULT_EDGES if edges is None else edges)
        self.density_edges = check_edges(self.edges if density_edges is None else density_edges)
        k = len(self.edges) - 1
        self.kind_counts = np.zeros((N_KINDS, k), dtype=np.int64)
        self.refill_in_depleted = np.zeros(k, dtype=np.int64)
        self.sum_dv = ExactSum(k)
        self.sum_dv2 = ExactSum(k)
        kd = len(self.density_edges) - 1
        self.hist_plus = np.zeros(kd, dtype=np.int64)
        self.hist_minus = np.zeros(kd, dtype=np.int64)
        self.occupancy = np.zeros(k, dtype=np.int64)
        self.overflow = 0
        self.density_overflow = 0
        self.n_tail = n_tail
        self.tail = np.zeros(0)
        # lag-1 autocorrelation of dv, within batches
        self.ac = ExactSum(5)  # sum a, sum b, sum a^2, sum b^2, sum ab
        self.ac_pairs = 0

    def _check_compatible(self, other: Accumulator1D) -> None:
        if (len(self.edges) != len(other.edges) or np.any(self.edges != other.edges)
                or len(self.density_edges) != len(other.density_edges)
                or np.any(self.density_edges != other.density_edges)
                or self.n_tail != other.n_tail):
            raise ConfigError("cannot merge accumulators built on different grids")

    def add(self, ev: RescaledEvents) -> Accumulator1D:
        if len(ev) == 0:
            return self
        x = ev.own
        k = len(self.edges) - 1
        idx, over = bin_index(self.edges, x)
        self.overflow += int(np.count_nonzero(over))
        for kind in Kind:
            sel = ev.kind == kind
            self.kind_counts[kind] += np.bincount(idx[sel], minlength=k)
        self.occupancy += np.bincount(idx, minlength=k)

        vc = ev.kind == Kind.VOLUME_CHANGE
        dv = ev.dv[vc]
        self.sum_dv.add(idx[vc], dv)
        self.sum_dv2.add(idx[vc], dv * dv)
        if dv.size:
            self.tail = _top(np.concatenate([self.tail, np.abs(dv)]), self.n_tail + 1)
            # pairs of consecutive volume changes on the same queue and day
            for side in (0, 1):
                s = (ev.side[vc] == side)
                a = dv[s]
                days = ev.day[vc][s]
                if a.size > 1:
                    same = days[1:] == days[:-1]
                    p, q = a[:-1][same], a[1:][same]
                    zeros = np.zeros(p.size, dtype=np.int64)
                    for cell, vals in enumerate((p, q, p * p, q * q, p * q)):
                        self.ac.add(zeros + cell, vals)
                    self.ac_pairs += int(p.size)

        kd = len(self.density_edges) - 1
        plus = (ev.kind == Kind.OVERTAKEN) | (ev.kind == Kind.DEPLETED_REFILL)
        minus = ev.kind == Kind.DEPLETED_RECEDE
        for sel, hist in ((plus, self.hist_plus), (minus, self.hist_minus)):
            j, o = bin_index(self.density_edges, ev.new[sel])
            hist += np.bincount(j, minlength=kd)
            self.density_overflow += int(np.count_nonzero(o))
        return self

    def merge(self, other: Accumulator1D) -> Accumulator1D:
        self._check_compatible(other)
        out = Accumulator1D(self.edges, self.density_edges, self.n_tail)
        out.kind_counts = self.kind_counts + other.kind_counts
        out.sum_dv = self.sum_dv.merge(other.sum_dv)
        out.sum_dv2 = self.sum_dv2.merge(other.sum_dv2)
        out.hist_plus = self.hist_plus + other.hist_plus
        out.hist_minus = self.hist_minus + other.hist_minus
        out.occupancy = self.occupancy + other.occupancy
        out.overflow = self.overflow + other.overflow
        out.density_overflow = self.density_overflow + other.density_overflow
        out.tail = _top(np.concatenate([self.tail, other.tail]), self.n_tail + 1)
        out.ac = self.ac.merge(other.ac)
        out.ac_pairs = self.ac_pairs + other.ac_pairs
        return out

    @property
    def n_events(self) -> int:
        return int(self.kind_counts.sum())

    def finalize(self, min_count: int = 100, min_density_count: int = 100) -> Calib1D:
        if self.n_events == 0:
            raise CalibrationError("no events to calibrate")
        edges = self.edges
        n_vc = self.kind_counts[Kind.VOLUME_CHANGE]
        ok = n_vc >= min_count
        s1 = self.sum_dv.total()
        s2 = self.sum_dv2.total()
        with np.errstate(invalid="ignore", divide="ignore"):
            m1 = s1 / n_vc
            m2 = s2 / n_vc
            var = np.maximum(m2 - m1 * m1, 0.0)
            f = np.where(ok, m1, np.nan)
            f_se = np.where(ok, np.sqrt(var / n_vc), np.nan)
            d = np.where(ok, 0.5 * m2, np.nan)

        n_all = self.kind_counts.sum(axis=0)
        ok_all = n_all >= min_count
        with np.errstate(invalid="ignore", divide="ignore"):
            def freq(c):
                p = c / n_all
                return np.where(ok_all, p, np.nan), np.where(ok_all, np.sqrt(p * (1 - p) / n_all), np.nan)

            pi0, pi0_se = freq(n_vc)
            qp, qp_se = freq(self.kind_counts[Kind.OVERTAKEN])
            qm, qm_se = freq(self.kind_counts[Kind.DEPLETED_RECEDE] + self.kind_counts[Kind.DEPLETED_REFILL])

        n_refill = int(self.kind_counts[Kind.DEPLETED_REFILL].sum())
        n_depleted = n_refill + int(self.kind_counts[Kind.DEPLETED_RECEDE].sum())
        pi_plus = n_refill / n_depleted if n_depleted else float("nan")

        pplus = _density(self.density_edges, self.hist_plus, min_density_count, "P+")
        pminus = _density(self.density_edges, self.hist_minus, min_density_count, "P-")
        width = np.diff(edges)
        with np.errstate(invalid="ignore", divide="ignore"):
            pst = self.occupancy / (self.occupancy.sum() * width)

        return Calib1D(
            f=Grid1D(edges, f, n_vc, f_se),
            d=Grid1D(edges, d, n_vc),
            pi0=Grid1D(edges, pi0, n_all, pi0_se),
            qplus=Grid1D(edges, qp, n_all, qp_se),
            qminus=Grid1D(edges, qm, n_all, qm_se),
            pplus=pplus,
            pminus=pminus,
            pi_plus=pi_plus,
            n_depleted=n_depleted,
            pst=Grid1D(edges, pst, self.occupancy),
            overflow=self.overflow,
            tail_index=hill_estimator(self.tail),
            lag1_autocorr=self._lag1(),
            min_count=min_count,
        )

    def _lag1(self) -> float:
        if self.ac_pairs < 2:
            return float("nan")
        sa, sb, saa, sbb, sab = self.ac.total() / self.ac_pairs
        den = np.sqrt((saa - sa * sa) * (sbb - sb * sb))
        return float((sab - sa * sb) / den) if den > 0 else float("nan")


def _top(a: np.ndarray, n: int) -> np.ndarray:
    if a.size <= n:
        return np.sort(a)[::-1]
    return np.sort(np.partition(a, a.size - n)[a.size - n:])[::-1]


def hill_estimator(top_desc: np.ndarray) -> float:
    """Hill tail index from the k+1 largest magnitudes (descending)."""
    top = top_desc[top_desc > 0]
    if top.size < 3:
        return float("nan")
    k = top.size - 1
    s = float(np.sum(np.log(top[:k] / top[k])))
    return k / s if s > 0 else float("nan")  # all ties: no tail to measure


def _density(edges, hist, min_count, name) -> Grid1D | None:
    n = int(hist.sum())
    if n == 0 or n < min_count:
        return Grid1D(edges, np.full(len(hist), np.nan), hist)
    return Grid1D(edges, hist / (n * np.diff(edges)), hist)


@dataclass(frozen=True)
class Calib1D:
    f: Grid1D
    d: Grid1D
    pi0: Grid1D
    qplus: Grid1D
    qminus: Grid1D
    pplus: Grid1D
    pminus: Grid1D
    pi_plus: float
    n_depleted: int = 0
    pst: Grid1D | None = None
    overflow: int = 0
    tail_index: float = float("nan")
    lag1_autocorr: float = float("nan")
    min_count: int = 100
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def pi_minus(self) -> float:
        return 1.0 - self.pi_plus

    @property
    def pi_plus_defined(self) -> bool:
        return bool(np.isfinite(self.pi_plus))

    @property
    def pooled_pi0(self) -> float:
        ok = self.pi0.defined
        n = self.pi0.counts[ok].sum()
        return float(np.sum(self.pi0.values[ok] * self.pi0.counts[ok]) / n) if n else float("nan")

    def tilde(self, profile=None, bin: int | None = None, use_fit: bool = True) -> tuple[Grid1D, Grid1D]:
        """Unconditional equation coefficients (f̃, d̃) on the calibration grid.

        The drift picks up ``-x (dV̄/dt) / V̄``: at bin ``b`` if given,
        otherwise averaged over bins with weights proportional to the
        event rate.  Without a profile the correction is omitted.
        """
        x = self.f.centers
        corr = 0.0
        if profile is not None:
            from .seasonality import vbar_derivative

            if bin is not None:
                corr = vbar_derivative(profile, bin, use_fit) / profile.scale(np.array([bin]))[0]
            else:
                b = np.arange(1, profile.n_bins + 1)
                w = profile.nbar / profile.nbar.sum()
                corr = float(np.sum(w * vbar_derivative(profile, b, use_fit) / profile.vbar))
        ft = self.pi0.values * self.f.values - x * corr
        dt = self.pi0.values * self.d.values
        return self.f.with_values(ft), self.d.with_values(dt)

    def to_spec(self, profile=None, xmax: float = 8.0, n: int = 1000, bin: int | None = None):
        """Equation coefficients as a ``ModelSpec1D`` (tilde drift and diffusion)."""
        from .models import ModelSpec1D

        ft, dt = self.tilde(profile, bin)
        if not np.any(ft.defined & dt.defined):
            raise CalibrationError("no bin has both drift and diffusion defined")
        qp = self.qplus.with_values(np.where(np.isfinite(self.qplus.values), self.qplus.values, np.nan))
        has_q = bool(np.nansum(self.qplus.values) > 0 or np.nansum(self.qminus.values) > 0)
        pi_plus = self.pi_plus if self.pi_plus_defined else 0.0
        return ModelSpec1D(
            f=ft, d=dt,
            qplus=qp if has_q else 0.0,
            qminus=self.qminus if has_q else 0.0,
            pplus=self.pplus if np.any(self.pplus.defined) else None,
            pminus=self.pminus if np.any(self.pminus.defined) else None,
            pi_plus=pi_plus, xmax=xmax, n=n, name="calibrated",
        )

    def to_json(self) -> dict:
        grids = {k: getattr(self, k).to_json() for k in
                 ("f", "d", "pi0", "qplus", "qminus", "pplus", "pminus")}
        if self.pst is not None:
            grids["pst"] = self.pst.to_json()
        return {
            "kind": "calib1d",
            "grids": grids,
            "pi_plus": None if not self.pi_plus_defined else self.pi_plus,
            "pi_minus": None if not self.pi_plus_defined else self.pi_minus,
            "n_depleted": self.n_depleted,
            "overflow": self.overflow,
            "tail_index": _num(self.tail_index),
            "lag1_autocorr": _num(self.lag1_autocorr),
            "min_count": self.min_count,
            "pooled_pi0": _num(self.pooled_pi0),
            **self.extra,
        }

    @classmethod
    def from_json(cls, obj: dict) -> Calib1D:
        g = {k: Grid1D.from_json(v) for k, v in obj["grids"].items()}
        pi_plus = obj.get("pi_plus")
        return cls(
            f=g["f"], d=g["d"], pi0=g["pi0"], qplus=g["qplus"], qminus=g["qminus"],
            pplus=g["pplus"], pminus=g["pminus"],
            pi_plus=float("nan") if pi_plus is None else float(pi_plus),
            n_depleted=int(obj.get("n_depleted", 0)),
            pst=g.get("pst"),
            overflow=int(obj.get("overflow", 0)),
            tail_index=_unnum(obj.get("tail_index")),
            lag1_autocorr=_unnum(obj.get("lag1_autocorr")),
            min_count=int(obj.get("min_count", 100)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> Calib1D:
        return cls.from_json(json.loads(Path(path).read_text()))


def _num(v) -> float | None:
    return None if v is None or not np.isfinite(v) else float(v)


def _unnum(v) -> float:
    return float("nan") if v is None else float(v)


# ---------------------------------------------------------------------------
# operation-level entry points


def calibrate_1d(events: RescaledEvents, edges=None, density_edges=None, min_count: int = 100,
                 min_density_count: int = 100) -> Calib1D:
    acc = Accumulator1D(edges, density_edges).add(events)
    return acc.finalize(min_count, min_density_count)


def estimate_fd(events: RescaledEvents, edges=None, min_count: int = 100) -> tuple[Grid1D, Grid1D]:
    vc = events.select(events.kind == Kind.VOLUME_CHANGE)
    if len(vc) == 0:
        raise CalibrationError("no volume-change events")
    c = Accumulator1D(edges).add(vc).finalize(min_count, 0)
    return c.f, c.d


def estimate_jumps(events: RescaledEvents, edges=None, min_count: int = 100):
    """(pi0, qplus, qminus, pi_plus); pi_plus is NaN when nothing depleted."""
    if len(events) == 0:
        raise CalibrationError("no events")
    c = Accumulator1D(edges).add(events).finalize(min_count, 0)
    return c.pi0, c.qplus, c.qminus, c.pi_plus


def estimate_replacement_densities(events: RescaledEvents, edges=None,
                                   min_density_count: int = 100) -> tuple[Grid1D, Grid1D]:
    acc = Accumulator1D(density_edges=edges).add(events)
    for hist, name in ((acc.hist_plus, "P+"), (acc.hist_minus, "P-")):
        if hist.sum() < min_density_count:
            raise CalibrationError(
                f"{name}: {int(hist.sum())} replacement samples, need {min_density_count}")
    c = acc.finalize(0, min_density_count)
    return c.pplus, c.pminus


def tilde(calib: Calib1D, profile=None, bin: int | None = None) -> tuple[Grid1D, Grid1D]:
    return calib.tilde(profile, bin)


def merge(a: Accumulator1D, b: Accumulator1D) -> Accumulator1D:
    return a.merge(b)


def kernel_smooth(grid: Grid1D, bandwidth: float = 0.1, x=None) -> tuple[np.ndarray, np.ndarray]:
    """Count-weighted Gaussian smoother over defined bins (for plotting only)."""
    ok = grid.defined
    c, v, w = grid.centers[ok], grid.values[ok], grid.counts[ok].astype(float)
    x = np.linspace(grid.edges[0], grid.edges[-1], 200) if x is None else np.asarray(x)
    k = np.exp(-0.5 * ((x[:, None] - c[None, :]) / bandwidth) ** 2) * w[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        return x, (k @ v) / k.sum(axis=1)
