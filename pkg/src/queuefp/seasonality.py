"""Intraday activity profile and its smooth fit.

The average best-queue volume per five-minute bin is fitted by

    vbar(b) ~ a0 + a1 ln b + a2 / (n_bins + 1 - b)**psi

which is linear in the coefficients for a fixed exponent ``psi``.
"""

from __future__ import annotations

import csv
import json
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import ConfigError, ProfileError

N_BINS = 78


@dataclass(frozen=True)
class ProfileFit:
    a0: float
    a1: float
    a2: float
    rmse: float
    psi: float = 1.0
    cov: np.ndarray | None = field(default=None, repr=False, compare=False)
    dof: int = 0

    @property
    def coef(self) -> np.ndarray:
        return np.array([self.a0, self.a1, self.a2])

    def __call__(self, b, n_bins: int = N_BINS) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        return self.a0 + self.a1 * np.log(b) + self.a2 / (n_bins + 1.0 - b) ** self.psi

    def derivative(self, b, n_bins: int = N_BINS) -> np.ndarray:
        """d vbar / d b of the fitted form."""
        b = np.asarray(b, dtype=float)
        return self.a1 / b + self.psi * self.a2 / (n_bins + 1.0 - b) ** (self.psi + 1.0)

    def conf_int(self, level: float = 0.95) -> np.ndarray:
        """(3, 2) array of two-sided t-intervals for (a0, a1, a2)."""
        if self.cov is None or self.dof <= 0:
            raise ProfileError("confidence intervals need at least 4 fitted bins")
        half = stats.t.ppf(0.5 + level / 2.0, self.dof) * np.sqrt(np.diag(self.cov))
        return np.column_stack([self.coef - half, self.coef + half])

    def to_json(self) -> dict:
        return {"a0": self.a0, "a1": self.a1, "a2": self.a2, "rmse": self.rmse, "psi": self.psi}


def design_matrix(bins, psi: float = 1.0, n_bins: int = N_BINS) -> np.ndarray:
    b = np.asarray(bins, dtype=float)
    return np.column_stack([np.ones_like(b), np.log(b), 1.0 / (n_bins + 1.0 - b) ** psi])


def fit_profile(vbar, psi: float = 1.0, weighting: str = "relative") -> ProfileFit:
    """Linear least-squares fit of the three-parameter intraday form.

    ``vbar[i]`` belongs to bin i + 1.  Non-finite entries are ignored.
    With ``weighting="relative"`` the fit is refined once with weights
    1 / fitted^2, which suits volume averages whose scatter grows with
    their level; ``"none"`` keeps the ordinary fit.  Confidence intervals
    come from the (weighted) linear model.
    """
    if weighting not in ("relative", "none"):
        raise ConfigError(f"unknown weighting {weighting!r}")
    y = np.asarray(vbar, dtype=float)
    n_bins = len(y)
    b = np.arange(1, n_bins + 1)
    ok = np.isfinite(y)
    if np.any(y[ok] <= 0):
        raise ProfileError("average volumes must be positive")
    b, y = b[ok], y[ok]
    X = design_matrix(b, psi, n_bins)
    if len(np.unique(b)) < 3 or np.linalg.matrix_rank(X) < 3:
        raise ProfileError("rank-deficient design: need at least 3 distinct bins")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    sw = np.ones_like(y)
    if weighting == "relative":
        fitted = X @ coef
        if np.all(fitted > 0):
            sw = 1.0 / fitted
            coef, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    resid = y - X @ coef
    n = len(y)
    dof = n - 3
    cov = None
    if dof > 0:
        rw = resid * sw
        Xw = X * sw[:, None]
        cov = float(rw @ rw) / dof * np.linalg.inv(Xw.T @ Xw)
    return ProfileFit(
        a0=float(coef[0]),
        a1=float(coef[1]),
        a2=float(coef[2]),
        rmse=float(np.sqrt(resid @ resid / n)),
        psi=psi,
        cov=cov,
        dof=dof,
    )


@dataclass(frozen=True)
class IntradayProfile:
    vbar: np.ndarray
    nbar: np.ndarray
    lbar: np.ndarray | None = None
    fit: ProfileFit | None = None
    interpolated: tuple[int, ...] = ()

    @property
    def n_bins(self) -> int:
        return len(self.vbar)

    def covered_bins(self) -> list[int]:
        return [b + 1 for b in range(self.n_bins) if np.isfinite(self.vbar[b])]

    def scale(self, bins) -> np.ndarray:
        """V̄ for each entry of ``bins`` (1-based)."""
        bins = np.asarray(bins)
        if bins.size and (bins.min() < 1 or bins.max() > self.n_bins):
            raise ConfigError(f"bin outside 1..{self.n_bins}")
        return self.vbar[bins - 1]

    @classmethod
    def from_function(cls, func, nbar=1.0, n_bins: int = N_BINS, psi: float = 1.0) -> IntradayProfile:
        b = np.arange(1, n_bins + 1)
        vbar = np.asarray(func(b), dtype=float) * np.ones(n_bins)
        nb = np.broadcast_to(np.asarray(nbar, dtype=float), (n_bins,)).copy()
        return cls(vbar=vbar, nbar=nb, fit=fit_profile(vbar, psi))

    @classmethod
    def constant(cls, vbar: float, nbar: float = 1.0, n_bins: int = N_BINS) -> IntradayProfile:
        return cls.from_function(lambda b: np.full(len(b), float(vbar)), nbar, n_bins)

    def to_json(self) -> dict:
        out = {
            "vbar": _list(self.vbar),
            "nbar": _list(self.nbar),
            "fit": self.fit.to_json() if self.fit else None,
        }
        if self.lbar is not None:
            out["lbar"] = _list(self.lbar)
        if self.interpolated:
            out["interpolated_bins"] = list(self.interpolated)
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> IntradayProfile:
        vbar = np.asarray(obj["vbar"], dtype=float)
        nbar = np.asarray(obj["nbar"], dtype=float)
        lbar = np.asarray(obj["lbar"], dtype=float) if obj.get("lbar") is not None else None
        fit = None
        if obj.get("fit"):
            psi = float(obj["fit"].get("psi", 1.0))
            fit = fit_profile(vbar, psi)
        return cls(vbar=vbar, nbar=nbar, lbar=lbar, fit=fit,
                   interpolated=tuple(obj.get("interpolated_bins", ())))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> IntradayProfile:
        return cls.from_json(json.loads(Path(path).read_text()))

    def write_csv(self, path: str | Path) -> None:
        b = np.arange(1, self.n_bins + 1)
        fitted = self.fit(b, self.n_bins) if self.fit else np.full(self.n_bins, np.nan)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin", "vbar", "nbar", "lbar", "vbar_fit"])
            for i in range(self.n_bins):
                lb = self.lbar[i] if self.lbar is not None else ""
                w.writerow([i + 1, self.vbar[i], self.nbar[i], lb, fitted[i]])


def _list(a) -> list:
    return [None if not np.isfinite(v) else float(v) for v in np.asarray(a, dtype=float)]


def _fill_gaps(values: np.ndarray, name: str, allow_gaps: bool) -> tuple[np.ndarray, tuple[int, ...]]:
    missing = np.flatnonzero(~np.isfinite(values))
    if missing.size == 0:
        return values, ()
    bins = tuple(int(i) + 1 for i in missing)
    if not allow_gaps:
        raise ProfileError(f"no events in bins {list(bins)} ({name})")
    have = np.flatnonzero(np.isfinite(values))
    if have.size == 0:
        raise ProfileError("no events at all")
    out = values.copy()
    out[missing] = np.interp(missing, have, values[have])
    return out, bins


def compute_profile(events, n_bins: int = N_BINS, allow_gaps: bool = False,
                    psi: float = 1.0, n_days: int | None = None) -> IntradayProfile:
    """Per-bin averages pooled over days.

    ``vbar`` averages (V_B + V_A)/2 of the pre-event state, ``nbar`` is the
    mean number of events per bin per session and ``lbar`` the analogous
    average order count when the feed carries it.
    """
    if len(events) == 0:
        raise ProfileError("no events")
    b = events.bin - 1
    if b.min() < 0 or b.max() >= n_bins:
        raise ProfileError(f"event bins outside 1..{n_bins}")
    counts = np.bincount(b, minlength=n_bins).astype(float)
    vol = 0.5 * (events.pre_b + events.pre_a).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        vbar = np.bincount(b, weights=vol, minlength=n_bins) / counts
    vbar, gaps = _fill_gaps(vbar, "vbar", allow_gaps)
    if n_days is None:
        n_days = max(int(events.diagnostics.sessions), len(np.unique(events.day)))
    nbar = counts / n_days
    lbar = None
    if events.has_orders:
        orders = 0.5 * (events.pre_orders_b + events.pre_orders_a).astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            lbar = np.bincount(b, weights=orders, minlength=n_bins) / counts
        lbar, _ = _fill_gaps(lbar, "lbar", True)
    if np.any(vbar <= 0):
        raise ProfileError(f"non-positive average volume in bins {list(np.flatnonzero(vbar <= 0) + 1)}")
    return IntradayProfile(vbar=vbar, nbar=nbar, lbar=lbar, fit=fit_profile(vbar, psi), interpolated=gaps)


def compute_profiles(streams: Mapping[str, object], **kw) -> dict[str, IntradayProfile]:
    """Per-instrument profiles plus the pooled one under key ``"pooled"``."""
    from .events import QuoteEvents

    out = {name: compute_profile(ev, **kw) for name, ev in streams.items()}
    out["pooled"] = compute_profile(QuoteEvents.concat(list(streams.values())), **kw)
    return out


def vbar_derivative(profile: IntradayProfile, b, use_fit: bool = True) -> np.ndarray | float:
    """dV̄/dt in shares per event at bin(s) ``b``."""
    scalar = np.isscalar(b)
    b = np.atleast_1d(np.asarray(b))
    n = profile.n_bins
    if np.any((b < 1) | (b > n)):
        raise ConfigError(f"bin outside 1..{n}")
    nb = profile.nbar[b - 1]
    if np.any(nb <= 0):
        raise ProfileError(f"zero event rate in bins {sorted(set((b[nb <= 0]).tolist()))}")
    if use_fit and profile.fit is not None:
        dvdb = profile.fit.derivative(b, n)
    else:
        dvdb = np.gradient(profile.vbar)[b - 1]
    out = dvdb / nb
    return float(out[0]) if scalar else out


def per_bin_mean_x(events, profile: IntradayProfile) -> np.ndarray:
    """Mean of (x + y)/2 per bin; equals 1 for the profile built from ``events``."""
    b = events.bin - 1
    xs = 0.5 * (events.pre_b + events.pre_a) / profile.vbar[b]
    counts = np.bincount(b, minlength=profile.n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.bincount(b, weights=xs, minlength=profile.n_bins) / counts
