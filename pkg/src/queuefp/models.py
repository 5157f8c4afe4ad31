"""Generative model parameterizations shared by solvers, simulators and the generator.

Coefficients are plain callables of the rescaled volume(s).  A spec file
(JSON or TOML) gives them as numpy expressions in ``x`` (and ``y``), and
replacement laws as scipy.stats distributions by name, e.g.::

    [model]
    dims = 1
    f = "0.5 * (1 - x)"
    d = "0.05"
    qplus = "0.01"
    qminus = "0.05 * exp(-3 * x)"
    pi_plus = 0.2
    pplus = {dist = "expon", scale = 0.2}
    pminus = {dist = "gamma", a = 4, scale = 0.3}
"""

from __future__ import annotations

import json
import sys
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import ConfigError
from .grids import Grid1D, Grid2D, bin_index

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


# ---------------------------------------------------------------------------
# coefficient expressions

_SAFE = {
    name: getattr(np, name)
    for name in ("exp", "log", "log1p", "sqrt", "sin", "cos", "tanh", "arctan", "abs",
                 "minimum", "maximum", "where", "clip", "heaviside", "sign", "pi", "e")
}


class Expr:
    """A numpy expression in ``x`` (and optionally ``y``)."""

    def __init__(self, text: str):
        self.text = str(text)
        try:
            self._code = compile(self.text, "<expr>", "eval")
        except SyntaxError as exc:
            raise ConfigError(f"bad expression {text!r}: {exc.msg}") from None
        for name in self._code.co_names:
            if name not in _SAFE and name not in ("x", "y"):
                raise ConfigError(f"expression {text!r} uses unknown name {name!r}")

    def __call__(self, x, y=None):
        x = np.asarray(x, dtype=float)
        ns = dict(_SAFE, x=x, y=np.zeros_like(x) if y is None else np.asarray(y, dtype=float))
        out = eval(self._code, {"__builtins__": {}}, ns)
        shape = np.broadcast(x, ns["y"]).shape
        return np.broadcast_to(np.asarray(out, dtype=float), shape).copy()

    def __reduce__(self):
        return (Expr, (self.text,))

    def __repr__(self) -> str:
        return f"Expr({self.text!r})"


def as_function(obj, dims: int = 1) -> Callable:
    """Coerce a number, expression string, grid or callable to a coefficient function."""
    if isinstance(obj, (int, float)):
        c = float(obj)
        if dims == 1:
            return lambda x: np.full(np.shape(x), c)
        return lambda x, y: np.full(np.broadcast(np.asarray(x), np.asarray(y)).shape, c)
    if isinstance(obj, str):
        return Expr(obj)
    if isinstance(obj, (Grid1D, Grid2D)) or callable(obj):
        return obj
    raise ConfigError(f"cannot interpret {obj!r} as a coefficient")


# ---------------------------------------------------------------------------
# replacement densities


class Density:
    """A probability law on [0, inf) for replacement volumes."""

    def cdf(self, x) -> np.ndarray:
        raise NotImplementedError

    def rvs(self, size, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def mean(self) -> float:
        raise NotImplementedError

    def cell_masses(self, edges: np.ndarray) -> np.ndarray:
        """Mass per cell; the tail beyond the last edge goes to the last cell."""
        c = self.cdf(edges)
        m = np.diff(c)
        m[0] += c[0]
        m[-1] += 1.0 - c[-1]
        m = np.clip(m, 0.0, None)
        s = m.sum()
        if not s > 0:
            raise ConfigError("replacement law has no mass on the grid")
        return m / s


class ScipyDensity(Density):
    def __init__(self, dist, name: str = "", params: Mapping | None = None):
        self.dist = dist
        self.name = name
        self.params = dict(params or {})

    def cdf(self, x):
        return self.dist.cdf(np.asarray(x, dtype=float))

    def pdf(self, x):
        return self.dist.pdf(np.asarray(x, dtype=float))

    def rvs(self, size, rng):
        # inverse-CDF sampling keeps the draw count per call fixed
        u = rng.random(size)
        return np.maximum(self.dist.ppf(u), 0.0)

    def mean(self):
        return float(self.dist.mean())

    def to_json(self):
        return {"dist": self.name, **self.params}


class HistogramDensity(Density):
    """Piecewise-constant law from a density grid (undefined bins carry no mass)."""

    def __init__(self, grid: Grid1D):
        vals = np.where(np.isfinite(grid.values), grid.values, 0.0)
        mass = np.clip(vals * grid.widths, 0.0, None)
        if not mass.sum() > 0:
            raise ConfigError("empty replacement histogram")
        self.grid = grid
        self.edges = grid.edges
        self.mass = mass / mass.sum()
        self._cum = np.concatenate([[0.0], np.cumsum(self.mass)])
        self._cum[-1] = 1.0

    def cdf(self, x):
        return np.interp(np.asarray(x, dtype=float), self.edges, self._cum, left=0.0, right=1.0)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        k = np.clip(np.searchsorted(self.edges, x, side="right") - 1, 0, len(self.mass) - 1)
        inside = (x >= self.edges[0]) & (x < self.edges[-1])
        return np.where(inside, self.mass[k] / np.diff(self.edges)[k], 0.0)

    def rvs(self, size, rng):
        u = rng.random(size)
        return np.interp(u, self._cum, self.edges)

    def mean(self):
        c = 0.5 * (self.edges[1:] + self.edges[:-1])
        return float(np.sum(self.mass * c))

    def to_json(self):
        return {"histogram": self.grid.to_json()}


class PointMass(Density):
    def __init__(self, at: float):
        self.at = float(at)

    def cdf(self, x):
        return (np.asarray(x, dtype=float) >= self.at).astype(float)

    def rvs(self, size, rng):
        rng.random(size)
        return np.full(size, self.at)

    def mean(self):
        return self.at

    def cell_masses(self, edges):
        # half-open cells, as for binned data
        m = np.zeros(len(edges) - 1)
        m[int(bin_index(np.asarray(edges, dtype=float), self.at)[0])] = 1.0
        return m

    def to_json(self):
        return {"dist": "point", "at": self.at}


def make_density(obj) -> Density | None:
    if obj is None or isinstance(obj, Density):
        return obj
    if isinstance(obj, Grid1D):
        if not np.any(obj.defined):
            return None
        return HistogramDensity(obj)
    if hasattr(obj, "cdf") and hasattr(obj, "ppf"):
        return ScipyDensity(obj, getattr(getattr(obj, "dist", None), "name", ""))
    if isinstance(obj, Mapping):
        if "histogram" in obj:
            return HistogramDensity(Grid1D.from_json(obj["histogram"]))
        params = {k: v for k, v in obj.items() if k != "dist"}
        name = obj.get("dist")
        if name == "point":
            return PointMass(params["at"])
        family = getattr(stats, str(name), None)
        if family is None or not hasattr(family, "cdf"):
            raise ConfigError(f"unknown distribution {name!r}")
        try:
            frozen = family(**params)
            frozen.cdf(1.0)
        except TypeError as exc:
            raise ConfigError(f"bad parameters for {name}: {exc}") from None
        return ScipyDensity(frozen, str(name), params)
    raise ConfigError(f"cannot interpret {obj!r} as a density")


class ProductDensity2D:
    """Joint replacement law for (new own volume, opposite volume) as a product."""

    def __init__(self, own: Density, opp: Density):
        self.own, self.opp = own, opp

    def cell_masses(self, x_edges, y_edges) -> np.ndarray:
        return np.outer(self.own.cell_masses(x_edges), self.opp.cell_masses(y_edges))

    def rvs(self, size, rng):
        return self.own.rvs(size, rng), self.opp.rvs(size, rng)


class HistogramDensity2D:
    def __init__(self, grid: Grid2D):
        vals = np.where(np.isfinite(grid.values), grid.values, 0.0)
        mass = np.clip(vals * grid.cell_area, 0.0, None)
        if not mass.sum() > 0:
            raise ConfigError("empty 2D replacement histogram")
        self.grid = grid
        self.mass = mass / mass.sum()
        self._cum = np.cumsum(self.mass.ravel())
        self._cum[-1] = 1.0

    def cell_masses(self, x_edges, y_edges) -> np.ndarray:
        g = self.grid
        if (len(x_edges) == len(g.x_edges) and np.allclose(x_edges, g.x_edges)
                and len(y_edges) == len(g.y_edges) and np.allclose(y_edges, g.y_edges)):
            return self.mass
        # mass-conserving rebin via the cumulative table on each axis
        cx = _rebin_weights(g.x_edges, x_edges)
        cy = _rebin_weights(g.y_edges, y_edges)
        m = cx.T @ self.mass @ cy
        return m / m.sum()

    def rvs(self, size, rng):
        u = rng.random(size)
        k = np.minimum(np.searchsorted(self._cum, u, side="right"), len(self._cum) - 1)
        i, j = np.unravel_index(k, self.mass.shape)
        g = self.grid
        v = rng.random((2, size))
        x = g.x_edges[i] + v[0] * np.diff(g.x_edges)[i]
        y = g.y_edges[j] + v[1] * np.diff(g.y_edges)[j]
        return x, y


def _rebin_weights(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Matrix W[i, k] = fraction of source cell i lying in destination cell k."""
    lo = np.maximum(src[:-1, None], dst[None, :-1])
    hi = np.minimum(src[1:, None], dst[None, 1:])
    w = np.clip(hi - lo, 0, None) / np.diff(src)[:, None]
    # mass outside the destination range goes to the edge cells
    below = np.clip(np.minimum(src[1:], dst[0]) - src[:-1], 0, None) / np.diff(src)
    above = np.clip(src[1:] - np.maximum(src[:-1], dst[-1]), 0, None) / np.diff(src)
    w[:, 0] += below
    w[:, -1] += above
    return w


def make_density_2d(obj):
    if obj is None or isinstance(obj, (ProductDensity2D, HistogramDensity2D)):
        return obj
    if isinstance(obj, Grid2D):
        if not np.any(obj.defined):
            return None
        return HistogramDensity2D(obj)
    if isinstance(obj, Mapping):
        if "histogram" in obj:
            return HistogramDensity2D(Grid2D.from_json(obj["histogram"]))
        if "own" in obj:
            return ProductDensity2D(make_density(obj["own"]), make_density(obj["opp"]))
    raise ConfigError(f"cannot interpret {obj!r} as a 2D density")


# ---------------------------------------------------------------------------
# model specifications


@dataclass
class ModelSpec1D:
    """Coefficients of the one-dimensional equation, per event of the queue.

    ``f`` and ``d`` are the unconditional equation coefficients (already
    multiplied by the no-price-change probability); ``qplus``/``qminus`` are
    per-event jump probabilities.
    """

    f: Callable
    d: Callable
    qplus: Callable = 0.0
    qminus: Callable = 0.0
    pplus: Density | None = None
    pminus: Density | None = None
    pi_plus: float = 0.0
    xmax: float = 8.0
    n: int = 1000
    name: str = ""
    source: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.f = as_function(self.f)
        self.d = as_function(self.d)
        self.qplus = as_function(self.qplus)
        self.qminus = as_function(self.qminus)
        self.pplus = make_density(self.pplus)
        self.pminus = make_density(self.pminus)
        if not 0.0 <= self.pi_plus <= 1.0:
            raise ConfigError(f"pi_plus must lie in [0, 1], got {self.pi_plus}")
        if not self.xmax > 0 or self.n < 2:
            raise ConfigError("need xmax > 0 and at least 2 grid cells")

    @property
    def pi_minus(self) -> float:
        return 1.0 - self.pi_plus

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(0.0, self.xmax, self.n + 1)

    @property
    def centers(self) -> np.ndarray:
        e = self.edges
        return 0.5 * (e[1:] + e[:-1])

    def has_jumps(self, x=None) -> bool:
        x = self.centers if x is None else x
        return bool(np.any(self.qplus(x) > 0) or np.any(self.qminus(x) > 0))

    def validate(self, x=None) -> None:
        x = self.centers if x is None else x
        qp, qm = self.qplus(x), self.qminus(x)
        if np.any(qp < 0) or np.any(qm < 0):
            raise ConfigError("jump probabilities must be nonnegative")
        if np.any(qp + qm > 1 + 1e-12):
            i = int(np.argmax(qp + qm))
            raise ConfigError(f"no-price-change probability negative at x={x[i]:.4g}")
        if np.any(qp > 0) and self.pplus is None:
            raise ConfigError("qplus > 0 requires a P+ law")
        if np.any(qm > 0):
            if self.pi_plus > 0 and self.pplus is None:
                raise ConfigError("refills require a P+ law")
            if self.pi_plus < 1 and self.pminus is None:
                raise ConfigError("recedes require a P- law")

    def with_grid(self, n: int | None = None, xmax: float | None = None) -> ModelSpec1D:
        return replace(self, n=n or self.n, xmax=xmax or self.xmax)

    def reinjection(self, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Cell masses of P+ and of the depletion mixture on ``edges``."""
        k = len(edges) - 1
        plus = self.pplus.cell_masses(edges) if self.pplus is not None else np.zeros(k)
        minus = self.pminus.cell_masses(edges) if self.pminus is not None else np.zeros(k)
        return plus, self.pi_plus * plus + self.pi_minus * minus


@dataclass
class ModelSpec2D:
    """Coefficients of the two-dimensional equation, per event (either side).

    ``qplus(own, opp)``/``qminus(own, opp)`` are per-event jump
    probabilities for a queue of size ``own`` facing ``opp``; the same
    functions serve both sides.  ``pplus``/``pminus`` are joint laws of
    (new own volume, opposite volume) after the jump.
    """

    fx: Callable
    fy: Callable
    dx: Callable
    dy: Callable
    qplus: Callable = 0.0
    qminus: Callable = 0.0
    pplus: object = None
    pminus: object = None
    pi_plus: float = 0.0
    xmax: float = 5.0
    n: int = 64
    name: str = ""
    source: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for name in ("fx", "fy", "dx", "dy", "qplus", "qminus"):
            setattr(self, name, as_function(getattr(self, name), dims=2))
        self.pplus = make_density_2d(self.pplus)
        self.pminus = make_density_2d(self.pminus)
        if not 0.0 <= self.pi_plus <= 1.0:
            raise ConfigError(f"pi_plus must lie in [0, 1], got {self.pi_plus}")

    @property
    def pi_minus(self) -> float:
        return 1.0 - self.pi_plus

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(0.0, self.xmax, self.n + 1)

    @property
    def centers(self) -> np.ndarray:
        e = self.edges
        return 0.5 * (e[1:] + e[:-1])

    @classmethod
    def separable(cls, sx: ModelSpec1D, sy: ModelSpec1D | None = None, n: int = 64,
                  xmax: float | None = None) -> ModelSpec2D:
        """Independent dynamics per axis (no jumps)."""
        sy = sy or sx
        return cls(
            fx=lambda x, y: sx.f(np.asarray(x) + 0 * np.asarray(y)),
            fy=lambda x, y: sy.f(np.asarray(y) + 0 * np.asarray(x)),
            dx=lambda x, y: sx.d(np.asarray(x) + 0 * np.asarray(y)),
            dy=lambda x, y: sy.d(np.asarray(y) + 0 * np.asarray(x)),
            xmax=xmax or sx.xmax, n=n, name="separable",
        )

    def validate(self) -> None:
        c = self.centers
        X, Y = np.meshgrid(c, c, indexing="ij")
        qp, qm = self.qplus(X, Y), self.qminus(X, Y)
        if np.any(qp < 0) or np.any(qm < 0):
            raise ConfigError("jump probabilities must be nonnegative")
        if np.any(qp > 0) and self.pplus is None:
            raise ConfigError("qplus > 0 requires a P+ law")
        if np.any(qm > 0) and ((self.pi_plus > 0 and self.pplus is None)
                               or (self.pi_plus < 1 and self.pminus is None)):
            raise ConfigError("qminus > 0 requires replacement laws")


# ---------------------------------------------------------------------------
# spec files


def _read_mapping(path: Path) -> dict:
    text = path.read_text()
    if path.suffix.lower() in (".toml", ".tml"):
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def spec_from_mapping(obj: Mapping, base: Path | None = None):
    """Build a ModelSpec1D/2D from a mapping (the ``[model]`` table of a spec file)."""
    m = dict(obj.get("model", obj))
    dims = int(m.pop("dims", 1))
    if "calibration" in m:
        from .calib1d import Calib1D
        from .calib2d import Calib2D

        path = Path(m.pop("calibration"))
        if base is not None and not path.is_absolute():
            path = base / path
        cal = json.loads(path.read_text())
        extra = {k: m[k] for k in ("xmax", "n") if k in m}
        if cal.get("kind") == "calib2d":
            return Calib2D.from_json(cal).to_spec(**extra)
        return Calib1D.from_json(cal).to_spec(**extra)
    if dims not in (1, 2):
        raise ConfigError(f"dims must be 1 or 2, got {dims}")
    known1 = {"f", "d", "qplus", "qminus", "pplus", "pminus", "pi_plus", "xmax", "n", "name"}
    known2 = {"fx", "fy", "dx", "dy", "qplus", "qminus", "pplus", "pminus", "pi_plus", "xmax", "n", "name"}
    known = known1 if dims == 1 else known2
    unknown = set(m) - known
    if unknown:
        raise ConfigError(f"unknown model keys {sorted(unknown)}")
    if dims == 1:
        missing = {"f", "d"} - set(m)
        if missing:
            raise ConfigError(f"model needs {sorted(missing)}")
        return ModelSpec1D(**m, source=dict(obj))
    if dims == 2:
        missing = {"fx", "fy", "dx", "dy"} - set(m)
        if missing:
            raise ConfigError(f"model needs {sorted(missing)}")
        return ModelSpec2D(**m, source=dict(obj))


def load_spec(path: str | Path):
    path = Path(path)
    return spec_from_mapping(_read_mapping(path), path.parent)
