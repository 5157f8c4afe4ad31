"""Stationary solutions of the queue-volume Fokker-Planck equations.

The 1D and 2D operators are discretized as continuous-time Markov
generators on a cell-centered grid, so that mass is conserved exactly and
the stationary law is a null vector.  The drift-diffusion flux between
neighbouring cells uses exponential fitting

    J = (B(-t) d_i P_i - B(t) d_j P_j) / h,   B(z) = z / (e^z - 1),
    t = h * (f/d averaged over the two cells)

which is upwind for strong drift, keeps all transition rates nonnegative
and has the trapezoid Gibbs-Boltzmann weights as its exact zero-flux
solution.  Jump terms remove mass at the pre-jump cell and reinject it
with the replacement laws.

Also here: absorbing backward-equation solves for first-passage
probabilities, used as oracles for the Monte Carlo estimates.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_banded
from scipy.sparse.linalg import splu, spsolve
from scipy.special import exprel

from .errors import ConfigError, ConvergenceError, NumericalError
from .grids import Grid2D
from .models import ModelSpec1D, ModelSpec2D


def bernoulli(z) -> np.ndarray:
    """B(z) = z / (e^z - 1), evaluated stably (B(0) = 1)."""
    return 1.0 / exprel(np.asarray(z, dtype=float))


@dataclass(frozen=True)
class StationaryResult:
    x: np.ndarray
    edges: np.ndarray
    pst: np.ndarray
    potential: np.ndarray | None = None
    flux_residual: float = 0.0
    iterations: int = 1
    info: dict = field(default_factory=dict, compare=False)

    @property
    def dx(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def mass(self) -> np.ndarray:
        return self.pst * self.dx

    def cdf(self, x=None) -> np.ndarray:
        """CDF at the cell edges (or interpolated at ``x``)."""
        c = np.concatenate([[0.0], np.cumsum(self.mass)])
        if x is None:
            return c
        return np.interp(np.asarray(x, dtype=float), self.edges, c)

    def to_json(self) -> dict:
        out = {"x": self.x.tolist(), "edges": self.edges.tolist(), "pst": self.pst.tolist(),
               "flux_residual": self.flux_residual, "iterations": self.iterations, **self.info}
        if self.potential is not None:
            out["potential"] = self.potential.tolist()
        return out


def _coefficients_1d(spec: ModelSpec1D, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(spec.f(x), dtype=float)
    d = np.asarray(spec.d(x), dtype=float)
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(d))):
        raise ConfigError("drift or diffusion not finite on the grid")
    bad = np.flatnonzero(d <= 0)
    if bad.size:
        i = int(bad[0])
        raise ConfigError(f"diffusion must be positive: d = {d[i]:.3g} in cell {i} (x = {x[i]:.4g})")
    return f, d


def _normalize_log(logp: np.ndarray, dx) -> np.ndarray:
    if not np.all(np.isfinite(logp)):
        raise NumericalError("stationary weights not finite")
    w = np.exp(logp - logp.max())
    z = np.sum(w * dx)
    if not (np.isfinite(z) and z > 0):
        raise NumericalError("stationary density is not normalizable")
    return w / z


def _warn_edge_mass(mass: np.ndarray, frac: float = 0.01) -> None:
    k = max(1, int(np.ceil(frac * len(mass))))
    if mass[-k:].sum() > frac:
        warnings.warn("more than 1% of the stationary mass lies next to the upper boundary; "
                      "consider a larger xmax", RuntimeWarning, stacklevel=3)


def gibbs_boltzmann(spec: ModelSpec1D, check_jumps: bool = True) -> StationaryResult:
    """Zero-current stationary law P ~ exp(-u) / d with u = -int f/d (trapezoid)."""
    x = spec.centers
    if check_jumps and spec.has_jumps(x):
        raise ConfigError("the Gibbs-Boltzmann law requires qplus = qminus = 0")
    f, d = _coefficients_1d(spec, x)
    g = f / d
    h = np.diff(x)
    u = np.concatenate([[0.0], -np.cumsum(0.5 * (g[1:] + g[:-1]) * h)])
    dx = np.diff(spec.edges)
    p = _normalize_log(-u - np.log(d), dx)
    _warn_edge_mass(p * dx)
    return StationaryResult(x=x, edges=spec.edges, pst=p, potential=u - u.min())


@dataclass
class Generator1D:
    """Rate matrix ``L`` acting on cell masses: dm/dt = L m.

    ``L = T - diag(q+ + q-) + p_plus q+^T + mix q-^T`` with ``T`` the
    sparse drift-diffusion part.
    """

    T: sp.csr_matrix
    qplus: np.ndarray
    qminus: np.ndarray
    p_plus: np.ndarray
    mix: np.ndarray

    @property
    def n(self) -> int:
        return self.T.shape[0]

    def matvec(self, m: np.ndarray) -> np.ndarray:
        return (self.T @ m - (self.qplus + self.qminus) * m
                + self.p_plus * (self.qplus @ m) + self.mix * (self.qminus @ m))

    def column_sums(self) -> np.ndarray:
        """1^T L, evaluated per term so small jump rates are not rounded into large diagonals."""
        out = np.asarray(self.T.sum(axis=0)).ravel()
        return out + self.qplus * (self.p_plus.sum() - 1.0) + self.qminus * (self.mix.sum() - 1.0)

    def to_dense(self) -> np.ndarray:
        L = self.T.toarray()
        L -= np.diag(self.qplus + self.qminus)
        L += np.outer(self.p_plus, self.qplus) + np.outer(self.mix, self.qminus)
        return L


def _transport_rates(f, d, h):
    """Exponential-fitting rates between consecutive cells spaced by ``h``."""
    theta = h * 0.5 * (f[1:] / d[1:] + f[:-1] / d[:-1])
    up = bernoulli(-theta) * d[:-1] / h**2      # i -> i+1
    down = bernoulli(theta) * d[1:] / h**2      # i+1 -> i
    return up, down


def _chain_matrix(up: np.ndarray, down: np.ndarray) -> sp.csr_matrix:
    n = len(up) + 1
    out = np.zeros(n)
    out[:-1] += up
    out[1:] += down
    return sp.diags([down, -out, up], [1, 0, -1], shape=(n, n), format="csr")


def build_generator_1d(spec: ModelSpec1D) -> Generator1D:
    spec.validate()
    x = spec.centers
    h = spec.xmax / spec.n
    f, d = _coefficients_1d(spec, x)
    up, down = _transport_rates(f, d, h)
    T = _chain_matrix(up, down)
    qp = np.asarray(spec.qplus(x), dtype=float)
    qm = np.asarray(spec.qminus(x), dtype=float)
    if np.any(qp > 0) or np.any(qm > 0):
        p_plus, mix = spec.reinjection(spec.edges)
    else:
        p_plus = mix = np.zeros(spec.n)
    return Generator1D(T, qp, qm, p_plus, mix)


def stationary_1d(spec: ModelSpec1D, tol: float = 1e-10) -> StationaryResult:
    """Null vector of the full 1D generator (with jumps), normalized to mass 1.

    Solved directly as a bordered sparse system in (m, a, b), where
    a = q+ . m and b = q- . m are the total jump outflows; one balance
    row is replaced by the normalization.
    """
    gen = build_generator_1d(spec)
    n = gen.n
    A = gen.T - sp.diags(gen.qplus + gen.qminus)
    top = sp.hstack([A, sp.csr_matrix(gen.p_plus[:, None]), sp.csr_matrix(gen.mix[:, None])])
    rows = sp.vstack([
        top,
        sp.hstack([sp.csr_matrix(-gen.qplus[None, :]), sp.csr_matrix([[1.0, 0.0]])]),
        sp.hstack([sp.csr_matrix(-gen.qminus[None, :]), sp.csr_matrix([[0.0, 1.0]])]),
    ]).tolil()
    rows[n - 1, :] = 0.0
    rows[n - 1, :n] = 1.0
    rhs = np.zeros(n + 2)
    rhs[n - 1] = 1.0
    sol = spsolve(rows.tocsc(), rhs)
    m = sol[:n]
    if not np.all(np.isfinite(m)):
        raise NumericalError("stationary solve produced non-finite values")
    scale = np.abs(gen.T).sum() / n + np.max(gen.qplus + gen.qminus, initial=0.0)
    resid = float(np.abs(gen.matvec(m)).sum() / max(scale, 1e-300))
    if resid > tol:
        raise NumericalError(f"no stationary vector within tolerance (residual {resid:.3g})", [resid])
    if m.min() < -1e-12:
        raise NumericalError(f"negative stationary mass {m.min():.3g}", [resid])
    m = np.clip(m, 0.0, None)
    m /= m.sum()
    _warn_edge_mass(m)
    dx = np.diff(spec.edges)
    return StationaryResult(x=spec.centers, edges=spec.edges, pst=m / dx, flux_residual=resid)


# ---------------------------------------------------------------------------
# 2D


@dataclass
class Generator2D:
    T: sp.csr_matrix
    loss: np.ndarray
    q: dict
    reinject: dict
    shape: tuple

    def matvec(self, m: np.ndarray) -> np.ndarray:
        out = self.T @ m - self.loss * m
        for key, qv in self.q.items():
            out += self.reinject[key] * (qv @ m)
        return out

    def column_sums(self) -> np.ndarray:
        out = np.asarray(self.T.sum(axis=0)).ravel()
        for key, qv in self.q.items():
            out = out + qv * (self.reinject[key].sum() - 1.0)
        return out

    @property
    def max_rate(self) -> float:
        return float(np.max(np.abs(self.T.diagonal()) + self.loss))


def _coef2(fun, X, Y, name):
    v = np.asarray(fun(X, Y), dtype=float) * np.ones_like(X)
    if not np.all(np.isfinite(v)):
        raise ConfigError(f"{name} not finite on the grid")
    return v


def build_generator_2d(spec: ModelSpec2D) -> Generator2D:
    spec.validate()
    c, e = spec.centers, spec.edges
    n = spec.n
    h = spec.xmax / n
    X, Y = np.meshgrid(c, c, indexing="ij")
    fx, fy = _coef2(spec.fx, X, Y, "fx"), _coef2(spec.fy, X, Y, "fy")
    dx, dy = _coef2(spec.dx, X, Y, "dx"), _coef2(spec.dy, X, Y, "dy")
    for arr, name in ((dx, "dx"), (dy, "dy")):
        bad = np.argwhere(arr <= 0)
        if bad.size:
            i, j = bad[0]
            raise ConfigError(f"{name} must be positive: {arr[i, j]:.3g} in cell ({i}, {j})")
    idx = np.arange(n * n).reshape(n, n)
    rows, cols, vals = [], [], []
    # along x (axis 0) for each column j, along y (axis 1) for each row i
    for f, d, axis in ((fx, dx, 0), (fy, dy, 1)):
        fa, da = np.moveaxis(f, axis, 0), np.moveaxis(d, axis, 0)
        ia = np.moveaxis(idx, axis, 0)
        theta = h * 0.5 * (fa[1:] / da[1:] + fa[:-1] / da[:-1])
        up = bernoulli(-theta) * da[:-1] / h**2
        down = bernoulli(theta) * da[1:] / h**2
        src_lo, src_hi = ia[:-1].ravel(), ia[1:].ravel()
        rows += [src_hi, src_lo, src_lo, src_hi]
        cols += [src_lo, src_hi, src_lo, src_hi]
        vals += [up.ravel(), down.ravel(), -up.ravel(), -down.ravel()]
    T = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n * n, n * n))
    qb_p = _coef2(spec.qplus, X, Y, "qplus")       # bid queue x facing y
    qb_m = _coef2(spec.qminus, X, Y, "qminus")
    qa_p = _coef2(spec.qplus, Y, X, "qplus")       # ask queue y facing x
    qa_m = _coef2(spec.qminus, Y, X, "qminus")
    q, reinject = {}, {}
    if np.any(qb_p > 0) or np.any(qb_m > 0) or np.any(qa_p > 0) or np.any(qa_m > 0):
        pp = spec.pplus.cell_masses(e, e) if spec.pplus is not None else np.zeros((n, n))
        pm = spec.pminus.cell_masses(e, e) if spec.pminus is not None else np.zeros((n, n))
        mix = spec.pi_plus * pp + spec.pi_minus * pm
        # joint laws are over (own, opposite): transpose for the ask side
        q = {"bid_plus": qb_p.ravel(), "bid_minus": qb_m.ravel(),
             "ask_plus": qa_p.ravel(), "ask_minus": qa_m.ravel()}
        reinject = {"bid_plus": pp.ravel(), "bid_minus": mix.ravel(),
                    "ask_plus": pp.T.ravel(), "ask_minus": mix.T.ravel()}
    loss = (qb_p + qb_m + qa_p + qa_m).ravel()
    return Generator2D(T, loss, q, reinject, (n, n))


@dataclass(frozen=True)
class Stationary2D:
    density: Grid2D
    iterations: int
    residual: float
    dt: float
    history: list = field(default_factory=list, compare=False)

    def to_json(self) -> dict:
        return {"density": self.density.to_json(), "iterations": self.iterations,
                "residual": self.residual, "dt": self.dt}


def stationary_2d(spec: ModelSpec2D, tol: float = 1e-9, max_iters: int = 2_000_000,
                  safety: float = 0.9, dt: float | None = None,
                  m0: np.ndarray | None = None) -> Stationary2D:
    """Relax the 2D generator with explicit Euler steps from the uniform law.

    Stops when the L1 norm of dm/dt falls below ``tol``.  The step is capped
    at ``safety / max exit rate``; a larger requested step is reduced, and a
    step that collapses to zero is an error.
    """
    gen = build_generator_2d(spec)
    n = spec.n
    limit = safety / gen.max_rate
    if dt is None or dt > limit:
        dt = limit
    if not dt > 1e-300:
        raise NumericalError("time step underflow")
    m = np.full(n * n, 1.0 / (n * n)) if m0 is None else np.asarray(m0, float).ravel().copy()
    history = []
    for it in range(1, max_iters + 1):
        dm = gen.matvec(m)
        r = float(np.abs(dm).sum())
        if it % 1000 == 1:
            history.append(r)
        if r < tol:
            break
        m = m + dt * dm
        m /= m.sum()
    else:
        raise ConvergenceError(f"2D relaxation did not converge in {max_iters} steps "
                               f"(residual {r:.3g})", history)
    if m.min() < -1e-12:
        raise NumericalError(f"negative stationary mass {m.min():.3g}", history)
    area = (spec.xmax / n) ** 2
    dens = np.clip(m, 0.0, None).reshape(n, n) / area
    e = spec.edges
    grid = Grid2D(e, e, dens, np.zeros((n, n), dtype=np.int64))
    return Stationary2D(grid, iterations=it, residual=r, dt=dt, history=history)


# ---------------------------------------------------------------------------
# first-passage oracles


@dataclass(frozen=True)
class HittingResult:
    x: np.ndarray
    probs: dict

    def at(self, x0: float) -> dict:
        return {k: float(np.interp(x0, self.x, v)) for k, v in self.probs.items()}


def hitting_probabilities_1d(spec: ModelSpec1D, m: int = 4000, ceiling: float | None = None,
                             eps: float = 0.0, refill_continues: bool = False) -> HittingResult:
    """Exit-law of the stopped jump-diffusion by a backward-equation solve.

    Outcomes: ``queue_empty`` (x reaches ``eps``), ``price_up`` (q+ jump),
    ``price_down`` (q- jump) and, with ``ceiling``, ``ceiling``.  Above the
    domain top the process reflects.  Central differences on ``m`` links.
    With ``refill_continues`` a q- jump that refills (probability pi+)
    restarts from P+ instead of stopping; this is handled by solving for
    the value at the restart law self-consistently.
    """
    top = spec.xmax if ceiling is None else ceiling
    x = np.linspace(eps, top, m + 1)
    h = x[1] - x[0]
    f, d = _coefficients_1d(spec, x)
    qp = np.asarray(spec.qplus(x), dtype=float)
    qm = np.asarray(spec.qminus(x), dtype=float)
    stop_m = qm * (spec.pi_minus if refill_continues else 1.0)
    restart = qm * spec.pi_plus if refill_continues else np.zeros_like(qm)
    lower = d / h**2 - f / (2 * h)
    upper = d / h**2 + f / (2 * h)
    diag = -2 * d / h**2 - qp - stop_m - restart
    n = m + 1
    ab = np.zeros((3, n))
    ab[0, 1:] = upper[:-1]
    ab[1, :] = diag
    ab[2, :-1] = lower[1:]
    # x = eps: absorbing
    ab[1, 0] = 1.0
    ab[0, 1] = 0.0
    if ceiling is None:
        # reflecting: ghost node mirrors the last interior node
        ab[2, n - 2] = lower[-1] + upper[-1]
    else:
        ab[1, -1] = 1.0
        ab[2, n - 2] = 0.0

    def solve(rhs):
        return solve_banded((1, 1), ab, rhs)

    outcomes = {"queue_empty": None, "price_up": None, "price_down": None}
    if ceiling is not None:
        outcomes["ceiling"] = None
    src = {"queue_empty": np.zeros(n), "price_up": -qp, "price_down": -stop_m}
    if ceiling is not None:
        src["ceiling"] = np.zeros(n)
    bc = {"queue_empty": (1.0, 0.0), "price_up": (0.0, 0.0), "price_down": (0.0, 0.0),
          "ceiling": (0.0, 1.0)}
    sol = {}
    for k in outcomes:
        rhs = src[k].copy()
        rhs[0] = bc[k][0]
        if ceiling is not None:
            rhs[-1] = bc[k][1]
        sol[k] = solve(rhs)
    if refill_continues and spec.pi_plus > 0 and np.any(qm > 0):
        # h = h0 + c * r where r solves the restart-hazard equation with unit value
        rhs = -restart.copy()
        rhs[0] = 0.0
        if ceiling is not None:
            rhs[-1] = 0.0
        r = solve(rhs)
        w = spec.pplus.cell_masses(np.concatenate([[x[0] - h / 2], 0.5 * (x[1:] + x[:-1]), [x[-1] + h / 2]]))
        denom = 1.0 - float(w @ r)
        for k in sol:
            c = float(w @ sol[k]) / denom
            sol[k] = sol[k] + c * r
    return HittingResult(x=x, probs=sol)


OUTCOMES_2D = ("bid_empty", "ask_empty", "bid_up", "bid_down", "ask_up", "ask_down")


def hitting_probabilities_2d(spec: ModelSpec2D, m: int = 128, eps: float = 0.0,
                             ceiling: float | None = None) -> dict:
    """Exit-law of the stopped 2D process by a sparse backward-equation solve.

    Nodes on [eps, top]^2 with ``m`` links per axis; the bid (x) and ask (y)
    queues empty at ``eps``.  Jumps: ``bid_up`` = bid overtaken (q+(x|y)),
    ``bid_down`` = bid depleted (q-(x|y)), ``ask_down`` = ask overtaken
    (q+(y|x)), ``ask_up`` = ask depleted (q-(y|x)).  Reflecting at the top
    unless ``ceiling`` is given, in which case reaching it on either axis
    is the outcome ``ceiling``.

    Returns ``{"x": nodes, "probs": {outcome: (m+1, m+1) array}}``.
    """
    top = spec.xmax if ceiling is None else ceiling
    x = np.linspace(eps, top, m + 1)
    h = x[1] - x[0]
    n = m + 1
    X, Y = np.meshgrid(x, x, indexing="ij")
    fx, fy = _coef2(spec.fx, X, Y, "fx"), _coef2(spec.fy, X, Y, "fy")
    dx, dy = _coef2(spec.dx, X, Y, "dx"), _coef2(spec.dy, X, Y, "dy")
    hz = {
        "bid_up": _coef2(spec.qplus, X, Y, "qplus"),
        "bid_down": _coef2(spec.qminus, X, Y, "qminus"),
        "ask_down": _coef2(spec.qplus, Y, X, "qplus"),
        "ask_up": _coef2(spec.qminus, Y, X, "qminus"),
    }
    idx = np.arange(n * n).reshape(n, n)
    interior = np.ones((n, n), dtype=bool)
    interior[0, :] = False
    interior[:, 0] = False
    if ceiling is not None:
        interior[-1, :] = False
        interior[:, -1] = False
    rows, cols, vals = [], [], []

    def add(mask, di, dj, coef):
        ii, jj = np.nonzero(mask)
        ti, tj = ii + di, jj + dj
        # reflect beyond the top
        ti = np.where(ti > n - 1, 2 * (n - 1) - ti, ti)
        tj = np.where(tj > n - 1, 2 * (n - 1) - tj, tj)
        rows.append(idx[ii, jj])
        cols.append(idx[ti, tj])
        vals.append(coef[ii, jj])

    total = sum(hz.values())
    add(interior, 0, 0, -2 * dx / h**2 - 2 * dy / h**2 - total)
    add(interior, 1, 0, dx / h**2 + fx / (2 * h))
    add(interior, -1, 0, dx / h**2 - fx / (2 * h))
    add(interior, 0, 1, dy / h**2 + fy / (2 * h))
    add(interior, 0, -1, dy / h**2 - fy / (2 * h))
    bnd = ~interior
    add(bnd, 0, 0, np.ones((n, n)))
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n * n, n * n)).tocsc()
    lu = splu(A)
    probs = {}
    names = list(OUTCOMES_2D) + (["ceiling"] if ceiling is not None else [])
    for k in names:
        rhs = np.zeros((n, n))
        if k in hz:
            rhs[interior] = -hz[k][interior]
        elif k == "bid_empty":
            rhs[0, :] = 1.0
        elif k == "ask_empty":
            rhs[:, 0] = 1.0
            rhs[0, 0] = 0.5  # corner: split evenly
        elif k == "ceiling":
            rhs[-1, 1:] = 1.0
            rhs[1:, -1] = 1.0
        if k == "bid_empty":
            rhs[0, 0] = 0.5
        probs[k] = lu.solve(rhs.ravel()).reshape(n, n)
    return {"x": x, "probs": probs}


def interp_2d(result: dict, x0: float, y0: float) -> dict:
    from scipy.interpolate import RegularGridInterpolator

    out = {}
    for k, v in result["probs"].items():
        f = RegularGridInterpolator((result["x"], result["x"]), v)
        out[k] = float(f([[x0, y0]])[0])
    return out
