"""Jump-diffusion Monte Carlo for rescaled queue volumes.

Between price changes the volume follows dx = f dt + sqrt(2 d) dW
(Euler-Maruyama).  Each step first tests the jump hazards at the pre-step
state, then moves the diffusion.  An emptying between grid times is
detected with the Brownian-bridge crossing probability
exp(-2 a b / (2 d dt)) where a, b are the distances to the barrier before
and after the step, which removes the first-order bias of checking only
at grid times.

Paths are simulated in fixed-size blocks.  Block ``k`` draws from a Philox
stream keyed by (seed, k), so results do not depend on how blocks are
scheduled across workers; block results are reduced in block order.
"""

from __future__ import annotations

import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, NumericalError
from .models import ModelSpec1D, ModelSpec2D


class Stop(str, Enum):
    QUEUE_EMPTY = "queue_empty"
    PRICE_UP = "price_up"
    PRICE_DOWN = "price_down"
    CEILING = "ceiling"
    HORIZON = "horizon"


class Stop2D(str, Enum):
    BID_EMPTY = "bid_empty"
    ASK_EMPTY = "ask_empty"
    BID_UP = "bid_up"
    BID_DOWN = "bid_down"
    ASK_UP = "ask_up"
    ASK_DOWN = "ask_down"
    CEILING = "ceiling"
    HORIZON = "horizon"


def block_rng(seed: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(block),))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class SimConfig:
    spec: ModelSpec1D | ModelSpec2D
    x0: float | tuple[float, float] = 1.0
    dt: float = 0.1
    horizon: float = 1e5
    n_paths: int = 10_000
    seed: int = 0
    ceiling: float | None = None
    eps: float = 1e-3
    refill_continues: bool = False
    bridge: bool = True
    block_size: int = 4096
    jobs: int = 1
    hazard_bound: float = 0.1

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.n_paths < 1:
            raise ConfigError("n_paths must be at least 1")
        if self.block_size < 1:
            raise ConfigError("block_size must be at least 1")


@dataclass
class PassageEstimate:
    n_paths: int
    counts: dict
    time_sums: dict
    time_sq_sums: dict
    dt: float
    clamped: int = 0
    times: dict | None = field(default=None, repr=False)

    @property
    def probabilities(self) -> dict:
        return {k: c / self.n_paths for k, c in self.counts.items()}

    @property
    def standard_errors(self) -> dict:
        n = self.n_paths
        return {k: math.sqrt(max(p * (1 - p), 0.0) / n) for k, p in self.probabilities.items()}

    @property
    def mean_times(self) -> dict:
        return {k: (self.time_sums[k] / c if c else float("nan")) for k, c in self.counts.items()}

    def p(self, key) -> float:
        return self.probabilities[_key(key)]

    def se(self, key) -> float:
        return self.standard_errors[_key(key)]

    def to_json(self) -> dict:
        pr, se, mt = self.probabilities, self.standard_errors, self.mean_times
        out = {k: {"p": pr[k], "se": se[k], "n": self.counts[k],
                   "mean_time": None if not math.isfinite(mt[k]) else mt[k]} for k in self.counts}
        return {"n_paths": self.n_paths, "dt": self.dt, "clamped": self.clamped, "outcomes": out}


def _key(k) -> str:
    return k.value if isinstance(k, Enum) else str(k)


def effective_dt(dt: float, hazard_max: float, bound: float = 0.1) -> float:
    """Largest step <= dt with hazard * step <= bound (halving)."""
    while hazard_max * dt > bound:
        dt /= 2.0
        if dt < 1e-12:
            raise ConfigError("hazard too large for any time step")
    return dt


def _hazard_max_1d(spec: ModelSpec1D, top: float) -> float:
    x = np.linspace(0.0, top, 2001)
    return float(np.max(np.asarray(spec.qplus(x)) + np.asarray(spec.qminus(x)), initial=0.0))


def _bridge_hit(a, b, var, rng_u) -> np.ndarray:
    """Crossing indicator for a bridge between distances a, b > 0 with variance ``var``."""
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        p = np.exp(-2.0 * a * b / var)
    return rng_u < p


_SHARED: dict = {}


def _run_shared(fn, block, args):
    return fn(_SHARED["cfg"], block, *args)


def _run_blocks(fn, cfg, n_blocks, *args):
    if cfg.jobs > 1 and n_blocks > 1:
        # forked workers inherit the config, so specs built from closures work too
        try:
            ctx = multiprocessing.get_context("fork")
        except ValueError:
            ctx = None
        if ctx is not None:
            _SHARED["cfg"] = cfg
            try:
                with ProcessPoolExecutor(max_workers=cfg.jobs, mp_context=ctx) as ex:
                    futs = [ex.submit(_run_shared, fn, k, args) for k in range(n_blocks)]
                    return [f.result() for f in futs]
            finally:
                _SHARED.clear()
        with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            futs = [ex.submit(fn, cfg, k, *args) for k in range(n_blocks)]
            return [f.result() for f in futs]
    return [fn(cfg, k, *args) for k in range(n_blocks)]


def _reduce(results, names, n_paths, dt, keep_times) -> PassageEstimate:
    counts = {k: 0 for k in names}
    ts = {k: 0.0 for k in names}
    ts2 = {k: 0.0 for k in names}
    times = {k: [] for k in names} if keep_times else None
    clamped = 0
    for res in results:  # block order, so float sums are schedule independent
        c, s1, s2, t, cl = res
        clamped += cl
        for k in names:
            counts[k] += c[k]
            ts[k] += s1[k]
            ts2[k] += s2[k]
            if keep_times:
                times[k].append(t[k])
    if keep_times:
        times = {k: np.concatenate(v) if v else np.zeros(0) for k, v in times.items()}
    return PassageEstimate(n_paths, counts, ts, ts2, dt, clamped, times)


# ---------------------------------------------------------------------------
# 1D


def _block_1d(cfg: SimConfig, block: int, dt: float):
    spec = cfg.spec
    rng = block_rng(cfg.seed, block)
    start = block * cfg.block_size
    n = min(cfg.block_size, cfg.n_paths - start)
    x = np.full(n, float(cfg.x0))
    alive = np.arange(n)
    outcome = np.full(n, -1, dtype=np.int64)
    t_out = np.zeros(n)
    names = [s.value for s in Stop]
    code = {s: i for i, s in enumerate(Stop)}
    top = spec.xmax if cfg.ceiling is None else cfg.ceiling
    eps = cfg.eps
    n_steps = int(math.ceil(cfg.horizon / dt))
    clamped = 0
    for step in range(n_steps):
        if alive.size == 0:
            break
        xa = x[alive]
        m = alive.size
        u = rng.random(m)
        xi = rng.standard_normal(m)
        ub = rng.random(m)
        qp = np.asarray(spec.qplus(xa), dtype=float)
        qm = np.asarray(spec.qminus(xa), dtype=float)
        qt = qp + qm
        p_jump = -np.expm1(-qt * dt)
        with np.errstate(invalid="ignore", divide="ignore"):
            p_up = np.where(qt > 0, p_jump * qp / qt, 0.0)
        up = u < p_up
        down = (~up) & (u < p_jump)
        f = np.asarray(spec.f(xa), dtype=float)
        d = np.asarray(spec.d(xa), dtype=float)
        if np.any(d < 0):
            clamped += int(np.count_nonzero(d < 0))
            d = np.maximum(d, 0.0)
        var = 2.0 * d * dt
        xn = xa + f * dt + np.sqrt(var) * xi
        if not np.all(np.isfinite(xn)):
            raise NumericalError(f"non-finite state (seed {cfg.seed}, block {block}, step {step})")
        empty = (xn <= eps)
        if cfg.bridge:
            empty |= _bridge_hit(xa - eps, xn - eps, var, ub) & (xn > eps)
        hit_top = np.zeros(m, dtype=bool)
        if cfg.ceiling is not None:
            hit_top = xn >= top
            if cfg.bridge:
                hit_top |= _bridge_hit(top - xa, top - xn, var, ub) & (xn < top) & ~empty
        else:
            over = xn > top
            xn[over] = 2 * top - xn[over]
        t_now = (step + 1) * dt
        res = np.full(m, -1)
        if cfg.refill_continues and spec.pi_plus > 0:
            refill = down & (rng.random(m) < spec.pi_plus)
            down = down & ~refill
            nr = int(np.count_nonzero(refill))
            if nr:
                xn[refill] = spec.pplus.rvs(nr, rng)
                empty[refill] = False
                hit_top[refill] = False
        res[up] = code[Stop.PRICE_UP]
        res[down] = code[Stop.PRICE_DOWN]
        free = res < 0
        res[free & empty] = code[Stop.QUEUE_EMPTY]
        res[free & ~empty & hit_top] = code[Stop.CEILING]
        done = res >= 0
        idx = alive[done]
        outcome[idx] = res[done]
        t_out[idx] = t_now
        x[alive] = xn
        alive = alive[~done]
    outcome[alive] = code[Stop.HORIZON]
    t_out[alive] = n_steps * dt
    counts, s1, s2, times = {}, {}, {}, {}
    for s, i in code.items():
        sel = outcome == i
        counts[s.value] = int(np.count_nonzero(sel))
        s1[s.value] = float(np.sum(t_out[sel]))
        s2[s.value] = float(np.sum(t_out[sel] ** 2))
        times[s.value] = t_out[sel]
    return counts, s1, s2, times, clamped


def simulate_paths(cfg: SimConfig, keep_times: bool = False) -> PassageEstimate:
    """First-passage estimate for the stopped 1D process started at ``x0``."""
    spec = cfg.spec
    if not isinstance(spec, ModelSpec1D):
        raise ConfigError("simulate_paths needs a 1D spec")
    top = spec.xmax if cfg.ceiling is None else cfg.ceiling
    dt = effective_dt(cfg.dt, _hazard_max_1d(spec, top), cfg.hazard_bound)
    n_blocks = -(-cfg.n_paths // cfg.block_size)
    results = _run_blocks(_block_1d, cfg, n_blocks, dt)
    return _reduce(results, [s.value for s in Stop], cfg.n_paths, dt, keep_times)


def _free_block_1d(cfg: SimConfig, block: int, dt: float, burn_in: int, n_samples: int, every: int):
    spec = cfg.spec
    rng = block_rng(cfg.seed, block)
    n = min(cfg.block_size, cfg.n_paths - block * cfg.block_size)
    x = _initial_1d(cfg, n, rng)
    top = spec.xmax
    out = np.empty((n_samples, n))
    total = burn_in + n_samples * every
    k = 0
    for step in range(1, total + 1):
        u = rng.random(n)
        xi = rng.standard_normal(n)
        qp = np.asarray(spec.qplus(x), dtype=float)
        qm = np.asarray(spec.qminus(x), dtype=float)
        qt = qp + qm
        p_jump = -np.expm1(-qt * dt)
        with np.errstate(invalid="ignore", divide="ignore"):
            p_up = np.where(qt > 0, p_jump * qp / qt, 0.0)
        up = u < p_up
        down = (~up) & (u < p_jump)
        f = np.asarray(spec.f(x), dtype=float)
        d = np.maximum(np.asarray(spec.d(x), dtype=float), 0.0)
        xn = x + f * dt + np.sqrt(2 * d * dt) * xi
        xn = np.abs(xn)
        over = xn > top
        xn[over] = 2 * top - xn[over]
        xn = np.clip(xn, 0.0, top)
        v = rng.random(n)
        jumped = np.flatnonzero(up | down)
        if jumped.size:
            from_plus = up[jumped] | (v[jumped] < spec.pi_plus)
            new = np.empty(jumped.size)
            k_plus = int(np.count_nonzero(from_plus))
            if k_plus:
                new[from_plus] = spec.pplus.rvs(k_plus, rng)
            if k_plus < jumped.size:
                new[~from_plus] = spec.pminus.rvs(jumped.size - k_plus, rng)
            xn[jumped] = new
        x = np.minimum(xn, top)
        if step > burn_in and (step - burn_in) % every == 0:
            out[k] = x
            k += 1
    return out.ravel()


def _initial_1d(cfg, n, rng):
    return np.full(n, float(cfg.x0))


def free_running_samples(cfg: SimConfig, burn_in: float = 200.0, n_samples: int = 100,
                         every: float = 10.0) -> np.ndarray:
    """Occupancy samples of the free-running process (jumps redraw and continue).

    Each path is sampled ``n_samples`` times, ``every`` time units apart,
    after a ``burn_in`` period; reflecting at 0 and at ``xmax``.
    """
    spec = cfg.spec
    dt = effective_dt(cfg.dt, _hazard_max_1d(spec, spec.xmax), cfg.hazard_bound)
    burn = int(round(burn_in / dt))
    ev = max(1, int(round(every / dt)))
    n_blocks = -(-cfg.n_paths // cfg.block_size)
    parts = _run_blocks(_free_block_1d, cfg, n_blocks, dt, burn, n_samples, ev)
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# 2D


def _hazard_max_2d(spec: ModelSpec2D, top: float) -> float:
    g = np.linspace(0.0, top, 201)
    X, Y = np.meshgrid(g, g, indexing="ij")
    tot = (np.asarray(spec.qplus(X, Y)) + np.asarray(spec.qminus(X, Y))
           + np.asarray(spec.qplus(Y, X)) + np.asarray(spec.qminus(Y, X)))
    return float(np.max(tot, initial=0.0))


def _block_2d(cfg: SimConfig, block: int, dt: float):
    spec = cfg.spec
    rng = block_rng(cfg.seed, block)
    n = min(cfg.block_size, cfg.n_paths - block * cfg.block_size)
    x0, y0 = cfg.x0
    x = np.full(n, float(x0))
    y = np.full(n, float(y0))
    alive = np.arange(n)
    order = list(Stop2D)
    code = {s: i for i, s in enumerate(order)}
    outcome = np.full(n, -1, dtype=np.int64)
    t_out = np.zeros(n)
    top = spec.xmax if cfg.ceiling is None else cfg.ceiling
    eps = cfg.eps
    n_steps = int(math.ceil(cfg.horizon / dt))
    for step in range(n_steps):
        if alive.size == 0:
            break
        xa, ya = x[alive], y[alive]
        m = alive.size
        u = rng.random(m)
        xi = rng.standard_normal((2, m))
        ub = rng.random((2, m))
        rates = np.stack([
            np.asarray(spec.qplus(xa, ya), dtype=float) * np.ones(m),   # bid overtaken: bid up
            np.asarray(spec.qminus(xa, ya), dtype=float) * np.ones(m),  # bid depleted: bid down
            np.asarray(spec.qplus(ya, xa), dtype=float) * np.ones(m),   # ask overtaken: ask down
            np.asarray(spec.qminus(ya, xa), dtype=float) * np.ones(m),  # ask depleted: ask up
        ])
        qt = rates.sum(axis=0)
        p_jump = -np.expm1(-qt * dt)
        with np.errstate(invalid="ignore", divide="ignore"):
            cum = np.where(qt > 0, np.cumsum(rates, axis=0) / qt, 0.0) * p_jump
        which = np.where(u < p_jump, np.sum(u[None, :] >= cum, axis=0), -1)
        fx = np.asarray(spec.fx(xa, ya), dtype=float) * np.ones(m)
        fy = np.asarray(spec.fy(xa, ya), dtype=float) * np.ones(m)
        vx = 2.0 * np.maximum(np.asarray(spec.dx(xa, ya), dtype=float), 0.0) * dt
        vy = 2.0 * np.maximum(np.asarray(spec.dy(xa, ya), dtype=float), 0.0) * dt
        xn = xa + fx * dt + np.sqrt(vx) * xi[0]
        yn = ya + fy * dt + np.sqrt(vy) * xi[1]
        if not (np.all(np.isfinite(xn)) and np.all(np.isfinite(yn))):
            raise NumericalError(f"non-finite state (seed {cfg.seed}, block {block}, step {step})")
        ex = xn <= eps
        ey = yn <= eps
        if cfg.bridge:
            ex |= _bridge_hit(xa - eps, xn - eps, vx, ub[0]) & (xn > eps)
            ey |= _bridge_hit(ya - eps, yn - eps, vy, ub[1]) & (yn > eps)
        if cfg.ceiling is not None:
            ceil = (xn >= top) | (yn >= top)
        else:
            ceil = np.zeros(m, dtype=bool)
            xn = np.where(xn > top, 2 * top - xn, xn)
            yn = np.where(yn > top, 2 * top - yn, yn)
        res = np.full(m, -1)
        jump_codes = [code[Stop2D.BID_UP], code[Stop2D.BID_DOWN], code[Stop2D.ASK_DOWN], code[Stop2D.ASK_UP]]
        for j, c in enumerate(jump_codes):
            res[which == j] = c
        free = res < 0
        # simultaneous emptying within one step is split by a fair coin
        both = free & ex & ey
        coin = ub[0] < 0.5
        res[free & ex & ~ey] = code[Stop2D.BID_EMPTY]
        res[free & ey & ~ex] = code[Stop2D.ASK_EMPTY]
        res[both & coin] = code[Stop2D.BID_EMPTY]
        res[both & ~coin] = code[Stop2D.ASK_EMPTY]
        res[(res < 0) & ceil] = code[Stop2D.CEILING]
        done = res >= 0
        idx = alive[done]
        outcome[idx] = res[done]
        t_out[idx] = (step + 1) * dt
        x[alive] = xn
        y[alive] = yn
        alive = alive[~done]
    outcome[alive] = code[Stop2D.HORIZON]
    t_out[alive] = n_steps * dt
    counts, s1, s2, times = {}, {}, {}, {}
    for s, i in code.items():
        sel = outcome == i
        counts[s.value] = int(np.count_nonzero(sel))
        s1[s.value] = float(np.sum(t_out[sel]))
        s2[s.value] = float(np.sum(t_out[sel] ** 2))
        times[s.value] = t_out[sel]
    return counts, s1, s2, times, 0


def simulate_2d(cfg: SimConfig, keep_times: bool = False) -> PassageEstimate:
    """Race between the six price-changing outcomes from ``x0 = (x, y)``.

    ``bid_empty``/``ask_empty`` are diffusive emptyings; ``bid_up`` and
    ``ask_down`` are overtakings; ``bid_down`` and ``ask_up`` are jump
    depletions.  ``aggregate_2d`` groups them by price direction.
    """
    spec = cfg.spec
    if not isinstance(spec, ModelSpec2D):
        raise ConfigError("simulate_2d needs a 2D spec")
    if np.ndim(cfg.x0) != 1 or len(cfg.x0) != 2:
        raise ConfigError("x0 must be a pair (x, y)")
    top = spec.xmax if cfg.ceiling is None else cfg.ceiling
    dt = effective_dt(cfg.dt, _hazard_max_2d(spec, top), cfg.hazard_bound)
    n_blocks = -(-cfg.n_paths // cfg.block_size)
    results = _run_blocks(_block_2d, cfg, n_blocks, dt)
    return _reduce(results, [s.value for s in Stop2D], cfg.n_paths, dt, keep_times)


def aggregate_2d(probs: dict) -> dict:
    """Price-direction outcomes from the fine-grained 2D outcomes."""
    return {
        "bid_price_down": probs.get("bid_empty", 0.0) + probs.get("bid_down", 0.0),
        "ask_price_up": probs.get("ask_empty", 0.0) + probs.get("ask_up", 0.0),
        "bid_price_up": probs.get("bid_up", 0.0),
        "ask_price_down": probs.get("ask_down", 0.0),
    }


def _free_block_2d(cfg: SimConfig, block: int, dt: float, burn_in: int, n_samples: int, every: int):
    spec = cfg.spec
    rng = block_rng(cfg.seed, block)
    n = min(cfg.block_size, cfg.n_paths - block * cfg.block_size)
    x = np.full(n, float(cfg.x0[0]))
    y = np.full(n, float(cfg.x0[1]))
    top = spec.xmax
    out = np.empty((n_samples, 2, n))
    k = 0
    for step in range(1, burn_in + n_samples * every + 1):
        u = rng.random(n)
        xi = rng.standard_normal((2, n))
        rates = np.stack([
            np.asarray(spec.qplus(x, y), dtype=float) * np.ones(n),
            np.asarray(spec.qminus(x, y), dtype=float) * np.ones(n),
            np.asarray(spec.qplus(y, x), dtype=float) * np.ones(n),
            np.asarray(spec.qminus(y, x), dtype=float) * np.ones(n),
        ])
        qt = rates.sum(axis=0)
        p_jump = -np.expm1(-qt * dt)
        with np.errstate(invalid="ignore", divide="ignore"):
            cum = np.where(qt > 0, np.cumsum(rates, axis=0) / qt, 0.0) * p_jump
        which = np.where(u < p_jump, np.sum(u[None, :] >= cum, axis=0), -1)
        xn = x + spec.fx(x, y) * dt + np.sqrt(2 * np.maximum(spec.dx(x, y), 0) * dt) * xi[0]
        yn = y + spec.fy(x, y) * dt + np.sqrt(2 * np.maximum(spec.dy(x, y), 0) * dt) * xi[1]
        xn, yn = np.abs(xn), np.abs(yn)
        xn = np.clip(np.where(xn > top, 2 * top - xn, xn), 0, top)
        yn = np.clip(np.where(yn > top, 2 * top - yn, yn), 0, top)
        v = rng.random(n)
        jumped = np.flatnonzero(which >= 0)
        if jumped.size:
            w = which[jumped]
            # overtakings (0, 2) always draw from P+, depletions (1, 3) refill with pi+
            from_plus = (w % 2 == 0) | (v[jumped] < spec.pi_plus)
            own = np.empty(jumped.size)
            opp = np.empty(jumped.size)
            k_plus = int(np.count_nonzero(from_plus))
            if k_plus:
                own[from_plus], opp[from_plus] = spec.pplus.rvs(k_plus, rng)
            if k_plus < jumped.size:
                own[~from_plus], opp[~from_plus] = spec.pminus.rvs(jumped.size - k_plus, rng)
            bid = w < 2
            xn[jumped] = np.where(bid, own, opp)
            yn[jumped] = np.where(bid, opp, own)
        x, y = np.minimum(xn, top), np.minimum(yn, top)
        if step > burn_in and (step - burn_in) % every == 0:
            out[k, 0], out[k, 1] = x, y
            k += 1
    return np.stack([out[:, 0].ravel(), out[:, 1].ravel()], axis=1)


def free_running_samples_2d(cfg: SimConfig, burn_in: float = 200.0, n_samples: int = 50,
                            every: float = 10.0) -> np.ndarray:
    """(n, 2) occupancy samples of the free-running 2D process."""
    spec = cfg.spec
    dt = effective_dt(cfg.dt, _hazard_max_2d(spec, spec.xmax), cfg.hazard_bound)
    burn = int(round(burn_in / dt))
    ev = max(1, int(round(every / dt)))
    n_blocks = -(-cfg.n_paths // cfg.block_size)
    return np.concatenate(_run_blocks(_free_block_2d, cfg, n_blocks, dt, burn, n_samples, ev))
