"""Synthetic best-quote streams with a known generative truth.

The generator samples the queue master equation directly.  At each event
a side is drawn uniformly; with the no-price-change probability the
touched queue moves by ``ΔV = round(V̄(b) · dv)`` with

    dv = f(x) + sqrt(2 d(x) - f(x)²) · Z,

so that E[dv] = f and ½ E[dv²] = d exactly; otherwise the price moves and
the queue is replaced by a volume drawn from P+ or P-.  ``Z`` is a unit
variance mixture of a Gaussian body and a symmetric Pareto tail of index
``alpha`` (weight ``p_tail``).

Each event is written as the best-quote record sequence the classifier
reads back as that event, so ``classify(generate_events(...))`` recovers
the sampled events one for one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .events import NS_PER_DAY, NS_PER_SECOND, RECORD_DTYPE, Action, Records, SessionConfig, Side
from .models import ModelSpec1D, ModelSpec2D, as_function, make_density, make_density_2d

_TABLE_STEP = 1e-3
_TABLE_STEP_2D = 0.02
_START_PRICE = 10_000


@dataclass
class NoiseLaw:
    """Unit-variance symmetric noise: Gaussian body plus Pareto tail."""

    p_tail: float = 0.05
    alpha: float = 2.5

    def __post_init__(self):
        if not 0.0 <= self.p_tail < 1.0:
            raise ConfigError("p_tail must lie in [0, 1)")
        if self.p_tail > 0 and not self.alpha > 0:
            raise ConfigError("tail index must be positive")

    @property
    def finite_variance(self) -> bool:
        return self.p_tail == 0 or self.alpha > 2

    @property
    def scale(self) -> float:
        # with an infinite-variance tail the body keeps unit scale
        if not self.finite_variance:
            return 1.0
        tail_m2 = self.alpha / (self.alpha - 2) if self.p_tail > 0 else 0.0
        return 1.0 / math.sqrt((1 - self.p_tail) + self.p_tail * tail_m2)

    def rvs(self, size: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(size)
        if self.p_tail > 0:
            tail = rng.random(size) < self.p_tail
            mag = (1.0 - rng.random(size)) ** (-1.0 / self.alpha)
            sign = np.where(rng.random(size) < 0.5, -1.0, 1.0)
            z = np.where(tail, sign * mag, z)
        return self.scale * z

    def mean_abs(self) -> float:
        """E|Z| (used to match a target mean absolute volume change)."""
        body = math.sqrt(2 / math.pi)
        tail = self.alpha / (self.alpha - 1) if self.alpha > 1 else math.inf
        return self.scale * ((1 - self.p_tail) * body + self.p_tail * tail)


@dataclass
class Truth1D:
    """Per-event conditional laws of one queue.

    ``f``/``d`` are the conditional mean and half mean-square of the
    rescaled change given no price change; ``qplus``/``qminus`` the
    per-event jump probabilities.
    """

    f: object
    d: object
    qplus: object = 0.0
    qminus: object = 0.0
    pplus: object = None
    pminus: object = None
    pi_plus: float = 0.0
    noise: NoiseLaw = field(default_factory=NoiseLaw)
    xmax: float = 8.0
    x0: float = 1.0

    def __post_init__(self):
        for k in ("f", "d", "qplus", "qminus"):
            setattr(self, k, as_function(getattr(self, k)))
        self.pplus = make_density(self.pplus)
        self.pminus = make_density(self.pminus)
        self.validate()

    def validate(self) -> None:
        x = np.linspace(0.0, self.xmax, 4001)
        _check_truth(x, self.f(x), self.d(x), self.qplus(x), self.qminus(x), self)

    def to_model_spec(self, xmax: float | None = None, n: int = 1000) -> ModelSpec1D:
        """Equation coefficients implied by this truth (own-queue event time)."""
        f, d, qp, qm = self.f, self.d, self.qplus, self.qminus
        pi0 = lambda x: 1.0 - qp(x) - qm(x)
        return ModelSpec1D(
            f=lambda x: pi0(x) * f(x), d=lambda x: pi0(x) * d(x),
            qplus=qp, qminus=qm, pplus=self.pplus, pminus=self.pminus,
            pi_plus=self.pi_plus, xmax=xmax or self.xmax, n=n, name="truth",
        )


@dataclass
class Truth2D:
    """Per-own-event conditional laws shared by both sides, in (own, opp)."""

    f: object
    d: object
    qplus: object = 0.0
    qminus: object = 0.0
    pplus: object = None
    pminus: object = None
    pi_plus: float = 0.0
    noise: NoiseLaw = field(default_factory=NoiseLaw)
    xmax: float = 5.0
    x0: tuple = (1.0, 1.0)

    def __post_init__(self):
        for k in ("f", "d", "qplus", "qminus"):
            setattr(self, k, as_function(getattr(self, k), dims=2))
        self.pplus = _joint(self.pplus)
        self.pminus = _joint(self.pminus)
        self.validate()

    def validate(self) -> None:
        g = np.linspace(0.0, self.xmax, 201)
        X, Y = np.meshgrid(g, g, indexing="ij")
        _check_truth(X.ravel(), *(np.broadcast_to(fn(X, Y), X.shape).ravel() for fn in
                                  (self.f, self.d, self.qplus, self.qminus)), self)

    def to_model_spec(self, xmax: float | None = None, n: int = 64) -> ModelSpec2D:
        """Equation coefficients in total event time (either side)."""
        f, d, qp, qm = self.f, self.d, self.qplus, self.qminus
        pi0 = lambda a, b: 1.0 - qp(a, b) - qm(a, b)
        half = lambda fn: (lambda a, b: 0.5 * fn(a, b))
        return ModelSpec2D(
            fx=lambda x, y: 0.5 * pi0(x, y) * f(x, y),
            fy=lambda x, y: 0.5 * pi0(y, x) * f(y, x),
            dx=lambda x, y: 0.5 * pi0(x, y) * d(x, y),
            dy=lambda x, y: 0.5 * pi0(y, x) * d(y, x),
            qplus=half(qp), qminus=half(qm), pplus=self.pplus, pminus=self.pminus,
            pi_plus=self.pi_plus, xmax=xmax or self.xmax, n=n, name="truth",
        )


def _joint(obj):
    """2D replacement law; a 1D law redraws the own queue and keeps the opposite one."""
    if obj is None or isinstance(obj, _OwnOnly):
        return obj
    try:
        return make_density_2d(obj)
    except ConfigError:
        return _OwnOnly(make_density(obj))


class _OwnOnly:
    def __init__(self, own):
        self.own = own

    def rvs(self, size, rng):
        return self.own.rvs(size, rng), np.full(size, np.nan)

    def cell_masses(self, x_edges, y_edges):
        raise ConfigError("a law for the own queue only has no joint cell masses")


def _check_truth(x, f, d, qp, qm, truth) -> None:
    f, d, qp, qm = (np.broadcast_to(np.asarray(a, dtype=float), np.shape(x)) for a in (f, d, qp, qm))
    if np.any(qp < 0) or np.any(qm < 0):
        raise ConfigError("inconsistent truth: negative jump probability")
    bad = qp + qm > 1 + 1e-12
    if np.any(bad):
        raise ConfigError(f"inconsistent truth: no-price-change probability < 0 at x={x[np.argmax(bad)]:.4g}")
    bad = 2 * d - f * f < -1e-12
    if np.any(bad):
        raise ConfigError(f"inconsistent truth: 2d < f² at x={x[np.argmax(bad)]:.4g}")
    if np.any(qp > 0) and truth.pplus is None:
        raise ConfigError("qplus > 0 requires a P+ law")
    if np.any(qm > 0) and ((truth.pi_plus > 0 and truth.pplus is None)
                           or (truth.pi_plus < 1 and truth.pminus is None)):
        raise ConfigError("qminus > 0 requires replacement laws")
    if not 0 <= truth.pi_plus <= 1:
        raise ConfigError("pi_plus must lie in [0, 1]")


# ---------------------------------------------------------------------------
# coefficient tables


class _Table1D:
    def __init__(self, truth: Truth1D):
        top = truth.xmax
        self.inv_h = 1.0 / _TABLE_STEP
        x = np.arange(0.0, top + 2 * _TABLE_STEP, _TABLE_STEP)
        self.last = len(x) - 2
        f = np.broadcast_to(truth.f(x), x.shape).astype(float)
        d = np.broadcast_to(truth.d(x), x.shape).astype(float)
        qp = np.broadcast_to(truth.qplus(x), x.shape).astype(float)
        qm = np.broadcast_to(truth.qminus(x), x.shape).astype(float)
        s = np.sqrt(np.maximum(2 * d - f * f, 0.0))
        self.rows = list(zip(f.tolist(), s.tolist(), qp.tolist(), (qp + qm).tolist()))

    def __call__(self, x):
        u = x * self.inv_h
        i = int(u)
        if i >= self.last:
            return self.rows[self.last]
        w = u - i
        a, b = self.rows[i], self.rows[i + 1]
        return (a[0] + w * (b[0] - a[0]), a[1] + w * (b[1] - a[1]),
                a[2] + w * (b[2] - a[2]), a[3] + w * (b[3] - a[3]))


class _Table2D:
    def __init__(self, truth: Truth2D):
        g = np.arange(0.0, truth.xmax + 2 * _TABLE_STEP_2D, _TABLE_STEP_2D)
        self.inv_h = 1.0 / _TABLE_STEP_2D
        self.last = len(g) - 2
        X, Y = np.meshgrid(g, g, indexing="ij")
        f = np.broadcast_to(truth.f(X, Y), X.shape).astype(float)
        d = np.broadcast_to(truth.d(X, Y), X.shape).astype(float)
        qp = np.broadcast_to(truth.qplus(X, Y), X.shape).astype(float)
        qm = np.broadcast_to(truth.qminus(X, Y), X.shape).astype(float)
        s = np.sqrt(np.maximum(2 * d - f * f, 0.0))
        self.tabs = [t.tolist() for t in (f, s, qp, qp + qm)]

    def __call__(self, x, y):
        u, v = min(x * self.inv_h, self.last), min(y * self.inv_h, self.last)
        i, j = min(int(u), self.last - 1), min(int(v), self.last - 1)
        wu, wv = u - i, v - j
        out = []
        for t in self.tabs:
            r0, r1 = t[i], t[i + 1]
            a = r0[j] + wv * (r0[j + 1] - r0[j])
            b = r1[j] + wv * (r1[j + 1] - r1[j])
            out.append(a + wu * (b - a))
        return out


# ---------------------------------------------------------------------------
# record writer


class _Writer:
    def __init__(self, volume_per_order: float | None):
        self.cols = [[] for _ in RECORD_DTYPE.names]
        self.vpo = volume_per_order

    def put(self, ts, side, action, size, pb, pa, vb, va):
        c = self.cols
        c[0].append(ts)
        c[1].append(side)
        c[2].append(action)
        c[3].append(size)
        c[4].append(pb)
        c[5].append(pa)
        c[6].append(vb)
        c[7].append(va)

    def build(self) -> Records:
        n = len(self.cols[0])
        data = np.zeros(n, dtype=RECORD_DTYPE)
        for name, col in zip(RECORD_DTYPE.names[:8], self.cols[:8]):
            data[name] = col
        if self.vpo:
            for v, o in (("bid_vol", "bid_orders"), ("ask_vol", "ask_orders")):
                data[o] = np.maximum(1, np.ceil(data[v] / self.vpo)).astype(np.int64)
                data[o][data[v] == 0] = 0
        else:
            data["bid_orders"] = -1
            data["ask_orders"] = -1
        return Records(data)


@dataclass
class _Book:
    pb: int
    vb: int
    va: int

    @property
    def pa(self) -> int:
        return self.pb + 1


def _vol(x: float, vbar: float) -> int:
    return max(1, int(round(x * vbar)))


def _day_schedule(n_events: int, n_days: int | None, session: SessionConfig):
    if n_days is None:
        n_days = max(1, -(-n_events // 200_000))
    per_day = [n_events // n_days + (1 if k < n_events % n_days else 0) for k in range(n_days)]
    return [p for p in per_day if p > 0]


def generate_events(truth: Truth1D | Truth2D, n_events: int, profile=None, seed: int = 0,
                    n_days: int | None = None, vbar: float = 1000.0,
                    volume_per_order: float | None = None,
                    session: SessionConfig | None = None) -> Records:
    """Sample ``n_events`` model events and write them as best-quote records.

    Volumes are scaled by the profile's V̄ of the current bin (``vbar``
    when no profile is given).  Events are spread evenly over ``n_days``
    sessions (about 200,000 per day by default); each day starts with an
    anchor snapshot carrying the book over from the previous day.
    """
    if n_events < 0:
        raise ConfigError("n_events must be nonnegative")
    session = session or SessionConfig()
    if isinstance(truth, Truth2D):
        table, two_d = _Table2D(truth), True
    elif isinstance(truth, Truth1D):
        table, two_d = _Table1D(truth), False
    else:
        raise ConfigError("truth must be a Truth1D or Truth2D")
    writer = _Writer(volume_per_order)
    if n_events == 0:
        return writer.build()

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    if profile is not None:
        scales = profile.scale(np.arange(1, session.n_bins + 1)).astype(float).tolist()
        if not all(s > 0 for s in scales):
            raise ConfigError("profile has non-positive average volume")
    else:
        scales = [float(vbar)] * session.n_bins

    x0 = truth.x0 if two_d else (truth.x0, truth.x0)
    book = _Book(_START_PRICE, _vol(x0[0], scales[0]), _vol(x0[1], scales[0]))
    noise = truth.noise
    bin_ns = session.bin_s * NS_PER_SECOND
    length_ns = session.length_s * NS_PER_SECOND

    for day, n_day in enumerate(_day_schedule(n_events, n_days, session)):
        t0 = (day + 1) * NS_PER_DAY + session.open_s * NS_PER_SECOND
        writer.put(t0, Side.BID, Action.ADD, book.vb, book.pb, book.pa, book.vb, book.va)
        spacing = length_ns / n_day
        # per-event random numbers drawn in bulk
        side = (rng.random(n_day) < 0.5).tolist()
        u = rng.random(n_day).tolist()
        z = noise.rvs(n_day, rng).tolist()
        kind_u = rng.random(n_day).tolist()
        act_u = rng.random(n_day).tolist()
        plus = _draws(truth.pplus, n_day, rng, two_d)
        minus = _draws(truth.pminus, n_day, rng, two_d)
        jp = 0
        for k in range(n_day):
            off = int((k + 0.5) * spacing)
            ts = t0 + off
            b = min(off // bin_ns, session.n_bins - 1)
            vb_ = scales[b]
            s = Side.ASK if side[k] else Side.BID
            own_v = book.va if side[k] else book.vb
            opp_v = book.vb if side[k] else book.va
            x, y = own_v / vb_, opp_v / vb_
            if two_d:
                f, sd, qp, qt = table(x, y)
            else:
                f, sd, qp, qt = table(x)
            uk = u[k]
            if uk >= qt:
                dv = int(round(vb_ * (f + sd * z[k])))
                if dv == 0:
                    dv = 1 if z[k] >= 0 else -1
                if own_v + dv < 1:
                    # reflect at V = 1
                    dv = 2 - 2 * own_v - dv
                    if dv == 0:
                        dv = -1 if own_v > 1 else 1
                if dv > 0:
                    action = Action.ADD
                else:
                    action = Action.TRADE if act_u[k] < 0.4 else Action.CANCEL
                if s is Side.BID:
                    book.vb += dv
                else:
                    book.va += dv
                writer.put(ts, s, action, abs(dv), book.pb, book.pa, book.vb, book.va)
                continue
            if uk < qp:
                new_own, new_opp = plus[jp]
                _overtaken(writer, book, s, ts, _vol(new_own, vb_), _opp_vol(new_opp, opp_v, vb_))
            elif kind_u[k] < truth.pi_plus:
                new_own, new_opp = plus[jp]
                _refill(writer, book, s, ts, _vol(new_own, vb_), _opp_vol(new_opp, opp_v, vb_))
            else:
                new_own, new_opp = minus[jp]
                _recede(writer, book, s, ts, _vol(new_own, vb_), _opp_vol(new_opp, opp_v, vb_))
            jp += 1
    return writer.build()


def _opp_vol(new_opp, old: int, vbar: float) -> int:
    return old if new_opp is None or math.isnan(new_opp) else _vol(new_opp, vbar)


def _draws(law, n, rng, two_d):
    if law is None:
        return _Missing()
    if two_d:
        a, b = law.rvs(n, rng)
        return list(zip(np.asarray(a).tolist(), np.asarray(b).tolist()))
    a = law.rvs(n, rng)
    return [(v, None) for v in np.asarray(a).tolist()]


class _Missing:
    def __getitem__(self, i):
        raise ConfigError("a jump fired without a replacement law")


def _set(book: _Book, side: Side, vol: int) -> None:
    if side is Side.BID:
        book.vb = vol
    else:
        book.va = vol


def _overtaken(w: _Writer, book: _Book, s: Side, ts: int, new_own: int, new_opp: int) -> None:
    """Queue ``s`` is overtaken: the opposite quote steps away, then ``s`` improves into the gap."""
    if s is Side.BID:
        w.put(ts, Side.ASK, Action.CANCEL, book.va, book.pb, book.pa + 1, book.vb, new_opp)
        book.pb += 1
    else:
        w.put(ts, Side.BID, Action.CANCEL, book.vb, book.pb - 1, book.pa, new_opp, book.va)
        book.pb -= 1
    _set(book, s.other, new_opp)
    _set(book, s, new_own)
    w.put(ts + 1, s, Action.ADD, new_own, book.pb, book.pa, book.vb, book.va)


def _empty(w: _Writer, book: _Book, s: Side, ts: int) -> None:
    old = book.vb if s is Side.BID else book.va
    _set(book, s, 0)
    w.put(ts, s, Action.TRADE, old, book.pb, book.pa, book.vb, book.va)


def _refill(w: _Writer, book: _Book, s: Side, ts: int, new_own: int, new_opp: int) -> None:
    _empty(w, book, s, ts)
    _set(book, s, new_own)
    _set(book, s.other, new_opp)
    w.put(ts + 1, s, Action.ADD, new_own, book.pb, book.pa, book.vb, book.va)


def _recede(w: _Writer, book: _Book, s: Side, ts: int, new_own: int, new_opp: int) -> None:
    """Queue ``s`` empties, its quote degrades one tick, the opposite side closes the gap."""
    _empty(w, book, s, ts)
    if s is Side.BID:
        w.put(ts + 1, s, Action.ADD, new_own, book.pb - 1, book.pa, new_own, book.va)
        book.pb -= 1
        book.vb = new_own
        book.va = new_opp
        w.put(ts + 2, Side.ASK, Action.ADD, new_opp, book.pb, book.pa, book.vb, book.va)
    else:
        w.put(ts + 1, s, Action.ADD, new_own, book.pb, book.pa + 1, book.vb, new_own)
        book.pb += 1
        book.va = new_own
        book.vb = new_opp
        w.put(ts + 2, Side.BID, Action.ADD, new_opp, book.pb, book.pa, book.vb, book.va)


def truth_from_mapping(obj) -> Truth1D | Truth2D:
    """Build a truth from the ``[truth]`` table of a TOML/JSON file."""
    m = dict(obj.get("truth", obj))
    dims = int(m.pop("dims", 1))
    noise = NoiseLaw(p_tail=float(m.pop("p_tail", 0.05)), alpha=float(m.pop("alpha", 2.5)))
    if "x0" in m and dims == 2:
        m["x0"] = tuple(float(v) for v in m["x0"])
    known = {"f", "d", "qplus", "qminus", "pplus", "pminus", "pi_plus", "xmax", "x0"}
    unknown = set(m) - known
    if unknown:
        raise ConfigError(f"unknown truth keys {sorted(unknown)}")
    missing = {"f", "d"} - set(m)
    if missing:
        raise ConfigError(f"truth needs {sorted(missing)}")
    if dims == 1:
        return Truth1D(**m, noise=noise)
    if dims == 2:
        return Truth2D(**m, noise=noise)
    raise ConfigError(f"dims must be 1 or 2, got {dims}")
