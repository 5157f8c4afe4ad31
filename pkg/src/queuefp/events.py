"""Best-quote event model: parsing, classification and rescaling.

Input records are post-event snapshots of the best quotes.  Classification
turns the snapshot stream into one ``QuoteEvent`` per model transition:
a volume change at unchanged prices, or one of the three price-changing
jumps.  Intervals where the spread is transiently two ticks (or a best
queue is empty) are folded into the jump event that resolves them.
"""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import IO

import numpy as np

from .errors import ConfigError, EventFormatError

NS_PER_SECOND = 1_000_000_000
NS_PER_DAY = 86_400 * NS_PER_SECOND

FIELDS = ("ts", "side", "action", "size", "best_bid_px", "best_ask_px", "bid_vol", "ask_vol")
OPTIONAL_FIELDS = ("bid_orders", "ask_orders")


class Side(IntEnum):
    BID = 0
    ASK = 1

    @property
    def other(self) -> Side:
        return Side(1 - self)

    @property
    def code(self) -> str:
        return "B" if self is Side.BID else "A"


class Action(IntEnum):
    ADD = 0
    CANCEL = 1
    TRADE = 2


class Kind(IntEnum):
    VOLUME_CHANGE = 0
    OVERTAKEN = 1
    DEPLETED_RECEDE = 2
    DEPLETED_REFILL = 3


_SIDE_NAMES = {"b": Side.BID, "bid": Side.BID, "a": Side.ASK, "ask": Side.ASK}
_ACTION_NAMES = {"add": Action.ADD, "cancel": Action.CANCEL, "trade": Action.TRADE}

RECORD_DTYPE = np.dtype(
    [
        ("ts", "i8"),
        ("side", "i1"),
        ("action", "i1"),
        ("size", "i8"),
        ("best_bid_px", "i8"),
        ("best_ask_px", "i8"),
        ("bid_vol", "i8"),
        ("ask_vol", "i8"),
        ("bid_orders", "i8"),
        ("ask_orders", "i8"),
    ]
)


@dataclass(frozen=True)
class RawRecord:
    ts: int
    side: Side
    action: Action
    size: int
    best_bid_px: int
    best_ask_px: int
    bid_vol: int
    ask_vol: int
    bid_orders: int | None = None
    ask_orders: int | None = None

    def to_json(self) -> dict:
        out = {
            "ts": self.ts,
            "side": self.side.code,
            "action": self.action.name.lower(),
            "size": self.size,
            "best_bid_px": self.best_bid_px,
            "best_ask_px": self.best_ask_px,
            "bid_vol": self.bid_vol,
            "ask_vol": self.ask_vol,
        }
        if self.bid_orders is not None:
            out["bid_orders"] = self.bid_orders
            out["ask_orders"] = self.ask_orders
        return out


class Records(Sequence):
    """Columnar sequence of ``RawRecord`` backed by a structured array.

    Order-count columns hold -1 when the feed does not carry them.
    """

    def __init__(self, data: np.ndarray | None = None):
        if data is None:
            data = np.zeros(0, dtype=RECORD_DTYPE)
        if data.dtype != RECORD_DTYPE:
            raise TypeError("Records requires RECORD_DTYPE")
        self.data = data

    @classmethod
    def from_records(cls, records: Iterable[RawRecord]) -> Records:
        rows = [
            (
                r.ts,
                int(r.side),
                int(r.action),
                r.size,
                r.best_bid_px,
                r.best_ask_px,
                r.bid_vol,
                r.ask_vol,
                -1 if r.bid_orders is None else r.bid_orders,
                -1 if r.ask_orders is None else r.ask_orders,
            )
            for r in records
        ]
        return cls(np.array(rows, dtype=RECORD_DTYPE))

    @classmethod
    def concat(cls, parts: Iterable[Records]) -> Records:
        arrays = [p.data for p in parts]
        if not arrays:
            return cls()
        return cls(np.concatenate(arrays))

    def __len__(self) -> int:
        return len(self.data)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Records(self.data[i])
        row = self.data[i]
        has_orders = row["bid_orders"] >= 0
        return RawRecord(
            ts=int(row["ts"]),
            side=Side(int(row["side"])),
            action=Action(int(row["action"])),
            size=int(row["size"]),
            best_bid_px=int(row["best_bid_px"]),
            best_ask_px=int(row["best_ask_px"]),
            bid_vol=int(row["bid_vol"]),
            ask_vol=int(row["ask_vol"]),
            bid_orders=int(row["bid_orders"]) if has_orders else None,
            ask_orders=int(row["ask_orders"]) if has_orders else None,
        )

    @property
    def has_orders(self) -> bool:
        return len(self.data) > 0 and bool(np.all(self.data["bid_orders"] >= 0))

    def mirrored(self) -> Records:
        """Relabel bid <-> ask, reflecting prices so the book stays ordered."""
        d = self.data
        out = d.copy()
        out["side"] = 1 - d["side"]
        out["best_bid_px"] = -d["best_ask_px"]
        out["best_ask_px"] = -d["best_bid_px"]
        out["bid_vol"] = d["ask_vol"]
        out["ask_vol"] = d["bid_vol"]
        out["bid_orders"] = d["ask_orders"]
        out["ask_orders"] = d["bid_orders"]
        return Records(out)


# ---------------------------------------------------------------------------
# parsing


def _as_int(value, name: str, lineno: int) -> int:
    if isinstance(value, bool):
        raise EventFormatError(f"field {name!r} must be an integer", lineno)
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str):
        try:
            return int(value.strip())
        except ValueError:
            pass
    raise EventFormatError(f"field {name!r} must be an integer, got {value!r}", lineno)


def _coerce(obj: dict, lineno: int) -> tuple:
    missing = [k for k in FIELDS if k not in obj]
    if missing:
        raise EventFormatError(f"missing fields {missing}", lineno)
    side = _SIDE_NAMES.get(str(obj["side"]).strip().lower())
    if side is None:
        raise EventFormatError(f"unknown side {obj['side']!r}", lineno)
    action = _ACTION_NAMES.get(str(obj["action"]).strip().lower())
    if action is None:
        raise EventFormatError(f"unknown action {obj['action']!r}", lineno)
    ts = _as_int(obj["ts"], "ts", lineno)
    size = _as_int(obj["size"], "size", lineno)
    bid_px = _as_int(obj["best_bid_px"], "best_bid_px", lineno)
    ask_px = _as_int(obj["best_ask_px"], "best_ask_px", lineno)
    bid_vol = _as_int(obj["bid_vol"], "bid_vol", lineno)
    ask_vol = _as_int(obj["ask_vol"], "ask_vol", lineno)
    if size <= 0:
        raise EventFormatError(f"size must be positive, got {size}", lineno)
    if ask_px <= bid_px:
        raise EventFormatError(f"crossed or locked book: bid {bid_px} >= ask {ask_px}", lineno)
    if bid_vol < 0 or ask_vol < 0:
        raise EventFormatError("negative best volume", lineno)
    bid_orders = obj.get("bid_orders")
    ask_orders = obj.get("ask_orders")
    if bid_orders in (None, "") or ask_orders in (None, ""):
        bo = ao = -1
    else:
        bo = _as_int(bid_orders, "bid_orders", lineno)
        ao = _as_int(ask_orders, "ask_orders", lineno)
    return (ts, int(side), int(action), size, bid_px, ask_px, bid_vol, ask_vol, bo, ao)


def _lines(stream) -> Iterator[str]:
    for line in stream:
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        yield line


def parse_events(stream: IO | Iterable, fmt: str = "ndjson") -> Records:
    """Parse an NDJSON or CSV event stream into ``Records``.

    ``stream`` may be a binary or text file object, or any iterable of
    lines.  Blank lines are ignored.  Timestamps must be nondecreasing.
    """
    fmt = fmt.lower()
    rows: list[tuple] = []
    last_ts = None

    def push(row: tuple, lineno: int) -> None:
        nonlocal last_ts
        if last_ts is not None and row[0] < last_ts:
            raise EventFormatError(f"timestamp regression ({row[0]} < {last_ts})", lineno)
        last_ts = row[0]
        rows.append(row)

    if fmt in ("ndjson", "jsonl", "json"):
        for lineno, line in enumerate(_lines(stream), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise EventFormatError(f"malformed JSON ({exc.msg})", lineno) from None
            if not isinstance(obj, dict):
                raise EventFormatError("record is not a JSON object", lineno)
            push(_coerce(obj, lineno), lineno)
    elif fmt == "csv":
        reader = csv.reader(_lines(stream))
        header = None
        for lineno, cells in enumerate(reader, start=1):
            if not cells or all(not c.strip() for c in cells):
                continue
            if header is None:
                header = [c.strip() for c in cells]
                missing = [k for k in FIELDS if k not in header]
                if missing:
                    raise EventFormatError(f"CSV header missing {missing}", lineno)
                continue
            if len(cells) != len(header):
                raise EventFormatError(f"expected {len(header)} columns, got {len(cells)}", lineno)
            push(_coerce(dict(zip(header, cells)), lineno), lineno)
    else:
        raise ConfigError(f"unknown event format {fmt!r}")
    return Records(np.array(rows, dtype=RECORD_DTYPE))


def format_for_path(path: str | Path) -> str:
    suffix = Path(path).suffix.lower()
    return "csv" if suffix == ".csv" else "ndjson"


def read_events(path: str | Path) -> Records:
    path = Path(path)
    with path.open("rb") as fh:
        return parse_events(fh, format_for_path(path))


def write_ndjson(records: Records, fh: IO[str]) -> None:
    d = records.data
    cols = [d[name].tolist() for name in RECORD_DTYPE.names]
    with_orders = records.has_orders
    for ts, side, action, size, bpx, apx, bv, av, bo, ao in zip(*cols):
        line = (
            f'{{"ts":{ts},"side":"{"B" if side == 0 else "A"}","action":"{_ACTION_TEXT[action]}",'
            f'"size":{size},"best_bid_px":{bpx},"best_ask_px":{apx},"bid_vol":{bv},"ask_vol":{av}'
        )
        if with_orders:
            line += f',"bid_orders":{bo},"ask_orders":{ao}'
        fh.write(line + "}\n")


def write_csv(records: Records, fh: IO[str]) -> None:
    names = list(FIELDS) + (list(OPTIONAL_FIELDS) if records.has_orders else [])
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(names)
    for i in range(len(records)):
        obj = records[i].to_json()
        writer.writerow([obj[k] for k in names])


_ACTION_TEXT = {0: "add", 1: "cancel", 2: "trade"}


# ---------------------------------------------------------------------------
# classification


@dataclass(frozen=True)
class SessionConfig:
    """Trading-session window in exchange-local time of day.

    ``ts`` modulo one day is read as the exchange clock; records outside
    ``[open_s, open_s + n_bins * bin_s)`` are auction/out-of-hours.
    """

    open_s: int = 34_200
    bin_s: int = 300
    n_bins: int = 78
    allow_partial: bool = False

    @property
    def length_s(self) -> int:
        return self.bin_s * self.n_bins


@dataclass
class Diagnostics:
    dropped: int = 0
    skipped: int = 0
    sessions: int = 0
    outside: int = 0
    ambiguous: int = 0
    wide_spread: int = 0
    rejected_sessions: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def merge(self, other: Diagnostics) -> Diagnostics:
        return Diagnostics(**{k: v + getattr(other, k) for k, v in asdict(self).items()})


@dataclass(frozen=True)
class QuoteEvent:
    t: int
    bin: int
    side: Side
    kind: Kind
    dv: int | None
    pre: tuple[int, int]
    post: tuple[int, int]
    new_best_vol: int | None = None
    day: int = 0
    n_records: int = 1
    pre_orders: tuple[int, int] | None = None


_EVENT_COLUMNS = (
    "t", "day", "bin", "side", "kind", "dv", "pre_b", "pre_a",
    "post_b", "post_a", "new_vol", "n_records", "pre_orders_b", "pre_orders_a",
)


@dataclass
class QuoteEvents(Sequence):
    """Columnar sequence of ``QuoteEvent`` plus the classification tally."""

    t: np.ndarray
    day: np.ndarray
    bin: np.ndarray
    side: np.ndarray
    kind: np.ndarray
    dv: np.ndarray
    pre_b: np.ndarray
    pre_a: np.ndarray
    post_b: np.ndarray
    post_a: np.ndarray
    new_vol: np.ndarray
    n_records: np.ndarray
    pre_orders_b: np.ndarray
    pre_orders_a: np.ndarray
    diagnostics: Diagnostics = field(default_factory=Diagnostics)

    @classmethod
    def empty(cls) -> QuoteEvents:
        return cls(**{c: np.zeros(0, dtype=np.int64) for c in _EVENT_COLUMNS})

    @classmethod
    def concat(cls, parts: Sequence[QuoteEvents]) -> QuoteEvents:
        """Concatenate, renumbering event time consecutively."""
        if not parts:
            return cls.empty()
        cols = {c: np.concatenate([getattr(p, c) for p in parts]) for c in _EVENT_COLUMNS}
        cols["t"] = np.arange(len(cols["t"]), dtype=np.int64)
        diag = Diagnostics()
        for p in parts:
            diag = diag.merge(p.diagnostics)
        return cls(**cols, diagnostics=diag)

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i):
        if isinstance(i, slice) or isinstance(i, np.ndarray):
            return QuoteEvents(**{c: getattr(self, c)[i] for c in _EVENT_COLUMNS},
                               diagnostics=self.diagnostics)
        kind = Kind(int(self.kind[i]))
        has_orders = self.pre_orders_b[i] >= 0
        return QuoteEvent(
            t=int(self.t[i]),
            bin=int(self.bin[i]),
            side=Side(int(self.side[i])),
            kind=kind,
            dv=int(self.dv[i]) if kind is Kind.VOLUME_CHANGE else None,
            pre=(int(self.pre_b[i]), int(self.pre_a[i])),
            post=(int(self.post_b[i]), int(self.post_a[i])),
            new_best_vol=None if kind is Kind.VOLUME_CHANGE else int(self.new_vol[i]),
            day=int(self.day[i]),
            n_records=int(self.n_records[i]),
            pre_orders=(int(self.pre_orders_b[i]), int(self.pre_orders_a[i])) if has_orders else None,
        )

    @property
    def has_orders(self) -> bool:
        return len(self) > 0 and bool(np.all(self.pre_orders_b >= 0))

    def frequencies(self) -> dict[Kind, float]:
        n = len(self)
        return {k: float(np.count_nonzero(self.kind == k)) / n if n else float("nan") for k in Kind}


_EMPTY, _AWAY = 0, 1


def _trigger(spb, spa, pb, pa, vb, va):
    """Identify which queue opened a non-model interval, or None."""
    if pb == spb and pa == spa:
        if vb == 0 and va > 0:
            return Side.BID, _EMPTY
        if va == 0 and vb > 0:
            return Side.ASK, _EMPTY
        return None
    if pa - pb == 2 and vb > 0 and va > 0:
        if pb == spb - 1 and pa == spa:
            return Side.BID, _AWAY
        if pa == spa + 1 and pb == spb:
            return Side.ASK, _AWAY
    return None


def _degrade(side: Side) -> int:
    return -1 if side is Side.BID else 1


def _resolve(trigger, shift):
    side, how = trigger
    if shift == 0:
        return Kind.DEPLETED_REFILL, side
    if shift == _degrade(side):
        if how == _EMPTY:
            return Kind.DEPLETED_RECEDE, side
        return Kind.OVERTAKEN, side.other
    return None


def _resolve_instant(shift, record_side: Side):
    """A single record moving both quotes by one tick."""
    if shift not in (-1, 1):
        return None
    improved = Side.BID if shift == 1 else Side.ASK
    if record_side is improved:
        return Kind.OVERTAKEN, improved
    return Kind.DEPLETED_RECEDE, improved.other


class _Emitter:
    def __init__(self):
        self.cols = {c: [] for c in _EVENT_COLUMNS}

    def emit(self, day, b, side, kind, dv, pre, post, new_vol, n):
        c = self.cols
        c["t"].append(len(c["t"]))
        c["day"].append(day)
        c["bin"].append(b)
        c["side"].append(int(side))
        c["kind"].append(int(kind))
        c["dv"].append(dv)
        c["pre_b"].append(pre[2])
        c["pre_a"].append(pre[3])
        c["post_b"].append(post[2])
        c["post_a"].append(post[3])
        c["new_vol"].append(new_vol)
        c["n_records"].append(n)
        c["pre_orders_b"].append(pre[4])
        c["pre_orders_a"].append(pre[5])

    def build(self, diag: Diagnostics) -> QuoteEvents:
        return QuoteEvents(**{k: np.asarray(v, dtype=np.int64) for k, v in self.cols.items()},
                           diagnostics=diag)


def _classify_session(day, rows, em: _Emitter, diag: Diagnostics) -> None:
    stable = None
    pending = None  # [trigger, n_records, bin]
    for side, b, pb, pa, vb, va, ob, oa in rows:
        cur = (pb, pa, vb, va, ob, oa)
        spread = pa - pb
        valid = spread == 1 and vb > 0 and va > 0
        if stable is None:
            diag.skipped += 1
            if valid:
                stable = cur
            continue
        if pending is None:
            spb, spa, svb, sva = stable[:4]
            if valid and pb == spb and pa == spa:
                db, da = vb - svb, va - sva
                if (db != 0) != (da != 0):
                    s = Side.BID if db != 0 else Side.ASK
                    em.emit(day, b, s, Kind.VOLUME_CHANGE, db if db != 0 else da, stable, cur, 0, 1)
                else:
                    diag.ambiguous += 1
                    diag.skipped += 1
                stable = cur
            elif spread < 1 or spread > 2:
                diag.wide_spread += 1
                diag.skipped += 1
                stable = None
            elif valid:
                res = _resolve_instant(pb - spb if pa - spa == pb - spb else None, Side(side))
                if res is None:
                    diag.ambiguous += 1
                    diag.skipped += 1
                else:
                    kind, s = res
                    em.emit(day, b, s, kind, 0, stable, cur, vb if s is Side.BID else va, 1)
                stable = cur
            else:
                trig = _trigger(spb, spa, pb, pa, vb, va)
                if trig is None:
                    diag.ambiguous += 1
                    diag.skipped += 1
                    stable = None
                else:
                    pending = [trig, 1, b]
            continue
        pending[1] += 1
        if valid:
            spb, spa = stable[:2]
            shift = pb - spb
            res = _resolve(pending[0], shift) if pa - spa == shift else None
            if res is None:
                diag.ambiguous += 1
                diag.skipped += pending[1]
            else:
                kind, s = res
                em.emit(day, pending[2], s, kind, 0, stable, cur, vb if s is Side.BID else va, pending[1])
            stable = cur
            pending = None
        elif spread < 1 or spread > 2:
            diag.wide_spread += 1
            diag.skipped += pending[1]
            pending = None
            stable = None
    if pending is not None:
        diag.dropped += pending[1]


def classify(records: Records, profile=None, session: SessionConfig | None = None) -> QuoteEvents:
    """Classify snapshot records into model events.

    Each retained record is folded into exactly one event; the tally in
    ``result.diagnostics`` accounts for the rest, so that
    ``sum(n_records) + dropped + skipped + outside == len(records)``.

    Interval conventions: an interval opened by a queue reaching zero is a
    depletion of that queue (refill if the price holds, recede if it
    degrades).  An interval opened by a queue moving one tick away with
    volume behind it and closed by the opposite side improving into the
    gap is an overtaking of the opposite queue.
    """
    session = session or SessionConfig()
    d = records.data
    em = _Emitter()
    diag = Diagnostics()
    if len(d) == 0:
        return em.build(diag)
    ts = d["ts"]
    day = ts // NS_PER_DAY
    offset = ts % NS_PER_DAY - session.open_s * NS_PER_SECOND
    inside = (offset >= 0) & (offset < session.length_s * NS_PER_SECOND)
    bins = np.where(inside, offset // (session.bin_s * NS_PER_SECOND) + 1, 0)
    diag.outside = int(np.count_nonzero(~inside))

    for dval in np.unique(day[inside]):
        sel = np.flatnonzero(inside & (day == dval))
        b_sel = bins[sel]
        if not session.allow_partial and (b_sel.min() != 1 or b_sel.max() != session.n_bins):
            diag.rejected_sessions += 1
            diag.skipped += len(sel)
            continue
        diag.sessions += 1
        sub = d[sel]
        rows = zip(
            sub["side"].tolist(), b_sel.tolist(), sub["best_bid_px"].tolist(),
            sub["best_ask_px"].tolist(), sub["bid_vol"].tolist(), sub["ask_vol"].tolist(),
            sub["bid_orders"].tolist(), sub["ask_orders"].tolist(),
        )
        _classify_session(int(dval), rows, em, diag)

    events = em.build(diag)
    if profile is not None and len(events):
        missing = sorted(set(np.unique(events.bin).tolist()) - set(profile.covered_bins()))
        if missing:
            raise ConfigError(f"profile does not cover bins {missing}")
    return events


# ---------------------------------------------------------------------------
# rescaling


@dataclass(frozen=True)
class RescaledState:
    x: float
    y: float


def _bin_scale(profile, bins) -> np.ndarray:
    scale = profile.scale(bins)
    if np.any(~(scale > 0)):
        bad = np.unique(np.asarray(bins)[~(scale > 0)]).tolist()
        raise ConfigError(f"average volume is not positive in bins {bad}")
    return scale


def rescale(ev: QuoteEvent, profile) -> tuple[RescaledState, float | None]:
    """Pre-event state and volume change in units of the bin's average volume."""
    vbar = float(_bin_scale(profile, np.array([ev.bin]))[0])
    state = RescaledState(ev.pre[0] / vbar, ev.pre[1] / vbar)
    dv = ev.dv / vbar if ev.dv is not None else None
    return state, dv


_RESCALED_KEYS = ("t", "day", "bin", "side", "kind", "x", "y", "dv", "new", "post_x", "post_y")


@dataclass
class RescaledEvents:
    """Rescaled arrays for a classified stream.

    ``x``/``y`` are the pre-event bid/ask states, ``dv`` the rescaled
    change of the touched queue (0 for jumps) and ``new`` the rescaled
    replacement volume (NaN for volume changes).
    """

    t: np.ndarray
    day: np.ndarray
    bin: np.ndarray
    side: np.ndarray
    kind: np.ndarray
    x: np.ndarray
    y: np.ndarray
    dv: np.ndarray
    new: np.ndarray
    post_x: np.ndarray
    post_y: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    @property
    def own(self) -> np.ndarray:
        return np.where(self.side == Side.BID, self.x, self.y)

    @property
    def opp(self) -> np.ndarray:
        return np.where(self.side == Side.BID, self.y, self.x)

    @property
    def post_opp(self) -> np.ndarray:
        return np.where(self.side == Side.BID, self.post_y, self.post_x)

    def select(self, mask) -> RescaledEvents:
        return RescaledEvents(**{k: getattr(self, k)[mask] for k in
                                 _RESCALED_KEYS})

    @classmethod
    def concat(cls, parts: Sequence[RescaledEvents]) -> RescaledEvents:
        return cls(**{k: np.concatenate([getattr(p, k) for p in parts]) for k in _RESCALED_KEYS})


def rescale_events(events: QuoteEvents, profile) -> RescaledEvents:
    vbar = _bin_scale(profile, events.bin) if len(events) else np.zeros(0)
    vc = events.kind == Kind.VOLUME_CHANGE
    return RescaledEvents(
        t=events.t.copy(),
        day=events.day.copy(),
        bin=events.bin.copy(),
        side=events.side.copy(),
        kind=events.kind.copy(),
        x=events.pre_b / vbar,
        y=events.pre_a / vbar,
        dv=np.where(vc, events.dv / vbar, 0.0),
        new=np.where(vc, np.nan, events.new_vol / vbar),
        post_x=events.post_b / vbar,
        post_y=events.post_a / vbar,
    )


def records_from_text(text: str, fmt: str = "ndjson") -> Records:
    return parse_events(io.StringIO(text), fmt)
