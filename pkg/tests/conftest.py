from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from queuefp.events import NS_PER_DAY, NS_PER_SECOND, RECORD_DTYPE, Records

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")

OPEN_NS = NS_PER_DAY + 34_200 * NS_PER_SECOND

# acceptance outcomes, printed once at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def book(rows, start=OPEN_NS, step=1_000_000) -> Records:
    """Records from (side, action, size, bid_px, ask_px, bid_vol, ask_vol) tuples."""
    out = np.zeros(len(rows), dtype=RECORD_DTYPE)
    for i, (side, action, size, pb, pa, vb, va) in enumerate(rows):
        out[i] = (start + i * step, side, action, size, pb, pa, vb, va, -1, -1)
    return Records(out)


@pytest.fixture
def acceptance():
    def record(n: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")


def quote_events(bins, pre_b, pre_a=None, day=None, kind=None, side=None, dv=None, new_vol=None):
    """QuoteEvents built column by column (volume changes on the bid by default)."""
    from queuefp.events import QuoteEvents

    bins = np.asarray(bins, dtype=np.int64)
    n = len(bins)
    pre_b = np.asarray(pre_b, dtype=np.int64)
    pre_a = pre_b if pre_a is None else np.asarray(pre_a, dtype=np.int64)
    zeros = np.zeros(n, dtype=np.int64)

    def col(v, default):
        return np.broadcast_to(np.asarray(default if v is None else v, dtype=np.int64), (n,)).copy()

    dv = col(dv, 0)
    return QuoteEvents(
        t=np.arange(n, dtype=np.int64), day=col(day, 1), bin=bins, side=col(side, 0),
        kind=col(kind, 0), dv=dv, pre_b=pre_b, pre_a=pre_a, post_b=pre_b + dv, post_a=pre_a,
        new_vol=col(new_vol, 0), n_records=zeros + 1, pre_orders_b=zeros - 1, pre_orders_a=zeros - 1,
    )


def rescaled(x, kind=0, dv=0.0, new=np.nan, side=0, y=1.0, day=1):
    """RescaledEvents for events on one side with pre-event own volume ``x``."""
    from queuefp.events import RescaledEvents

    x = np.asarray(x, dtype=float)
    n = len(x)

    def col(v, dtype):
        return np.broadcast_to(np.asarray(v, dtype=dtype), (n,)).copy()

    side = col(side, np.int64)
    own, opp = x, col(y, float)
    bx = np.where(side == 0, own, opp)
    by = np.where(side == 0, opp, own)
    dv = col(dv, float)
    return RescaledEvents(
        t=np.arange(n, dtype=np.int64), day=col(day, np.int64), bin=col(1, np.int64), side=side,
        kind=col(kind, np.int64), x=bx, y=by, dv=dv, new=col(new, float),
        post_x=bx + np.where(side == 0, dv, 0.0), post_y=by + np.where(side == 1, dv, 0.0),
    )
