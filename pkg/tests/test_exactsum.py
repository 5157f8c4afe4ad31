from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from queuefp.exactsum import ExactSum

finite = st.floats(allow_nan=False, allow_infinity=False, min_value=-1e300, max_value=1e300)


@given(st.lists(finite, max_size=200))
def test_single_cell_matches_fsum(values):
    acc = ExactSum(1)
    acc.add(np.zeros(len(values), dtype=int), values)
    assert acc.total()[0] == math.fsum(values)
    assert acc.exact()[0] == sum((Fraction(v) for v in values), Fraction(0))


@given(st.lists(st.tuples(st.integers(0, 4), finite), max_size=200), st.integers(1, 6), st.randoms())
def test_merge_is_order_independent(items, n_parts, rnd):
    cells = np.array([c for c, _ in items], dtype=int)
    vals = np.array([v for _, v in items], dtype=float)
    whole = ExactSum(5)
    whole.add(cells, vals)
    order = list(range(len(items)))
    rnd.shuffle(order)
    parts = [ExactSum(5) for _ in range(n_parts)]
    for k, i in enumerate(order):
        parts[k % n_parts].add([cells[i]], [vals[i]])
    rnd.shuffle(parts)
    merged = parts[0]
    for p in parts[1:]:
        merged = merged.merge(p)
    assert np.array_equal(merged.total(), whole.total())
    for c in range(5):
        assert merged.total()[c] == math.fsum(vals[cells == c].tolist())


def test_catastrophic_cancellation_is_exact():
    acc = ExactSum(2)
    acc.add([0, 0, 0, 1], [1e16, 1.0, -1e16, 0.1])
    assert acc.total().tolist() == [1.0, 0.1]


def test_state_round_trip():
    acc = ExactSum(3)
    acc.add([0, 1, 2, 2], [0.5, -3.25, 1e-300, 7.0])
    back = ExactSum.from_state(acc.state())
    assert np.array_equal(back.total(), acc.total())


def test_errors():
    acc = ExactSum(2)
    with pytest.raises(ValueError):
        acc.add([0], [np.nan])
    with pytest.raises(ValueError):
        acc.add([0, 1], [1.0])
    with pytest.raises(ValueError):
        acc.merge(ExactSum(3))
