"""Order-independent exact summation of float64 values into labelled cells.

Each double is split as ``m * 2**(e - 53)`` with an integer mantissa ``m``;
mantissas are accumulated as Python integers per (cell, exponent).  The
state is exact, so merging accumulators in any grouping gives the same
result, and ``total()`` is the correctly rounded sum.
"""

from __future__ import annotations

from collections import defaultdict
from fractions import Fraction

import numpy as np

_EXP_OFFSET = 2048
_EXP_SPAN = 4096
_HALF = 26


class ExactSum:
    def __init__(self, n_cells: int):
        self.n_cells = int(n_cells)
        self._acc: dict[int, int] = defaultdict(int)

    def add(self, cells, values) -> None:
        cells = np.asarray(cells, dtype=np.int64).ravel()
        values = np.asarray(values, dtype=np.float64).ravel()
        if cells.shape != values.shape:
            raise ValueError("cells and values must have the same length")
        if not np.all(np.isfinite(values)):
            raise ValueError("non-finite value in exact sum")
        nz = values != 0.0
        cells, values = cells[nz], values[nz]
        if values.size == 0:
            return
        m, e = np.frexp(values)
        mi = np.ldexp(m, 53).astype(np.int64)
        hi = mi >> _HALF
        lo = mi - (hi << _HALF)
        keys = cells * _EXP_SPAN + (e.astype(np.int64) + _EXP_OFFSET)
        uniq, inv = np.unique(keys, return_inverse=True)
        # chunk so that float64 bincount partial sums stay below 2**53
        step = 1 << 24
        acc = self._acc
        for start in range(0, len(inv), step):
            sl = slice(start, start + step)
            hs = np.bincount(inv[sl], weights=hi[sl].astype(np.float64), minlength=len(uniq))
            ls = np.bincount(inv[sl], weights=lo[sl].astype(np.float64), minlength=len(uniq))
            for k, h, l in zip(uniq.tolist(), hs.tolist(), ls.tolist()):
                acc[k] += (int(h) << _HALF) + int(l)

    def merge(self, other: ExactSum) -> ExactSum:
        if other.n_cells != self.n_cells:
            raise ValueError("cannot merge sums over different cell layouts")
        out = ExactSum(self.n_cells)
        for src in (self._acc, other._acc):
            for k, v in src.items():
                out._acc[k] += v
        return out

    def exact(self) -> list[Fraction]:
        tot = [Fraction(0)] * self.n_cells
        for k, v in self._acc.items():
            if v == 0:
                continue
            cell, e = divmod(k, _EXP_SPAN)
            shift = e - _EXP_OFFSET - 53
            term = Fraction(v * (1 << shift)) if shift >= 0 else Fraction(v, 1 << -shift)
            tot[cell] += term
        return tot

    def total(self) -> np.ndarray:
        """Correctly rounded per-cell sums."""
        return np.array([float(t) for t in self.exact()], dtype=np.float64)

    def state(self) -> dict:
        return {"n_cells": self.n_cells, "terms": {str(k): str(v) for k, v in sorted(self._acc.items()) if v}}

    @classmethod
    def from_state(cls, obj: dict) -> ExactSum:
        out = cls(obj["n_cells"])
        for k, v in obj["terms"].items():
            out._acc[int(k)] = int(v)
        return out
