from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from queuefp.errors import ConfigError
from queuefp.grids import Grid2D
from queuefp.potentials import decompose_drift, reconstruct, ridge_diagnostic


def _field(gx, gy, h=0.1, counts=None) -> tuple[Grid2D, Grid2D]:
    n = gx.shape[0]
    e = np.arange(n + 1) * h
    c = np.full(gx.shape, 1000, dtype=np.int64) if counts is None else counts
    return Grid2D(e, e, gx, c), Grid2D(e, e, gy, c)


def _mesh(n=32, h=0.1):
    c = (np.arange(n) + 0.5) * h
    return np.meshgrid(c, c, indexing="ij")


def _trig(rng, n=24, h=0.1):
    X, Y = _mesh(n, h)
    a = rng.normal(size=(4, 3))
    L = n * h
    gx = sum(a[0, k] * np.cos((k + 1) * np.pi * X / L) * np.sin((k + 1) * np.pi * Y / L) + a[1, k] * np.sin(k * Y)
             for k in range(3))
    gy = sum(a[2, k] * np.sin((k + 1) * np.pi * X / L) * np.cos((k + 2) * np.pi * Y / L) + a[3, k] * np.cos(k * X)
             for k in range(3))
    return gx, gy


def test_gradient_field_recovers_potential():
    X, Y = _mesh()
    pot = decompose_drift(*_field(-X, -Y))
    dev = pot.u.values - (X ** 2 + Y ** 2) / 2
    assert np.ptp(dev) < 1e-10
    assert np.max(np.abs(pot.w.values)) < 1e-10
    assert pot.residual < 1e-12


def test_rotational_field_recovers_stream_function():
    X, Y = _mesh()
    pot = decompose_drift(*_field(-Y, X))
    assert np.ptp(pot.u.values) < 1e-10
    # w lives on the cell corners
    cx, cy = np.meshgrid(pot.w.x_centers, pot.w.y_centers, indexing="ij")
    dev = pot.w.values - (-(cx ** 2 + cy ** 2) / 2)
    assert np.ptp(dev) < 1e-10


def test_gauge_fixed_at_reference_point():
    X, Y = _mesh()
    pot = decompose_drift(*_field(-X + 0.3 * Y, 2.0 - Y - 0.3 * X))
    assert abs(float(pot.u(1.0, 1.0))) < 1e-12
    assert abs(float(pot.w(1.0, 1.0))) < 1e-12
    moved = decompose_drift(*_field(-X + 0.3 * Y, 2.0 - Y - 0.3 * X), gauge=(2.0, 0.5))
    assert abs(float(moved.u(2.0, 0.5))) < 1e-12
    assert np.ptp(moved.u.values - pot.u.values) < 1e-12


def test_random_field_reconstructs_links():
    gx, gy = _trig(np.random.default_rng(5), n=64)
    pot = decompose_drift(*_field(gx, gy))
    rx, ry = reconstruct(pot)
    lx = 0.5 * (gx[1:, :] + gx[:-1, :])
    ly = 0.5 * (gy[:, 1:] + gy[:, :-1])
    num = np.sum((rx - lx)[1:-1, 1:-1] ** 2) + np.sum((ry - ly)[1:-1, 1:-1] ** 2)
    den = np.sum(lx[1:-1, 1:-1] ** 2) + np.sum(ly[1:-1, 1:-1] ** 2)
    assert np.sqrt(num / den) < 1e-8
    assert pot.residual < 1e-8


@given(st.floats(-50, 50), st.floats(-50, 50), st.integers(0, 2 ** 31))
def test_constants_do_not_change_reconstruction(cu, cw, seed):
    gx, gy = _trig(np.random.default_rng(seed), n=12)
    pot = decompose_drift(*_field(gx, gy))
    # quantized potentials make the added constants exact in floating point
    q = lambda g: g.with_values(np.round(g.values * 2 ** 20) / 2 ** 20)
    base = type(pot)(u=q(pot.u), w=q(pot.w), residual=pot.residual)
    ku, kw = np.round(cu * 2 ** 10) / 2 ** 10, np.round(cw * 2 ** 10) / 2 ** 10
    shifted = type(pot)(u=base.u.with_values(base.u.values + ku), w=base.w.with_values(base.w.values + kw),
                        residual=pot.residual)
    for a, b in zip(reconstruct(base), reconstruct(shifted)):
        assert np.array_equal(a, b)
    # arbitrary constants agree to rounding
    loose = type(pot)(u=pot.u.with_values(pot.u.values + cu), w=pot.w.with_values(pot.w.values + cw),
                      residual=pot.residual)
    for a, b in zip(reconstruct(pot), reconstruct(loose)):
        np.testing.assert_allclose(a, b, atol=1e-10)


@given(st.integers(0, 2 ** 31))
def test_mirror_flips_stream_function(seed):
    gx, gy = _trig(np.random.default_rng(seed), n=12)
    pot = decompose_drift(*_field(gx, gy))
    mir = decompose_drift(*_field(gy.T.copy(), gx.T.copy()))
    np.testing.assert_allclose(mir.u.values, pot.u.values.T, atol=1e-9)
    np.testing.assert_allclose(mir.w.values, -pot.w.values.T, atol=1e-9)


def test_undefined_cells_are_infilled_and_excluded():
    X, Y = _mesh(16)
    counts = np.full(X.shape, 1000, dtype=np.int64)
    gx, gy = -X, -Y
    gx = gx.copy()
    gx[0, :3] = np.nan
    pot = decompose_drift(*_field(gx, gy, counts=counts))
    assert np.all(np.isfinite(pot.u.values))
    assert pot.residual < 1e-10


def test_decomposition_errors():
    X, Y = _mesh(8)
    fx, fy = _field(-X, -Y)
    with pytest.raises(ConfigError):
        decompose_drift(fx, Grid2D(np.arange(8) * 0.1, np.arange(9) * 0.1, fy.values[:7], fy.counts[:7]))
    uneven = np.concatenate([[0.0], np.cumsum(np.linspace(0.05, 0.15, 8))])
    with pytest.raises(ConfigError):
        decompose_drift(Grid2D(uneven, uneven, fx.values, fx.counts), Grid2D(uneven, uneven, fy.values, fy.counts))
    empty = np.full(X.shape, np.nan)
    with pytest.raises(ConfigError):
        decompose_drift(*_field(empty, empty))


def _potential(values, n=32, h=0.125):
    e = np.arange(n + 1) * h
    return Grid2D(e, e, values, np.ones(values.shape, dtype=np.int64))


def test_ridge_of_function_of_sum_is_isotropic():
    X, Y = _mesh(32, 0.125)
    prof = ridge_diagnostic(_potential(np.sin(X + Y) + (X + Y) ** 2))
    assert prof.anisotropy < 1e-24
    assert np.all(prof.std < 1e-12)


def test_ridge_of_saddle_is_anisotropic():
    X, Y = _mesh(32, 0.125)
    assert ridge_diagnostic(_potential(X ** 2 - Y ** 2)).anisotropy > 0.99


def test_ridge_location_from_drift():
    # drift pointing away from r = 5 on both sides, recovered through the decomposition
    X, Y = _mesh(32, 0.125)
    # U = -(x + y - 5)^2 + 0.1 (x - y)^2, f = -grad U
    gx = 2 * (X + Y - 5) - 0.2 * (X - Y)
    gy = 2 * (X + Y - 5) + 0.2 * (X - Y)
    pot = decompose_drift(*_field(gx, gy, h=0.125))
    prof = ridge_diagnostic(pot.u)
    assert abs(prof.r_max - 5.0) <= 0.2
    assert np.all(np.diff(prof.r) > 0)


def test_ridge_with_explicit_width():
    X, Y = _mesh(32, 0.125)
    prof = ridge_diagnostic(_potential(-(X + Y - 3.0) ** 2), r_width=0.25)
    assert abs(prof.r_max - 3.0) <= 0.25
    assert prof.counts.sum() == 32 * 32
