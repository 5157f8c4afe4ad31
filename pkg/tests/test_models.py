from __future__ import annotations

import json
import pickle

import numpy as np
import pytest
from scipy import stats

from queuefp.errors import ConfigError
from queuefp.grids import Grid1D, Grid2D, uniform_edges
from queuefp.models import (
    Expr, HistogramDensity, HistogramDensity2D, ModelSpec1D, ModelSpec2D, PointMass, ProductDensity2D,
    ScipyDensity, as_function, load_spec, make_density, make_density_2d, spec_from_mapping,
)

GAMMA = {"dist": "gamma", "a": 4, "scale": 0.25}


def test_expressions_evaluate_and_broadcast():
    e = Expr("0.5*(1-x) + 0*y")
    np.testing.assert_allclose(e(np.array([0.0, 2.0])), [0.5, -0.5])
    c = Expr("0.3")
    assert c(np.zeros((2, 3))).shape == (2, 3)
    g = Expr("x*y")
    assert g(np.array([1.0, 2.0]), np.array([[1.0], [3.0]])).shape == (2, 2)
    assert pickle.loads(pickle.dumps(e))(1.0) == 0.0


@pytest.mark.parametrize("text", ["__import__('os')", "open('x')", "x.__class__", "1 +"])
def test_expressions_reject_unknown_names(text):
    with pytest.raises(ConfigError):
        Expr(text)


def test_as_function():
    assert as_function(2)(np.zeros(3)).tolist() == [2.0, 2.0, 2.0]
    assert as_function(1.5, dims=2)(np.zeros(2), np.zeros((3, 1))).shape == (3, 2)
    f = lambda x: x
    assert as_function(f) is f
    with pytest.raises(ConfigError):
        as_function([1, 2])


def test_scipy_density_cell_masses():
    dens = make_density(GAMMA)
    assert isinstance(dens, ScipyDensity)
    e = uniform_edges(0, 2, 20)
    m = dens.cell_masses(e)
    assert m.sum() == pytest.approx(1.0)
    law = stats.gamma(4, scale=0.25)
    np.testing.assert_allclose(m[:-1], np.diff(law.cdf(e))[:-1], rtol=1e-12)
    # tail beyond the grid lands in the last cell
    assert m[-1] == pytest.approx(law.cdf(2.0) - law.cdf(1.9) + law.sf(2.0))
    assert dens.mean() == pytest.approx(1.0)
    assert dens.to_json() == GAMMA


def test_scipy_density_sampling_is_inverse_cdf():
    dens = make_density({"dist": "expon", "scale": 0.5})
    x = dens.rvs(50_000, np.random.default_rng(0))
    assert stats.kstest(x, stats.expon(scale=0.5).cdf).pvalue > 1e-4
    # one uniform per draw
    r1, r2 = np.random.default_rng(3), np.random.default_rng(3)
    dens.rvs(10, r1)
    r2.random(10)
    assert r1.random() == r2.random()


def test_histogram_density():
    e = np.array([0.0, 1.0, 2.0, 4.0])
    grid = Grid1D(e, np.array([0.2, np.nan, 0.3]), np.array([10, 0, 20]))
    dens = make_density(grid)
    assert isinstance(dens, HistogramDensity)
    np.testing.assert_allclose(dens.mass, [0.25, 0.0, 0.75])
    assert dens.cdf(1.0) == pytest.approx(0.25)
    assert dens.pdf(3.0) == pytest.approx(0.375)
    assert dens.mean() == pytest.approx(0.25 * 0.5 + 0.75 * 3.0)
    x = dens.rvs(20_000, np.random.default_rng(1))
    assert np.all((x < 1) | (x >= 2))
    assert np.mean(x >= 2) == pytest.approx(0.75, abs=0.02)
    back = make_density(dens.to_json())
    np.testing.assert_allclose(back.mass, dens.mass)
    assert make_density(Grid1D(e, np.full(3, np.nan), np.zeros(3, dtype=np.int64))) is None


def test_point_mass():
    p = make_density({"dist": "point", "at": 1.5})
    assert isinstance(p, PointMass)
    m = p.cell_masses(uniform_edges(0, 3, 6))
    assert m.tolist() == [0, 0, 0, 1, 0, 0]
    assert p.rvs(3, np.random.default_rng(0)).tolist() == [1.5] * 3


@pytest.mark.parametrize("obj", [{"dist": "nosuch"}, {"dist": "gamma", "bogus": 1}, 3.0])
def test_bad_densities(obj):
    with pytest.raises(ConfigError):
        make_density(obj)


def test_product_and_histogram_2d_laws():
    prod = make_density_2d({"own": GAMMA, "opp": {"dist": "expon", "scale": 1.0}})
    assert isinstance(prod, ProductDensity2D)
    e = uniform_edges(0, 4, 8)
    m = prod.cell_masses(e, e)
    assert m.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(m.sum(axis=1), make_density(GAMMA).cell_masses(e))
    own, opp = prod.rvs(5, np.random.default_rng(0))
    assert own.shape == opp.shape == (5,)

    fine = uniform_edges(0, 4, 8)
    vals = np.arange(64, dtype=float).reshape(8, 8) + 1
    h = make_density_2d(Grid2D(fine, fine, vals, np.ones((8, 8), dtype=np.int64)))
    assert isinstance(h, HistogramDensity2D)
    coarse = uniform_edges(0, 4, 4)
    mc = h.cell_masses(coarse, coarse)
    assert mc.sum() == pytest.approx(1.0)
    # merging 2x2 blocks of the fine masses
    np.testing.assert_allclose(mc, h.mass.reshape(4, 2, 4, 2).sum(axis=(1, 3)), rtol=1e-12)
    # a destination range narrower than the source sends outside mass to the edge cells
    mn = h.cell_masses(uniform_edges(1, 3, 4), uniform_edges(1, 3, 4))
    assert mn.sum() == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        make_density_2d({"dist": "gamma"})


def test_spec_from_mapping_1d_and_2d():
    s = spec_from_mapping({"model": {"f": "0.5*(1-x)", "d": "0.05", "qplus": "0.01", "pplus": GAMMA,
                                     "xmax": 5, "n": 100}})
    assert isinstance(s, ModelSpec1D) and s.n == 100
    assert s.f(np.array([1.0]))[0] == 0.0
    s2 = spec_from_mapping({"dims": 2, "fx": "-x", "fy": "-y", "dx": "0.1", "dy": "0.1", "n": 16})
    assert isinstance(s2, ModelSpec2D) and s2.n == 16
    with pytest.raises(ConfigError, match="unknown"):
        spec_from_mapping({"f": "0", "d": "1", "fx": "0"})
    with pytest.raises(ConfigError, match="needs"):
        spec_from_mapping({"f": "0"})
    with pytest.raises(ConfigError, match="needs"):
        spec_from_mapping({"dims": 2, "fx": "0", "fy": "0", "dx": "1"})
    with pytest.raises(ConfigError, match="dims"):
        spec_from_mapping({"dims": 4, "f": "0", "d": "1"})


def test_spec_validation():
    with pytest.raises(ConfigError):
        ModelSpec1D(f="0", d="1", pi_plus=2.0)
    with pytest.raises(ConfigError):
        ModelSpec1D(f="0", d="1", n=1)
    with pytest.raises(ConfigError, match="no-price-change"):
        ModelSpec1D(f="0", d="1", qplus=0.6, qminus=0.6, pplus=GAMMA, pminus=GAMMA).validate()
    with pytest.raises(ConfigError):
        ModelSpec1D(f="0", d="1", qminus=0.1, pplus=GAMMA, pi_plus=0.5).validate()
    ModelSpec1D(f="0", d="1", qminus=0.1, pplus=GAMMA, pi_plus=1.0).validate()
    with pytest.raises(ConfigError):
        ModelSpec2D(fx="0", fy="0", dx="1", dy="1", qminus="0.1").validate()


def test_reinjection_mixture():
    s = ModelSpec1D(f="0", d="1", qminus=0.1, pplus=GAMMA, pminus={"dist": "point", "at": 3.0}, pi_plus=0.25,
                    xmax=4.0, n=8)
    plus, mix = s.reinjection(s.edges)
    np.testing.assert_allclose(mix, 0.25 * plus + 0.75 * np.eye(8)[6])


def test_load_spec_files(tmp_path):
    toml = tmp_path / "m.toml"
    toml.write_text('[model]\nf = "0.5*(1-x)"\nd = "0.05"\npplus = {dist = "expon", scale = 0.2}\nqplus = 0.01\n')
    s = load_spec(toml)
    assert isinstance(s.pplus, ScipyDensity)
    js = tmp_path / "m.json"
    js.write_text(json.dumps({"model": {"dims": 2, "fx": "0", "fy": "0", "dx": "0.1", "dy": "0.1"}}))
    assert isinstance(load_spec(js), ModelSpec2D)
    bad = tmp_path / "bad.toml"
    bad.write_text("[model\nf = 1")
    with pytest.raises(ConfigError):
        load_spec(bad)
    badj = tmp_path / "bad.json"
    badj.write_text("{")
    with pytest.raises(ConfigError):
        load_spec(badj)


def test_spec_from_calibration_file(tmp_path):
    from queuefp.calib1d import calibrate_1d
    from queuefp.events import classify, rescale_events
    from queuefp.generate import Truth1D, generate_events
    from queuefp.seasonality import IntradayProfile

    truth = Truth1D(f="0.2*tanh(1-x)", d="0.05", qplus=0.02, pplus=GAMMA)
    ev = rescale_events(classify(generate_events(truth, 50_000, seed=1)), IntradayProfile.constant(1000.0))
    cal = calibrate_1d(ev)
    cal.save(tmp_path / "cal.json")
    (tmp_path / "m.toml").write_text('[model]\ncalibration = "cal.json"\nxmax = 4.0\nn = 200\n')
    s = load_spec(tmp_path / "m.toml")
    assert isinstance(s, ModelSpec1D) and s.n == 200 and s.xmax == 4.0
