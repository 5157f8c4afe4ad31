from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats

from queuefp.errors import ConfigError
from queuefp.events import Kind, Side, classify, rescale_events
from queuefp.generate import NoiseLaw, Truth1D, Truth2D, generate_events, truth_from_mapping
from queuefp.models import ModelSpec1D, ModelSpec2D
from queuefp.seasonality import IntradayProfile

UNIT = IntradayProfile.constant(1000.0)
GAMMA = {"dist": "gamma", "a": 4, "scale": 0.25}


def test_noise_has_unit_variance():
    rng = np.random.default_rng(0)
    z = NoiseLaw(p_tail=0.1, alpha=6.0).rvs(400_000, rng)
    assert abs(z.mean()) < 0.01
    assert z.var() == pytest.approx(1.0, rel=0.02)
    g = NoiseLaw(p_tail=0.0).rvs(400_000, rng)
    assert g.var() == pytest.approx(1.0, rel=0.01)
    assert stats.kstest(g, "norm").pvalue > 1e-4


def test_noise_mean_abs_and_scale():
    law = NoiseLaw()
    # body second moment 1, Pareto(2.5) tail second moment 2.5 / 0.5 = 5
    assert law.scale == pytest.approx(1 / math.sqrt(0.95 + 0.05 * 5))
    z = law.rvs(1_000_000, np.random.default_rng(1))
    assert np.mean(np.abs(z)) == pytest.approx(law.mean_abs(), rel=0.01)
    assert NoiseLaw(p_tail=0.0).mean_abs() == pytest.approx(math.sqrt(2 / math.pi))


def test_infinite_variance_tail_keeps_unit_body():
    law = NoiseLaw(p_tail=0.05, alpha=1.5)
    assert not law.finite_variance
    assert law.scale == 1.0
    with pytest.raises(ConfigError):
        NoiseLaw(p_tail=1.0)
    with pytest.raises(ConfigError):
        NoiseLaw(p_tail=0.1, alpha=0.0)


@pytest.mark.parametrize("kw", [
    {"f": "1", "d": "0.4"},                                  # 2d < f^2
    {"f": "0", "d": "0.1", "qplus": "0.7", "qminus": "0.5", "pplus": GAMMA, "pminus": GAMMA},
    {"f": "0", "d": "0.1", "qplus": "-0.1", "pplus": GAMMA},
    {"f": "0", "d": "0.1", "qplus": "0.1"},                  # no P+
    {"f": "0", "d": "0.1", "qminus": "0.1", "pplus": GAMMA},  # no P-
    {"f": "0", "d": "0.1", "pi_plus": 1.5},
])
def test_inconsistent_truths_are_rejected(kw):
    with pytest.raises(ConfigError):
        Truth1D(**kw)


def test_truth_2d_validates_on_plane():
    with pytest.raises(ConfigError, match="2d"):
        Truth2D(f="0.1*y", d="0.01")
    t = Truth2D(f="0.1*tanh(1-x)", d="0.02", qplus=0.01, pplus=GAMMA)
    assert t.x0 == (1.0, 1.0)


def test_model_spec_conventions():
    t = Truth1D(f="0.2*tanh(1-x)", d="0.05", qplus="0.02", qminus="0.03*x/(1+x)", pplus=GAMMA, pminus=GAMMA)
    s = t.to_model_spec(n=50)
    x = np.linspace(0, 3, 7)
    pi0 = 1 - 0.02 - 0.03 * x / (1 + x)
    np.testing.assert_allclose(s.f(x), pi0 * 0.2 * np.tanh(1 - x))
    np.testing.assert_allclose(s.d(x), pi0 * 0.05)
    assert isinstance(s, ModelSpec1D) and s.n == 50
    t2 = Truth2D(f="0.2*tanh(1-x)", d="0.05+0.01*y", qplus="0.02", pplus={"own": GAMMA, "opp": GAMMA})
    s2 = t2.to_model_spec()
    assert isinstance(s2, ModelSpec2D)
    a, b = np.array([0.5, 2.0]), np.array([1.5, 0.3])
    np.testing.assert_allclose(s2.fx(a, b), 0.5 * 0.98 * 0.2 * np.tanh(1 - a))
    np.testing.assert_allclose(s2.fy(a, b), 0.5 * 0.98 * 0.2 * np.tanh(1 - b))
    np.testing.assert_allclose(s2.dy(a, b), 0.5 * 0.98 * (0.05 + 0.01 * a))
    np.testing.assert_allclose(s2.qplus(a, b), 0.01)


def test_generation_is_deterministic_per_seed():
    t = Truth1D(f="0.1*tanh(1-x)", d="0.02", qplus=0.02, qminus=0.03, pplus=GAMMA, pminus=GAMMA, pi_plus=0.4)
    a = generate_events(t, 5000, seed=4)
    b = generate_events(t, 5000, seed=4)
    c = generate_events(t, 5000, seed=5)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)
    assert len(generate_events(t, 0)) == 0
    with pytest.raises(ConfigError):
        generate_events(t, -1)


def test_event_frequencies_match_truth():
    qp, qm, pi_plus = 0.03, 0.05, 0.4
    t = Truth1D(f="0.1*tanh(1-x)", d="0.02", qplus=qp, qminus=qm, pplus=GAMMA, pminus=GAMMA, pi_plus=pi_plus)
    n = 100_000
    ev = classify(generate_events(t, n, seed=6))
    assert len(ev) == n
    kinds = np.bincount(ev.kind, minlength=len(Kind)) / n
    for k, p in ((Kind.OVERTAKEN, qp), (Kind.VOLUME_CHANGE, 1 - qp - qm)):
        assert abs(kinds[k] - p) < 4 * np.sqrt(p * (1 - p) / n)
    dep = kinds[Kind.DEPLETED_REFILL] + kinds[Kind.DEPLETED_RECEDE]
    assert abs(dep - qm) < 4 * np.sqrt(qm * (1 - qm) / n)
    share = kinds[Kind.DEPLETED_REFILL] / dep
    assert abs(share - pi_plus) < 4 * np.sqrt(pi_plus * (1 - pi_plus) / (dep * n))
    sides = np.bincount(ev.side, minlength=2) / n
    assert abs(sides[Side.BID] - 0.5) < 4 * np.sqrt(0.25 / n)


def test_replacement_volumes_follow_law():
    t = Truth1D(f="0", d="0.02", qplus=0.2, pplus=GAMMA)
    r = rescale_events(classify(generate_events(t, 50_000, seed=7)), UNIT)
    new = r.new[r.kind == Kind.OVERTAKEN]
    # volumes are rounded to whole shares at V = 1000
    assert stats.kstest(new, stats.gamma(4, scale=0.25).cdf).statistic < 0.02


def test_truth_from_mapping():
    t = truth_from_mapping({"truth": {"f": "0.1*tanh(1-x)", "d": "0.02", "p_tail": 0.0}})
    assert isinstance(t, Truth1D) and t.noise.p_tail == 0.0
    t2 = truth_from_mapping({"dims": 2, "f": "0.1*tanh(1-x)", "d": "0.02", "x0": [1, 2]})
    assert isinstance(t2, Truth2D) and t2.x0 == (1.0, 2.0)
    with pytest.raises(ConfigError, match="unknown"):
        truth_from_mapping({"f": "0", "d": "0.1", "g": 1})
    with pytest.raises(ConfigError, match="needs"):
        truth_from_mapping({"f": "0"})
    with pytest.raises(ConfigError, match="dims"):
        truth_from_mapping({"f": "0", "d": "0.1", "dims": 3})
