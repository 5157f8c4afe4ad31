from __future__ import annotations

import numpy as np
import pytest

from conftest import quote_events
from queuefp.errors import ConfigError, ProfileError
from queuefp.events import classify
from queuefp.generate import Truth1D, generate_events
from queuefp.seasonality import (
    IntradayProfile, compute_profile, fit_profile, per_bin_mean_x, vbar_derivative,
)

B = np.arange(1, 79)
COEF = np.array([100.0, 20.0, 300.0])


def reference(b, a=COEF):
    b = np.asarray(b, dtype=float)
    return a[0] + a[1] * np.log(b) + a[2] / (79 - b)


def test_constant_volumes():
    ev = quote_events(np.repeat(B, 5), np.full(390, 5000))
    prof = compute_profile(ev)
    assert np.array_equal(prof.vbar, np.full(78, 5000.0))
    assert np.allclose(prof.nbar, 5.0)


def test_alternating_volumes_average_out():
    vols = np.tile([4000, 6000], 78 * 3)
    ev = quote_events(np.repeat(B, 6), vols)
    assert np.allclose(compute_profile(ev).vbar, 5000.0)


def test_bid_and_ask_are_pooled():
    ev = quote_events(np.repeat(B, 2), np.full(156, 1000), np.full(156, 3000))
    assert np.allclose(compute_profile(ev).vbar, 2000.0)


def test_noisy_profile_sample_mean():
    rng = np.random.default_rng(17)
    bins = np.sort(rng.integers(1, 79, 100_000))
    vols = np.rint(reference(bins) * 100 * (1 + 0.05 * rng.standard_normal(len(bins))))
    prof = compute_profile(quote_events(bins, vols))
    assert np.all(np.abs(prof.vbar / (100 * reference(B)) - 1) < 0.02)


def test_fit_recovers_exact_coefficients():
    fit = fit_profile(reference(B))
    assert np.allclose(fit.coef, COEF, atol=1e-9, rtol=0)
    assert fit.rmse < 1e-9
    assert fit(78) == pytest.approx(100 + 20 * np.log(78) + 300)
    assert fit(78) == pytest.approx(487.14, abs=0.01)


def test_fit_of_constant_profile():
    fit = fit_profile(np.full(78, 42.0))
    assert np.allclose(fit.coef, [42.0, 0.0, 0.0], atol=1e-9)


def test_unweighted_fit_is_also_exact():
    fit = fit_profile(reference(B), weighting="none")
    assert np.allclose(fit.coef, COEF, atol=1e-9, rtol=0)
    with pytest.raises(ConfigError):
        fit_profile(reference(B), weighting="huber")


def test_fit_residual_shrinks_with_noise():
    z = np.random.default_rng(3).standard_normal(78)
    rmse = [fit_profile(reference(B) * (1 + s * z)).rmse for s in (0.2, 0.1, 0.05, 0.01, 0.0)]
    assert all(a >= b for a, b in zip(rmse, rmse[1:]))


def test_fit_errors():
    with pytest.raises(ProfileError):
        fit_profile(np.r_[reference(B)[:77], -1.0])
    y = np.full(78, np.nan)
    y[[3, 9]] = 5.0
    with pytest.raises(ProfileError, match="rank"):
        fit_profile(y)
    y[[3, 9, 40]] = 5.0
    fit = fit_profile(y)
    with pytest.raises(ProfileError):
        fit.conf_int()


def test_fit_ignores_missing_bins():
    y = reference(B)
    y[[0, 30, 77]] = np.nan
    assert np.allclose(fit_profile(y).coef, COEF, atol=1e-8)


def test_derivative_examples():
    prof = IntradayProfile.from_function(reference, nbar=1000.0)
    per_bin = prof.fit.derivative(39)
    assert per_bin == pytest.approx(20 / 39 + 300 / 1600)
    assert per_bin == pytest.approx(0.7003, abs=1e-4)
    assert vbar_derivative(prof, 39) == pytest.approx(per_bin / 1000)
    assert vbar_derivative(prof, 39) == pytest.approx(7.0e-4, abs=1e-6)
    late = vbar_derivative(prof, np.arange(70, 79))
    assert np.all(np.diff(late) > 0)
    flat = IntradayProfile.constant(500.0, nbar=10.0)
    assert np.allclose(vbar_derivative(flat, B), 0.0, atol=1e-12)


def test_derivative_without_fit_and_errors():
    prof = IntradayProfile.from_function(lambda b: 2.0 * b, nbar=4.0)
    assert np.allclose(vbar_derivative(prof, np.arange(2, 78), use_fit=False), 0.5)
    with pytest.raises(ConfigError):
        vbar_derivative(prof, 0)
    dead = IntradayProfile(vbar=np.full(78, 1.0), nbar=np.zeros(78))
    with pytest.raises(ProfileError):
        vbar_derivative(dead, 5)


def test_gaps_rejected_or_interpolated():
    bins = np.r_[np.arange(1, 40), np.arange(41, 79)]
    ev = quote_events(bins, 100 * bins)
    with pytest.raises(ProfileError, match="40"):
        compute_profile(ev)
    prof = compute_profile(ev, allow_gaps=True)
    assert prof.interpolated == (40,)
    assert prof.vbar[39] == pytest.approx(4000.0)


def test_profile_errors():
    with pytest.raises(ProfileError):
        compute_profile(quote_events(np.zeros(0, dtype=int), np.zeros(0)))
    with pytest.raises(ProfileError):
        compute_profile(quote_events(B, np.zeros(78)))


def test_json_round_trip(tmp_path):
    prof = IntradayProfile.from_function(reference, nbar=7.0)
    prof.save(tmp_path / "p.json")
    back = IntradayProfile.load(tmp_path / "p.json")
    assert np.array_equal(back.vbar, prof.vbar) and np.array_equal(back.nbar, prof.nbar)
    assert np.allclose(back.fit.coef, prof.fit.coef)
    prof.write_csv(tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().count("\n") == 79


TRUTH = Truth1D(f="0.2*(1-x)", d="0.02+0.5*(0.2*(1-x))**2")


def test_rescaled_mean_is_one_per_bin():
    prof_true = IntradayProfile.from_function(reference)
    ev = classify(generate_events(TRUTH, 50_000, profile=prof_true, seed=4))
    prof = compute_profile(ev)
    assert np.allclose(per_bin_mean_x(ev, prof), 1.0, atol=1e-12)


def test_order_counts_track_volumes_under_fixed_order_size():
    prof_true = IntradayProfile.from_function(lambda b: 10 * reference(b))
    ev = classify(generate_events(TRUTH, 100_000, profile=prof_true, seed=5, volume_per_order=100.0))
    prof = compute_profile(ev)
    assert prof.lbar is not None
    assert np.corrcoef(prof.lbar, prof.vbar)[0, 1] > 0.99
    # the generator follows the configured shape
    assert np.all(np.abs(prof.vbar / prof_true.vbar - 1) < 0.25)
