import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from cdlcr.covariates import (
    DataValidationError,
    DiseaseProcessParams,
    MassObservation,
    MassProcessParams,
    censoring_interval,
    censoring_intervals,
    covariate_effect,
    log_disease_process,
    log_interval_mass,
    log_mass_censored,
    log_mass_obs,
    log_mass_walk,
    sample_truncnorm,
    standardize_mass,
)
from cdlcr.likelihood import LinkParams, link_probabilities


@pytest.mark.parametrize("captured,z,expected", [
    (True, 45, (44.5, 45.5)),
    (True, 60, (59.5, np.inf)),
    (False, None, (0.0, np.inf)),
    (True, 0.2, (0.0, 0.7)),
])
def test_censoring_interval(captured, z, expected):
    assert censoring_interval(captured, z) == pytest.approx(expected)


def test_censoring_interval_errors():
    with pytest.raises(DataValidationError):
        censoring_interval(True, 61)
    with pytest.raises(DataValidationError):
        censoring_interval(True, None)
    lo, hi = censoring_intervals([45.0, 60.0, 12.0])
    assert lo.tolist() == [44.5, 59.5, 11.5] and hi.tolist() == [45.5, np.inf, 12.5]
    with pytest.raises(DataValidationError):
        censoring_intervals([70.0])


def test_mass_observation():
    assert MassObservation(0, 0, 0, 60.0).censored_at_max
    assert not MassObservation(0, 0, 0, 59.0).censored_at_max
    with pytest.raises(DataValidationError):
        MassObservation(0, 0, 0, 61.0)


def test_log_mass_obs_examples():
    # interval (0, inf): the truncation correction log Phi(45) is negligible
    assert log_mass_obs(45.0, 45.0, 1.0, 0.0, np.inf) == pytest.approx(-0.9189385, abs=1e-6)
    assert log_mass_obs(44.0, 45.0, 1.0, 44.5, 45.5) == -np.inf
    sd = 2.0
    assert log_mass_obs(3.0, 3.0, sd, -np.inf, np.inf) == pytest.approx(-0.5 * np.log(2 * np.pi * sd ** 2))


@pytest.mark.parametrize("lam,sd,lo,hi", [
    (45.0, 1.0, 44.5, 45.5),
    (30.0, 1.5, 59.5, np.inf),
    (62.0, 0.7, 59.5, np.inf),
    (10.0, 3.0, 0.0, np.inf),
    (0.2, 1.0, 0.0, 0.7),
    (45.0, 0.05, 44.5, 45.5),
])
def test_truncated_density_integrates_to_one(lam, sd, lo, hi):
    f = lambda z: np.exp(log_mass_obs(z, lam, sd, lo - 1, hi + 1) + log_interval_mass(  # noqa: E731
        (lo - 1 - lam) / sd, (hi + 1 - lam) / sd) - log_interval_mass((lo - lam) / sd, (hi - lam) / sd))
    upper = hi if np.isfinite(hi) else lam + 40 * sd + 100
    total, err = integrate.quad(f, lo, upper, limit=200, points=[lam] if lo < lam < upper else None)
    assert total == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.floats(-40, 40), st.floats(0.0, 5.0))
def test_log_interval_mass_matches_scipy(a, width):
    b = a + width
    width = b - a  # the representable width
    got = log_interval_mass(a, b)
    if width == 0:
        assert got == -np.inf
        return
    if width < 1e-6:
        # cdf differences cancel here; midpoint density times width is exact to O(width^2)
        want = stats.norm.logpdf(a + width / 2) + np.log(width)
    else:
        with np.errstate(divide="ignore"):
            want = np.log(stats.norm.cdf(b) - stats.norm.cdf(a)) if a < 0 else np.log(
                stats.norm.sf(a) - stats.norm.sf(b))
    if np.isfinite(want) and want > -700:
        assert got == pytest.approx(want, rel=1e-8, abs=1e-10)
    assert got <= 0.0


def test_log_interval_mass_far_tail():
    # log(Phi(-39) - Phi(-40)) ~ log phi(39)/39, where the naive difference underflows
    got = log_interval_mass(-40.0, -39.0)
    approx = stats.norm.logpdf(39.0) - np.log(39.0)
    assert got == pytest.approx(approx, rel=1e-3)
    assert log_interval_mass(39.0, 40.0) == pytest.approx(got)


def test_log_mass_censored_marginal():
    # integrating the joint over its interval leaves the interval probability
    lam, sd, lo, hi = 44.8, 0.9, 44.5, 45.5
    total, _ = integrate.quad(lambda z: np.exp(log_mass_censored(z, lam, sd, lo, hi)), lo, hi)
    assert np.log(total) == pytest.approx(log_interval_mass((lo - lam) / sd, (hi - lam) / sd), abs=1e-9)
    assert log_mass_censored(46.0, lam, sd, lo, hi) == -np.inf
    assert log_mass_censored(45.0, 45.0, 1.0) == pytest.approx(-0.5 * np.log(2 * np.pi))


def test_log_mass_walk_example():
    lam = np.array([[30.0, 32.0]])
    got = log_mass_walk(lam, 30.0, 1.0, [2.0], 1.0, np.array([0]))
    assert got == pytest.approx(-np.log(2 * np.pi))
    only_step = got - stats.norm.logpdf(30.0, 30.0, 1.0)
    assert only_step == pytest.approx(-0.5 * np.log(2 * np.pi))


def test_log_mass_walk_ignores_before_birth_and_excluded():
    lam = np.array([[5.0, 30.0, 31.0], [0.0, 0.0, 0.0]])
    got = log_mass_walk(lam, 30.0, 2.0, [0.0, 1.0], 1.5, np.array([1, 0]), w=[1, 0])
    want = stats.norm.logpdf(30.0, 30.0, 2.0) + stats.norm.logpdf(31.0, 31.0, 1.5)
    assert got == pytest.approx(want)


def test_mass_params_validation():
    MassProcessParams(30.0, 5.0, [1.0], 2.0, 1.0)
    with pytest.raises(ValueError):
        MassProcessParams(30.0, 0.0, [1.0], 2.0, 1.0)


def test_standardize():
    assert standardize_mass(40.0, 40.0, 10.0) == 0.0
    assert standardize_mass(50.0, 40.0, 10.0) == 1.0
    assert standardize_mass(55.0, 40.0, 10.0) == 1.5
    with pytest.raises(ValueError):
        standardize_mass(1.0, 0.0, 0.0)


def test_standardisation_only_rescales_coefficients():
    rng = np.random.default_rng(0)
    lam = rng.normal(30, 5, (4, 3))
    loc1, sc1, loc2, sc2 = 30.0, 5.0, 20.0, 8.0
    a0, a1 = 0.7, 0.4
    b1 = a1 * sc2 / sc1
    b0 = a0 + a1 * (loc2 - loc1) / sc1
    eta = np.zeros(2)
    S1, _ = link_probabilities(LinkParams(alpha0=a0, alpha1=a1, eta_S=eta, eta_p=np.zeros(3)),
                               covariate_effect("mass", lam, loc1, sc1))
    S2, _ = link_probabilities(LinkParams(alpha0=b0, alpha1=b1, eta_S=eta, eta_p=np.zeros(3)),
                               covariate_effect("mass", lam, loc2, sc2))
    np.testing.assert_allclose(S1, S2, rtol=1e-12)


def test_disease_process_examples():
    omega = np.array([[0.95, 0.05], [0.3, 0.7]])
    got = log_disease_process(np.array([[1, 1]]), [0.9, 0.1], omega, np.array([0]))
    assert got == pytest.approx(np.log(0.9) + np.log(0.95))
    assert log_disease_process(np.array([[1, 1, 1]]), [1.0, 0.0], np.eye(2), np.array([0])) == 0.0
    assert log_disease_process(np.array([[1, 2]]), [0.5, 0.5], np.eye(2), np.array([0])) == -np.inf
    with pytest.raises(ValueError):
        log_disease_process(np.array([[1, 3]]), [0.5, 0.5], np.eye(2), np.array([0]))
    # entries before birth and excluded rows are ignored
    z = np.array([[0, 2, 2], [1, 2, 1]])
    got = log_disease_process(z, [0.9, 0.1], omega, np.array([1, 0]), w=[1, 0])
    assert got == pytest.approx(np.log(0.1) + np.log(0.7))


def test_disease_params_validation():
    DiseaseProcessParams([0.9, 0.1], [[0.9, 0.1], [0.2, 0.8]])
    with pytest.raises(ValueError):
        DiseaseProcessParams([0.9, 0.2], [[0.9, 0.1], [0.2, 0.8]])
    with pytest.raises(ValueError):
        DiseaseProcessParams([0.9, 0.1], [[0.9, 0.2], [0.2, 0.8]])


def test_disease_chain_transition_frequencies():
    rng = np.random.default_rng(3)
    omega = np.array([[0.9, 0.1], [0.35, 0.65]])
    n = 200_000
    z = np.empty(n, dtype=int)
    z[0] = 0
    u = rng.random(n)
    for t in range(1, n):
        z[t] = int(u[t] > omega[z[t - 1], 0])
    counts = np.zeros((2, 2))
    np.add.at(counts, (z[:-1], z[1:]), 1)
    freq = counts / counts.sum(axis=1, keepdims=True)
    se = np.sqrt(omega * (1 - omega) / counts.sum(axis=1, keepdims=True))
    assert np.all(np.abs(freq - omega) < 4 * se)


def test_covariate_effect():
    assert covariate_effect("disease", np.array([2]))[0] == 1.0
    assert covariate_effect("categorical", np.array([1]))[0] == 0.0
    assert covariate_effect("mass", np.array([40.0]), 40.0, 10.0)[0] == 0.0
    with pytest.raises(ValueError):
        covariate_effect("colour", np.zeros(1))


def test_sample_truncnorm_within_bounds_and_limits():
    rng = np.random.default_rng(1)
    lo = np.array([44.5, 59.5, 0.0])
    hi = np.array([45.5, np.inf, 0.7])
    z = sample_truncnorm(rng, np.array([20.0, 30.0, 50.0]), 1.0, lo, hi)
    assert np.all((z > lo) & (z < hi))
    tight = sample_truncnorm(rng, np.full(1000, 45.2), 1e-4, np.full(1000, 44.5), np.full(1000, 45.5))
    assert np.allclose(tight, 45.2, atol=1e-3)
    assert sample_truncnorm(rng, np.zeros(0), 1.0, np.zeros(0), np.zeros(0)).size == 0
