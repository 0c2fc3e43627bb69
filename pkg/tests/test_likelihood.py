import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdlcr.likelihood import (
    LinkParams,
    link_probabilities,
    log_birth,
    log_capture,
    log_capture_robust,
    log_mortality,
)
from cdlcr.popstate import StructuralError


def test_log_birth_examples():
    assert log_birth([[1, 1]], [1], [0.3, 1.0]) == pytest.approx(np.log(0.3))
    assert log_birth([[0, 1]], [1], [0.3, 1.0]) == pytest.approx(np.log(0.7))
    assert log_birth([[0, 0, 1]], [1], [0.3, 0.5, 1.0]) == pytest.approx(np.log(0.7 * 0.5))


def test_log_birth_excluded_and_impossible():
    assert log_birth([[0, 1]], [0], [0.3, 1.0]) == 0.0
    assert log_birth([[1, 0]], [1], [0.3, 1.0]) == -np.inf
    # never born although the last conditional probability is one
    assert log_birth([[0, 0]], [1], [0.3, 1.0]) == -np.inf
    with pytest.raises(ValueError):
        log_birth([[1, 1]], [1], [0.3, 0.9])


def test_log_mortality_examples():
    assert log_mortality([[1, 0]], [[1, 1]], [1], [[0.8]]) == pytest.approx(np.log(0.2))
    assert log_mortality([[1, 1]], [[0, 1]], [1], [[0.3]]) == 0.0
    assert log_mortality([[1, 1, 1]], [[1, 1, 1]], [1], [[0.9, 0.9]]) == pytest.approx(2 * np.log(0.9))


def test_log_mortality_impossible():
    assert log_mortality([[1, 0, 1]], [[1, 1, 1]], [1], [[0.9, 0.9]]) == -np.inf
    assert log_mortality([[0, 0]], [[1, 1]], [1], [[0.9]]) == -np.inf
    assert log_mortality([[1, 0, 1]], [[1, 1, 1]], [0], [[0.9, 0.9]]) == 0.0


def test_log_capture_examples():
    assert log_capture([[1]], [[1]], [[1]], [1], [[0.4]]) == pytest.approx(np.log(0.4))
    assert log_capture([[0]], [[0]], [[1]], [1], [[0.4]]) == 0.0
    assert log_capture([[1]], [[0]], [[1]], [1], [[0.4]]) == -np.inf
    assert log_capture([[1]], [[1]], [[1]], [0], [[0.4]]) == -np.inf


def test_log_capture_robust_examples():
    X = np.array([[[1, 0]]])
    p = np.full((1, 1, 2), 0.5)
    alive = np.ones((1, 1))
    assert log_capture_robust(X, alive, alive, [1], p) == pytest.approx(2 * np.log(0.5))
    dead = np.zeros((1, 1))
    assert log_capture_robust(np.zeros((1, 1, 2)), alive, dead, [1], p) == 0.0
    assert log_capture_robust(np.zeros((1, 1, 2)), alive, alive, [0], p) == 0.0


def test_log_capture_robust_ragged():
    # second primary has only one secondary sample; the padded cell is ignored
    X = np.array([[[1, 1], [1, 0]]])
    p = np.full((1, 2, 2), 0.25)
    ones = np.ones((1, 2))
    got = log_capture_robust(X, ones, ones, [1], p, k2=(2, 1))
    assert got == pytest.approx(3 * np.log(0.25))
    X[0, 1, 1] = 1
    assert log_capture_robust(X, ones, ones, [1], p, k2=(2, 1)) == pytest.approx(3 * np.log(0.25))


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 5), st.integers(1, 4), st.data())
def test_robust_matches_standard_with_one_secondary(k1, M, data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2 ** 32 - 1)))
    b = rng.integers(0, k1, M)
    L = np.array([rng.integers(bi, k1) for bi in b])
    j = np.arange(k1)[None, :]
    a_b = (j >= b[:, None]).astype(int)
    a_d = (j <= L[:, None]).astype(int)
    w = rng.integers(0, 2, M)
    p = rng.uniform(0.05, 0.95, (M, k1))
    X = (rng.random((M, k1)) < p) * a_b * a_d * w[:, None]
    std = log_capture(X, a_b, a_d, w, p)
    rob = log_capture_robust(X[:, :, None], a_b, a_d, w, p[:, :, None])
    assert std == rob


def test_link_probabilities_examples():
    x = np.ones((2, 3))
    link = LinkParams(eta_S=np.zeros(2), eta_p=np.zeros(3))
    S, p = link_probabilities(link, x)
    assert np.all(S == 0.5) and S.shape == (2, 2) and p.shape == (2, 3)
    link = LinkParams(alpha0=1, alpha1=1, eta_S=np.zeros(2), eta_p=np.zeros(3))
    S, _ = link_probabilities(link, x)
    np.testing.assert_allclose(S, 1 / (1 + np.exp(-2)))
    assert S[0, 0] == pytest.approx(0.8808, abs=1e-4)
    link = LinkParams(gamma0=-1, eta_S=np.zeros(2), eta_p=np.ones(3), eps_p=np.zeros((3, 2)))
    _, p = link_probabilities(link, x)
    assert p.shape == (2, 3, 2) and np.all(p == 0.5)


def test_link_probabilities_errors():
    with pytest.raises(ValueError):
        link_probabilities(LinkParams(alpha0=np.inf, eta_S=np.zeros(1), eta_p=np.zeros(2)), np.zeros((1, 2)))
    with pytest.raises(StructuralError):
        link_probabilities(LinkParams(eta_S=np.zeros(1), eta_p=np.zeros(2)), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        LinkParams(sigma_S=0.0, eta_S=np.zeros(1), eta_p=np.zeros(2))


def _all_histories(k1):
    """Every valid (a_b, a_d) row pair for one individual."""
    j = np.arange(k1)
    return [((j >= b).astype(int), (j <= L).astype(int)) for b in range(k1) for L in range(b, k1)]


@pytest.mark.parametrize("k1", [2, 3])
def test_exhaustive_normalisation(k1):
    rng = np.random.default_rng(k1)
    zeta = np.append(rng.uniform(0.1, 0.9, k1 - 1), 1.0)
    S = rng.uniform(0.2, 0.9, (1, k1 - 1))
    p = rng.uniform(0.1, 0.9, (1, k1))
    total = 0.0
    for a_b, a_d in _all_histories(k1):
        for X in itertools.product([0, 1], repeat=k1):
            X = np.array([X])
            lp = (log_birth([a_b], [1], zeta) + log_mortality([a_d], [a_b], [1], S)
                  + log_capture(X, [a_b], [a_d], [1], p))
            total += np.exp(lp)
    assert total == pytest.approx(1.0, abs=1e-12)


def test_invalid_histories_have_zero_probability():
    zeta = [0.4, 1.0]
    S = [[0.7]]
    p = [[0.5, 0.5]]
    for a_b in itertools.product([0, 1], repeat=2):
        for a_d in itertools.product([0, 1], repeat=2):
            valid = any(np.array_equal(a_b, r[0]) and np.array_equal(a_d, r[1]) for r in _all_histories(2))
            lp = log_birth([a_b], [1], zeta) + log_mortality([a_d], [a_b], [1], S) + log_capture(
                [[0, 0]], [a_b], [a_d], [1], p)
            if not valid:
                assert lp == -np.inf, (a_b, a_d)
            else:
                assert np.isfinite(lp)
