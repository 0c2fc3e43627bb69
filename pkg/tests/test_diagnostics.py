import math

import numpy as np
import pytest

from cdlcr.diagnostics import (
    SUMMARY_COLUMNS,
    DiagnosticsError,
    psrf,
    read_draws,
    read_summary,
    resolve_names,
    summarize,
    write_draws,
    write_summary,
)
from cdlcr.sampler import PosteriorDraws


def test_psrf_examples():
    assert psrf([[3.0] * 10, [3.0] * 10]) == 1.0
    assert psrf([[1, 2, 3, 4], [1, 2, 3, 4]]) == 1.0
    assert psrf([[0, 0, 0, 0], [10, 10, 10, 10]]) == math.inf


def test_psrf_formula_by_hand():
    a = np.array([1.0, 2.0, 3.0, 4.0])
    b = a + 2.0
    n = 4
    W = np.var(a, ddof=1)
    B = n * np.var([a.mean(), b.mean()], ddof=1)
    want = math.sqrt(((n - 1) / n * W + B / n) / W)
    assert psrf([a, b]) == pytest.approx(want)
    assert want > 1


def test_psrf_independent_normal_chains():
    rng = np.random.default_rng(2024)
    assert psrf(rng.standard_normal((2, 10_000))) < 1.05


def test_psrf_preconditions():
    with pytest.raises(DiagnosticsError, match="2 chains"):
        psrf([[1.0, 2.0, 3.0]])
    with pytest.raises(DiagnosticsError):
        psrf([[1.0], [2.0]])
    assert math.isnan(psrf([[1.0, np.nan], [1.0, 2.0]]))


def _draws(*chains, columns=("x",)):
    return PosteriorDraws(columns=list(columns), chains=[np.asarray(c, float).reshape(len(c), -1) for c in chains])


def test_summary_examples():
    row, = summarize(_draws(np.arange(1, 101)))
    assert row.median == 50.5 and row.q2_5 == pytest.approx(3.475)
    assert math.isnan(row.psrf) and row.n_draws == 100
    row, = summarize(_draws(np.full(20, 7.0)))
    assert {row.median, row.q2_5, row.q25, row.q75, row.q97_5} == {7.0}
    row, = summarize(_draws([0.0, 1.0] * 50))
    assert row.median == 0.5


def test_summary_properties():
    rng = np.random.default_rng(5)
    a, b = rng.gamma(2.0, size=500), rng.gamma(2.0, size=500)
    row, = summarize(_draws(a, b))
    assert row.q2_5 <= row.q25 <= row.median <= row.q75 <= row.q97_5
    assert row.psrf >= 1.0 and row.n_draws == 1000
    shuffled, = summarize(_draws(rng.permutation(a), rng.permutation(b)))
    assert shuffled == row


def test_summary_ignores_nan_draws():
    row, = summarize(_draws([1.0, np.nan, 3.0], [np.nan, 2.0, 2.0]))
    assert row.median == 2.0 and row.n_draws == 4


def test_names_and_unknown_label():
    cols = ["psi", "N[1]", "N[2]", "N_total"]
    assert resolve_names(["N"], cols) == ["N[1]", "N[2]"]
    assert resolve_names(["N_total", "psi"], cols) == ["N_total", "psi"]
    with pytest.raises(DiagnosticsError, match="available: psi"):
        resolve_names(["phi"], cols)
    with pytest.raises(DiagnosticsError):
        summarize(PosteriorDraws(columns=["x"], chains=[np.zeros((0, 1))]))


def test_summary_and_draw_files_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    chains = [rng.standard_normal((30, 2)) for _ in range(2)]
    chains[0][3, 1] = np.nan
    draws = PosteriorDraws(columns=["a", "b"], chains=chains)
    rows = summarize(draws)
    path = write_summary(tmp_path / "summary.csv", rows)
    assert path.read_text().splitlines()[0] == ",".join(SUMMARY_COLUMNS)
    back = read_summary(path)
    assert [r.name for r in back] == ["a", "b"] and back[0].median == rows[0].median
    cols, data = read_draws(write_draws(tmp_path / "d.csv", ["a", "b"], chains[0]))
    assert cols == ["a", "b"]
    np.testing.assert_array_equal(data, chains[0])
    cols, data = read_draws(write_draws(tmp_path / "e.csv", ["a"], np.zeros((0, 1))))
    assert data.shape == (0, 1)
