"""Augmented population state and the demographic quantities derived from it.

Periods are indexed from 0 in every array.  An individual ``i`` is described by
two latent indicator rows: ``a_b[i, j] = 1`` once it has been born (at or
before period ``j``) and ``a_d[i, j] = 1`` while it has not yet died.  It is
alive at ``j`` when both are 1.  ``w[i] = 1`` marks a pseudo-individual of the
augmented list as a real member of the population.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "StructuralError",
    "StudyDesign",
    "AugmentedState",
    "BirthParams",
    "DemographicSummary",
    "derive_abundance",
    "derive_lifetime",
    "zeta_to_beta",
    "beta_to_zeta",
    "beta_to_eta",
    "demographic_summary",
    "state_violations",
]


class StructuralError(ValueError):
    """Arrays that do not conform to each other or to the study design."""


@dataclass(frozen=True)
class StudyDesign:
    k1: int
    k2: tuple[int, ...]
    M: int
    n_observed: int = 0

    def __post_init__(self):
        k2 = tuple(int(v) for v in np.atleast_1d(self.k2))
        if len(k2) == 1 and self.k1 > 1:
            k2 = k2 * self.k1
        object.__setattr__(self, "k2", k2)
        if self.k1 < 2:
            raise StructuralError(f"need at least 2 primary periods, got k1={self.k1}")
        if len(k2) != self.k1:
            raise StructuralError(f"k2 has {len(k2)} entries for k1={self.k1}")
        if min(k2) < 1:
            raise StructuralError("every primary period needs at least one secondary sample")
        if not (self.M >= self.n_observed >= 0):
            raise StructuralError(f"need M >= n_observed >= 0, got M={self.M}, n={self.n_observed}")

    @property
    def k2_max(self) -> int:
        return max(self.k2)

    @property
    def is_robust(self) -> bool:
        return self.k2_max > 1

    def secondary_mask(self) -> np.ndarray:
        """Boolean (k1, k2_max) array marking secondary samples that exist."""
        return np.arange(self.k2_max)[None, :] < np.asarray(self.k2)[:, None]


@dataclass
class AugmentedState:
    a_b: np.ndarray
    a_d: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.a_b = np.asarray(self.a_b, dtype=np.int8)
        self.a_d = np.asarray(self.a_d, dtype=np.int8)
        self.w = np.asarray(self.w, dtype=np.int8)
        _check_shapes(self.a_b, self.a_d, self.w)

    @classmethod
    def from_intervals(cls, birth, last_alive, w, k1: int) -> "AugmentedState":
        """Build indicator matrices from first and last alive periods."""
        birth = np.asarray(birth)
        last_alive = np.asarray(last_alive)
        j = np.arange(k1)[None, :]
        a_b = j >= birth[:, None]
        a_d = j <= last_alive[:, None]
        return cls(a_b, a_d, w)

    @property
    def M(self) -> int:
        return self.a_b.shape[0]

    @property
    def k1(self) -> int:
        return self.a_b.shape[1]

    @property
    def b(self) -> np.ndarray:
        """First alive period; ``k1`` for rows never born."""
        born = self.a_b.astype(bool)
        return np.where(born.any(axis=1), born.argmax(axis=1), self.k1)

    @property
    def alive(self) -> np.ndarray:
        return (self.a_b * self.a_d).astype(bool)


@dataclass(frozen=True)
class BirthParams:
    zeta: np.ndarray
    psi: float

    def __post_init__(self):
        zeta = np.asarray(self.zeta, dtype=float)
        object.__setattr__(self, "zeta", zeta)
        if np.any((zeta < 0) | (zeta > 1)):
            raise ValueError("zeta entries must lie in [0, 1]")
        if zeta[-1] != 1.0:
            raise ValueError("the last entry probability must be exactly 1")
        if not 0.0 <= self.psi <= 1.0:
            raise ValueError("psi must lie in [0, 1]")


@dataclass
class DemographicSummary:
    N_total: int
    N: np.ndarray
    lifetime: np.ndarray
    beta: np.ndarray
    eta: np.ndarray


def _check_shapes(a_b, a_d, w):
    if a_b.ndim != 2 or a_b.shape != a_d.shape:
        raise StructuralError(f"a_b {a_b.shape} and a_d {a_d.shape} must be equal 2-d shapes")
    if w.shape != (a_b.shape[0],):
        raise StructuralError(f"w has shape {w.shape}, expected ({a_b.shape[0]},)")


def derive_abundance(state: AugmentedState) -> np.ndarray:
    """Number alive in each period, counting only included individuals."""
    _check_shapes(state.a_b, state.a_d, state.w)
    return (state.w[:, None] * state.a_b * state.a_d).sum(axis=0).astype(np.int64)


def derive_lifetime(state: AugmentedState) -> np.ndarray:
    """Periods alive per pseudo-individual (callers filter on ``w``)."""
    _check_shapes(state.a_b, state.a_d, state.w)
    return (state.a_b * state.a_d).sum(axis=1).astype(np.int64)


def zeta_to_beta(zeta) -> np.ndarray:
    """Unconditional entry probabilities from the conditional ones.

    ``beta[0] = zeta[0]`` is the probability of entering before the first
    period and ``beta[j]`` the probability of entering between periods
    ``j - 1`` and ``j``.  The remaining mass subtracted at step ``j`` includes
    ``beta[0]``, so the result is a simplex whenever ``zeta[-1] == 1``.
    """
    zeta = np.asarray(zeta, dtype=float)
    if zeta[-1] != 1.0:
        raise ValueError(f"last conditional entry probability must be 1, got {zeta[-1]!r}")
    remaining = np.concatenate(([1.0], np.cumprod(1.0 - zeta[:-1])))
    beta = zeta * remaining
    # the final interval takes exactly what is left so the sum is 1 to rounding
    beta[-1] = max(0.0, 1.0 - beta[:-1].sum())
    return beta


def beta_to_zeta(beta) -> np.ndarray:
    """Inverse of :func:`zeta_to_beta` (conditional entry probabilities)."""
    beta = np.asarray(beta, dtype=float)
    if not np.isclose(beta.sum(), 1.0, atol=1e-10):
        raise ValueError("entry probabilities must sum to 1")
    remaining = 1.0 - np.concatenate(([0.0], np.cumsum(beta[:-1])))
    with np.errstate(divide="ignore", invalid="ignore"):
        zeta = np.where(remaining > 0, beta / remaining, 1.0)
    zeta = np.clip(zeta, 0.0, 1.0)
    zeta[-1] = 1.0
    return zeta


def beta_to_eta(beta, N_total, N) -> np.ndarray:
    """Per-capita birth rates ``beta[j] * N_total / N[j - 1]`` for ``j >= 1``.

    NaN marks periods with nobody alive.
    """
    beta = np.asarray(beta, dtype=float)
    N = np.asarray(N, dtype=float)
    num = beta[1:] * float(N_total)
    den = N[:-1]
    out = np.full(num.shape, np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def demographic_summary(state: AugmentedState, zeta) -> DemographicSummary:
    N = derive_abundance(state)
    n_total = int(state.w.sum())
    beta = zeta_to_beta(zeta)
    return DemographicSummary(
        N_total=n_total,
        N=N,
        lifetime=derive_lifetime(state),
        beta=beta,
        eta=beta_to_eta(beta, n_total, N),
    )


def state_violations(state: AugmentedState, first_capture=None, last_capture=None) -> list[str]:
    """List every broken structural invariant (empty when the state is valid).

    ``first_capture``/``last_capture`` hold the period indices of the observed
    individuals, which occupy the first rows of the augmented list.
    """
    problems = []
    a_b, a_d = state.a_b, state.a_d
    if np.any(np.diff(a_b, axis=1) < 0):
        problems.append("a_b row decreases (individual un-born)")
    # a_d may only drop once the individual has been born
    rise = np.diff(a_d, axis=1) > 0
    if np.any(rise):
        problems.append("a_d row increases (individual revived)")
    early_death = (np.diff(a_d, axis=1) < 0) & (a_b[:, :-1] == 0)
    if np.any(early_death):
        problems.append("death before birth")
    if np.any(a_d[:, 0] != 1):
        problems.append("a_d must be 1 in the first period")
    if first_capture is not None:
        first_capture = np.asarray(first_capture)
        last_capture = np.asarray(last_capture)
        n = len(first_capture)
        if np.any(state.w[:n] != 1):
            problems.append("observed individual excluded (w=0)")
        alive = state.alive[:n]
        j = np.arange(state.k1)[None, :]
        need = (j >= first_capture[:, None]) & (j <= last_capture[:, None])
        if np.any(need & ~alive):
            problems.append("observed individual not alive between its captures")
    return problems
