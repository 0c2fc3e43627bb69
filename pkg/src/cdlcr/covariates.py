"""Covariate process models.

Two families are supported: body mass recorded to the nearest unit on a scale
with a maximum reading (rounded, right-censored) whose latent mean follows a
random walk with drift, and a categorical state (coded ``1..n_states``,
``2`` = diseased) following a first-order Markov chain from the period of
birth.  ``0`` marks an unknown state in observation arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import log_ndtr

__all__ = [
    "SCALE_MAX",
    "UNKNOWN_STATE",
    "DataValidationError",
    "MassObservation",
    "MassProcessParams",
    "DiseaseProcessParams",
    "censoring_interval",
    "censoring_intervals",
    "log_interval_mass",
    "log_mass_obs",
    "log_mass_censored",
    "log_mass_walk",
    "standardize_mass",
    "log_disease_process",
    "covariate_effect",
    "sample_truncnorm",
]

SCALE_MAX = 60.0
UNKNOWN_STATE = 0
_LOG_2PI = np.log(2.0 * np.pi)


class DataValidationError(ValueError):
    pass


@dataclass(frozen=True)
class MassObservation:
    i: int
    j: int
    l: int
    z_obs: float
    scale_max: float = SCALE_MAX

    def __post_init__(self):
        if not 0 < self.z_obs <= self.scale_max:
            raise DataValidationError(
                f"mass {self.z_obs} outside (0, {self.scale_max}] for individual {self.i}"
            )

    @property
    def censored_at_max(self) -> bool:
        return self.z_obs == self.scale_max


@dataclass
class MassProcessParams:
    mu_lambda: float
    sigma_lambda1: float
    Delta: np.ndarray
    sigma_lambda2: float
    sigma_z: float
    lam: np.ndarray | None = None
    z_latent: np.ndarray | None = None

    def __post_init__(self):
        self.Delta = np.asarray(self.Delta, dtype=float)
        for name in ("sigma_lambda1", "sigma_lambda2", "sigma_z"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class DiseaseProcessParams:
    nu: np.ndarray
    omega: np.ndarray
    z: np.ndarray | None = None

    def __post_init__(self):
        self.nu = np.asarray(self.nu, dtype=float)
        self.omega = np.asarray(self.omega, dtype=float)
        if not np.isclose(self.nu.sum(), 1.0) or np.any(self.nu < 0):
            raise ValueError("nu must be a probability vector")
        if self.omega.shape != (len(self.nu), len(self.nu)):
            raise ValueError("omega must be square and match nu")
        if not np.allclose(self.omega.sum(axis=1), 1.0) or np.any(self.omega < 0):
            raise ValueError("omega rows must be probability vectors")


def censoring_interval(captured: bool, z_obs=None, scale_max: float = SCALE_MAX):
    """Interval known to contain the true mass given one recorded value."""
    if not captured:
        return 0.0, np.inf
    if z_obs is None or not np.isfinite(z_obs):
        raise DataValidationError("a captured occasion needs a recorded mass")
    if z_obs > scale_max:
        raise DataValidationError(f"recorded mass {z_obs} exceeds the scale maximum {scale_max}")
    if z_obs == scale_max:
        return scale_max - 0.5, np.inf
    # truncation at zero also bounds the rounding interval of tiny masses
    return max(0.0, z_obs - 0.5), z_obs + 0.5


def censoring_intervals(z_obs, scale_max: float = SCALE_MAX):
    """Vectorised :func:`censoring_interval` for captured occasions."""
    z_obs = np.asarray(z_obs, dtype=float)
    if np.any(~np.isfinite(z_obs)):
        raise DataValidationError("a captured occasion needs a recorded mass")
    if np.any(z_obs > scale_max):
        raise DataValidationError(f"recorded mass exceeds the scale maximum {scale_max}")
    lo = np.maximum(0.0, z_obs - 0.5)
    hi = np.where(z_obs == scale_max, np.inf, z_obs + 0.5)
    return lo, hi


def log_interval_mass(lo, hi):
    """``log(Phi(hi) - Phi(lo))`` for standardised bounds, stable in both tails."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    # reflect intervals in the upper tail so both logs stay away from 0
    flip = lo > 0
    a = np.where(flip, -hi, lo)
    b = np.where(flip, -lo, hi)
    lb, la = log_ndtr(b), log_ndtr(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = lb + np.log1p(-np.exp(la - lb))
        # very narrow intervals cancel above; midpoint density times width is exact there
        narrow = (la - lb > -1e-10) & (b > a)
        if np.any(narrow):
            mid = 0.5 * (a + b)
            approx = -0.5 * (_LOG_2PI + mid * mid) + np.log(b - a)
            out = np.where(narrow, approx, out)
    return out


def log_mass_obs(z, lam, sigma_z, lo, hi) -> float:
    """Truncated-Normal log density of latent masses inside their intervals."""
    z = np.asarray(z, dtype=float)
    lam = np.asarray(lam, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any((z <= lo) | (z >= hi)):
        return -np.inf
    r = (z - lam) / sigma_z
    dens = -0.5 * (_LOG_2PI + r * r) - np.log(sigma_z)
    norm = log_interval_mass((lo - lam) / sigma_z, (hi - lam) / sigma_z)
    return float(np.sum(dens - norm))


def log_mass_censored(z, lam, sigma_z, lo=None, hi=None) -> float:
    """Joint density of a latent mass and the event that it was recorded.

    This is the Normal density times the indicator of the recording interval;
    integrating out ``z`` leaves the interval probability.  Without bounds it
    is the plain Normal density (masses treated as exact).
    """
    z = np.asarray(z, dtype=float)
    if lo is not None and np.any((z <= np.asarray(lo)) | (z >= np.asarray(hi))):
        return -np.inf
    r = (z - np.asarray(lam, dtype=float)) / sigma_z
    return float(np.sum(-0.5 * (_LOG_2PI + r * r) - np.log(sigma_z)))


def _norm_logpdf(x, mean, sd):
    r = (x - mean) / sd
    return -0.5 * (_LOG_2PI + r * r) - np.log(sd)


def log_mass_walk(lam, mu_lambda, sigma_lambda1, Delta, sigma_lambda2, b, w=None) -> float:
    """Random walk with drift started at each individual's birth period."""
    lam = np.asarray(lam, dtype=float)
    b = np.asarray(b)
    M, k1 = lam.shape
    rows = np.arange(M) if w is None else np.flatnonzero(np.asarray(w))
    rows = rows[b[rows] < k1]
    total = _norm_logpdf(lam[rows, b[rows]], mu_lambda, sigma_lambda1).sum()
    step = _norm_logpdf(lam[:, 1:], lam[:, :-1] + np.asarray(Delta)[None, :], sigma_lambda2)
    after = np.arange(1, k1)[None, :] > b[:, None]
    total += step[rows][after[rows]].sum()
    return float(total)


def standardize_mass(lam, loc: float, scale: float):
    if not scale > 0:
        raise ValueError("scale must be positive")
    return (np.asarray(lam, dtype=float) - loc) / scale


def log_disease_process(z, nu, omega, b, w=None) -> float:
    """Categorical chain: initial state at birth, transitions afterwards."""
    z = np.asarray(z)
    nu = np.asarray(nu, dtype=float)
    omega = np.asarray(omega, dtype=float)
    b = np.asarray(b)
    M, k1 = z.shape
    rows = np.arange(M) if w is None else np.flatnonzero(np.asarray(w))
    rows = rows[b[rows] < k1]
    j = np.arange(k1)[None, :]
    live = (j >= b[:, None])[rows]
    zr = z[rows]
    if np.any((zr[live] < 1) | (zr[live] > len(nu))):
        raise ValueError("state codes must lie in 1..n_states after birth")
    with np.errstate(divide="ignore"):
        log_nu = np.log(nu)
        log_om = np.log(omega)
    total = log_nu[zr[np.arange(len(rows)), b[rows]] - 1].sum()
    trans = live[:, 1:] & live[:, :-1]
    total += log_om[zr[:, :-1][trans] - 1, zr[:, 1:][trans] - 1].sum()
    return float(total)


def covariate_effect(kind: str, values, loc: float = 0.0, scale: float = 1.0):
    """Per-(individual, period) covariate entering the logit links."""
    if kind == "mass":
        return standardize_mass(values, loc, scale)
    if kind in ("disease", "categorical"):
        return (np.asarray(values) == 2).astype(float)
    if kind == "none":
        return np.zeros(np.shape(values))
    raise ValueError(f"unknown covariate kind {kind!r}")


def sample_truncnorm(rng, mean, sd, lo, hi):
    """Draw Normal(mean, sd) variates restricted to (lo, hi)."""
    mean = np.asarray(mean, dtype=float)
    a = (np.asarray(lo, dtype=float) - mean) / sd
    b = (np.asarray(hi, dtype=float) - mean) / sd
    if mean.size == 0:
        return mean.copy()
    return stats.truncnorm.rvs(a, b, loc=mean, scale=sd, random_state=rng)
