"""Log-density evaluators for the birth, mortality and capture factors.

Each evaluator sums over included individuals (``w == 1``) and returns
``-inf`` for configurations the model cannot produce (born twice, revived,
captured while not alive).  Shapes: latent matrices are ``(M, k1)``, survival
matrices ``(M, k1 - 1)`` with column ``j`` the probability of surviving from
period ``j`` to ``j + 1``, robust-design arrays ``(M, k1, k2_max)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .popstate import StructuralError

__all__ = [
    "LinkParams",
    "log_bernoulli",
    "log_birth",
    "log_mortality",
    "log_capture",
    "log_capture_robust",
    "link_probabilities",
    "log_sigmoid",
]


def log_sigmoid(u):
    """``log(expit(u))`` without overflow."""
    return -np.logaddexp(0.0, -u)


def log_bernoulli(x, p):
    """Elementwise ``log Bern(x | p)`` with ``0 * log 0 = 0``."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        lp = np.where(x > 0, np.log(p), np.log1p(-p))
    return lp


def _weights(w, M):
    w = np.asarray(w)
    if w.shape != (M,):
        raise StructuralError(f"w has shape {w.shape}, expected ({M},)")
    return w.astype(bool)


def log_birth(a_b, w, zeta) -> float:
    a_b = np.asarray(a_b, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    M, k1 = a_b.shape
    if zeta.shape != (k1,):
        raise StructuralError(f"zeta has shape {zeta.shape}, expected ({k1},)")
    if zeta[-1] != 1.0:
        raise ValueError("last conditional entry probability must be exactly 1")
    inc = _weights(w, M)
    # 1 while the individual has not been born in any earlier period
    unborn_before = np.cumprod(np.hstack([np.ones((M, 1)), 1.0 - a_b[:, :-1]]), axis=1)
    param = unborn_before * zeta[None, :] + (1.0 - unborn_before)
    return float(log_bernoulli(a_b[inc], param[inc]).sum())


def log_mortality(a_d, a_b, w, S) -> float:
    a_d = np.asarray(a_d, dtype=float)
    a_b = np.asarray(a_b, dtype=float)
    S = np.asarray(S, dtype=float)
    M, k1 = a_d.shape
    if a_b.shape != a_d.shape:
        raise StructuralError("a_b and a_d shapes differ")
    if S.shape[0] != M or S.shape[1] < k1 - 1:
        raise StructuralError(f"S has shape {S.shape}, need ({M}, >= {k1 - 1})")
    inc = _weights(w, M)
    if np.any(a_d[inc, 0] != 1):
        return -np.inf
    prev_d, prev_b = a_d[:, :-1], a_b[:, :-1]
    param = prev_d * (prev_b * S[:, : k1 - 1] + (1.0 - prev_b))
    return float(log_bernoulli(a_d[inc, 1:], param[inc]).sum())


def log_capture(X, a_b, a_d, w, p) -> float:
    X = np.asarray(X, dtype=float)
    a_b = np.asarray(a_b, dtype=float)
    a_d = np.asarray(a_d, dtype=float)
    p = np.asarray(p, dtype=float)
    if not (X.shape == a_b.shape == a_d.shape == p.shape):
        raise StructuralError("X, a_b, a_d and p must share one (M, k1) shape")
    inc = _weights(w, X.shape[0])
    avail = a_b * a_d * inc[:, None]
    if np.any((X > 0) & (avail == 0)):
        return -np.inf
    return float(log_bernoulli(X[inc], (avail * p)[inc]).sum())


def log_capture_robust(X, a_b, a_d, w, p, k2=None) -> float:
    """Robust-design capture factor; alive status is constant within a primary."""
    X = np.asarray(X, dtype=float)
    p = np.asarray(p, dtype=float)
    a_b = np.asarray(a_b, dtype=float)
    a_d = np.asarray(a_d, dtype=float)
    if X.ndim != 3 or X.shape != p.shape or X.shape[:2] != a_b.shape or a_b.shape != a_d.shape:
        raise StructuralError("X and p must be (M, k1, k2_max) matching the latent matrices")
    M, k1, kmax = X.shape
    if k2 is None:
        k2 = np.full(k1, kmax)
    valid = np.arange(kmax)[None, :] < np.asarray(k2)[:, None]
    inc = _weights(w, M)
    avail = (a_b * a_d * inc[:, None])[:, :, None]
    if np.any((X > 0) & (avail == 0) & valid[None]):
        return -np.inf
    lp = log_bernoulli(X, avail * p)
    lp = np.where(valid[None], lp, 0.0)
    return float(lp[inc].sum())


@dataclass
class LinkParams:
    alpha0: float = 0.0
    alpha1: float = 0.0
    gamma0: float = 0.0
    gamma1: float = 0.0
    eta_S: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eta_p: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eps_p: np.ndarray | None = None
    sigma_S: float = 1.0
    sigma_p1: float = 1.0
    sigma_p2: float = 1.0

    def __post_init__(self):
        self.eta_S = np.asarray(self.eta_S, dtype=float)
        self.eta_p = np.asarray(self.eta_p, dtype=float)
        if self.eps_p is not None:
            self.eps_p = np.asarray(self.eps_p, dtype=float)
        for name in ("sigma_S", "sigma_p1", "sigma_p2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if len(self.eta_S) != len(self.eta_p) - 1:
            raise StructuralError("need len(eta_S) == len(eta_p) - 1 == k1 - 1")


def link_probabilities(link: LinkParams, covariate_effect):
    """Survival ``(M, k1-1)`` and capture probabilities on the logit scale.

    Survival over interval ``j`` uses the covariate at the start of the
    interval.  Capture is ``(M, k1)`` for a standard design and
    ``(M, k1, k2_max)`` when ``link.eps_p`` is given.
    """
    x = np.asarray(covariate_effect, dtype=float)
    k1 = len(link.eta_p)
    if x.ndim != 2 or x.shape[1] != k1:
        raise StructuralError(f"covariate effect must be (M, {k1}), got {x.shape}")
    lin_S = link.alpha0 + link.alpha1 * x[:, :-1] + link.eta_S[None, :]
    lin_p = link.gamma0 + link.gamma1 * x + link.eta_p[None, :]
    if link.eps_p is not None:
        if link.eps_p.shape[0] != k1:
            raise StructuralError("eps_p must have k1 rows")
        lin_p = lin_p[:, :, None] + link.eps_p[None, :, :]
    if not (np.all(np.isfinite(lin_S)) and np.all(np.isfinite(lin_p))):
        raise ValueError("non-finite linear predictor")
    return expit(lin_S), expit(lin_p)
