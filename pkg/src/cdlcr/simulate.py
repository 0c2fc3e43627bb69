"""Forward simulation of populations and capture data from known parameters.

The generator mirrors the fitted model: inclusion, entry period, covariate
trajectory, survival through the logit link, then captures.  The observation
model rounds masses to whole units, records masses at or above the scale
maximum as the maximum, and can hide disease states completely at random.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .covariates import SCALE_MAX, UNKNOWN_STATE
from .data import CaptureData
from .model import ModelParams
from .popstate import (
    AugmentedState,
    StructuralError,
    StudyDesign,
    beta_to_zeta,
    derive_abundance,
    derive_lifetime,
    zeta_to_beta,
)

__all__ = [
    "TruthRecord",
    "Scenario",
    "generate",
    "generate_scenario",
    "mask_disease",
    "vole_scenario",
    "finch_scenario",
    "write_truth",
    "read_truth",
    "truth_latent",
]


@dataclass
class TruthRecord:
    """Complete simulated population; row order is the augmented list.

    ``observed_rows`` maps rows of the released capture data back to rows
    here.  ``mass_true`` holds the exact (unrounded) masses on capture
    occasions and NaN elsewhere.
    """

    design: StudyDesign
    params: ModelParams
    covariate: str
    a_b: np.ndarray
    a_d: np.ndarray
    w: np.ndarray
    birth: np.ndarray
    last_alive: np.ndarray
    N: np.ndarray
    lifetime: np.ndarray
    observed_rows: np.ndarray
    lam: np.ndarray | None = None
    mass_true: np.ndarray | None = None
    states: np.ndarray | None = None
    N_by_state: np.ndarray | None = None
    loc: float = 0.0
    scale: float = 1.0
    scale_max: float = SCALE_MAX
    miss_rate: float = 0.0

    @property
    def state(self) -> AugmentedState:
        return AugmentedState(self.a_b, self.a_d, self.w)

    def to_json(self) -> dict:
        def conv(v):
            if isinstance(v, np.ndarray):
                return np.where(np.isnan(v), None, v).tolist() if v.dtype.kind == "f" else v.tolist()
            return v

        out = {
            "k1": self.design.k1, "k2": list(self.design.k2), "M": self.design.M,
            "covariate": self.covariate, "params": self.params.to_json(),
            "loc": self.loc, "scale": self.scale, "scale_max": self.scale_max, "miss_rate": self.miss_rate,
        }
        for name in ("w", "birth", "last_alive", "N", "lifetime", "observed_rows", "lam", "mass_true",
                     "states", "N_by_state"):
            v = getattr(self, name)
            out[name] = None if v is None else conv(np.asarray(v))
        return out


@dataclass
class Scenario:
    design: StudyDesign
    params: ModelParams
    covariate: str = "none"
    loc: float = 0.0
    scale: float = 1.0
    scale_max: float = SCALE_MAX
    miss_rate: float = 0.0
    extras: dict = field(default_factory=dict)


def _check(design: StudyDesign, params: ModelParams, covariate: str):
    K, kmax = design.k1, design.k2_max
    if params.zeta.shape != (K,):
        raise StructuralError(f"zeta has {params.zeta.size} entries for k1={K}")
    if params.eta_S.shape != (K - 1,) or params.eta_p.shape != (K,):
        raise StructuralError("random effects do not match k1")
    if params.eps_p is not None and params.eps_p.shape != (K, kmax):
        raise StructuralError(f"eps_p must be ({K}, {kmax})")
    if design.is_robust is False and params.eps_p is not None and np.any(params.eps_p != 0):
        raise StructuralError("secondary-sample effects given for a standard design")
    if covariate == "mass" and params.Delta.shape != (K - 1,):
        raise StructuralError("Delta must have k1 - 1 entries")
    if covariate == "categorical" and (params.nu is None or params.omega is None):
        raise StructuralError("categorical covariate needs nu and omega")
    if covariate not in ("none", "mass", "categorical"):
        raise StructuralError(f"unknown covariate {covariate!r}")
    if not 0.0 <= params.psi <= 1.0:
        raise ValueError("psi must lie in [0, 1]")


def _categorical(probs_cum, u):
    return (u[:, None] > probs_cum[..., :-1]).sum(axis=-1) + 1


def generate(design: StudyDesign, params: ModelParams, seed, covariate: str = "none", *,
             loc: float = 0.0, scale: float = 1.0, scale_max: float = SCALE_MAX,
             miss_rate: float = 0.0) -> tuple[TruthRecord, CaptureData]:
    """Simulate one population and its capture data; deterministic given ``seed``."""
    _check(design, params, covariate)
    rng = np.random.default_rng(seed)
    K, M, kmax = design.k1, design.M, design.k2_max
    valid = design.secondary_mask()
    p = params

    w = rng.random(M) < p.psi
    beta = zeta_to_beta(p.zeta)
    birth = np.minimum((rng.random(M)[:, None] > np.cumsum(beta)[None, :-1]).sum(axis=1), K - 1)

    lam = states = None
    x = np.zeros((M, K))
    if covariate == "mass":
        start = rng.normal(p.mu_lambda, p.sigma_lambda1, M)
        steps = p.Delta[None, :] + p.sigma_lambda2 * rng.standard_normal((M, K - 1))
        C = np.concatenate((np.zeros((M, 1)), np.cumsum(steps, axis=1)), axis=1)
        lam = start[:, None] + C - C[np.arange(M), birth][:, None]
        x = (lam - loc) / scale
    elif covariate == "categorical":
        S = len(p.nu)
        states = np.zeros((M, K), dtype=np.int64)
        cnu, com = np.cumsum(p.nu), np.cumsum(p.omega, axis=1)
        for j in range(K):
            u = rng.random(M)
            first = _categorical(cnu[None, :], u)
            trans = _categorical(com[states[:, j - 1] - 1], u) if j else first
            states[:, j] = np.where(j == birth, first, np.where(j > birth, trans, 0))
        x = (states == 2).astype(float)

    surv = expit(p.alpha0 + p.alpha1 * x[:, :-1] + p.eta_S[None, :])
    dies = (rng.random((M, K - 1)) >= surv) & (np.arange(K - 1)[None, :] >= birth[:, None])
    last = np.where(dies.any(axis=1), dies.argmax(axis=1), K - 1)

    lin = p.gamma0 + p.gamma1 * x + p.eta_p[None, :]
    lin = lin[:, :, None] + (p.eps_p[None] if p.eps_p is not None else 0.0)
    cap = np.broadcast_to(expit(lin), (M, K, kmax))
    j = np.arange(K)[None, :]
    alive = (j >= birth[:, None]) & (j <= last[:, None]) & w[:, None]
    X = (rng.random((M, K, kmax)) < cap) & alive[:, :, None] & valid[None]

    mass_true = mass_rec = None
    if covariate == "mass":
        z = lam[:, :, None] + p.sigma_z * rng.standard_normal((M, K, kmax))
        mass_true = np.where(X, z, np.nan)
        # rounding to whole units; readings saturate at the scale maximum
        rec = np.clip(np.rint(z), 1.0, scale_max)
        mass_rec = np.where(X, rec, np.nan)

    observed_rows = np.flatnonzero(X.any(axis=(1, 2)))
    obs_states = None
    if covariate == "categorical":
        seen = X[observed_rows].any(axis=2)
        obs_states = np.where(seen, states[observed_rows], UNKNOWN_STATE)
        obs_states = mask_disease(obs_states, miss_rate, rng)

    a_b = (j >= birth[:, None]).astype(np.int8)
    a_d = (j <= last[:, None]).astype(np.int8)
    st = AugmentedState(a_b, a_d, w.astype(np.int8))
    N_by_state = None
    if covariate == "categorical":
        N_by_state = np.stack([(alive & (states == s)).sum(axis=0) for s in range(1, len(p.nu) + 1)])
    truth = TruthRecord(
        design=design, params=p.copy(), covariate=covariate, a_b=a_b, a_d=a_d, w=w.astype(np.int8),
        birth=birth, last_alive=last, N=derive_abundance(st), lifetime=derive_lifetime(st),
        observed_rows=observed_rows, lam=lam, mass_true=mass_true, states=states, N_by_state=N_by_state,
        loc=loc, scale=scale, scale_max=scale_max, miss_rate=miss_rate,
    )
    data = CaptureData(
        X=X[observed_rows].astype(np.int8), k2=design.k2, covariate=covariate,
        ids=[f"i{r + 1}" for r in observed_rows],
        mass=None if mass_rec is None else mass_rec[observed_rows],
        state=obs_states, scale_max=scale_max,
    )
    return truth, data


def mask_disease(z_obs, miss_rate: float, seed=None) -> np.ndarray:
    """Hide each known state independently with probability ``miss_rate``."""
    if not 0.0 <= miss_rate <= 1.0:
        raise ValueError("miss_rate must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    z = np.array(z_obs, dtype=np.int64, copy=True)
    hide = rng.random(z.shape) < miss_rate
    z[hide & (z != UNKNOWN_STATE)] = UNKNOWN_STATE
    return z


def generate_scenario(scn: Scenario, seed) -> tuple[TruthRecord, CaptureData]:
    return generate(scn.design, scn.params, seed, scn.covariate, loc=scn.loc, scale=scn.scale,
                    scale_max=scn.scale_max, miss_rate=scn.miss_rate)


def vole_scenario(scale_max: float = SCALE_MAX) -> Scenario:
    """Robust design, 6 primaries of 5 secondaries, mass covariate."""
    K, k2 = 6, 5
    fixed = np.random.default_rng(20240501)
    beta = np.array([0.4, 0.15, 0.15, 0.12, 0.1, 0.08])
    params = ModelParams(
        zeta=beta_to_zeta(beta), psi=0.6,
        alpha0=1.0, alpha1=0.3, gamma0=-0.5, gamma1=0.8,
        eta_S=0.3 * fixed.standard_normal(K - 1), eta_p=0.3 * fixed.standard_normal(K),
        eps_p=0.3 * fixed.standard_normal((K, k2)),
        sigma_S=0.3, sigma_p1=0.3, sigma_p2=0.3,
        mu_lambda=30.0, Delta=np.array([1.5, 1.0, 0.5, 0.5, 0.0]),
        sigma_lambda1=6.0, sigma_lambda2=2.0, sigma_z=1.5,
    )
    return Scenario(StudyDesign(k1=K, k2=(k2,) * K, M=250), params, "mass", loc=30.0, scale=6.0,
                    scale_max=scale_max)


def finch_scenario(miss_rate: float = 0.2) -> Scenario:
    """Standard design, 16 primaries, two-state disease covariate."""
    K = 16
    fixed = np.random.default_rng(20240502)
    beta = np.concatenate(([0.2], np.full(K - 1, 0.8 / (K - 1))))
    params = ModelParams(
        zeta=beta_to_zeta(beta), psi=0.75,
        alpha0=1.5, alpha1=-1.0, gamma0=-0.5, gamma1=0.5,
        eta_S=0.3 * fixed.standard_normal(K - 1), eta_p=0.3 * fixed.standard_normal(K),
        sigma_S=0.3, sigma_p1=0.3,
        nu=np.array([0.9, 0.1]), omega=np.array([[0.96, 0.04], [0.25, 0.75]]),
    )
    return Scenario(StudyDesign(k1=K, k2=(1,) * K, M=1200), params, "categorical", miss_rate=miss_rate)


def truth_latent(truth: TruthRecord, M: int | None = None) -> dict:
    """True latent state in the row order the sampler uses (observed rows first).

    Suitable as the ``init`` argument of the sampler.  ``M`` may exceed the
    simulated list; extra rows are excluded and never born before the end.
    Pre-birth covariate entries are filled with plausible auxiliary values.
    """
    M = truth.design.M if M is None else M
    if M < truth.design.M:
        raise StructuralError("M smaller than the simulated list")
    K = truth.design.k1
    obs = truth.observed_rows
    rest = np.setdiff1d(np.arange(truth.design.M), obs)
    order = np.concatenate((obs, rest))
    pad = M - truth.design.M
    out = {
        "b": np.concatenate((truth.birth[order], np.full(pad, K - 1))),
        "L": np.concatenate((truth.last_alive[order], np.full(pad, K - 1))),
        "w": np.concatenate((truth.w[order].astype(bool), np.zeros(pad, bool))),
        "params": truth.params.copy(),
        "keep_ghosts": True,
    }
    if truth.lam is not None:
        lam = truth.lam[order]
        out["lam"] = np.vstack((lam, np.full((pad, K), truth.params.mu_lambda)))
        z = truth.mass_true[obs]
        out["zlat"] = z[~np.isnan(z)]
    if truth.states is not None:
        z = truth.states[order]
        z = np.where(z == 0, 1, z)
        out["zstate"] = np.vstack((z, np.ones((pad, K), dtype=np.int64)))
    return out


def write_truth(truth: TruthRecord, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(truth.to_json(), indent=1, sort_keys=True) + "\n")
    return path


def read_truth(path) -> dict:
    """Truth sidecar as plain JSON (arrays as lists)."""
    return json.loads(Path(path).read_text())
