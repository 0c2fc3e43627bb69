"""Model specification, priors, parameter container and precomputed data arrays."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .covariates import censoring_intervals
from .data import CaptureData
from .likelihood import LinkParams
from .popstate import StructuralError, StudyDesign

__all__ = ["ModelSpec", "Priors", "ModelParams", "Model", "DESIGNS", "COVARIATES"]

DESIGNS = ("standard", "robust")
COVARIATES = ("none", "mass", "categorical")


@dataclass
class ModelSpec:
    M: int
    design: str = "standard"
    covariate: str = "none"
    # mass only: treat recorded masses as rounded/censored intervals (False = exact values)
    censoring: bool = True
    loc: float | None = None
    scale: float | None = None
    n_states: int = 2

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ValueError(f"design must be one of {DESIGNS}")
        if self.covariate not in COVARIATES:
            raise ValueError(f"covariate must be one of {COVARIATES}")
        if self.M < 1:
            raise ValueError("M must be positive")


@dataclass
class Priors:
    """Prior hyperparameters; every field is overridable from a run config."""

    coef_sd: float = 10.0
    # prior mean of the mean birth mass (its sd is mass_sd)
    mass_mean: float = 0.0
    mass_sd: float = 10.0
    sd_upper: float = 10.0
    zeta_a: float = 1.0
    zeta_b: float = 1.0
    psi_a: float = 1.0
    psi_b: float = 1.0
    dirichlet: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "mass_mean":
                if not np.isfinite(v):
                    raise ValueError("mass_mean must be finite")
                continue
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"prior hyperparameter {f.name} must be finite and positive")


@dataclass
class ModelParams:
    zeta: np.ndarray
    psi: float = 0.5
    alpha0: float = 0.0
    alpha1: float = 0.0
    gamma0: float = 0.0
    gamma1: float = 0.0
    eta_S: np.ndarray | None = None
    eta_p: np.ndarray | None = None
    eps_p: np.ndarray | None = None
    sigma_S: float = 0.5
    sigma_p1: float = 0.5
    sigma_p2: float = 0.5
    mu_lambda: float = 0.0
    Delta: np.ndarray | None = None
    sigma_lambda1: float = 1.0
    sigma_lambda2: float = 1.0
    sigma_z: float = 1.0
    nu: np.ndarray | None = None
    omega: np.ndarray | None = None

    def __post_init__(self):
        self.zeta = np.asarray(self.zeta, dtype=float)
        k1 = len(self.zeta)
        if self.eta_S is None:
            self.eta_S = np.zeros(k1 - 1)
        if self.eta_p is None:
            self.eta_p = np.zeros(k1)
        if self.Delta is None:
            self.Delta = np.zeros(k1 - 1)
        for name in ("eta_S", "eta_p", "Delta", "eps_p", "nu", "omega"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=float))

    @property
    def k1(self) -> int:
        return len(self.zeta)

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def link(self) -> LinkParams:
        return LinkParams(
            alpha0=self.alpha0, alpha1=self.alpha1, gamma0=self.gamma0, gamma1=self.gamma1,
            eta_S=self.eta_S, eta_p=self.eta_p, eps_p=self.eps_p,
            sigma_S=self.sigma_S, sigma_p1=self.sigma_p1, sigma_p2=self.sigma_p2,
        )

    def to_json(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_json(cls, d: dict) -> "ModelParams":
        return cls(**{k: v for k, v in d.items() if k in {f.name for f in fields(cls)}})


class Model:
    """Data padded to the augmented list plus everything the kernels reuse.

    Rows ``0..n-1`` are the observed individuals in data order, rows
    ``n..M-1`` the never-observed pseudo-individuals.
    """

    def __init__(self, data: CaptureData, spec: ModelSpec, priors: Priors | None = None,
                 prior_only: bool = False):
        self.data = data
        self.spec = spec
        self.priors = priors or Priors()
        self.prior_only = prior_only
        n, K, kmax = data.X.shape
        if spec.M < n:
            raise StructuralError(f"M={spec.M} is smaller than the {n} observed individuals")
        if spec.design == "standard" and kmax != 1:
            raise StructuralError("a standard design has one secondary sample per primary; use design='robust'")
        if spec.covariate != "none" and data.covariate != spec.covariate:
            raise StructuralError(f"data carry covariate {data.covariate!r}, model wants {spec.covariate!r}")
        self.design = StudyDesign(k1=K, k2=data.k2, M=spec.M, n_observed=n)
        self.n, self.M, self.K, self.kmax = n, spec.M, K, kmax
        self.robust = spec.design == "robust"
        self.covariate = spec.covariate
        self.valid = data.secondary_mask()
        self.validf = self.valid.astype(float)

        M = self.M
        self.X = np.zeros((M, K, kmax))
        self.X[:n] = data.X
        self.observed = np.arange(M) < n
        # b may not exceed the first capture; L may not precede the last capture
        self.b_max = np.full(M, K - 1)
        self.L_min = np.full(M, 0)
        if n:
            self.b_max[:n] = data.first_capture
            self.L_min[:n] = data.last_capture

        if self.covariate == "mass":
            self._setup_mass()
        if self.covariate == "categorical":
            self.n_states = spec.n_states
            self.state_obs = np.zeros((M, K), dtype=np.int64)
            self.state_obs[:n] = data.state
            if np.any(self.state_obs > self.n_states):
                raise StructuralError(f"state codes above n_states={self.n_states}")

    def _setup_mass(self):
        data, spec, K = self.data, self.spec, self.K
        oi, oj, ol = np.nonzero(~np.isnan(data.mass)) if data.n else (np.zeros(0, int),) * 3
        self.oi, self.oj, self.ol = oi, oj, ol
        self.zobs = data.mass[oi, oj, ol] if data.n else np.zeros(0)
        self.lo, self.hi = censoring_intervals(self.zobs, data.scale_max)
        self.ocell = oi * K + oj
        self.nobs = np.bincount(self.ocell, minlength=self.M * K).reshape(self.M, K).astype(float)
        masses = self.zobs
        loc, scale = spec.loc, spec.scale
        if loc is None:
            if masses.size < 2:
                raise StructuralError("need recorded masses or explicit standardisation constants")
            loc = float(masses.mean())
        if scale is None:
            if masses.size < 2:
                raise StructuralError("need recorded masses or explicit standardisation constants")
            scale = float(masses.std(ddof=1))
        if not scale > 0:
            raise StructuralError("standardisation scale must be positive")
        self.loc, self.scale = float(loc), float(scale)

    # -- output layout ---------------------------------------------------
    def parameter_columns(self) -> list[str]:
        K = self.K
        cols = [f"zeta[{j}]" for j in range(1, K)] + ["psi", "alpha0"]
        if self.covariate != "none":
            cols.append("alpha1")
        cols.append("gamma0")
        if self.covariate != "none":
            cols.append("gamma1")
        cols += ["sigma_S", "sigma_p1"]
        if self.robust:
            cols.append("sigma_p2")
        cols += [f"eta_S[{j}]" for j in range(1, K)]
        cols += [f"eta_p[{j}]" for j in range(1, K + 1)]
        if self.robust:
            cols += [f"eps_p[{j + 1},{l + 1}]" for j in range(K) for l in range(self.data.k2[j])]
        if self.covariate == "mass":
            cols += ["mu_lambda"] + [f"Delta[{j}]" for j in range(1, K)]
            cols += ["sigma_lambda1", "sigma_lambda2", "sigma_z"]
        if self.covariate == "categorical":
            S = self.n_states
            cols += [f"nu[{s}]" for s in range(1, S + 1)]
            cols += [f"omega[{h},{l}]" for h in range(1, S + 1) for l in range(1, S + 1)]
        return cols

    def derived_columns(self) -> list[str]:
        K = self.K
        cols = ["N_total"] + [f"N[{j}]" for j in range(1, K + 1)]
        if self.covariate == "categorical":
            for s in range(1, self.n_states + 1):
                cols += [f"N_s{s}[{j}]" for j in range(1, K + 1)]
        cols += [f"beta[{j}]" for j in range(K)]
        cols += [f"eta[{j}]" for j in range(1, K)]
        cols.append("mean_lifetime")
        return cols

    def columns(self) -> list[str]:
        return self.parameter_columns() + self.derived_columns()

    def params_vector(self, p: ModelParams) -> np.ndarray:
        parts = [p.zeta[:-1], [p.psi, p.alpha0]]
        if self.covariate != "none":
            parts.append([p.alpha1])
        parts.append([p.gamma0])
        if self.covariate != "none":
            parts.append([p.gamma1])
        parts.append([p.sigma_S, p.sigma_p1])
        if self.robust:
            parts.append([p.sigma_p2])
        parts += [p.eta_S, p.eta_p]
        if self.robust:
            parts.append(p.eps_p[self.valid])
        if self.covariate == "mass":
            parts += [[p.mu_lambda], p.Delta, [p.sigma_lambda1, p.sigma_lambda2, p.sigma_z]]
        if self.covariate == "categorical":
            parts += [p.nu, p.omega.ravel()]
        return np.concatenate([np.asarray(x, dtype=float).ravel() for x in parts])

    def metadata(self) -> dict:
        meta = {"n_observed": self.n, "M": self.M, "k1": self.K, "k2": list(self.data.k2),
                "design": self.spec.design, "covariate": self.covariate,
                "priors": asdict(self.priors), "prior_only": self.prior_only}
        if self.covariate == "mass":
            meta.update(loc=self.loc, scale=self.scale, censoring=self.spec.censoring,
                        scale_max=self.data.scale_max)
        if self.covariate == "categorical":
            meta["n_states"] = self.n_states
        return meta
