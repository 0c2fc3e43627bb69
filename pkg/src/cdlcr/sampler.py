"""Metropolis-within-Gibbs sampler over the augmented population.

Sweep order (fixed):

1. birth period given death period, then death period given birth period,
   for every included individual, each by enumerating all admissible
   periods;
2. covariates of included individuals: latent censored masses and the
   mean-mass rows (column by column), or the categorical state rows by
   forward filtering / backward sampling;
3. parameters, using included individuals only: entry probabilities,
   link coefficients, random effects and their standard deviations,
   covariate-process parameters;
4. every excluded pseudo-individual is redrawn from its prior;
5. inclusion indicators of never-observed pseudo-individuals, then the
   inclusion probability.

Excluded pseudo-individuals carry no likelihood, so steps 3-4 together form
one block update of the parameters with the excluded trajectories
integrated out.  Life histories are stored as the first (``b``) and last
(``L``) periods alive; the indicator matrices are rebuilt on demand.

Covariate values before an individual's birth period are auxiliary: masses
there follow the random walk run backwards from the birth period, states are
uniform.  They never touch the likelihood but keep every row full-length so
the birth period can move without changing dimension.
"""
from __future__ import annotations

import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from .covariates import (
    log_disease_process,
    log_interval_mass,
    log_mass_censored,
    log_mass_walk,
    sample_truncnorm,
)
from .data import CaptureData
from .likelihood import (
    link_probabilities,
    log_birth,
    log_capture,
    log_capture_robust,
    log_mortality,
    log_sigmoid,
)
from .model import Model, ModelParams, ModelSpec, Priors
from .popstate import AugmentedState, derive_abundance, derive_lifetime, state_violations, zeta_to_beta

__all__ = [
    "SamplerConfig",
    "ChainState",
    "ChainResult",
    "PosteriorDraws",
    "SamplerError",
    "SamplerInitError",
    "initial_state",
    "sweep",
    "update_birth_death",
    "update_covariates",
    "update_parameters",
    "redraw_excluded",
    "update_inclusion",
    "log_joint",
    "run_chain",
    "run",
]

log = logging.getLogger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)

DEFAULT_SCALES = {
    "alpha0": 0.1, "alpha1": 0.1, "gamma0": 0.1, "gamma1": 0.1,
    "eta_S": 0.3, "eta_p": 0.3, "eps_p": 0.3,
    "sigma_S": 0.5, "sigma_p1": 0.5, "sigma_p2": 0.5,
    "nc_sigma_S": 0.2, "nc_sigma_p1": 0.2, "nc_sigma_p2": 0.2,
    "sigma_lambda1": 0.1, "sigma_lambda2": 0.1, "sigma_z": 0.1,
    "nc_sigma_lambda1": 0.1, "nc_sigma_lambda2": 0.1,
}


class SamplerError(RuntimeError):
    pass


class SamplerInitError(SamplerError):
    pass


@dataclass
class SamplerConfig:
    n_adapt: int = 1000
    n_iter: int = 1000
    n_chains: int = 3
    seed: int = 0
    thin: int = 1
    proposal_scales: dict = field(default_factory=dict)
    target_accept: float = 0.44
    adapt_rate: float = 1.0
    # hold b, L, w and covariates at their initial values
    clamp_latent: bool = False
    # rebuild indicator matrices on every kept draw and count identity failures
    check_identities: bool = False
    progress_every: int = 0
    n_workers: int = 1

    def __post_init__(self):
        if self.n_adapt < 0 or self.n_iter < 1 or self.n_chains < 1 or self.thin < 1:
            raise ValueError("need n_adapt >= 0, n_iter >= 1, n_chains >= 1, thin >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        unknown = set(self.proposal_scales) - set(DEFAULT_SCALES)
        if unknown:
            raise ValueError(f"unknown proposal scale names {sorted(unknown)}")


@dataclass
class ChainState:
    params: ModelParams
    b: np.ndarray
    L: np.ndarray
    w: np.ndarray
    rng: np.random.Generator
    lam: np.ndarray | None = None
    zlat: np.ndarray | None = None
    zstate: np.ndarray | None = None
    log_scales: dict = field(default_factory=dict)
    iteration: int = 0
    adapting: bool = False
    acc_sum: dict = field(default_factory=dict)
    acc_n: dict = field(default_factory=dict)

    def augmented(self, k1: int) -> AugmentedState:
        return AugmentedState.from_intervals(self.b, self.L, self.w, k1)


@dataclass
class ChainResult:
    draws: np.ndarray
    acceptance: dict
    violations: int = 0
    seconds: float = 0.0


@dataclass
class PosteriorDraws:
    columns: list
    chains: list
    meta: dict = field(default_factory=dict)
    results: list = field(default_factory=list)

    @property
    def n_chains(self) -> int:
        return len(self.chains)

    def column(self, name: str) -> np.ndarray:
        """``(n_chains, n_draws)`` array for one column."""
        k = self.columns.index(name)
        return np.stack([c[:, k] for c in self.chains])

    def combined(self) -> np.ndarray:
        return np.concatenate(self.chains, axis=0)


# -- small helpers ------------------------------------------------------

def _norm_logpdf(x, mean, sd):
    r = (x - mean) / sd
    return -0.5 * (_LOG_2PI + r * r) - np.log(sd)


def _gumbel_argmax(rng, logw):
    g = -np.log(-np.log(rng.random(logw.shape)))
    return np.argmax(logw + g, axis=-1)


def _tune(chain: ChainState, key: str, acc, cfg: SamplerConfig):
    acc = np.asarray(acc, dtype=float)
    chain.acc_sum[key] = chain.acc_sum.get(key, 0.0) + acc
    chain.acc_n[key] = chain.acc_n.get(key, 0) + 1
    if chain.adapting:
        t = max(chain.iteration, 1)
        chain.log_scales[key] = chain.log_scales[key] + cfg.adapt_rate * (acc - cfg.target_accept) / t ** 0.6


def _scale(chain, key):
    return np.exp(chain.log_scales[key])


def log_birth_probs(zeta) -> np.ndarray:
    """``log P(first alive period = b)`` for each ``b``."""
    zeta = np.asarray(zeta, dtype=float)
    with np.errstate(divide="ignore"):
        lz = np.log(zeta)
        l1m = np.log1p(-zeta[:-1])
    return lz + np.concatenate(([0.0], np.cumsum(l1m)))


def covariate_effect_matrix(chain: ChainState, model: Model, rows=None) -> np.ndarray:
    sl = slice(None) if rows is None else rows
    if model.covariate == "mass":
        return (chain.lam[sl] - model.loc) / model.scale
    if model.covariate == "categorical":
        return (chain.zstate[sl] == 2).astype(float)
    n = model.M if rows is None else len(np.arange(model.M)[sl])
    return np.zeros((n, model.K))


def _surv_lin(p: ModelParams, x):
    return p.alpha0 + p.alpha1 * x[:, :-1] + p.eta_S[None, :]


def _cap_lin(p: ModelParams, x, model: Model):
    base = p.gamma0 + p.gamma1 * x + p.eta_p[None, :]
    if model.robust:
        return base[:, :, None] + p.eps_p[None, :, :]
    return base[:, :, None]


def _cap_cell_ll(lin, X, model: Model):
    """Per-(i, j, l) Bernoulli log-likelihood of the recorded captures if alive."""
    return (log_sigmoid(lin) - (1.0 - X) * lin) * model.validf[None]


def _alive_mask(b, L, K):
    j = np.arange(K)[None, :]
    return (j >= b[:, None]) & (j <= L[:, None])


def _survival_cells(b, L, K):
    """Intervals at risk ``b <= j <= min(L, K-2)`` and whether each was survived."""
    j = np.arange(K - 1)[None, :]
    at_risk = (j >= b[:, None]) & (j <= L[:, None])
    survived = j < L[:, None]
    return at_risk, survived


# -- initial values -----------------------------------------------------

def _nearest_fill(values: np.ndarray, known: np.ndarray) -> np.ndarray:
    """Fill unknown entries of each row with the nearest known entry (ties go left)."""
    out = values.copy()
    K = values.shape[1]
    idx = np.arange(K)
    for i in range(values.shape[0]):
        kj = idx[known[i]]
        if kj.size == 0:
            continue
        nearest = kj[np.abs(idx[:, None] - kj[None, :]).argmin(axis=1)]
        out[i] = values[i, nearest]
    return out


def initial_state(model: Model, rng: np.random.Generator, config: SamplerConfig | None = None,
                  init: dict | None = None) -> ChainState:
    """Dispersed starting values; entries of ``init`` replace the generated ones."""
    config = config or SamplerConfig()
    M, K, n = model.M, model.K, model.n
    zeta = np.concatenate((rng.uniform(0.2, 0.8, K - 1), [1.0]))
    p = ModelParams(
        zeta=zeta,
        psi=rng.uniform(0.25, 0.75),
        alpha0=rng.uniform(-1, 1),
        gamma0=rng.uniform(-1, 1),
        sigma_S=rng.uniform(0.2, 1.0) * min(1.0, 0.9 * model.priors.sd_upper),
        sigma_p1=rng.uniform(0.2, 1.0) * min(1.0, 0.9 * model.priors.sd_upper),
        sigma_p2=rng.uniform(0.2, 1.0) * min(1.0, 0.9 * model.priors.sd_upper),
    )
    if model.covariate != "none":
        p.alpha1 = rng.uniform(-1, 1)
        p.gamma1 = rng.uniform(-1, 1)
    if model.robust:
        p.eps_p = np.zeros((K, model.kmax))
    chain = ChainState(params=p, b=np.zeros(M, dtype=np.int64), L=np.full(M, K - 1, dtype=np.int64),
                       w=np.zeros(M, dtype=bool), rng=rng)
    chain.b[:n] = model.b_max[:n]
    chain.w[:n] = True
    chain.w[n:] = rng.random(M - n) < p.psi

    if model.covariate == "mass":
        cell_sum = np.bincount(model.ocell, weights=model.zobs, minlength=M * K).reshape(M, K)
        known = model.nobs > 0
        means = np.where(known, cell_sum / np.maximum(model.nobs, 1), 0.0)
        first = means[np.arange(n), model.b_max[:n]][known[np.arange(n), model.b_max[:n]]] if n else np.zeros(0)
        base = float(first.mean()) if first.size else model.loc
        spread = float(first.std()) if first.size > 1 else model.scale
        p.mu_lambda = base + rng.uniform(-1, 1)
        top = model.priors.sd_upper
        p.sigma_lambda1 = min(max(spread, 1.0) * rng.uniform(0.8, 1.2), 0.9 * top)
        p.sigma_lambda2 = min(rng.uniform(1.0, 3.0), 0.5 * top)
        p.sigma_z = min(rng.uniform(0.5, 2.0), 0.5 * top)
        lam = np.full((M, K), p.mu_lambda)
        lam[:n] = _nearest_fill(means[:n], known[:n])
        lam[:n][~known[:n].any(axis=1)] = p.mu_lambda
        chain.lam = lam
        chain.zlat = model.zobs.copy()
    if model.covariate == "categorical":
        S = model.n_states
        diag = rng.uniform(0.6, 0.95, S)
        p.omega = np.where(np.eye(S, dtype=bool), diag[:, None], ((1 - diag) / (S - 1))[:, None])
        p.nu = rng.dirichlet(np.full(S, 5.0))
        z = np.ones((M, K), dtype=np.int64)
        obs = model.state_obs[:n]
        z[:n] = np.where(obs > 0, obs, 1)
        z[:n] = _nearest_fill(z[:n], obs > 0)
        chain.zstate = z

    init = dict(init or {})
    if "params" in init:
        chain.params = init.pop("params").copy()
        if model.robust and chain.params.eps_p is None:
            chain.params.eps_p = np.zeros((K, model.kmax))
    for key in ("b", "L", "w", "lam", "zstate", "zlat"):
        if key in init and init[key] is not None:
            setattr(chain, key, np.array(init[key], copy=True))
    chain.w = chain.w.astype(bool)
    if not init.get("keep_ghosts", False) and not {"b", "L"} & set(init):
        ghosts = np.flatnonzero(~model.observed)
        _draw_prior_rows(chain, model, ghosts)

    chain.log_scales = {k: np.log(np.full(_scale_shape(k, model), config.proposal_scales.get(k, v), dtype=float))
                        for k, v in DEFAULT_SCALES.items()}
    lj = log_joint(chain, model)
    if not np.isfinite(lj):
        raise SamplerInitError(f"initial log density is {lj}; state dump: {_dump(chain, model)}")
    return chain


def _scale_shape(key, model: Model):
    if key == "eta_S":
        return (model.K - 1,)
    if key == "eta_p":
        return (model.K,)
    if key == "eps_p":
        return (model.K, model.kmax)
    return ()


def _dump(chain: ChainState, model: Model) -> str:
    p = chain.params
    bad = [f"{k}={getattr(p, k)!r}" for k in ("psi", "alpha0", "gamma0", "sigma_S", "sigma_p1")]
    sa = chain.augmented(model.K)
    v = state_violations(sa, model.b_max[: model.n], model.L_min[: model.n])
    return "; ".join(bad + [f"zeta={p.zeta.tolist()}", f"violations={v}"])


# -- joint density --------------------------------------------------------

def log_joint(chain: ChainState, model: Model) -> float:
    """Log of the sampled target up to a constant (excluded rows integrated out)."""
    p, K, pri = chain.params, model.K, model.priors
    w = chain.w.astype(np.int8)
    st = chain.augmented(K)
    x = covariate_effect_matrix(chain, model)
    link = p.link()
    if not model.robust:
        link.eps_p = None
    S, cap = link_probabilities(link, x)
    total = log_birth(st.a_b, w, p.zeta) + log_mortality(st.a_d, st.a_b, w, S)
    if not model.prior_only:
        if model.robust:
            total += log_capture_robust(model.X, st.a_b, st.a_d, w, cap, model.data.k2)
        else:
            total += log_capture(model.X[:, :, 0], st.a_b, st.a_d, w, cap)
    inc = np.flatnonzero(chain.w)
    if model.covariate == "mass":
        total += log_mass_walk(chain.lam, p.mu_lambda, p.sigma_lambda1, p.Delta, p.sigma_lambda2, chain.b, w)
        # auxiliary backward walk before birth
        back = _norm_logpdf(chain.lam[:, :-1], chain.lam[:, 1:] - p.Delta[None, :], p.sigma_lambda2)
        before = np.arange(K - 1)[None, :] < chain.b[:, None]
        total += back[inc][before[inc]].sum()
        if model.zobs.size:
            mean = chain.lam[model.oi, model.oj]
            if model.spec.censoring:
                total += log_mass_censored(chain.zlat, mean, p.sigma_z, model.lo, model.hi)
            else:
                total += log_mass_censored(model.zobs, mean, p.sigma_z)
        total += _norm_logpdf(p.mu_lambda, pri.mass_mean, pri.mass_sd) + _norm_logpdf(p.Delta, 0.0, pri.mass_sd).sum()
        for s in (p.sigma_lambda1, p.sigma_lambda2, p.sigma_z):
            total += _log_unif_sd(s, pri.sd_upper)
    if model.covariate == "categorical":
        z = chain.zstate
        obs = model.state_obs
        if np.any((obs > 0) & (z != obs)):
            return -np.inf
        total += log_disease_process(z, p.nu, p.omega, chain.b, w)
        total -= np.log(model.n_states) * chain.b[inc].sum()
        total += _log_dirichlet(p.nu, pri.dirichlet) + sum(_log_dirichlet(r, pri.dirichlet) for r in p.omega)
    total += _norm_logpdf(p.eta_S, 0.0, p.sigma_S).sum() + _norm_logpdf(p.eta_p, 0.0, p.sigma_p1).sum()
    total += _log_unif_sd(p.sigma_S, pri.sd_upper) + _log_unif_sd(p.sigma_p1, pri.sd_upper)
    if model.robust:
        total += _norm_logpdf(p.eps_p[model.valid], 0.0, p.sigma_p2).sum()
        total += _log_unif_sd(p.sigma_p2, pri.sd_upper)
    coefs = [p.alpha0, p.gamma0] + ([p.alpha1, p.gamma1] if model.covariate != "none" else [])
    total += _norm_logpdf(np.asarray(coefs), 0.0, pri.coef_sd).sum()
    with np.errstate(divide="ignore"):
        zt = p.zeta[:-1]
        total += ((pri.zeta_a - 1) * np.log(zt) + (pri.zeta_b - 1) * np.log1p(-zt)).sum()
        nw = int(chain.w.sum())
        total += (pri.psi_a - 1 + nw) * np.log(p.psi) + (pri.psi_b - 1 + model.M - nw) * np.log1p(-p.psi)
    return float(total)


def _log_unif_sd(s, upper):
    return 0.0 if 0.0 < s < upper else -np.inf


def _log_dirichlet(x, a):
    with np.errstate(divide="ignore"):
        return float(((a - 1.0) * np.log(x)).sum())


# -- life-history updates -------------------------------------------------

def _capture_ll_rows(chain: ChainState, model: Model, rows, x_rows) -> np.ndarray:
    """``(len(rows), K)`` capture log-likelihood of each period if alive."""
    if model.prior_only:
        return np.zeros((len(rows), model.K))
    lin = _cap_lin(chain.params, x_rows, model)
    return _cap_cell_ll(lin, model.X[rows], model).sum(axis=2)


def _birth_cov_term(chain: ChainState, model: Model, rows) -> np.ndarray:
    """Covariate log-density contribution that depends on the birth period."""
    p, K = chain.params, model.K
    if model.covariate == "mass":
        return _norm_logpdf(chain.lam[rows], p.mu_lambda, p.sigma_lambda1)
    if model.covariate == "categorical":
        z = chain.zstate[rows] - 1
        with np.errstate(divide="ignore"):
            lnu, lom = np.log(p.nu), np.log(p.omega)
        tr = lom[z[:, :-1], z[:, 1:]]
        after = np.concatenate((np.cumsum(tr[:, ::-1], axis=1)[:, ::-1], np.zeros((len(rows), 1))), axis=1)
        return lnu[z] + after - np.log(model.n_states) * np.arange(K)[None, :]
    return np.zeros((len(rows), K))


def birth_log_weights(chain: ChainState, model: Model, rows) -> np.ndarray:
    """Unnormalised log full conditional of ``b`` given ``L`` (``-inf`` where inadmissible)."""
    K = model.K
    x = covariate_effect_matrix(chain, model, rows)
    lin = _surv_lin(chain.params, x)
    CS = np.concatenate((np.zeros((len(rows), 1)), np.cumsum(log_sigmoid(lin), axis=1)), axis=1)
    capll = _capture_ll_rows(chain, model, rows, x)
    CAP = np.concatenate((np.zeros((len(rows), 1)), np.cumsum(capll, axis=1)), axis=1)
    lw = log_birth_probs(chain.params.zeta)[None, :] - CS - CAP[:, :K] + _birth_cov_term(chain, model, rows)
    upper = np.minimum(model.b_max[rows], chain.L[rows])
    lw[np.arange(K)[None, :] > upper[:, None]] = -np.inf
    return lw


def death_log_weights(chain: ChainState, model: Model, rows) -> np.ndarray:
    """Unnormalised log full conditional of ``L`` given ``b``."""
    K = model.K
    x = covariate_effect_matrix(chain, model, rows)
    lin = _surv_lin(chain.params, x)
    ls = log_sigmoid(lin)
    CS = np.concatenate((np.zeros((len(rows), 1)), np.cumsum(ls, axis=1)), axis=1)
    dead = np.concatenate((ls - lin, np.zeros((len(rows), 1))), axis=1)
    capll = _capture_ll_rows(chain, model, rows, x)
    lw = CS + dead + np.cumsum(capll, axis=1)
    lower = np.maximum(chain.b[rows], model.L_min[rows])
    lw[np.arange(K)[None, :] < lower[:, None]] = -np.inf
    return lw


def update_birth_death(chain: ChainState, model: Model, config: SamplerConfig | None = None) -> ChainState:
    rows = np.flatnonzero(chain.w)
    if rows.size == 0:
        return chain
    lw = birth_log_weights(chain, model, rows)
    if np.any(np.all(np.isneginf(lw), axis=1)):
        raise SamplerError("no admissible birth period for some individual")
    chain.b[rows] = _gumbel_argmax(chain.rng, lw)
    lw = death_log_weights(chain, model, rows)
    if np.any(np.all(np.isneginf(lw), axis=1)):
        raise SamplerError("no admissible death period for some individual")
    chain.L[rows] = _gumbel_argmax(chain.rng, lw)
    return chain


# -- covariate updates ----------------------------------------------------

def update_covariates(chain: ChainState, model: Model, config: SamplerConfig | None = None) -> ChainState:
    if model.covariate == "mass":
        _update_mass(chain, model)
    elif model.covariate == "categorical":
        _update_states(chain, model)
    return chain


def _update_mass(chain: ChainState, model: Model):
    p, K, rng = chain.params, model.K, chain.rng
    lam = chain.lam
    if model.zobs.size:
        if model.spec.censoring:
            chain.zlat = sample_truncnorm(rng, lam[model.oi, model.oj], p.sigma_z, model.lo, model.hi)
            z = chain.zlat
        else:
            z = model.zobs
        zsum = np.bincount(model.ocell, weights=z, minlength=model.M * K).reshape(model.M, K)
    else:
        zsum = np.zeros((model.M, K))
    rows = np.flatnonzero(chain.w)
    if rows.size == 0:
        return
    b, L = chain.b[rows], chain.L[rows]
    alive = _alive_mask(b, L, K)
    at_risk, survived = _survival_cells(b, L, K)
    X = model.X[rows]
    nobs, zs = model.nobs[rows], zsum[rows]
    v1, v2, vz = p.sigma_lambda1 ** 2, p.sigma_lambda2 ** 2, p.sigma_z ** 2
    for j in range(K):
        is_b = (b == j).astype(float)
        prec = is_b / v1 + nobs[:, j] / vz
        num = is_b * p.mu_lambda / v1 + zs[:, j] / vz
        if j > 0:
            prec = prec + 1.0 / v2
            num = num + (lam[rows, j - 1] + p.Delta[j - 1]) / v2
        if j < K - 1:
            prec = prec + 1.0 / v2
            num = num + (lam[rows, j + 1] - p.Delta[j]) / v2
        prop = num / prec + rng.standard_normal(rows.size) / np.sqrt(prec)
        old = lam[rows, j]
        x_old = (old - model.loc) / model.scale
        x_new = (prop - model.loc) / model.scale
        dll = np.zeros(rows.size)
        if j < K - 1:
            base = p.alpha0 + p.eta_S[j]
            l_new, l_old = base + p.alpha1 * x_new, base + p.alpha1 * x_old
            y = survived[:, j]
            d = (log_sigmoid(l_new) - ~y * l_new) - (log_sigmoid(l_old) - ~y * l_old)
            dll += np.where(at_risk[:, j], d, 0.0)
        if not model.prior_only:
            eps = p.eps_p[j] if model.robust else np.zeros(1)
            base = p.gamma0 + p.eta_p[j] + eps[None, :]
            u_new = base + p.gamma1 * x_new[:, None]
            u_old = base + p.gamma1 * x_old[:, None]
            Xj = X[:, j, :]
            vj = model.validf[j][None, :]
            d = ((log_sigmoid(u_new) - (1 - Xj) * u_new) - (log_sigmoid(u_old) - (1 - Xj) * u_old)) * vj
            dll += np.where(alive[:, j], d.sum(axis=1), 0.0)
        accept = np.log(rng.random(rows.size)) < dll
        lam[rows[accept], j] = prop[accept]


def _state_emissions(chain: ChainState, model: Model, rows, alive, at_risk, survived):
    """``(R, K, S)`` log-likelihood of the link terms for each candidate state."""
    p, K, S = chain.params, model.K, model.n_states
    E = np.zeros((len(rows), K, S))
    X = model.X[rows]
    for s in range(S):
        xs = 1.0 if s + 1 == 2 else 0.0
        lin = p.alpha0 + p.alpha1 * xs + p.eta_S
        ls = log_sigmoid(lin)
        llS = np.where(at_risk, np.where(survived, ls[None, :], (ls - lin)[None, :]), 0.0)
        E[:, :-1, s] += llS
        if not model.prior_only:
            eps = p.eps_p if model.robust else np.zeros((K, 1))
            u = p.gamma0 + p.gamma1 * xs + p.eta_p[:, None] + eps
            cell = (log_sigmoid(u)[None] - (1 - X) * u[None]) * model.validf[None]
            E[:, :, s] += np.where(alive, cell.sum(axis=2), 0.0)
    obs = model.state_obs[rows]
    for s in range(S):
        E[:, :, s][(obs > 0) & (obs != s + 1)] = -np.inf
    return E


def _update_states(chain: ChainState, model: Model):
    p, K, S, rng = chain.params, model.K, model.n_states, chain.rng
    rows = np.flatnonzero(chain.w)
    if rows.size == 0:
        return
    b, L = chain.b[rows], chain.L[rows]
    alive = _alive_mask(b, L, K)
    at_risk, survived = _survival_cells(b, L, K)
    E = _state_emissions(chain, model, rows, alive, at_risk, survived)
    with np.errstate(divide="ignore"):
        lnu, lom = np.log(p.nu), np.log(p.omega)
    R = rows.size
    logA = np.zeros((R, K, S))
    for j in range(K):
        start = (b == j)[:, None]
        cur = lnu[None, :] + E[:, j]
        if j > 0:
            prop = logsumexp(logA[:, j - 1, :, None] + lom[None], axis=1) + E[:, j]
            cur = np.where(start, cur, np.where((b < j)[:, None], prop, 0.0))
        logA[:, j] = np.where(start | (b < j)[:, None], cur, 0.0)
    z = np.empty((R, K), dtype=np.int64)
    z[:, K - 1] = _gumbel_argmax(rng, logA[:, K - 1]) + 1
    for j in range(K - 2, -1, -1):
        lp = logA[:, j] + lom[:, z[:, j + 1] - 1].T
        drawn = _gumbel_argmax(rng, lp) + 1
        aux = rng.integers(1, S + 1, size=R)
        z[:, j] = np.where(j >= b, drawn, aux)
    chain.zstate[rows] = z


# -- parameter updates ----------------------------------------------------

class _LinkTerms:
    """Included-row data for the survival and capture log-likelihoods."""

    def __init__(self, chain: ChainState, model: Model):
        self.model = model
        rows = np.flatnonzero(chain.w)
        self.rows = rows
        K = model.K
        self.x = covariate_effect_matrix(chain, model, rows)
        b, L = chain.b[rows], chain.L[rows]
        at_risk, survived = _survival_cells(b, L, K)
        self.at_risk = at_risk.astype(float)
        self.dead = (at_risk & ~survived).astype(float)
        self.alive = _alive_mask(b, L, K).astype(float)[:, :, None] * model.validf[None]
        self.X = model.X[rows]
        self.notX = 1.0 - self.X

    def surv_cols(self, a0, a1, eta):
        lin = a0 + a1 * self.x[:, :-1] + eta[None, :]
        return (self.at_risk * log_sigmoid(lin) - self.dead * lin).sum(axis=0)

    def cap_cells(self, g0, g1, eta, eps):
        """``(K, kmax)`` capture log-likelihood summed over individuals."""
        if self.model.prior_only:
            return np.zeros((self.model.K, self.model.kmax))
        lin = (g0 + g1 * self.x + eta[None, :])[:, :, None]
        if eps is not None:
            lin = lin + eps[None]
        return (self.alive * (log_sigmoid(lin) - self.notX * lin)).sum(axis=0)


def _mh_accept(rng, logr):
    logr = np.asarray(logr, dtype=float)
    acc = np.exp(np.minimum(0.0, np.nan_to_num(logr, nan=-np.inf)))
    return rng.random(logr.shape) < acc, acc


def update_parameters(chain: ChainState, model: Model, config: SamplerConfig | None = None) -> ChainState:
    config = config or SamplerConfig()
    p, rng, pri, K = chain.params, chain.rng, model.priors, model.K
    rows = np.flatnonzero(chain.w)

    # entry probabilities: Beta-Bernoulli counts among included individuals
    born = np.bincount(chain.b[rows], minlength=K).astype(float)
    at_risk = np.cumsum(born[::-1])[::-1]
    p.zeta[:-1] = rng.beta(pri.zeta_a + born[:-1], pri.zeta_b + at_risk[:-1] - born[:-1])
    p.zeta[-1] = 1.0

    terms = _LinkTerms(chain, model)
    has_cov = model.covariate != "none"
    csd = pri.coef_sd

    # survival coefficients and random effects
    cols = terms.surv_cols(p.alpha0, p.alpha1, p.eta_S)
    for name in ("alpha0", "alpha1") if has_cov else ("alpha0",):
        cur = getattr(p, name)
        prop = cur + _scale(chain, name) * rng.standard_normal()
        args = (prop, p.alpha1) if name == "alpha0" else (p.alpha0, prop)
        new = terms.surv_cols(*args, p.eta_S)
        logr = new.sum() - cols.sum() + _norm_logpdf(prop, 0, csd) - _norm_logpdf(cur, 0, csd)
        ok, acc = _mh_accept(rng, logr)
        _tune(chain, name, acc, config)
        if ok:
            setattr(p, name, prop)
            cols = new
    prop = p.eta_S + _scale(chain, "eta_S") * rng.standard_normal(K - 1)
    new = terms.surv_cols(p.alpha0, p.alpha1, prop)
    logr = new - cols + _norm_logpdf(prop, 0, p.sigma_S) - _norm_logpdf(p.eta_S, 0, p.sigma_S)
    ok, acc = _mh_accept(rng, logr)
    _tune(chain, "eta_S", acc, config)
    p.eta_S = np.where(ok, prop, p.eta_S)
    cols = np.where(ok, new, cols)
    p.sigma_S, p.eta_S, cols = _update_re_sd(
        chain, config, "sigma_S", p.sigma_S, p.eta_S, cols,
        lambda eta: terms.surv_cols(p.alpha0, p.alpha1, eta), pri.sd_upper)

    # capture coefficients and random effects
    eps = p.eps_p if model.robust else None
    cells = terms.cap_cells(p.gamma0, p.gamma1, p.eta_p, eps)
    for name in ("gamma0", "gamma1") if has_cov else ("gamma0",):
        cur = getattr(p, name)
        prop = cur + _scale(chain, name) * rng.standard_normal()
        args = (prop, p.gamma1) if name == "gamma0" else (p.gamma0, prop)
        new = terms.cap_cells(*args, p.eta_p, eps)
        logr = new.sum() - cells.sum() + _norm_logpdf(prop, 0, csd) - _norm_logpdf(cur, 0, csd)
        ok, acc = _mh_accept(rng, logr)
        _tune(chain, name, acc, config)
        if ok:
            setattr(p, name, prop)
            cells = new
    prop = p.eta_p + _scale(chain, "eta_p") * rng.standard_normal(K)
    new = terms.cap_cells(p.gamma0, p.gamma1, prop, eps)
    logr = new.sum(axis=1) - cells.sum(axis=1) + _norm_logpdf(prop, 0, p.sigma_p1) - _norm_logpdf(p.eta_p, 0, p.sigma_p1)
    ok, acc = _mh_accept(rng, logr)
    _tune(chain, "eta_p", acc, config)
    p.eta_p = np.where(ok, prop, p.eta_p)
    cells = np.where(ok[:, None], new, cells)
    col_sum = cells.sum(axis=1)
    p.sigma_p1, p.eta_p, col_sum = _update_re_sd(
        chain, config, "sigma_p1", p.sigma_p1, p.eta_p, col_sum,
        lambda eta: terms.cap_cells(p.gamma0, p.gamma1, eta, eps).sum(axis=1), pri.sd_upper)
    if model.robust:
        cells = terms.cap_cells(p.gamma0, p.gamma1, p.eta_p, p.eps_p)
        prop = p.eps_p + _scale(chain, "eps_p") * rng.standard_normal(p.eps_p.shape)
        new = terms.cap_cells(p.gamma0, p.gamma1, p.eta_p, prop)
        logr = new - cells + _norm_logpdf(prop, 0, p.sigma_p2) - _norm_logpdf(p.eps_p, 0, p.sigma_p2)
        ok, acc = _mh_accept(rng, logr)
        ok &= model.valid
        _tune(chain, "eps_p", np.where(model.valid, acc, config.target_accept), config)
        p.eps_p = np.where(ok, prop, p.eps_p)
        cells = np.where(ok, new, cells)
        valid = model.valid

        def eps_ll(e):
            full = np.zeros_like(p.eps_p)
            full[valid] = e
            return terms.cap_cells(p.gamma0, p.gamma1, p.eta_p, full)[valid]

        p.sigma_p2, flat, _ = _update_re_sd(chain, config, "sigma_p2", p.sigma_p2, p.eps_p[valid],
                                            cells[valid], eps_ll, pri.sd_upper)
        p.eps_p = np.zeros_like(p.eps_p)
        p.eps_p[valid] = flat

    if model.covariate == "mass":
        _update_mass_params(chain, model, config, rows)
    if model.covariate == "categorical":
        _update_state_params(chain, model, rows)
    return chain


def _update_re_sd(chain, config, key, sd, eta, ll_cols, ll_fn, upper):
    """Centred then non-centred (rescaling) updates of a random-effect sd.

    The rescaling move multiplies the sd and every effect by the same factor,
    so only the likelihood and the Jacobian enter its ratio.  Returns the new
    sd, effects and per-effect log-likelihood.
    """
    rng = chain.rng
    n = eta.size
    ss = float((eta ** 2).sum())

    def log_target(s):
        if not 0.0 < s < upper:
            return -np.inf
        return -n * np.log(s) - ss / (2 * s * s) + np.log(s)

    prop = sd * np.exp(_scale(chain, key) * rng.standard_normal())
    ok, acc = _mh_accept(rng, log_target(prop) - log_target(sd))
    _tune(chain, key, acc, config)
    if ok:
        sd = prop

    step = _scale(chain, "nc_" + key) * rng.standard_normal()
    new_sd = sd * np.exp(step)
    ok, acc = False, 0.0
    if 0.0 < new_sd < upper:
        new_eta = eta * np.exp(step)
        new_ll = ll_fn(new_eta)
        ok, acc = _mh_accept(rng, new_ll.sum() - ll_cols.sum() + step)
    _tune(chain, "nc_" + key, acc, config)
    if ok:
        return new_sd, new_eta, new_ll
    return sd, eta, ll_cols


def _rw_log_sd(chain, config, key, sd, n, ss, upper):
    def log_target(s):
        if not 0.0 < s < upper:
            return -np.inf
        return -n * np.log(s) - ss / (2 * s * s) + np.log(s)

    prop = sd * np.exp(_scale(chain, key) * chain.rng.standard_normal())
    ok, acc = _mh_accept(chain.rng, log_target(prop) - log_target(sd))
    _tune(chain, key, acc, config)
    return prop if ok else sd


def _mass_link_ll(chain, model, rows, lam_rows) -> float:
    """Survival and capture log-likelihood of ``rows`` with masses ``lam_rows``."""
    p, K = chain.params, model.K
    x = (lam_rows - model.loc) / model.scale
    at_risk, survived = _survival_cells(chain.b[rows], chain.L[rows], K)
    lin = _surv_lin(p, x)
    total = np.where(at_risk, log_sigmoid(lin) - ~survived * lin, 0.0).sum()
    if not model.prior_only:
        alive = _alive_mask(chain.b[rows], chain.L[rows], K)
        cell = _cap_cell_ll(_cap_lin(p, x, model), model.X[rows], model).sum(axis=2)
        total += np.where(alive, cell, 0.0).sum()
    return float(total)


def _mass_obs_ll(chain, model, lam) -> float:
    """Quadratic part of the mass observation density (the sd is held fixed)."""
    if not model.zobs.size:
        return 0.0
    z = chain.zlat if model.spec.censoring else model.zobs
    r = z - lam[model.oi, model.oj]
    return float(-(r * r).sum() / (2 * chain.params.sigma_z ** 2))


def nc_walk_proposal(chain, model, rows, key, step):
    """Rescale the walk together with one of its sds by ``exp(step)``.

    For ``sigma_lambda1`` every row is shifted so that its deviation from the
    mean at birth scales with the sd; for ``sigma_lambda2`` the innovations
    around the birth value scale.  The walk density and the Jacobian cancel,
    so the log acceptance ratio holds only the link and observation terms.
    Returns ``(lam, sd, log_ratio)``.
    """
    p = chain.params
    c = np.exp(step)
    new_sd = getattr(p, key) * c
    if not 0.0 < new_sd < model.priors.sd_upper:
        return chain.lam, new_sd, -np.inf
    lam = chain.lam[rows]
    anchor = lam[np.arange(rows.size), chain.b[rows]][:, None]
    if key == "sigma_lambda1":
        new = lam + (c - 1.0) * (anchor - p.mu_lambda)
    else:
        drift = np.concatenate(([0.0], np.cumsum(p.Delta)))[None, :]
        mean = anchor + drift - drift[0, chain.b[rows]][:, None]
        new = mean + c * (lam - mean)
    full = chain.lam.copy()
    full[rows] = new
    logr = (_mass_link_ll(chain, model, rows, new) - _mass_link_ll(chain, model, rows, lam)
            + _mass_obs_ll(chain, model, full) - _mass_obs_ll(chain, model, chain.lam) + step)
    return full, new_sd, logr


def _nc_walk_sd(chain, model, config, rows, key):
    step = _scale(chain, "nc_" + key) * chain.rng.standard_normal()
    acc = 0.0
    if rows.size:
        lam, sd, logr = nc_walk_proposal(chain, model, rows, key, step)
        ok, acc = _mh_accept(chain.rng, logr)
        if ok:
            chain.lam = lam
            setattr(chain.params, key, sd)
    _tune(chain, "nc_" + key, acc, config)


def _collapsed_sigma_z(chain, model, config):
    """Update ``sigma_z`` with the latent masses integrated out, then redraw them."""
    p, rng = chain.params, chain.rng
    upper = model.priors.sd_upper
    mean = chain.lam[model.oi, model.oj]

    def log_target(s):
        if not 0.0 < s < upper:
            return -np.inf
        return float(log_interval_mass((model.lo - mean) / s, (model.hi - mean) / s).sum()) + np.log(s)

    prop = p.sigma_z * np.exp(_scale(chain, "sigma_z") * rng.standard_normal())
    ok, acc = _mh_accept(rng, log_target(prop) - log_target(p.sigma_z))
    _tune(chain, "sigma_z", acc, config)
    if ok:
        p.sigma_z = prop
    chain.zlat = sample_truncnorm(rng, mean, p.sigma_z, model.lo, model.hi)


def _update_mass_params(chain, model, config, rows):
    p, rng, pri, K = chain.params, chain.rng, model.priors, model.K
    if rows.size:
        lam = chain.lam[rows]
        start = lam[np.arange(rows.size), chain.b[rows]]
        # forward steps after birth and backward steps before it share one form
        steps = np.diff(lam, axis=1)
    else:
        start, steps = np.zeros(0), np.zeros((0, K - 1))
    prior_prec = 1.0 / pri.mass_sd ** 2
    prec = prior_prec + start.size / p.sigma_lambda1 ** 2
    mean = (pri.mass_mean * prior_prec + start.sum() / p.sigma_lambda1 ** 2) / prec
    p.mu_lambda = rng.normal(mean, 1.0 / np.sqrt(prec))
    prec = prior_prec + rows.size / p.sigma_lambda2 ** 2
    p.Delta = rng.normal(steps.sum(axis=0) / p.sigma_lambda2 ** 2 / prec, 1.0 / np.sqrt(prec))
    p.sigma_lambda1 = _rw_log_sd(chain, config, "sigma_lambda1", p.sigma_lambda1, start.size,
                                 float(((start - p.mu_lambda) ** 2).sum()), pri.sd_upper)
    p.sigma_lambda2 = _rw_log_sd(chain, config, "sigma_lambda2", p.sigma_lambda2, steps.size,
                                 float(((steps - p.Delta[None, :]) ** 2).sum()), pri.sd_upper)
    _nc_walk_sd(chain, model, config, rows, "sigma_lambda1")
    _nc_walk_sd(chain, model, config, rows, "sigma_lambda2")
    if model.zobs.size and model.spec.censoring:
        _collapsed_sigma_z(chain, model, config)
        return
    if model.zobs.size:
        ss = float(((model.zobs - chain.lam[model.oi, model.oj]) ** 2).sum())
    else:
        ss = 0.0
    p.sigma_z = _rw_log_sd(chain, config, "sigma_z", p.sigma_z, model.zobs.size, ss, pri.sd_upper)


def _update_state_params(chain, model, rows):
    p, rng, S, K = chain.params, chain.rng, model.n_states, model.K
    a = model.priors.dirichlet
    z = chain.zstate[rows] - 1
    b = chain.b[rows]
    first = np.bincount(z[np.arange(rows.size), b], minlength=S) if rows.size else np.zeros(S)
    p.nu = rng.dirichlet(a + first)
    after = (np.arange(1, K)[None, :] > b[:, None])
    pairs = z[:, :-1][after] * S + z[:, 1:][after]
    counts = np.bincount(pairs, minlength=S * S).reshape(S, S)
    p.omega = np.stack([rng.dirichlet(a + counts[h]) for h in range(S)])


# -- excluded pseudo-individuals and inclusion ----------------------------

def _draw_prior_rows(chain: ChainState, model: Model, rows):
    """Replace the life histories and covariates of ``rows`` by prior draws."""
    if len(rows) == 0:
        return
    p, K, rng = chain.params, model.K, chain.rng
    G = len(rows)
    beta = zeta_to_beta(p.zeta)
    b = np.minimum((rng.random(G)[:, None] > np.cumsum(beta)[None, :-1]).sum(axis=1), K - 1)
    chain.b[rows] = b
    if model.covariate == "mass":
        start = rng.normal(p.mu_lambda, p.sigma_lambda1, G)
        inc = p.Delta[None, :] + p.sigma_lambda2 * rng.standard_normal((G, K - 1))
        C = np.concatenate((np.zeros((G, 1)), np.cumsum(inc, axis=1)), axis=1)
        chain.lam[rows] = start[:, None] + C - C[np.arange(G), b][:, None]
    if model.covariate == "categorical":
        S = model.n_states
        z = np.empty((G, K), dtype=np.int64)
        cnu = np.cumsum(p.nu)
        com = np.cumsum(p.omega, axis=1)
        for j in range(K):
            u = rng.random(G)
            init = (u[:, None] > cnu[None, :-1]).sum(axis=1) + 1
            if j > 0:
                trans = (u[:, None] > com[z[:, j - 1] - 1, :-1]).sum(axis=1) + 1
            else:
                trans = init
            aux = rng.integers(1, S + 1, size=G)
            z[:, j] = np.where(j == b, init, np.where(j > b, trans, aux))
        chain.zstate[rows] = z
    x = covariate_effect_matrix(chain, model, rows)
    surv = expit(_surv_lin(p, x))
    dies = (rng.random((G, K - 1)) >= surv) & (np.arange(K - 1)[None, :] >= b[:, None])
    chain.L[rows] = np.where(dies.any(axis=1), dies.argmax(axis=1), K - 1)


def redraw_excluded(chain: ChainState, model: Model, config: SamplerConfig | None = None) -> ChainState:
    _draw_prior_rows(chain, model, np.flatnonzero(~chain.w))
    return chain


def update_inclusion(chain: ChainState, model: Model, config: SamplerConfig | None = None) -> ChainState:
    p, rng, pri = chain.params, chain.rng, model.priors
    ghosts = np.arange(model.n, model.M)
    if ghosts.size:
        x = covariate_effect_matrix(chain, model, ghosts)
        capll = _capture_ll_rows(chain, model, ghosts, x)
        alive = _alive_mask(chain.b[ghosts], chain.L[ghosts], model.K)
        log_p0 = np.where(alive, capll, 0.0).sum(axis=1)
        with np.errstate(divide="ignore"):
            logit = np.log(p.psi) + log_p0 - np.log1p(-p.psi)
        chain.w[ghosts] = rng.random(ghosts.size) < expit(logit)
    nw = int(chain.w.sum())
    p.psi = rng.beta(pri.psi_a + nw, pri.psi_b + model.M - nw)
    return chain


def sweep(chain: ChainState, model: Model, config: SamplerConfig) -> ChainState:
    if not config.clamp_latent:
        update_birth_death(chain, model, config)
        update_covariates(chain, model, config)
    update_parameters(chain, model, config)
    if config.clamp_latent:
        nw = int(chain.w.sum())
        chain.params.psi = chain.rng.beta(model.priors.psi_a + nw, model.priors.psi_b + model.M - nw)
    else:
        redraw_excluded(chain, model, config)
        update_inclusion(chain, model, config)
    return chain


# -- recording ------------------------------------------------------------

def record(chain: ChainState, model: Model) -> np.ndarray:
    p, K = chain.params, model.K
    w = chain.w
    alive = _alive_mask(chain.b, chain.L, K) & w[:, None]
    N = alive.sum(axis=0)
    n_total = int(w.sum())
    parts = [model.params_vector(p), [n_total], N]
    if model.covariate == "categorical":
        for s in range(1, model.n_states + 1):
            parts.append((alive & (chain.zstate == s)).sum(axis=0))
    beta = zeta_to_beta(p.zeta)
    parts.append(beta)
    eta = np.full(K - 1, np.nan)
    ok = N[:-1] > 0
    eta[ok] = beta[1:][ok] * n_total / N[:-1][ok]
    parts.append(eta)
    life = (chain.L - chain.b + 1)[w]
    parts.append([life.mean() if life.size else np.nan])
    return np.concatenate([np.asarray(x, dtype=float).ravel() for x in parts])


def identity_violations(chain: ChainState, model: Model, row: np.ndarray, columns: list) -> int:
    """Count failed derived-quantity identities for one recorded draw."""
    K, n = model.K, model.n
    bad = 0
    st = chain.augmented(K)
    beta = row[columns.index("beta[0]"): columns.index("beta[0]") + K]
    if abs(beta.sum() - 1.0) > 1e-12:
        bad += 1
    N = row[columns.index("N[1]"): columns.index("N[1]") + K]
    if not np.array_equal(derive_abundance(st), N.astype(np.int64)):
        bad += 1
    if n:
        life = derive_lifetime(st)[:n]
        span = model.L_min[:n] - model.b_max[:n] + 1
        bad += int(np.sum(life < span))
    bad += len(state_violations(st, model.b_max[:n], model.L_min[:n]))
    return bad


# -- drivers ---------------------------------------------------------------

def run_chain(model: Model, config: SamplerConfig, chain_index: int = 0, seed_seq=None,
              init: dict | None = None) -> ChainResult:
    if seed_seq is None:
        seed_seq = np.random.SeedSequence(config.seed).spawn(chain_index + 1)[chain_index]
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    chain = initial_state(model, rng, config, init)
    columns = model.columns()
    n_keep = config.n_iter // config.thin
    draws = np.empty((n_keep, len(columns)))
    violations = 0
    t0 = time.perf_counter()
    total = config.n_adapt + config.n_iter
    kept = 0
    for it in range(1, total + 1):
        chain.iteration = it
        chain.adapting = it <= config.n_adapt
        if it == config.n_adapt + 1:
            chain.acc_sum, chain.acc_n = {}, {}
        sweep(chain, model, config)
        post = it - config.n_adapt
        if post > 0 and post % config.thin == 0 and kept < n_keep:
            row = record(chain, model)
            draws[kept] = row
            kept += 1
            if config.check_identities:
                violations += identity_violations(chain, model, row, columns)
        if config.progress_every and it % config.progress_every == 0:
            rates = ", ".join(f"{k}={np.mean(v / chain.acc_n[k]):.2f}" for k, v in sorted(chain.acc_sum.items()))
            print(f"chain {chain_index} iter {it}/{total} N={int(chain.w.sum())} accept: {rates}",
                  file=sys.stderr, flush=True)
    acceptance = {k: float(np.mean(v / chain.acc_n[k])) for k, v in chain.acc_sum.items()}
    return ChainResult(draws=draws, acceptance=acceptance, violations=violations,
                       seconds=time.perf_counter() - t0)


def _chain_job(args):
    return run_chain(*args)


def run(data: CaptureData, spec: ModelSpec, config: SamplerConfig, priors: Priors | None = None,
        prior_only: bool = False, init: dict | None = None) -> PosteriorDraws:
    """Run ``config.n_chains`` independent chains and collect their draws.

    Results depend only on ``(config, spec, priors, data)``: each chain's
    random stream is spawned from ``config.seed``.
    """
    model = Model(data, spec, priors, prior_only=prior_only)
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_chains)
    jobs = [(model, config, c, seeds[c], init) for c in range(config.n_chains)]
    if config.n_workers > 1 and config.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(config.n_workers, config.n_chains)) as pool:
            results = list(pool.map(_chain_job, jobs))
    else:
        results = [_chain_job(j) for j in jobs]
    meta = model.metadata()
    meta.update(n_adapt=config.n_adapt, n_iter=config.n_iter, thin=config.thin, seed=config.seed)
    return PosteriorDraws(columns=model.columns(), chains=[r.draws for r in results], meta=meta,
                          results=results)
