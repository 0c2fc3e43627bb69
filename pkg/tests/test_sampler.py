import copy
import itertools

import numpy as np
import pytest
from scipy import stats
from scipy.special import logit, logsumexp

from cdlcr.data import CaptureData
from cdlcr.model import Model, ModelSpec, Priors
from cdlcr.popstate import StudyDesign, beta_to_zeta
from cdlcr.sampler import (
    SamplerConfig,
    SamplerInitError,
    _update_states,
    birth_log_weights,
    death_log_weights,
    initial_state,
    log_joint,
    nc_walk_proposal,
    run,
    run_chain,
    sweep,
    update_inclusion,
)
from cdlcr.simulate import finch_scenario, generate, vole_scenario


def _small(kind, M=12, seed=5):
    """Four-period model, small enough to enumerate, after a few sweeps."""
    scn = vole_scenario() if kind == "mass" else finch_scenario()
    K = 4
    p = scn.params.copy()
    p.zeta = beta_to_zeta(np.full(K, 1 / K))
    p.eta_S, p.eta_p = p.eta_S[:K - 1], p.eta_p[:K]
    k2 = 3 if kind == "mass" else 1
    if p.eps_p is not None:
        p.eps_p = p.eps_p[:K, :k2]
    if kind == "mass":
        p.Delta = p.Delta[:K - 1]
    else:
        p.gamma1 = 1.0
    design = StudyDesign(k1=K, k2=(k2,) * K, M=M)
    _, data = generate(design, p, seed, scn.covariate, loc=scn.loc, scale=scn.scale, miss_rate=0.3)
    spec = ModelSpec(M=M, design="robust" if k2 > 1 else "standard", covariate=scn.covariate)
    model = Model(data, spec)
    chain = initial_state(model, np.random.default_rng(0))
    for _ in range(5):
        sweep(chain, model, SamplerConfig())
    return model, chain


@pytest.mark.parametrize("kind", ["mass", "categorical"])
def test_birth_death_weights_match_log_joint(kind):
    model, chain = _small(kind)
    rows = np.flatnonzero(chain.w)
    for weights, attr in ((birth_log_weights(chain, model, rows), "b"), (death_log_weights(chain, model, rows), "L")):
        for r, i in enumerate(rows):
            ref = np.full(model.K, -np.inf)
            for v in range(model.K):
                c = copy.deepcopy(chain)
                getattr(c, attr)[i] = v
                if c.b[i] <= c.L[i]:
                    ref[v] = log_joint(c, model)
            got = weights[r] - logsumexp(weights[r])
            want = ref - logsumexp(ref)
            finite = np.isfinite(want)
            assert np.array_equal(finite, np.isfinite(got)), (attr, i)
            np.testing.assert_allclose(got[finite], want[finite], atol=1e-10)


def test_state_update_matches_enumeration():
    model, chain = _small("categorical")
    rows = np.flatnonzero(chain.w)
    i = next(i for i in rows if chain.b[i] <= 1 and (model.state_obs[i] == 0).sum() >= 2)
    b = chain.b[i]
    configs = list(itertools.product([1, 2], repeat=model.K - b))
    ref = []
    for tail in configs:
        c = copy.deepcopy(chain)
        c.zstate[i, b:] = tail
        ref.append(log_joint(c, model))
    ref = np.exp(np.array(ref) - logsumexp(ref))
    index = {t: k for k, t in enumerate(configs)}
    counts = np.zeros(len(configs))
    n = 8000
    for _ in range(n):
        _update_states(chain, model)
        counts[index[tuple(chain.zstate[i, b:])]] += 1
    assert np.all(counts[ref == 0] == 0)
    pos = ref > 0
    assert stats.chisquare(counts[pos], n * ref[pos]).pvalue > 1e-3


def _ghost_model(M=20000, K=2):
    model = Model(CaptureData.empty(K), ModelSpec(M=M))
    chain = initial_state(model, np.random.default_rng(1))
    chain.b[:] = 0
    chain.L[:] = 0
    chain.params.eta_p = np.zeros(K)
    return model, chain


def test_inclusion_two_term_bayes():
    model, chain = _ghost_model()
    chain.params.psi = 0.5
    # alive only in the first period with capture probability 0.75
    chain.params.gamma0 = logit(0.75)
    update_inclusion(chain, model)
    frac = chain.w.mean()
    assert abs(frac - 0.2) < 4 * np.sqrt(0.2 * 0.8 / model.M)


def test_inclusion_limits():
    model, chain = _ghost_model(M=500)
    chain.params.psi = 0.0
    update_inclusion(chain, model)
    assert not chain.w.any()
    model, chain = _ghost_model(M=500)
    chain.params.psi = 0.7
    chain.params.gamma0 = 60.0
    update_inclusion(chain, model)
    assert not chain.w.any()


def test_sweeps_keep_a_valid_state():
    for kind in ("mass", "categorical"):
        model, chain = _small(kind, M=30, seed=9)
        for _ in range(30):
            sweep(chain, model, SamplerConfig())
            assert np.isfinite(log_joint(chain, model))
            assert np.all(chain.b <= chain.L)
            assert np.all(chain.w[:model.n])
            assert np.all(chain.b[:model.n] <= model.b_max[:model.n])
            assert np.all(chain.L[:model.n] >= model.L_min[:model.n])


def test_identities_hold_on_every_draw():
    model, _ = _small("categorical", M=40, seed=3)
    res = run_chain(model, SamplerConfig(n_adapt=20, n_iter=60, check_identities=True))
    assert res.violations == 0
    cols = model.columns()
    beta = res.draws[:, cols.index("beta[0]"): cols.index("beta[0]") + model.K]
    assert np.all(np.abs(beta.sum(axis=1) - 1) <= 1e-12)
    N = res.draws[:, cols.index("N[1]"): cols.index("N[1]") + model.K]
    by_state = sum(res.draws[:, cols.index(f"N_s{s}[1]"): cols.index(f"N_s{s}[1]") + model.K] for s in (1, 2))
    np.testing.assert_array_equal(N, by_state)


def test_same_seed_same_draws_and_chains_differ():
    model, _ = _small("mass", M=20)
    cfg = SamplerConfig(n_adapt=10, n_iter=20, n_chains=2, seed=42)
    a = run(model.data, model.spec, cfg)
    b = run(model.data, model.spec, cfg)
    for x, y in zip(a.chains, b.chains):
        np.testing.assert_array_equal(x, y)
    assert not np.array_equal(a.chains[0], a.chains[1])
    c = run(model.data, model.spec, SamplerConfig(n_adapt=10, n_iter=20, n_chains=2, seed=43))
    assert not np.array_equal(a.chains[0], c.chains[0])


def test_thinning_and_layout():
    model, _ = _small("mass", M=20)
    draws = run(model.data, model.spec, SamplerConfig(n_adapt=0, n_iter=30, n_chains=1, thin=3))
    assert draws.chains[0].shape == (10, len(model.columns()))
    assert draws.column("psi").shape == (1, 10)
    assert draws.meta["n_iter"] == 30 and draws.meta["M"] == 20


def test_conjugate_updates_under_clamped_latent_state():
    model, chain = _small("categorical", M=30, seed=2)
    init = {"params": chain.params, "b": chain.b, "L": chain.L, "w": chain.w, "zstate": chain.zstate}
    res = run_chain(model, SamplerConfig(n_adapt=0, n_iter=4000, clamp_latent=True), init=init)
    cols = model.columns()
    w = chain.w
    # entry in the first period versus later, among included rows; draws are independent
    born_first = int(np.sum(chain.b[w] == 0))
    shape1, shape2 = 1 + born_first, 1 + int(w.sum()) - born_first
    z1 = res.draws[:, cols.index("zeta[1]")]
    assert abs(z1.mean() - shape1 / (shape1 + shape2)) < 4 * z1.std() / np.sqrt(len(z1))
    np.testing.assert_array_equal(res.draws[:, cols.index("N_total")], w.sum())


def test_config_validation_and_bad_init():
    with pytest.raises(ValueError):
        SamplerConfig(n_iter=0)
    with pytest.raises(ValueError):
        SamplerConfig(target_accept=1.0)
    with pytest.raises(ValueError):
        SamplerConfig(proposal_scales={"nope": 1.0})
    model, chain = _small("mass", M=20)
    # an observed individual said to die before its first capture
    L = chain.L.copy()
    L[0] = model.L_min[0] - 1
    with pytest.raises(SamplerInitError):
        initial_state(model, np.random.default_rng(0), init={"b": np.minimum(chain.b, L.clip(0)), "L": L})


def test_priors_are_validated():
    with pytest.raises(ValueError):
        Priors(sd_upper=0.0)
    with pytest.raises(ValueError):
        Priors(mass_mean=np.inf)


@pytest.mark.parametrize("key", ["sigma_lambda1", "sigma_lambda2"])
def test_walk_rescaling_ratio_matches_log_joint(key):
    model, chain = _small("mass", M=20, seed=4)
    rows = np.flatnonzero(chain.w)
    for step in (-0.3, 0.2):
        lam, sd, logr = nc_walk_proposal(chain, model, rows, key, step)
        moved = copy.deepcopy(chain)
        moved.lam = lam
        setattr(moved.params, key, sd)
        # each rescaled coordinate contributes step to the log-Jacobian, plus the sd itself
        n_scaled = rows.size * (1 if key == "sigma_lambda1" else model.K - 1)
        want = log_joint(moved, model) - log_joint(chain, model) + n_scaled * step + step
        assert logr == pytest.approx(want, abs=1e-8)
