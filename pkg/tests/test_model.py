import math

import numpy as np
import pytest
from scipy import optimize, stats

from hydrorecon.errors import ConfigError, SupportError
from hydrorecon.model import (
    ModelData,
    ModelSpec,
    ParameterState,
    ProxyDesign,
    TrueParameters,
    log_lik_hydro,
    log_lik_proxy,
    log_posterior,
    log_prior,
    log_process,
    simulate,
)

LOG2PI = math.log(2 * math.pi)


def state_for(data, rng=None, **kw):
    rng = rng or np.random.default_rng(0)
    M, T, R = data.M, data.T, len(data.recon_idx)
    base = dict(
        alpha=rng.normal(size=M),
        beta=rng.normal(size=(M, 2)),
        sigma=rng.uniform(0.3, 2.0, M),
        omega=float(rng.normal()),
        delta=float(rng.normal(0, 0.1)),
        rho=float(rng.uniform(-0.9, 0.9)),
        nu=float(rng.uniform(0.2, 2)),
        tau=float(rng.uniform(0.2, 2)),
        lam=float(rng.uniform(0.2, 2)),
        eta=rng.normal(size=T),
        I_recon=rng.normal(size=R),
    )
    base.update(kw)
    return ParameterState(**base)


def random_data(rng, T=8, M=2, n_obs=5):
    I_obs = rng.normal(size=T)
    I_obs[: T // 2] = np.nan
    obs_proxy = np.repeat(np.arange(M), n_obs)
    obs_t = rng.integers(0, T, M * n_obs)
    return ModelData(np.arange(T) + 1900, I_obs, tuple(f"p{j}" for j in range(M)), obs_proxy, obs_t,
                     rng.normal(size=M * n_obs))


def scalar_normal(x, m, s):
    return -0.5 * LOG2PI - math.log(s) - 0.5 * ((x - m) / s) ** 2


# ------------------------------------------------------------ proxy term


def test_proxy_single_standard_normal():
    data = ModelData([2000], [0.3], ("p",), [0], [0], [0.0])
    s = state_for(data, alpha=np.zeros(1), beta=np.zeros((1, 2)), sigma=np.ones(1))
    assert log_lik_proxy(s, data) == pytest.approx(-0.5 * LOG2PI, abs=1e-15)


def test_proxy_linear_when_beta2_zero(rng):
    data = random_data(rng)
    beta = rng.normal(size=(2, 2))
    beta[:, 1] = 0.0
    s = state_for(data, rng, beta=beta)
    I = s.I_full(data)
    lin = 0.0
    for j, t, y in zip(data.obs_proxy, data.obs_t, data.obs_y):
        lin += stats.norm.logpdf(y, s.alpha[j] + s.beta[j, 0] * I[t], s.sigma[j])
    assert log_lik_proxy(s, data) == pytest.approx(lin, abs=1e-12)


def test_proxy_brute_force(rng):
    data = random_data(rng, M=2, n_obs=5)
    s = state_for(data, rng)
    I = s.I_full(data)
    total = 0.0
    for j, t, y in zip(data.obs_proxy, data.obs_t, data.obs_y):
        mu = s.alpha[j] + s.beta[j, 0] * I[t] + s.beta[j, 1] * I[t] ** 2
        total += scalar_normal(y, mu, s.sigma[j])
    assert log_lik_proxy(s, data) == pytest.approx(total, abs=1e-12)


def test_proxy_rejects_bad_sigma(rng):
    data = random_data(rng)
    with pytest.raises(SupportError):
        log_lik_proxy(state_for(data, rng, sigma=np.array([1.0, 0.0])), data)


# ------------------------------------------------------------ hydro term


def test_hydro_at_mean():
    T = 6
    data = ModelData(np.arange(T), np.zeros(T))
    s = state_for(data, eta=np.zeros(T), tau=0.7, I_recon=np.zeros(0))
    assert log_lik_hydro(s, data, ModelSpec()) == pytest.approx(T * -0.5 * math.log(2 * math.pi * 0.49), abs=1e-12)


def test_hydro_unit_tau_zero_state():
    T = 9
    data = ModelData(np.arange(T), np.zeros(T))
    s = state_for(data, eta=np.zeros(T), tau=1.0, I_recon=np.zeros(0))
    assert log_lik_hydro(s, data, ModelSpec()) == pytest.approx(-T / 2 * LOG2PI, abs=1e-12)


@pytest.mark.parametrize("trend", [False, True])
def test_hydro_brute_force(rng, trend):
    data = random_data(rng)
    s = state_for(data, rng)
    I = s.I_full(data)
    total = 0.0
    for t in range(data.T):
        g = s.eta[t] + ((s.omega + s.delta * (t + 1)) if trend else 0.0)
        total += scalar_normal(I[t], g, s.tau)
    assert log_lik_hydro(s, data, ModelSpec(trend=trend)) == pytest.approx(total, abs=1e-12)


# ---------------------------------------------------------- process term


def test_process_rho_zero_iid(rng):
    data = random_data(rng)
    s = state_for(data, rng, rho=0.0, nu=1.3)
    assert log_process(s) == pytest.approx(sum(scalar_normal(e, 0, 1.3) for e in s.eta), abs=1e-12)


def test_process_hand_T3():
    data = ModelData([1, 2, 3], [np.nan] * 3)
    s = state_for(data, eta=np.array([0.5, -0.2, 0.1]), rho=0.6, nu=0.8, I_recon=np.zeros(3))
    sd0 = 0.8 / math.sqrt(1 - 0.36)
    expected = scalar_normal(0.5, 0, sd0) + scalar_normal(-0.2, 0.3, 0.8) + scalar_normal(0.1, -0.12, 0.8)
    assert log_process(s) == pytest.approx(expected, abs=1e-12)


def test_process_forward_simulation_stationary_sd():
    rho, nu = 0.7, 0.5
    truth = TrueParameters(first_year=1, instrumental_start=1, instrumental_end=4000, rho=rho, nu=nu, tau=1e-9)
    eta = simulate(ModelSpec(), truth, seed=4).eta_true
    target = nu / math.sqrt(1 - rho**2)
    # effective sample size of an AR(1) path: n (1 - rho) / (1 + rho)
    n_eff = len(eta) * (1 - rho) / (1 + rho)
    se = target / math.sqrt(2 * n_eff)
    assert abs(np.std(eta) - target) < 3 * se


def test_process_rejects_unit_root(rng):
    data = random_data(rng)
    with pytest.raises(SupportError):
        log_process(state_for(data, rng, rho=1.0))


# ----------------------------------------------------------------- prior


def test_prior_term_by_term(rng):
    data = random_data(rng)
    for trend in (False, True):
        spec = ModelSpec(trend=trend)
        s = state_for(data, rng, alpha=np.zeros(2), beta=np.zeros((2, 2)), omega=0.0, delta=0.0, rho=0.0)
        hc = lambda x, sc: math.log(2 / (math.pi * sc)) - math.log1p((x / sc) ** 2)
        expected = 2 * scalar_normal(0, 0, 2)
        expected += 4 * math.log(1 / (2 * s.lam)) + hc(s.lam, 5)
        expected += sum(hc(x, 2) for x in s.sigma) + hc(s.nu, 2) + hc(s.tau, 2) + math.log(0.5)
        if trend:
            expected += scalar_normal(0, 0, 2) + scalar_normal(0, 0, 1)
        assert log_prior(s, spec) == pytest.approx(expected, abs=1e-12)


def test_prior_laplace_at_zero(rng):
    data = random_data(rng, M=1)
    s0 = state_for(data, rng, beta=np.zeros((1, 2)), lam=0.4)
    s1 = state_for(data, rng, beta=np.array([[0.3, 0.0]]), lam=0.4)
    s1.alpha, s1.sigma, s1.nu, s1.tau = s0.alpha, s0.sigma, s0.nu, s0.tau
    # one coefficient moved from 0 to 0.3 changes the Laplace term by -0.3 / lambda
    assert log_prior(s1, ModelSpec()) - log_prior(s0, ModelSpec()) == pytest.approx(-0.3 / 0.4, abs=1e-12)


def test_prior_support_errors(rng):
    data = random_data(rng)
    with pytest.raises(SupportError, match="rho"):
        log_prior(state_for(data, rng, rho=1.5), ModelSpec())
    with pytest.raises(SupportError, match="nu"):
        log_prior(state_for(data, rng, nu=-1.0), ModelSpec())


def test_spec_validation():
    with pytest.raises(ConfigError):
        ModelSpec(alpha_sd=0)
    with pytest.raises(ConfigError):
        ModelSpec(beta_prior="horseshoe")
    spec = ModelSpec(trend=True, seed=3)
    assert ModelSpec.from_dict(spec.to_dict()) == spec
    assert {"trend", "alpha_sd", "delta_sd", "lambda_scale", "scale_halft", "seed"} <= set(spec.to_dict())


# ------------------------------------------------------------- posterior


@pytest.mark.parametrize("seed", range(5))
def test_posterior_is_sum_of_parts(seed):
    rng = np.random.default_rng(seed)
    data = random_data(rng)
    spec = ModelSpec(trend=bool(seed % 2))
    s = state_for(data, rng)
    parts = log_lik_proxy(s, data, spec) + log_lik_hydro(s, data, spec) + log_process(s, spec) + log_prior(s, spec)
    assert log_posterior(s, data, spec) == pytest.approx(parts, abs=1e-12)


def test_posterior_calibration_only_nested(rng):
    """Without reconstruction years the posterior has no latent I terms."""
    T = 6
    data = ModelData(np.arange(T), rng.normal(size=T), ("p",), np.zeros(4, int), np.arange(4), rng.normal(size=4))
    s = state_for(data, rng, I_recon=np.zeros(0))
    assert len(data.recon_idx) == 0
    I = data.I_obs
    expected = sum(scalar_normal(I[t], s.eta[t], s.tau) for t in range(T))
    assert log_lik_hydro(s, data, ModelSpec()) == pytest.approx(expected, abs=1e-12)


def test_posterior_finite_on_prior_draws():
    rng = np.random.default_rng(11)
    data = random_data(rng, T=10, M=3)
    spec = ModelSpec(trend=True)
    for _ in range(1000):
        lam = abs(5 * rng.standard_cauchy())
        s = ParameterState(
            alpha=rng.normal(0, 2, 3),
            beta=rng.laplace(0, lam, (3, 2)),
            sigma=np.abs(2 * rng.standard_cauchy(3)),
            omega=rng.normal(0, 2),
            delta=rng.normal(),
            rho=rng.uniform(-1, 1),
            nu=abs(2 * rng.standard_cauchy()),
            tau=abs(2 * rng.standard_cauchy()),
            lam=lam,
            eta=rng.normal(size=10),
            I_recon=rng.normal(size=5),
        )
        assert np.isfinite(log_posterior(s, data, spec))


# ------------------------------------------------------------ simulation


def test_simulate_deterministic():
    truth = TrueParameters(1800, 1900, 1950, proxies=[ProxyDesign("a", lag=-2)])
    a = simulate(ModelSpec(), truth, 5)
    b = simulate(ModelSpec(), truth, 5)
    assert np.array_equal(a.I_true, b.I_true) and np.array_equal(a.proxies[0].values, b.proxies[0].values)
    c = simulate(ModelSpec(), truth, 6)
    assert not np.array_equal(a.I_true, c.I_true)


def test_simulate_noise_only_limit():
    truth = TrueParameters(1, 1, 5000, rho=0.0, nu=1e-8, tau=0.7)
    I = simulate(ModelSpec(), truth, 1).I_true
    assert abs(np.std(I, ddof=1) - 0.7) < 3 * 0.7 / math.sqrt(2 * 5000)
    assert abs(np.mean(I)) < 3 * 0.7 / math.sqrt(5000)


def test_simulate_ols_recovers_linear_response():
    truth = TrueParameters(1, 1, 5000, proxies=[ProxyDesign("a", alpha=0.4, beta1=-1.2, beta2=0.0, sigma=0.6)])
    sim = simulate(ModelSpec(), truth, 2)
    rec = sim.proxies[0]
    x = sim.truth_at(rec.target_years)
    X = np.column_stack([np.ones_like(x), x])
    coef, res, *_ = np.linalg.lstsq(X, rec.values, rcond=None)
    s2 = res[0] / (len(x) - 2)
    se = np.sqrt(np.diag(s2 * np.linalg.inv(X.T @ X)))
    assert np.all(np.abs(coef - [0.4, -1.2]) < 3 * se)


def test_simulate_lagged_targets_on_grid():
    truth = TrueParameters(1800, 1900, 1950, proxies=[ProxyDesign("a", lag=3), ProxyDesign("b", lag=-4, step=5)])
    sim = simulate(ModelSpec(), truth, 0)
    for r in sim.proxies:
        assert r.target_years.min() >= 1800 and r.target_years.max() <= 1950
    assert np.all(np.diff(sim.proxies[1].years) == 5)


def test_quadratic_shrinkage_map():
    """With beta2 = 0 in truth, the penalised MAP of beta2 is nearer 0 than least squares."""
    truth = TrueParameters(1, 1, 60, proxies=[ProxyDesign("a", alpha=0.0, beta1=1.0, beta2=0.0, sigma=1.0)])
    for seed in range(5):
        sim = simulate(ModelSpec(), truth, seed)
        rec = sim.proxies[0]
        x = sim.truth_at(rec.target_years)
        y = rec.values
        X = np.column_stack([np.ones_like(x), x, x * x])
        ols = np.linalg.lstsq(X, y, rcond=None)[0]
        lam = 0.1

        def neg(b):
            r = y - X @ b
            return 0.5 * r @ r + np.abs(b[1:]).sum() / lam + 0.5 * b[0] ** 2 / 4

        mp = optimize.minimize(neg, ols, method="Powell", options={"xtol": 1e-10, "ftol": 1e-12}).x
        assert abs(mp[2]) < abs(ols[2])
