import logging
import math

import numpy as np
import pytest

import oracles
from hydrorecon.errors import ConfigError, DataError, NumericalError
from hydrorecon.model import ModelData, ModelSpec
from hydrorecon.sampler import (
    McmcConfig,
    _Chain,
    chain_seeds,
    degenerate_proxies,
    initial_state,
    parameter_names,
    run_chains,
)

QUICK = McmcConfig(n_iter=600, n_burn=300, thin=3, n_chains=2, seed=5)


# ------------------------------------------------------------ config


def test_default_protocol_constants():
    cfg = McmcConfig()
    assert (cfg.n_iter, cfg.n_burn, cfg.thin, cfg.n_chains) == (15000, 5000, 10, 3)
    assert cfg.draws_per_chain == 1000 and cfg.total_draws == 3000
    assert cfg.adapt_iters == cfg.n_burn and cfg.target_accept == 0.44


@pytest.mark.parametrize(
    "kw",
    [
        dict(n_iter=100, n_burn=100),
        dict(n_iter=100, n_burn=150),
        dict(thin=0),
        dict(n_chains=0),
        dict(n_iter=1000, n_burn=900, thin=2),
        dict(n_adapt=6000),
        dict(target_accept=1.0),
    ],
)
def test_config_invariants(kw):
    with pytest.raises(ConfigError):
        McmcConfig(**kw)


def test_config_round_trip():
    cfg = McmcConfig(n_iter=400, n_burn=100, thin=3, n_chains=2, seed=9)
    assert McmcConfig.from_dict(cfg.to_dict()) == cfg


def test_chain_seeds_documented_split():
    a = [np.random.default_rng(s).integers(0, 2**32, 3) for s in chain_seeds(4, 3)]
    b = [np.random.default_rng(s).integers(0, 2**32, 3) for s in np.random.SeedSequence(4).spawn(3)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


# ------------------------------------------------------------- contract


def test_small_run_draw_count(small_data):
    _, _, data = small_data
    arch = run_chains(data, ModelSpec(), McmcConfig(n_iter=200, n_burn=100, thin=1, n_chains=1, seed=0))
    assert arch.samples.shape == (1, 100, len(parameter_names(data, ModelSpec())))
    assert arch.total_draws == 100


def test_parameter_order(small_data):
    _, _, data = small_data
    names = parameter_names(data, ModelSpec(trend=True))
    assert names[:2] == ["alpha[p0]", "alpha[p1]"]
    assert names.index("omega") < names.index("delta") < names.index("rho") < names.index("nu") < names.index("tau")
    assert names.index("lambda") < names.index(f"I[{data.recon_years[0]}]")
    assert [n for n in names if n.startswith("I[")] == [f"I[{y}]" for y in data.recon_years]
    linear = parameter_names(data, ModelSpec(quadratic=False, beta_prior="normal"))
    assert not any(n.startswith("beta2") for n in linear) and "lambda" not in linear


def test_reproducible_and_seed_sensitive(small_data):
    _, _, data = small_data
    a = run_chains(data, ModelSpec(), QUICK)
    b = run_chains(data, ModelSpec(), QUICK)
    assert np.array_equal(a.samples, b.samples)
    c = run_chains(data, ModelSpec(), McmcConfig(**{**QUICK.to_dict(), "seed": 6}))
    assert not np.array_equal(a.samples, c.samples)
    assert a.names == c.names


def test_chains_independent_of_chain_count(small_data):
    _, _, data = small_data
    two = run_chains(data, ModelSpec(), QUICK)
    three = run_chains(data, ModelSpec(), McmcConfig(**{**QUICK.to_dict(), "n_chains": 3}))
    assert np.array_equal(two.samples, three.samples[:2])


def test_parallel_matches_serial(small_data):
    _, _, data = small_data
    serial = run_chains(data, ModelSpec(), QUICK)
    parallel = run_chains(data, ModelSpec(), McmcConfig(**{**QUICK.to_dict(), "n_jobs": 2}))
    assert np.array_equal(serial.samples, parallel.samples)


def test_draws_respect_support(small_data):
    _, _, data = small_data
    arch = run_chains(data, ModelSpec(trend=True), QUICK)
    assert np.all(np.isfinite(arch.samples))
    for n in ["nu", "tau", "lambda", "sigma[p0]", "sigma[p1]"]:
        assert np.all(arch.pooled(n) > 0)
    assert np.all(np.abs(arch.pooled("rho")) < 1)


def test_overdispersed_starts(small_data):
    _, _, data = small_data
    spreads = []
    for c in range(3):
        draws = [initial_state(data, ModelSpec(), np.random.default_rng(s), c).alpha[0] for s in range(400)]
        spreads.append(np.std(draws))
    assert spreads[0] < spreads[1] < spreads[2]
    s = initial_state(data, ModelSpec(), np.random.default_rng(0))
    assert np.all(s.eta == 0) and np.allclose(s.I_recon, 0.0)


def test_acceptance_logged_and_adaptation_near_target(small_data):
    _, _, data = small_data
    arch = run_chains(data, ModelSpec(), McmcConfig(n_iter=4000, n_burn=2000, thin=10, n_chains=1, seed=1))
    acc = arch.acceptance[0]
    assert 0.3 < acc["lambda"] < 0.6
    assert 0.3 < acc["sigma[p0]"] < 0.6
    assert 0.12 < acc["variances"] < 0.4


# --------------------------------------------------------------- errors


def test_errors(small_data):
    _, _, data = small_data
    with pytest.raises(ConfigError, match="unknown sampler block"):
        run_chains(data, ModelSpec(), QUICK, fixed=["bogus"])
    with pytest.raises(ConfigError, match="init"):
        run_chains(data, ModelSpec(), QUICK, fixed=["sigma"])
    with pytest.raises(DataError, match="empty data"):
        run_chains(ModelData([1, 2, 3], [0.0, 1.0, np.nan]), ModelSpec(), QUICK)


def test_numerical_error_names_block_and_iteration(small_data):
    _, _, data = small_data
    rng = np.random.default_rng(0)
    ch = _Chain(data, ModelSpec(), initial_state(data, ModelSpec(), rng), rng, frozenset())
    ch.iteration = 17
    with pytest.raises(NumericalError, match=r"'eta' at iteration 17"):
        ch._check("eta", np.array([0.0, np.inf]))


def test_degenerate_proxy_warned(caplog):
    data = ModelData([1, 2, 3, 4], [1.0, 1.0, np.nan, 0.0], ("flat", "ok"), [0, 0, 0, 1, 1], [0, 1, 2, 1, 3],
                     [0.1, 0.2, 0.3, 0.4, 0.5])
    assert degenerate_proxies(data) == ["flat"]
    with caplog.at_level(logging.WARNING, logger="hydrorecon.sampler"):
        run_chains(data, ModelSpec(), McmcConfig(n_iter=200, n_burn=100, thin=1, n_chains=1))
    assert "flat" in caplog.text


# ------------------------------------------------------------- oracles


def test_prior_only_alpha_matches_prior():
    data = ModelData(np.arange(5), np.full(5, np.nan), ("p0",))
    arch = run_chains(data, ModelSpec(), McmcConfig(n_iter=6000, n_burn=1000, thin=1, n_chains=1, seed=3))
    x = arch.pooled("alpha[p0]")
    n = arch.ess[arch.names.index("alpha[p0]")]
    assert abs(x.mean()) < 3 * 2.0 / math.sqrt(n)
    assert abs(x.std() - 2.0) < 3 * 2.0 / math.sqrt(2 * n)


def test_eta_block_matches_gaussian_smoother():
    """With I and the variances fixed and no proxy data, eta draws are exact."""
    r = np.array([0.4, -0.3, 1.1, 0.2, -0.8])
    rho, nu, tau = 0.6, 0.8, 0.5
    data = ModelData(np.arange(1990, 1995), r, ("p0",))
    init = initial_state(data, ModelSpec(), np.random.default_rng(0))
    init.rho, init.nu, init.tau = rho, nu, tau
    cfg = McmcConfig(n_iter=20100, n_burn=100, thin=1, n_chains=1, seed=8)
    arch = run_chains(data, ModelSpec(), cfg, init=init, fixed=["rho", "nu", "tau", "coef", "psi", "sigma", "lambda"],
                      keep_eta=True)
    eta = arch.eta[0]
    assert np.all(arch.pooled("rho") == rho) and np.all(arch.pooled("tau") == tau)
    m, S = oracles.eta_smoother(r, rho, nu, tau)
    N = len(eta)
    assert np.all(np.abs(eta.mean(0) - m) < 3 * np.sqrt(np.diag(S) / N))
    C = np.cov(eta.T)
    se = np.sqrt((np.outer(np.diag(S), np.diag(S)) + S**2) / N)
    assert np.all(np.abs(C - S) < 4 * se)


def test_linear_submodel_conjugate():
    rng = np.random.default_rng(21)
    T = 40
    I = rng.normal(size=T)
    y = 0.3 + 0.9 * I + rng.normal(0, 0.7, T)
    data = ModelData(np.arange(T), I, ("p0",), np.zeros(T, int), np.arange(T), y)
    spec = ModelSpec(quadratic=False, beta_prior="normal", beta_sd=1.0)
    init = initial_state(data, spec, rng)
    init.sigma[:] = 0.7
    arch = run_chains(data, spec, McmcConfig(n_iter=4100, n_burn=100, thin=1, n_chains=1, seed=2),
                      init=init, fixed=["sigma"])
    mean, cov = oracles.conjugate_regression(np.column_stack([np.ones(T), I]), y, 0.7, [2.0, 1.0])
    draws = np.column_stack([arch.pooled("alpha[p0]"), arch.pooled("beta1[p0]")])
    se = np.sqrt(np.diag(cov) / len(draws))
    assert np.all(np.abs(draws.mean(0) - mean) < 3 * se)
    assert np.allclose(draws.std(0), np.sqrt(np.diag(cov)), rtol=0.05)
