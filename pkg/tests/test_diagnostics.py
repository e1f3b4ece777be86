import numpy as np
import pytest

import oracles
from hydrorecon import diagnostics as dg
from hydrorecon.errors import DataError
from hydrorecon.posterior import PosteriorArchive


def ar1_chains(rng, m, n, phi):
    x = np.empty((m, n))
    x[:, 0] = rng.normal(size=m) / np.sqrt(1 - phi**2)
    e = rng.normal(size=(m, n))
    for t in range(1, n):
        x[:, t] = phi * x[:, t - 1] + e[:, t]
    return x


@pytest.mark.parametrize("seed,m,n", [(0, 4, 200), (1, 3, 151), (2, 2, 120), (3, 1, 300)])
def test_rhat_matches_direct_formula(seed, m, n):
    rng = np.random.default_rng(seed)
    x = ar1_chains(rng, m, n, 0.5) + rng.normal(0, 0.1, (m, 1))
    assert abs(dg.rhat(x) - oracles.rhat(x)) < 1e-6


@pytest.mark.parametrize("seed,m,n", [(0, 4, 200), (1, 3, 151), (2, 2, 120), (3, 1, 300)])
def test_ess_matches_direct_formula(seed, m, n):
    rng = np.random.default_rng(seed)
    x = ar1_chains(rng, m, n, 0.6)
    assert abs(dg.ess(x) - oracles.ess(x)) < 1e-6


def test_ties_handled_like_oracle():
    rng = np.random.default_rng(4)
    x = np.round(rng.normal(size=(3, 80)), 1)
    assert abs(dg.rhat(x) - oracles.rhat(x)) < 1e-6
    assert abs(dg.ess(x) - oracles.ess(x)) < 1e-6


def test_iid_ess_close_to_n():
    x = np.random.default_rng(5).normal(size=(3, 1000))
    assert abs(dg.ess(x) - 3000) < 0.15 * 3000


def test_ar1_ess_closed_form():
    phi = 0.9
    x = ar1_chains(np.random.default_rng(6), 3, 4000, phi)
    expected = x.size * (1 - phi) / (1 + phi)
    assert abs(dg.ess(x) - expected) < 0.25 * expected


def test_gross_non_mixing():
    rng = np.random.default_rng(7)
    x = np.vstack([rng.normal(0, 1, 1000), rng.normal(10, 1, 1000)])
    assert dg.rhat(x) > 1.5


def test_well_mixed_rhat_near_one():
    x = np.random.default_rng(8).normal(size=(4, 1000))
    assert dg.rhat(x) < 1.01


def test_scale_only_difference_caught_by_folding():
    rng = np.random.default_rng(9)
    x = np.vstack([rng.normal(0, 1, 1000), rng.normal(0, 4, 1000)])
    assert dg.rhat(x) >= 1.1


def test_degenerate_constant():
    x = np.full((3, 50), 2.5)
    assert dg.is_degenerate(x)
    assert dg.rhat(x) == 1.0
    assert dg.ess(x) == x.size
    arch = PosteriorArchive.build(x[..., None], ["c"], [])
    assert arch.degenerate[0] and arch.flagged == []


def test_input_errors():
    with pytest.raises(DataError):
        dg.rhat(np.zeros((2, 3)))
    with pytest.raises(DataError):
        dg.ess(np.array([[0.0, 1.0, np.nan, 2.0, 3.0]]))
    with pytest.raises(DataError):
        dg.rhat(np.zeros((2, 3, 4)))


def test_gate_boundaries_exact():
    N = 3000
    r = np.array([1.0999999999, 1.1, 1.0, 1.0, 1.2])
    e = np.array([3000.0, 3000.0, 300.0, 299.9999999, 299.0])
    assert dg.convergence_flags(r, e, N).tolist() == [False, True, False, True, True]


def test_gate_flags_non_finite():
    assert dg.convergence_flags([np.nan, 1.0], [1000.0, np.inf], 100).tolist() == [True, True]


def test_archive_flags_non_mixing_parameter():
    rng = np.random.default_rng(10)
    good = rng.normal(size=(2, 500))
    bad = np.vstack([rng.normal(0, 1, 500), rng.normal(10, 1, 500)])
    arch = PosteriorArchive.build(np.stack([good, bad], axis=-1), ["good", "bad"], [])
    assert arch.flagged == ["bad"] and not arch.converged
