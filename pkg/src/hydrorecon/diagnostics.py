"""Convergence diagnostics: rank-normalised split R-hat and bulk ESS.

Both take a ``(n_chains, n_draws)`` array. Each chain is split in half (the
middle draw is dropped when ``n_draws`` is odd), the pooled draws are
replaced by normal scores of their ranks, ``Phi^-1((r - 3/8) / (S + 1/4))``,
and the classical statistic is computed on the result. R-hat is the larger of
the bulk value and the value for draws folded about the median.
"""
from __future__ import annotations

import numpy as np
from scipy import stats

from .errors import DataError

RHAT_MAX = 1.1
ESS_MIN_FRACTION = 0.10


def _as_chains(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise DataError("diagnostics expect a (chains, draws) array")
    if x.shape[1] < 4:
        raise DataError("diagnostics need at least 4 draws per chain")
    if not np.all(np.isfinite(x)):
        raise DataError("diagnostics need finite draws")
    return x


def is_degenerate(x) -> bool:
    """True when every draw of every chain is the same value."""
    x = np.asarray(x, dtype=float)
    return bool(x.size and np.all(x == x.flat[0]))


def split_chains(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)


def rank_normalize(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    r = stats.rankdata(x, method="average").reshape(x.shape)
    return stats.norm.ppf((r - 0.375) / (x.size + 0.25))


def _rhat_classic(x) -> float:
    n = x.shape[1]
    W = np.mean(np.var(x, axis=1, ddof=1))
    B = n * np.var(np.mean(x, axis=1), ddof=1)
    if W == 0:
        return np.inf
    var_hat = (n - 1) / n * W + B / n
    return float(np.sqrt(var_hat / W))


def rhat(x) -> float:
    """Rank-normalised split R-hat; 1.0 for a degenerate (constant) parameter."""
    x = _as_chains(x)
    if is_degenerate(x):
        return 1.0
    s = split_chains(x)
    bulk = _rhat_classic(rank_normalize(s))
    folded = np.abs(x - np.median(x))
    tail = 1.0 if is_degenerate(folded) else _rhat_classic(rank_normalize(split_chains(folded)))
    return max(bulk, tail)


def autocovariance(x) -> np.ndarray:
    """Biased autocovariance of a 1-d series, all lags, via FFT."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x - x.mean(), n=m)
    return np.fft.irfft(f * np.conjugate(f), n=m)[:n] / n


def ess_from_chains(x) -> float:
    """Multi-chain ESS with Geyer's initial monotone sequence (no rank step)."""
    m, n = x.shape
    acov = np.array([autocovariance(c) for c in x])
    W = np.mean(acov[:, 0]) * n / (n - 1)
    var_plus = W * (n - 1) / n
    if m > 1:
        var_plus += np.var(np.mean(x, axis=1), ddof=1)
    if var_plus == 0:
        return np.nan
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    n_pairs = n // 2
    pairs = rho[: 2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    neg = np.flatnonzero(pairs < 0)
    if neg.size:
        pairs = pairs[: neg[0]]
    pairs = np.minimum.accumulate(pairs)
    tau = -1.0 + 2.0 * pairs.sum()
    return float(m * n / tau)


def ess(x) -> float:
    """Bulk effective sample size (rank-normalised split chains)."""
    x = _as_chains(x)
    if is_degenerate(x):
        return float(x.size)
    return ess_from_chains(rank_normalize(split_chains(x)))


def convergence_flags(rhat_values, ess_values, n_total: int, degenerate=None,
                      rhat_max: float = RHAT_MAX, ess_fraction: float = ESS_MIN_FRACTION) -> np.ndarray:
    """Boolean mask of parameters failing R-hat < rhat_max and ESS >= fraction * n_total."""
    r = np.asarray(rhat_values, dtype=float)
    e = np.asarray(ess_values, dtype=float)
    bad = (r >= rhat_max) | (e < ess_fraction * n_total) | ~np.isfinite(r) | ~np.isfinite(e)
    if degenerate is not None:
        bad &= ~np.asarray(degenerate, dtype=bool)
    return bad
