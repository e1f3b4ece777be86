"""Metropolis-within-Gibbs sampler for the reconstruction model.

One sweep updates, in order:

a. proxy coefficients (alpha_j, beta_j) -- conjugate Gaussian draw given the
   normal-mixture variances psi of the Laplace prior;
b. psi -- inverse-Gaussian draw of 1/psi (Bayesian lasso augmentation);
c. sigma_j -- random-walk Metropolis on log scale, vectorised over proxies;
d. lambda -- random-walk Metropolis on log scale, given psi;
e. (omega, delta) -- conjugate bivariate Gaussian draw (trend model only);
f. (nu, tau, rho) -- two adaptive Metropolis moves, each with a proposal
   covariance learned during burn-in: one along the variance ridge the data
   identify (coordinates described at ``_Chain._to_unconstrained``), one on
   (log nu, log tau, logit of (rho + 1) / 2). When the latent index has
   reconstruction years, each move also proposes a fresh (eta, I) from the
   Gaussian approximation below under the new variances and accepts both
   together; otherwise eta is integrated out;
g. eta -- joint Gaussian draw from its tridiagonal-precision conditional;
h. (eta, I) jointly -- Metropolis-Hastings with an independence-style
   proposal: the proxy likelihood is expanded to second order around the
   current I, which makes the joint conditional Gaussian with banded
   precision;
i. latent I_t -- exact Gaussian draw for years with no proxy data,
   per-site random-walk Metropolis otherwise.

Random-walk step sizes adapt by a Robbins-Monro rule on the log step
(gain ``n ** -0.6``, target acceptance 0.44; 0.234 for the block in f)
during burn-in and are frozen afterwards.

Chain ``c`` uses the generator seeded by
``numpy.random.SeedSequence(seed).spawn(n_chains)[c]``.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable

import numpy as np
from scipy import linalg
from scipy.linalg import lapack

from .errors import ConfigError, DataError, NumericalError
from .model import ModelData, ModelSpec, ParameterState, _half_cauchy_logpdf

log = logging.getLogger(__name__)

BLOCKS = ("coef", "psi", "sigma", "nu", "tau", "lambda", "trend", "rho", "eta", "I")
_INIT_STEP = {"sigma": 0.3, "lambda": 0.5, "I": 0.5}
AM_TARGET = 0.234
AM_WARMUP = 50
NEWTON_STEPS = 1


@dataclass(frozen=True)
class McmcConfig:
    n_iter: int = 15000
    n_burn: int = 5000
    thin: int = 10
    n_chains: int = 3
    seed: int = 0
    n_adapt: int | None = None
    target_accept: float = 0.44
    min_draws: int = 100
    n_jobs: int = 1

    def __post_init__(self):
        for name in ("n_iter", "n_burn", "thin", "n_chains", "min_draws", "n_jobs"):
            v = getattr(self, name)
            if int(v) != v:
                raise ConfigError(f"McmcConfig.{name} must be an integer")
        if self.n_burn < 0 or self.n_burn >= self.n_iter:
            raise ConfigError(f"need 0 <= n_burn < n_iter (got n_burn={self.n_burn}, n_iter={self.n_iter})")
        if self.thin < 1:
            raise ConfigError("thin must be >= 1")
        if self.n_chains < 1:
            raise ConfigError("n_chains must be >= 1")
        if self.draws_per_chain < self.min_draws:
            raise ConfigError(
                f"(n_iter - n_burn) / thin = {self.draws_per_chain} retained draws per chain, need >= {self.min_draws}"
            )
        if not 0 < self.target_accept < 1:
            raise ConfigError("target_accept must lie in (0, 1)")
        if self.n_adapt is not None and not 0 <= self.n_adapt <= self.n_burn:
            raise ConfigError("n_adapt must lie in [0, n_burn]; adaptation stops at burn-in")

    @property
    def draws_per_chain(self) -> int:
        return (self.n_iter - self.n_burn) // self.thin

    @property
    def total_draws(self) -> int:
        return self.draws_per_chain * self.n_chains

    @property
    def adapt_iters(self) -> int:
        return self.n_burn if self.n_adapt is None else self.n_adapt

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> McmcConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def chain_seeds(seed: int, n_chains: int) -> list[np.random.SeedSequence]:
    """Per-chain seed sequences derived from the master seed."""
    return np.random.SeedSequence(seed).spawn(n_chains)


def parameter_names(data: ModelData, spec: ModelSpec) -> list[str]:
    """Archive column order.

    ``alpha[id]`` for every proxy, then ``beta1[id]``, ``beta2[id]`` (quadratic
    model only) and ``sigma[id]``; then ``omega``, ``delta`` (trend model
    only), ``rho``, ``nu``, ``tau``, ``lambda`` (Laplace prior only); then
    ``I[year]`` for every reconstruction year in ascending order.
    """
    ids = data.proxy_ids
    names = [f"alpha[{i}]" for i in ids] + [f"beta1[{i}]" for i in ids]
    if spec.quadratic:
        names += [f"beta2[{i}]" for i in ids]
    names += [f"sigma[{i}]" for i in ids]
    if spec.trend:
        names += ["omega", "delta"]
    names += ["rho", "nu", "tau"]
    if spec.lasso:
        names.append("lambda")
    names += [f"I[{y}]" for y in data.recon_years]
    return names


def flatten_state(state: ParameterState, spec: ModelSpec) -> np.ndarray:
    parts = [state.alpha, state.beta[:, 0]]
    if spec.quadratic:
        parts.append(state.beta[:, 1])
    parts.append(state.sigma)
    scalars = ([state.omega, state.delta] if spec.trend else []) + [state.rho, state.nu, state.tau]
    if spec.lasso:
        scalars.append(state.lam)
    parts.append(np.asarray(scalars, dtype=float))
    parts.append(state.I_recon)
    return np.concatenate(parts)


def initial_state(data: ModelData, spec: ModelSpec, rng: np.random.Generator, chain: int = 0) -> ParameterState:
    """Over-dispersed starting point; dispersion grows with the chain number."""
    d = 1.0 + chain / 2.0
    M, T = data.M, data.T
    alpha = rng.normal(0.0, 0.5 * d, size=M)
    beta = np.column_stack([rng.normal(0.0, 0.5 * d, size=M), rng.normal(0.0, 0.1 * d, size=M)])
    if not spec.quadratic:
        beta[:, 1] = 0.0
    sigma = 0.5 * np.exp(rng.normal(0.0, 0.3 * d, size=M))
    nu, tau = 0.5 * np.exp(rng.normal(0.0, 0.3 * d, size=2))
    lam = float(np.exp(rng.normal(0.0, 0.5 * d)))
    rho = float(np.tanh(rng.normal(0.3, 0.3 * d)))
    omega = float(rng.normal(0.0, 0.5 * d)) if spec.trend else 0.0
    delta = float(rng.normal(0.0, 0.1 * d / T)) if spec.trend else 0.0
    eta = np.zeros(T)
    g = omega + delta * data.time_index + eta
    psi = np.full((M, 2), 2.0 * lam * lam) if spec.lasso else np.full((M, 2), spec.beta_sd**2)
    return ParameterState(
        alpha=alpha, beta=beta, sigma=sigma, omega=omega, delta=delta, rho=rho, nu=float(nu), tau=float(tau),
        lam=lam, eta=eta, I_recon=g[data.recon_idx].copy(), psi=psi,
    )


def _chol_banded(ab):
    """Upper banded Cholesky factor (LAPACK storage), or None if not positive definite."""
    U, info = lapack.dpbtrf(ab, lower=0, overwrite_ab=1)
    return U if info == 0 else None


def _cho_solve_banded(U, b):
    x, info = lapack.dpbtrs(U, b, lower=0)
    if info != 0:
        raise NumericalError(f"banded solve failed (info={info})")
    return x


def _tri_solve_banded(U, z):
    """Solve U x = z for the upper banded factor U."""
    x, info = lapack.dtbtrs(U, z, uplo="U")
    if info != 0:
        raise NumericalError(f"triangular solve failed (info={info})")
    return x


class _AdaptiveMove:
    """Running mean/covariance and global scale of one adaptive Metropolis move."""

    def __init__(self, u0, kind):
        self.mean = np.array(u0, dtype=float)
        self.cov = np.diag([0.1**2, 0.1**2, 0.5**2] if kind == "ridge" else [0.1**2, 0.1**2, 0.2**2])
        self.n = 0
        self.log_scale = math.log(2.38 / math.sqrt(3.0))

    def adapt(self, u, accepted, iteration):
        self.log_scale += (iteration + 1) ** -0.6 * (float(accepted) - AM_TARGET)
        self.n += 1
        d = u - self.mean
        self.mean += d / self.n
        if self.n > AM_WARMUP:
            self.cov += (np.outer(d, u - self.mean) - self.cov) / self.n


class _Chain:
    """Mutable sampler state for one chain."""

    def __init__(self, data: ModelData, spec: ModelSpec, state: ParameterState, rng, fixed: frozenset):
        self.data, self.spec, self.rng, self.fixed = data, spec, rng, fixed
        self.s = state.copy()
        if self.s.psi is None:
            self.s.psi = np.full((data.M, 2), 2.0 * self.s.lam**2 if spec.lasso else spec.beta_sd**2)
        if not spec.lasso:
            self.s.psi[:] = spec.beta_sd**2
        if not spec.quadratic:
            self.s.beta[:, 1] = 0.0
        self.s.check(data)

        self.M, self.T = data.M, data.T
        self.K = spec.n_beta + 1
        self.t = data.time_index
        self.recon_idx = data.recon_idx
        self.I = self.s.I_full(data)

        self.obs_proxy, self.obs_t, self.obs_y = data.obs_proxy, data.obs_t, data.obs_y
        self.n_obs = np.bincount(self.obs_proxy, minlength=self.M).astype(float)
        if np.any(self.n_obs == 0):
            log.debug("proxies without observations are sampled from their prior")

        R = len(self.recon_idx)
        site_of = np.full(self.T, -1, dtype=np.int64)
        site_of[self.recon_idx] = np.arange(R)
        rec = site_of[self.obs_t] >= 0
        self.rec_site = site_of[self.obs_t][rec]
        self.rec_proxy = self.obs_proxy[rec]
        self.rec_y = self.obs_y[rec]
        has_obs = np.zeros(R, dtype=bool)
        has_obs[self.rec_site] = True
        self.R = R
        self.mh_sites = np.flatnonzero(has_obs)
        self.free_sites = np.flatnonzero(~has_obs)

        self.log_step = {k: math.log(v) for k, v in _INIT_STEP.items() if k not in ("sigma", "I")}
        self.log_step_sigma = np.full(self.M, math.log(_INIT_STEP["sigma"]))
        self.log_step_I = np.full(R, math.log(_INIT_STEP["I"]))
        self.acc = {k: 0.0 for k in ("variances", "variances_plain", "lambda", "latent")}
        is_rec = np.zeros(self.T, dtype=bool)
        is_rec[self.recon_idx] = True
        self.calib_idx = np.flatnonzero(~is_rec)
        # interleaved positions: eta_t then (reconstruction years only) I_t
        self.pos_eta = np.arange(self.T) + np.concatenate([[0], np.cumsum(is_rec)[:-1]])
        self.pos_I = self.pos_eta[self.recon_idx] + 1
        self.interior = np.ones(self.T)
        self.interior[[0, -1]] = 0.0
        gap = np.diff(self.pos_eta)
        self.eta_gap1 = self.pos_eta[1:][gap == 1]
        self.eta_gap2 = self.pos_eta[1:][gap == 2]
        # calibration values of I with zeros in reconstruction years
        self.I_calib0 = np.where(is_rec, 0.0, self.I)
        exact = not spec.quadratic or len(self.rec_y) == 0
        self.newton_steps = 0 if exact else NEWTON_STEPS
        self.var_free = np.array([i for i, b in enumerate(("nu", "tau", "rho")) if b not in fixed], dtype=np.int64)
        # one adaptive move per coordinate system, applied in turn each sweep
        kinds = ("ridge", "plain") if self.var_free.size == 3 else ("plain",)
        self.am = {kind: _AdaptiveMove(self._to_unconstrained(kind), kind) for kind in kinds}
        self.acc_sigma = np.zeros(self.M)
        self.acc_I = np.zeros(R)
        self.iteration = 0
        self.adapting = True

    # -- helpers

    def _check(self, block: str, *arrays) -> None:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise NumericalError(f"non-finite value in block {block!r} at iteration {self.iteration}")

    def _adapt(self, accepted):
        return (self.iteration + 1) ** -0.6 * (np.asarray(accepted, dtype=float) - self.target)

    def _scalar_mh(self, name: str, x: float, logp, transform="log"):
        """Random-walk MH on a scalar; ``logp`` is on the transformed scale."""
        step = math.exp(self.log_step[name])
        cur = logp(x)
        if transform == "log":
            prop = x * math.exp(step * self.rng.standard_normal())
        else:
            z = math.log((1 + x) / (1 - x)) + step * self.rng.standard_normal()
            prop = math.tanh(z / 2.0)
            if not abs(prop) < 1:
                prop = x
        new = logp(prop)
        ok = bool(math.log(self.rng.uniform()) < new - cur) if np.isfinite(new) else False
        if self.adapting:
            self.log_step[name] += float(self._adapt(ok))
        self.acc[name] += ok
        return prop if ok else x

    def _gamma(self):
        s = self.s
        if self.spec.trend:
            return s.omega + s.delta * self.t + s.eta
        return s.eta

    def _features(self, I):
        if self.K == 3:
            return np.column_stack([np.ones_like(I), I, I * I])
        return np.column_stack([np.ones_like(I), I])

    # -- blocks

    def update_coef(self):
        s, M, K = self.s, self.M, self.K
        F = self._features(self.I[self.obs_t])
        XtX = np.empty((M, K, K))
        Xty = np.empty((M, K))
        for a in range(K):
            Xty[:, a] = np.bincount(self.obs_proxy, weights=F[:, a] * self.obs_y, minlength=M)
            for b in range(a, K):
                XtX[:, a, b] = XtX[:, b, a] = np.bincount(self.obs_proxy, weights=F[:, a] * F[:, b], minlength=M)
        w = 1.0 / s.sigma**2
        P = XtX * w[:, None, None]
        prior_prec = np.column_stack([np.full(M, 1.0 / self.spec.alpha_sd**2), 1.0 / s.psi[:, : K - 1]])
        idx = np.arange(K)
        P[:, idx, idx] += prior_prec
        L = np.linalg.cholesky(P)
        mean = np.linalg.solve(P, (Xty * w[:, None])[..., None])[..., 0]
        z = self.rng.standard_normal((M, K))
        coef = mean + np.linalg.solve(np.swapaxes(L, 1, 2), z[..., None])[..., 0]
        self._check("coef", coef)
        s.alpha = coef[:, 0]
        s.beta[:, : K - 1] = coef[:, 1:]

    def update_psi(self):
        s = self.s
        nb = self.spec.n_beta
        b = np.maximum(np.abs(s.beta[:, :nb]), 1e-12)
        inv = self.rng.wald(1.0 / (s.lam * b), 1.0 / s.lam**2)
        psi = 1.0 / inv
        self._check("psi", psi)
        s.psi[:, :nb] = psi

    def update_sigma(self):
        s = self.s
        if not len(self.obs_y):
            # no likelihood: exact half-Cauchy draws
            s.sigma = np.abs(self.spec.scale_halft * self.rng.standard_cauchy(self.M))
            return
        I = self.I[self.obs_t]
        r = self.obs_y - (s.alpha[self.obs_proxy] + s.beta[self.obs_proxy, 0] * I + s.beta[self.obs_proxy, 1] * I * I)
        ssr = np.bincount(self.obs_proxy, weights=r * r, minlength=self.M)
        scale = self.spec.scale_halft

        def logp(sig):
            return -self.n_obs * np.log(sig) - ssr / (2 * sig * sig) + _half_cauchy_logpdf(sig, scale) + np.log(sig)

        step = np.exp(self.log_step_sigma)
        prop = s.sigma * np.exp(step * self.rng.standard_normal(self.M))
        ok = np.log(self.rng.uniform(size=self.M)) < logp(prop) - logp(s.sigma)
        if self.adapting:
            self.log_step_sigma += self._adapt(ok)
        self.acc_sigma += ok
        s.sigma = np.where(ok, prop, s.sigma)
        self._check("sigma", s.sigma)

    def _residual(self):
        s = self.s
        if self.spec.trend:
            return self.I - (s.omega + s.delta * self.t)
        return self.I

    def _trend_vec(self):
        s = self.s
        return (s.omega + s.delta * self.t) if self.spec.trend else np.zeros(self.T)

    def _precision_banded(self, rho, nu, tau):
        """Upper-banded precision of eta given I (eta only, bandwidth 1)."""
        T = self.T
        inv_nu2, inv_tau2 = 1.0 / (nu * nu), 1.0 / (tau * tau)
        ab = np.zeros((2, T))
        if T == 1:
            ab[1, 0] = (1.0 - rho * rho) * inv_nu2 + inv_tau2
        else:
            ab[1, :] = (1.0 + rho * rho) * inv_nu2 + inv_tau2
            ab[1, 0] = ab[1, -1] = inv_nu2 + inv_tau2
            ab[0, 1:] = -rho * inv_nu2
        return ab

    def _ar_logpdf(self, eta, rho, nu):
        q = (1.0 - rho * rho) * eta[0] ** 2
        if self.T > 1:
            d = eta[1:] - rho * eta[:-1]
            q += float(d @ d)
        return 0.5 * math.log(1.0 - rho * rho) - self.T * math.log(nu) - 0.5 * q / (nu * nu)

    def _marginal(self, rho, nu, tau, r):
        """log p(r | rho, nu, tau) with eta integrated out (up to a constant).

        Uses p(r) = p(r | m) p(m) / p(m | r) at the conditional mean m of eta.
        """
        U = _chol_banded(self._precision_banded(rho, nu, tau))
        if U is None:
            return -np.inf
        m = _cho_solve_banded(U, r / (tau * tau))
        e = r - m
        ll = -self.T * math.log(tau) - 0.5 * float(e @ e) / (tau * tau)
        return ll + self._ar_logpdf(m, rho, nu) - float(np.sum(np.log(U[1])))

    def _joint_gaussian(self, I_lin, rho, nu, tau):
        """Banded Gaussian approximation of p(eta, I_recon | rest).

        Variables are interleaved in time order (eta_t, then I_t for
        reconstruction years), which gives bandwidth 2. The proxy likelihood
        is replaced by its second-order expansion around ``I_lin`` (curvature
        clipped at zero per year); the approximation is exact when the
        response is linear.
        """
        s, R = self.s, self.R
        inv_nu2, inv_tau2 = 1.0 / (nu * nu), 1.0 / (tau * tau)
        pe, pi = self.pos_eta, self.pos_I
        ab = np.zeros((3, self.T + R))
        sup2, sup1, diag = ab  # P[i-2, i], P[i-1, i] and P[i, i], stored at column i
        b = np.zeros(self.T + R)

        if self.T == 1:
            diag[pe] = (1.0 - rho * rho) * inv_nu2 + inv_tau2
        else:
            diag[pe] = (1.0 + rho * rho * self.interior) * inv_nu2 + inv_tau2
            sup1[self.eta_gap1] = -rho * inv_nu2
            sup2[self.eta_gap2] = -rho * inv_nu2
        diag[pi] = inv_tau2
        sup1[pi] = -inv_tau2

        b[pe] = self.I_calib0 * inv_tau2
        if self.spec.trend:
            c = self._trend_vec()
            b[pe] -= c * inv_tau2
            b[pi] = c[self.recon_idx] * inv_tau2

        if len(self.rec_y):
            x0 = I_lin[self.rec_site]
            b1, b2 = s.beta[self.rec_proxy, 0], s.beta[self.rec_proxy, 1]
            r0 = self.rec_y - (s.alpha[self.rec_proxy] + b1 * x0 + b2 * x0 * x0)
            J = b1 + 2.0 * b2 * x0
            w = 1.0 / s.sigma[self.rec_proxy] ** 2
            grad = np.bincount(self.rec_site, weights=J * r0 * w, minlength=R)
            curv = np.maximum(np.bincount(self.rec_site, weights=(J * J - 2.0 * b2 * r0) * w, minlength=R), 0.0)
            diag[pi] += curv
            b[pi] += grad + curv * I_lin

        U = _chol_banded(ab)
        if U is None:
            # numerically singular at extreme variances; callers reject the move
            return None
        mean = _cho_solve_banded(U, b)
        if not np.all(np.isfinite(mean)):
            return None
        return U, mean

    @staticmethod
    def _gauss_logq(U, mean, x):
        v = x - mean
        w = U[2] * v
        w[:-1] += U[1, 1:] * v[1:]
        w[:-2] += U[0, 2:] * v[2:]
        return float(np.sum(np.log(U[2]))) - 0.5 * float(w @ w)

    def _latent_logpost(self, eta, I_rec, rho, nu, tau):
        """log p(eta, I | rho, nu, tau) + log p(Y_recon | I_recon), up to a constant."""
        s = self.s
        out = self._ar_logpdf(eta, rho, nu)
        I = self.I.copy()
        I[self.recon_idx] = I_rec
        e = I - eta - self._trend_vec()
        out += -self.T * math.log(tau) - 0.5 * float(e @ e) / (tau * tau)
        if len(self.rec_y):
            x = I_rec[self.rec_site]
            r = self.rec_y - (s.alpha[self.rec_proxy] + s.beta[self.rec_proxy, 0] * x + s.beta[self.rec_proxy, 1] * x * x)
            out -= 0.5 * float(np.sum(r * r / s.sigma[self.rec_proxy] ** 2))
        return out

    def _pack(self, eta, I_rec):
        x = np.empty(self.T + self.R)
        x[self.pos_eta], x[self.pos_I] = eta, I_rec
        return x

    def _approximation(self, I_lin, phi):
        """Gaussian approximation expanded near the conditional mode.

        Starting from ``I_lin``, a fixed number of Newton steps moves the
        expansion point towards the mode; the result is a deterministic
        function of the start, so forward and reverse proposal densities stay
        well defined. No steps are needed when the expansion is exact.
        """
        for _ in range(self.newton_steps):
            g = self._joint_gaussian(I_lin, *phi)
            if g is None:
                return None
            I_lin = g[1][self.pos_I]
        return self._joint_gaussian(I_lin, *phi)

    def _latent_proposal(self, I_lin, phi):
        """Draw (eta, I_recon) from the Gaussian approximation; returns the draw and its log q.

        Returns None when the approximation cannot be factorised.
        """
        g = self._approximation(I_lin, phi)
        if g is None:
            return None
        U, mean = g
        z = self.rng.standard_normal(self.T + self.R)
        x = mean + _tri_solve_banded(U, z)
        if not np.all(np.isfinite(x)):
            return None
        return x[self.pos_eta], x[self.pos_I], float(np.sum(np.log(U[2]))) - 0.5 * float(z @ z)

    def _latent_log_ratio(self, phi, phi_p):
        """Propose (eta, I_recon) under ``phi_p``; returns (draw, log ratio without the phi prior).

        The move is rejected (None) when either the forward or the reverse
        proposal density cannot be formed; both conditions are symmetric in
        the current and proposed states, so detailed balance is kept.
        """
        s = self.s
        prop = self._latent_proposal(s.I_recon, phi_p)
        if prop is None:
            return None, -np.inf
        eta_p, I_p, log_fwd = prop
        rev = self._approximation(I_p, phi)
        if rev is None:
            return None, -np.inf
        log_rev = self._gauss_logq(rev[0], rev[1], self._pack(s.eta, s.I_recon))
        log_a = (self._latent_logpost(eta_p, I_p, *phi_p) - self._latent_logpost(s.eta, s.I_recon, *phi)
                 + log_rev - log_fwd)
        return (eta_p, I_p), log_a

    # The data pin down the total variance s2 = nu^2 / (1 - rho^2) + tau^2 and
    # the lag-1 autocorrelation a = rho * f of I, where f is the share of s2
    # due to eta; nu, tau and rho trade off along a curved ridge. With all
    # three free the move works in (log s2, atanh a, logit g), g placing f
    # within its feasible range (|a|, 1), which straightens the ridge.

    def _to_unconstrained(self, kind):
        s = self.s
        if kind == "plain":
            return np.array([math.log(s.nu), math.log(s.tau), math.log((1 + s.rho) / (1 - s.rho))])
        v = s.nu**2 / (1.0 - s.rho**2)
        s2 = v + s.tau**2
        f = v / s2
        a = s.rho * f
        g = (f - abs(a)) / (1.0 - abs(a))
        return np.array([math.log(s2), math.atanh(a), math.log(g / (1.0 - g))])

    @staticmethod
    def _from_unconstrained(u, kind):
        """(rho, nu, tau) from the move coordinates."""
        if kind == "plain":
            return math.tanh(u[2] / 2.0), math.exp(u[0]), math.exp(u[1])
        s2, a = math.exp(u[0]), math.tanh(u[1])
        one_minus_f = (1.0 - abs(a)) / (1.0 + math.exp(u[2]))
        f = 1.0 - one_minus_f
        rho = a / f
        return rho, math.sqrt(f * s2 * (1.0 - rho * rho)), math.sqrt(one_minus_f * s2)

    def _phi_logprior(self, u, kind):
        """Half-Cauchy priors on nu and tau, uniform on rho, plus the Jacobian of the move coordinates."""
        rho, nu, tau = self._from_unconstrained(u, kind)
        scale = self.spec.scale_halft
        lp = float(_half_cauchy_logpdf(nu, scale)) + float(_half_cauchy_logpdf(tau, scale))
        if kind == "plain":
            return lp + u[0] + u[1] + math.log(1.0 - rho * rho)
        a = math.tanh(u[1])
        g = 1.0 / (1.0 + math.exp(-u[2]))
        f = 1.0 - (1.0 - abs(a)) * (1.0 - g)
        log_jac = (2.0 * u[0] + math.log1p(-a * a) + math.log1p(-abs(a)) + math.log(g) + math.log1p(-g)
                   - math.log(4.0 * nu * tau * f) + math.log1p(-rho * rho))
        return lp + log_jac

    def update_variances(self):
        for kind, move in self.am.items():
            self._variance_move(kind, move)

    def _variance_move(self, kind, move):
        """Joint random-walk move on the free subset of (nu, tau, rho).

        ``ridge`` works in the coordinates above; ``plain`` in (log nu,
        log tau, logit((rho + 1) / 2)). The ridge move follows the data
        ridge, the plain move covers the region where eta carries little of
        the variance and rho is poorly tied to the ridge coordinates.

        When eta and I are free, the proposal also redraws (eta, I_recon)
        from their Gaussian approximation under the proposed values, and the
        whole move is accepted or rejected together. With I held fixed the
        target is the eta-marginal likelihood (eta is redrawn afterwards);
        with eta held fixed it is the plain conditional.

        The proposal covariance is the running empirical covariance of u
        during adaptation, scaled by a Robbins-Monro factor targeting 0.234
        acceptance, and frozen afterwards.
        """
        s, f = self.s, self.fixed
        free = self.var_free
        if not free.size:
            return
        u = self._to_unconstrained(kind)
        k = free.size
        cov = move.cov[np.ix_(free, free)] + 1e-8 * np.eye(k)
        up = u.copy()
        up[free] += math.exp(move.log_scale) * (np.linalg.cholesky(cov) @ self.rng.standard_normal(k))
        phi = (s.rho, s.nu, s.tau)
        try:
            phi_p = self._from_unconstrained(up, kind)
            lp_prior = self._phi_logprior(up, kind) - self._phi_logprior(u, kind)
        except (OverflowError, ValueError, ZeroDivisionError):
            phi_p = None
        latent = None
        if phi_p is None or not (abs(phi_p[0]) < 1 and phi_p[1] > 0 and phi_p[2] > 0):
            ok = False
        else:
            if "eta" in f:
                r = self._residual()
                lp = lambda ph: self._ar_logpdf(s.eta, ph[0], ph[1]) - self.T * math.log(ph[2]) - 0.5 * float(
                    (r - s.eta) @ (r - s.eta)) / ph[2] ** 2
                log_a = lp(phi_p) - lp(phi)
            elif "I" in f or self.R == 0:
                r = self._residual()
                log_a = self._marginal(*phi_p, r) - self._marginal(*phi, r)
            else:
                latent, log_a = self._latent_log_ratio(phi, phi_p)
            log_a += lp_prior
            ok = bool(np.isfinite(log_a) and math.log(self.rng.uniform()) < log_a)
        if ok:
            u = up
            s.rho, s.nu, s.tau = phi_p
            if latent is not None:
                s.eta, s.I_recon = latent
                self.I[self.recon_idx] = s.I_recon
        self.acc["variances" if kind == "ridge" or len(self.am) == 1 else "variances_plain"] += ok
        if self.adapting:
            move.adapt(u, ok, self.iteration)

    def update_lambda(self):
        s = self.s
        psi = s.psi[:, : self.spec.n_beta]
        n, tot = psi.size, float(psi.sum())
        scale = self.spec.lambda_scale

        def logp(lam):
            return -2 * n * math.log(lam) - tot / (2 * lam * lam) + float(_half_cauchy_logpdf(lam, scale)) + math.log(lam)

        s.lam = self._scalar_mh("lambda", s.lam, logp)

    def update_trend(self):
        s = self.s
        r = self.I - s.eta
        t = self.t
        w = 1.0 / s.tau**2
        P = w * np.array([[self.T, t.sum()], [t.sum(), t @ t]])
        P[0, 0] += 1.0 / self.spec.omega_sd**2
        P[1, 1] += 1.0 / self.spec.delta_sd**2
        b = w * np.array([r.sum(), t @ r])
        L = np.linalg.cholesky(P)
        mean = np.linalg.solve(P, b)
        draw = mean + linalg.solve_triangular(L, self.rng.standard_normal(2), lower=True, trans="T")
        self._check("trend", draw)
        s.omega, s.delta = float(draw[0]), float(draw[1])

    def update_eta(self):
        """Exact joint draw of eta from its Gaussian conditional given I."""
        s = self.s
        U = _chol_banded(self._precision_banded(s.rho, s.nu, s.tau))
        if U is None:
            # Skipping depends only on the variances, so the kernel still
            # leaves the target invariant.
            log.debug("eta update skipped at iteration %d: precision not numerically positive definite", self.iteration)
            return
        mean = _cho_solve_banded(U, self._residual() / s.tau**2)
        eta = mean + _tri_solve_banded(U, self.rng.standard_normal(self.T))
        self._check("eta", eta)
        s.eta = eta

    def update_latent_joint(self):
        """MH move on (eta, I_recon) at fixed parameters, linearised Gaussian proposal."""
        s = self.s
        if self.R == 0:
            return
        phi = (s.rho, s.nu, s.tau)
        latent, log_a = self._latent_log_ratio(phi, phi)
        ok = bool(latent is not None and math.log(self.rng.uniform()) < log_a)
        self.acc["latent"] += ok
        if ok:
            s.eta, s.I_recon = latent
            self.I[self.recon_idx] = s.I_recon

    def update_I(self):
        s, R = self.s, self.R
        if R == 0:
            return
        g = self._gamma()[self.recon_idx]
        tau = s.tau
        cur = s.I_recon.copy()
        if len(self.free_sites):
            cur[self.free_sites] = g[self.free_sites] + tau * self.rng.standard_normal(len(self.free_sites))
        if len(self.mh_sites):
            step = np.exp(self.log_step_I)
            prop = cur + step * self.rng.standard_normal(R)
            a, b1, b2 = s.alpha[self.rec_proxy], s.beta[self.rec_proxy, 0], s.beta[self.rec_proxy, 1]
            inv2s2 = 0.5 / s.sigma[self.rec_proxy] ** 2

            def logp(I):
                x = I[self.rec_site]
                r = self.rec_y - (a + b1 * x + b2 * x * x)
                ll = np.bincount(self.rec_site, weights=-r * r * inv2s2, minlength=R)
                return ll - 0.5 * ((I - g) / tau) ** 2

            ok = np.log(self.rng.uniform(size=R)) < logp(prop) - logp(cur)
            ok[self.free_sites] = False
            if self.adapting:
                self.log_step_I[self.mh_sites] += self._adapt(ok[self.mh_sites])
            self.acc_I += ok
            cur = np.where(ok, prop, cur)
        self._check("I", cur)
        s.I_recon = cur
        self.I[self.recon_idx] = cur

    def sweep(self):
        f = self.fixed
        if "coef" not in f:
            self.update_coef()
        if self.spec.lasso and "psi" not in f:
            self.update_psi()
        if "sigma" not in f:
            self.update_sigma()
        if self.spec.lasso and "lambda" not in f:
            self.update_lambda()
        if self.spec.trend and "trend" not in f:
            self.update_trend()
        self.update_variances()
        if "eta" not in f:
            self.update_eta()
        if "eta" not in f and "I" not in f:
            self.update_latent_joint()
        if "I" not in f:
            self.update_I()
        self.iteration += 1

    def acceptance_rates(self, n: int) -> dict[str, float]:
        n = max(n, 1)
        out = {k: v / n for k, v in self.acc.items() if k != "variances_plain" or len(self.am) > 1}
        for j, pid in enumerate(self.data.proxy_ids):
            out[f"sigma[{pid}]"] = float(self.acc_sigma[j] / n)
        if len(self.mh_sites):
            out["I"] = float(np.mean(self.acc_I[self.mh_sites]) / n)
        return out

    def reset_counters(self):
        for k in self.acc:
            self.acc[k] = 0.0
        self.acc_sigma[:] = 0.0
        self.acc_I[:] = 0.0


def _run_one(args):
    data, spec, config, seed_seq, chain, init, fixed, keep_eta = args
    rng = np.random.default_rng(seed_seq)
    state = initial_state(data, spec, rng, chain) if init is None else init
    ch = _Chain(data, spec, state, rng, fixed)
    ch.target = config.target_accept
    P = len(parameter_names(data, spec))
    out = np.empty((config.draws_per_chain, P))
    etas = np.empty((config.draws_per_chain, data.T)) if keep_eta else None
    k = 0
    for it in range(config.n_iter):
        ch.adapting = it < config.adapt_iters
        if it == config.n_burn:
            ch.reset_counters()
        ch.sweep()
        if it >= config.n_burn and (it - config.n_burn + 1) % config.thin == 0 and k < len(out):
            out[k] = flatten_state(ch.s, spec)
            if keep_eta:
                etas[k] = ch.s.eta
            k += 1
        if (it + 1) % 1000 == 0:
            log.debug("chain %d: iteration %d/%d", chain, it + 1, config.n_iter)
    acc = ch.acceptance_rates(config.n_iter - config.n_burn)
    return out, etas, acc, ch.s


def degenerate_proxies(data: ModelData) -> list[str]:
    """Proxies whose observations in calibration years all see the same index value."""
    out = []
    I_at = data.I_obs[data.obs_t]
    for j, pid in enumerate(data.proxy_ids):
        v = I_at[(data.obs_proxy == j) & np.isfinite(I_at)]
        if len(v) and np.all(v == v[0]):
            out.append(pid)
    return out


def run_chains(
    data: ModelData,
    spec: ModelSpec,
    config: McmcConfig,
    *,
    init: ParameterState | None = None,
    fixed: Iterable[str] = (),
    keep_eta: bool = False,
):
    """Run ``config.n_chains`` chains and return a PosteriorArchive.

    ``fixed`` names sampler blocks (see ``BLOCKS``) held at their ``init``
    values; ``init`` replaces the over-dispersed starting points for every
    chain.
    """
    from .posterior import PosteriorArchive

    fixed = frozenset(fixed)
    unknown = fixed - set(BLOCKS)
    if unknown:
        raise ConfigError(f"unknown sampler block(s): {sorted(unknown)}")
    if fixed and init is None:
        raise ConfigError("fixed blocks need an explicit init state")
    if data.M == 0:
        raise DataError("empty data: at least one proxy is required")
    if init is not None:
        init.check(data)
    for pid in degenerate_proxies(data):
        log.warning("proxy %s: calibration index values are all equal; its coefficients follow the prior", pid)

    seeds = chain_seeds(config.seed, config.n_chains)
    jobs = [(data, spec, config, seeds[c], c, init, fixed, keep_eta) for c in range(config.n_chains)]
    if config.n_jobs > 1 and config.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(config.n_jobs, config.n_chains)) as ex:
            results = list(ex.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]

    samples = np.stack([r[0] for r in results])
    eta = np.stack([r[1] for r in results]) if keep_eta else None
    return PosteriorArchive.build(
        samples=samples,
        names=parameter_names(data, spec),
        recon_years=data.recon_years,
        config=config,
        spec=spec,
        acceptance=[r[2] for r in results],
        data_fingerprint=data.fingerprint(),
        eta=eta,
        final_states=[r[3] for r in results],
    )
