"""Joint log-density of the hierarchical reconstruction model.

Data level::

    I_t  ~ N(gamma_t, tau^2)                     every grid year
    Y_ij ~ N(alpha_j + beta_j1 I + beta_j2 I^2, sigma_j^2),  I = I_{t[i,j]}

Process level::

    gamma_t = omega + delta * t + eta_t   (trend)   or   gamma_t = eta_t
    eta_1 ~ N(0, nu^2 / (1 - rho^2)),   eta_t ~ N(rho eta_{t-1}, nu^2)

``t`` is the 1-based position on the time grid. In calibration years ``I_t`` is
observed; elsewhere it is a latent parameter.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, SupportError
from .ingest import HydroSeries, ProxyRecord, TimeGrid, make_grid

LOG_2PI = math.log(2.0 * math.pi)
BETA_PRIORS = ("laplace", "normal")


@dataclass(frozen=True)
class ModelSpec:
    """Model variant and prior hyperconstants.

    ``quadratic``, ``beta_prior`` and ``beta_sd`` select nested sub-models
    (linear response, Gaussian coefficient prior) used for checking.
    """

    trend: bool = False
    alpha_sd: float = 2.0
    delta_sd: float = 1.0
    omega_sd: float = 2.0
    lambda_scale: float = 5.0
    scale_halft: float = 2.0
    quadratic: bool = True
    beta_prior: str = "laplace"
    beta_sd: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        for name in ("alpha_sd", "delta_sd", "omega_sd", "lambda_scale", "scale_halft", "beta_sd"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ConfigError(f"ModelSpec.{name} must be positive and finite, got {v!r}")
        if self.beta_prior not in BETA_PRIORS:
            raise ConfigError(f"beta_prior must be one of {BETA_PRIORS}")

    @property
    def n_beta(self) -> int:
        return 2 if self.quadratic else 1

    @property
    def lasso(self) -> bool:
        return self.beta_prior == "laplace"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True, eq=False)
class ModelData:
    """Model-ready data on the latent grid.

    Proxy observations are stored flat: ``obs_proxy[n]`` is the proxy index,
    ``obs_t[n]`` the 0-based grid position and ``obs_y[n]`` the value.
    """

    years: np.ndarray
    I_obs: np.ndarray
    proxy_ids: tuple[str, ...] = ()
    obs_proxy: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    obs_t: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    obs_y: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "years", np.asarray(self.years, dtype=np.int64))
        object.__setattr__(self, "I_obs", np.asarray(self.I_obs, dtype=float))
        object.__setattr__(self, "proxy_ids", tuple(self.proxy_ids))
        object.__setattr__(self, "obs_proxy", np.asarray(self.obs_proxy, dtype=np.int64))
        object.__setattr__(self, "obs_t", np.asarray(self.obs_t, dtype=np.int64))
        object.__setattr__(self, "obs_y", np.asarray(self.obs_y, dtype=float))
        T = len(self.years)
        if T == 0:
            raise DataError("model data needs a non-empty time grid")
        if self.I_obs.shape != (T,):
            raise DataError("I_obs must have one entry per grid year")
        n = len(self.obs_y)
        if self.obs_proxy.shape != (n,) or self.obs_t.shape != (n,):
            raise DataError("flat proxy observation arrays differ in length")
        if n and (self.obs_t.min() < 0 or self.obs_t.max() >= T):
            raise DataError("proxy observation outside the time grid")
        if n and (self.obs_proxy.min() < 0 or self.obs_proxy.max() >= len(self.proxy_ids)):
            raise DataError("proxy index out of range")

    @property
    def T(self) -> int:
        return len(self.years)

    @property
    def M(self) -> int:
        return len(self.proxy_ids)

    @property
    def calib_mask(self) -> np.ndarray:
        return np.isfinite(self.I_obs)

    @property
    def recon_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.calib_mask)

    @property
    def recon_years(self) -> np.ndarray:
        return self.years[self.recon_idx]

    @property
    def time_index(self) -> np.ndarray:
        return np.arange(1, self.T + 1, dtype=float)

    def without_data(self) -> ModelData:
        """Same grid and proxies, but no instrumental values and no proxy obs."""
        return ModelData(self.years, np.full(self.T, np.nan), self.proxy_ids)

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for a in (self.years, self.I_obs, self.obs_proxy, self.obs_t, self.obs_y):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update("\0".join(self.proxy_ids).encode())
        return h.hexdigest()


def build_model_data(hydro: HydroSeries, records: Sequence[ProxyRecord], grid: TimeGrid | None = None) -> ModelData:
    """Flatten a standardised index and aligned proxies onto the time grid."""
    grid = make_grid(records, hydro) if grid is None else grid
    I_obs = np.full(len(grid), np.nan)
    I_obs[grid.index(hydro.years)] = hydro.values
    obs_proxy, obs_t, obs_y = [], [], []
    for j, r in enumerate(records):
        obs_proxy.append(np.full(len(r), j, dtype=np.int64))
        obs_t.append(grid.index(r.target_years))
        obs_y.append(r.values)
    if records:
        obs_proxy, obs_t, obs_y = (np.concatenate(a) for a in (obs_proxy, obs_t, obs_y))
    else:
        obs_proxy, obs_t, obs_y = np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    return ModelData(grid.years, I_obs, tuple(r.id for r in records), obs_proxy, obs_t, obs_y)


@dataclass(eq=False)
class ParameterState:
    """One point in parameter space.

    ``beta`` has shape (M, 2); the second column is the quadratic term.
    ``psi`` holds the per-coefficient normal-mixture variances of the Laplace
    prior and is a sampler auxiliary only; it does not enter the densities
    below.
    """

    alpha: np.ndarray
    beta: np.ndarray
    sigma: np.ndarray
    omega: float
    delta: float
    rho: float
    nu: float
    tau: float
    lam: float
    eta: np.ndarray
    I_recon: np.ndarray
    psi: np.ndarray | None = None

    def copy(self) -> ParameterState:
        return replace(
            self,
            alpha=self.alpha.copy(),
            beta=self.beta.copy(),
            sigma=self.sigma.copy(),
            eta=self.eta.copy(),
            I_recon=self.I_recon.copy(),
            psi=None if self.psi is None else self.psi.copy(),
        )

    def check(self, data: ModelData | None = None) -> None:
        """Raise SupportError/DataError when an invariant is violated."""
        if np.any(~(self.sigma > 0)):
            raise SupportError("sigma", self.sigma)
        for name in ("nu", "tau", "lam"):
            v = getattr(self, name)
            if not (v > 0 and np.isfinite(v)):
                raise SupportError(name, v)
        if not abs(self.rho) < 1:
            raise SupportError("rho", self.rho)
        if self.psi is not None and np.any(~(self.psi > 0)):
            raise SupportError("psi", self.psi)
        if data is not None:
            M = data.M
            if self.alpha.shape != (M,) or self.beta.shape != (M, 2) or self.sigma.shape != (M,):
                raise DataError("proxy parameter shapes do not match the data")
            if self.eta.shape != (data.T,):
                raise DataError("eta length does not match the time grid")
            if self.I_recon.shape != (len(data.recon_idx),):
                raise DataError("I_recon length does not match the reconstruction years")

    def I_full(self, data: ModelData) -> np.ndarray:
        """Hydroclimate on the whole grid: observed where known, latent elsewhere."""
        out = data.I_obs.copy()
        out[data.recon_idx] = self.I_recon
        return out


# ------------------------------------------------------------- densities


def _normal_logpdf(x, mean, sd):
    z = (np.asarray(x) - mean) / sd
    return -0.5 * LOG_2PI - np.log(sd) - 0.5 * z * z


def _half_cauchy_logpdf(x, scale):
    x = np.asarray(x, dtype=float)
    return math.log(2.0 / (math.pi * scale)) - np.log1p((x / scale) ** 2)


def _laplace_logpdf(x, scale):
    return -math.log(2.0 * scale) - np.abs(x) / scale


def proxy_mean(state: ParameterState, proxy: np.ndarray, I: np.ndarray) -> np.ndarray:
    return state.alpha[proxy] + state.beta[proxy, 0] * I + state.beta[proxy, 1] * I * I


def gamma(state: ParameterState, data: ModelData, spec: ModelSpec) -> np.ndarray:
    if spec.trend:
        return state.omega + state.delta * data.time_index + state.eta
    return state.eta


def log_lik_proxy(state: ParameterState, data: ModelData, spec: ModelSpec | None = None) -> float:
    if np.any(~(state.sigma > 0)):
        raise SupportError("sigma", state.sigma)
    if not len(data.obs_y):
        return 0.0
    I = state.I_full(data)[data.obs_t]
    mu = proxy_mean(state, data.obs_proxy, I)
    return float(np.sum(_normal_logpdf(data.obs_y, mu, state.sigma[data.obs_proxy])))


def log_lik_hydro(state: ParameterState, data: ModelData, spec: ModelSpec) -> float:
    """Observed and latent hydroclimate values around the process level."""
    if not state.tau > 0:
        raise SupportError("tau", state.tau)
    return float(np.sum(_normal_logpdf(state.I_full(data), gamma(state, data, spec), state.tau)))


def log_process(state: ParameterState, spec: ModelSpec | None = None) -> float:
    rho, nu, eta = state.rho, state.nu, state.eta
    if not abs(rho) < 1:
        raise SupportError("rho", rho)
    if not nu > 0:
        raise SupportError("nu", nu)
    out = _normal_logpdf(eta[0], 0.0, nu / math.sqrt(1.0 - rho * rho))
    if len(eta) > 1:
        out = out + np.sum(_normal_logpdf(eta[1:], rho * eta[:-1], nu))
    return float(out)


def log_prior(state: ParameterState, spec: ModelSpec) -> float:
    state.check()
    s = spec.scale_halft
    out = np.sum(_normal_logpdf(state.alpha, 0.0, spec.alpha_sd))
    beta = state.beta[:, : spec.n_beta]
    if spec.lasso:
        out += np.sum(_laplace_logpdf(beta, state.lam))
        out += _half_cauchy_logpdf(state.lam, spec.lambda_scale)
    else:
        out += np.sum(_normal_logpdf(beta, 0.0, spec.beta_sd))
    out += np.sum(_half_cauchy_logpdf(state.sigma, s))
    out += _half_cauchy_logpdf(state.nu, s)
    out += _half_cauchy_logpdf(state.tau, s)
    out += math.log(0.5)  # rho ~ U(-1, 1)
    if spec.trend:
        out += _normal_logpdf(state.omega, 0.0, spec.omega_sd)
        out += _normal_logpdf(state.delta, 0.0, spec.delta_sd)
    return float(out)


def log_posterior(state: ParameterState, data: ModelData, spec: ModelSpec) -> float:
    """Unnormalised joint log posterior of latents and parameters."""
    return (
        log_lik_proxy(state, data, spec)
        + log_lik_hydro(state, data, spec)
        + log_process(state, spec)
        + log_prior(state, spec)
    )


# ------------------------------------------------------------ simulation


@dataclass
class ProxyDesign:
    """True response parameters and observation pattern of a synthetic proxy.

    Observations are made every ``step`` years over ``[start, end]``
    (defaults: the whole usable range), restricted to years whose lagged
    target lies on the grid.
    """

    id: str
    alpha: float = 0.0
    beta1: float = 1.0
    beta2: float = 0.0
    sigma: float = 0.5
    lag: int = 0
    archive: str = "synthetic"
    start: int | None = None
    end: int | None = None
    step: int = 1


@dataclass
class TrueParameters:
    first_year: int
    instrumental_start: int
    instrumental_end: int
    rho: float = 0.5
    nu: float = 0.7
    tau: float = 0.5
    omega: float = 0.0
    delta: float = 0.0
    proxies: list[ProxyDesign] = field(default_factory=list)

    def __post_init__(self):
        self.proxies = [p if isinstance(p, ProxyDesign) else ProxyDesign(**p) for p in self.proxies]
        if not self.first_year <= self.instrumental_start <= self.instrumental_end:
            raise ConfigError("need first_year <= instrumental_start <= instrumental_end")
        if not abs(self.rho) < 1:
            raise SupportError("rho", self.rho)
        for name in ("nu", "tau"):
            if not getattr(self, name) > 0:
                raise SupportError(name, getattr(self, name))
        for p in self.proxies:
            if not p.sigma > 0:
                raise SupportError(f"sigma[{p.id}]", p.sigma)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.first_year, self.instrumental_end)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrueParameters:
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> TrueParameters:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(eq=False)
class SyntheticData:
    hydro: HydroSeries
    proxies: list[ProxyRecord]
    years: np.ndarray
    I_true: np.ndarray
    eta_true: np.ndarray

    def truth_at(self, years) -> np.ndarray:
        return self.I_true[np.asarray(years) - self.years[0]]


def simulate(spec: ModelSpec, truth: TrueParameters, seed: int) -> SyntheticData:
    """Forward-simulate the model on ``truth.grid``; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    grid = truth.grid
    T = len(grid)
    eta = np.empty(T)
    eta[0] = rng.normal(0.0, truth.nu / math.sqrt(1.0 - truth.rho**2))
    noise = rng.normal(0.0, truth.nu, size=T)
    for t in range(1, T):
        eta[t] = truth.rho * eta[t - 1] + noise[t]
    g = eta.copy()
    if spec.trend:
        g += truth.omega + truth.delta * np.arange(1, T + 1)
    I = g + rng.normal(0.0, truth.tau, size=T)

    records = []
    for p in truth.proxies:
        lo = grid.t_min - p.lag if p.start is None else max(p.start, grid.t_min - p.lag)
        hi = grid.t_max - p.lag if p.end is None else min(p.end, grid.t_max - p.lag)
        years = np.arange(lo, hi + 1, p.step, dtype=np.int64)
        x = I[grid.index(years + p.lag)]
        mu = p.alpha + p.beta1 * x + p.beta2 * x * x
        y = mu + rng.normal(0.0, p.sigma, size=len(years))
        records.append(ProxyRecord(p.id, p.archive, years, y, p.lag))

    inst = slice(grid.index(truth.instrumental_start), grid.index(truth.instrumental_end) + 1)
    hydro = HydroSeries(grid.years[inst], I[inst], name="synthetic")
    return SyntheticData(hydro, records, grid.years, I, eta)
