"""Posterior archive, reconstruction summaries and exceedance probabilities."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from . import diagnostics
from .errors import DataError
from .ingest import HydroSeries

QUANTILES = (0.025, 0.5, 0.975)
RECON_COLUMNS = ["year", "median", "lower95", "upper95", "unit"]
EXCEEDANCE_COLUMNS = ["year", "p_below_min", "p_above_max"]
DRAWS_COLUMNS = ["chain", "draw", "parameter", "value"]


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


@dataclass(eq=False)
class PosteriorArchive:
    """Retained draws, shape ``(chains, draws, parameters)``, plus diagnostics."""

    samples: np.ndarray
    names: list[str]
    recon_years: np.ndarray
    config: object = None
    spec: object = None
    acceptance: list[dict] = field(default_factory=list)
    data_fingerprint: str = ""
    rhat: np.ndarray | None = None
    ess: np.ndarray | None = None
    degenerate: np.ndarray | None = None
    flagged: list[str] = field(default_factory=list)
    eta: np.ndarray | None = None
    final_states: list | None = None

    @classmethod
    def build(cls, samples, names, recon_years, **kw) -> PosteriorArchive:
        arch = cls(np.asarray(samples, dtype=float), list(names), np.asarray(recon_years, dtype=np.int64), **kw)
        arch.compute_diagnostics()
        return arch

    def __post_init__(self):
        if self.samples.ndim != 3 or self.samples.shape[2] != len(self.names):
            raise DataError("samples must be (chains, draws, parameters) matching the names")
        self._index = {n: i for i, n in enumerate(self.names)}
        self._I_cols = np.array([self._index[f"I[{y}]"] for y in self.recon_years], dtype=np.int64)

    @property
    def n_chains(self) -> int:
        return self.samples.shape[0]

    @property
    def n_draws(self) -> int:
        return self.samples.shape[1]

    @property
    def total_draws(self) -> int:
        return self.n_chains * self.n_draws

    def draws(self, name: str) -> np.ndarray:
        return self.samples[:, :, self._index[name]]

    def pooled(self, name: str) -> np.ndarray:
        return self.draws(name).reshape(-1)

    def I_draws(self) -> np.ndarray:
        """Pooled reconstruction draws, shape ``(total_draws, n_recon_years)``."""
        return self.samples[:, :, self._I_cols].reshape(self.total_draws, -1)

    def compute_diagnostics(self) -> None:
        P = len(self.names)
        self.rhat = np.full(P, np.nan)
        self.ess = np.full(P, np.nan)
        self.degenerate = np.zeros(P, dtype=bool)
        if self.n_draws < 4:
            return
        for p in range(P):
            x = self.samples[:, :, p]
            self.degenerate[p] = diagnostics.is_degenerate(x)
            self.rhat[p] = diagnostics.rhat(x)
            self.ess[p] = diagnostics.ess(x)
        bad = diagnostics.convergence_flags(self.rhat, self.ess, self.total_draws, self.degenerate)
        self.flagged = [self.names[p] for p in np.flatnonzero(bad)]

    @property
    def converged(self) -> bool:
        return not self.flagged

    # -- persistence

    def to_frame(self) -> pd.DataFrame:
        C, D, P = self.samples.shape
        return pd.DataFrame({
            "chain": np.repeat(np.arange(C), D * P),
            "draw": np.tile(np.repeat(np.arange(D), P), C),
            "parameter": np.tile(np.asarray(self.names, dtype=object), C * D),
            "value": self.samples.reshape(-1),
        })

    def write_draws(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def read_draws(cls, path, recon_years=None) -> PosteriorArchive:
        df = pd.read_csv(path, float_precision="round_trip")
        if list(df.columns) != DRAWS_COLUMNS:
            raise DataError(f"{path}: expected columns {DRAWS_COLUMNS}")
        names = list(dict.fromkeys(df["parameter"]))
        C, D = int(df["chain"].max()) + 1, int(df["draw"].max()) + 1
        if len(df) != C * D * len(names):
            raise DataError(f"{path}: draws table is not rectangular")
        samples = df["value"].to_numpy(dtype=float).reshape(C, D, len(names))
        if recon_years is None:
            recon_years = [int(n[2:-1]) for n in names if n.startswith("I[")]
        return cls.build(samples, names, recon_years)

    def diagnostics_dict(self) -> dict:
        return {
            "total_draws": self.total_draws,
            "n_chains": self.n_chains,
            "draws_per_chain": self.n_draws,
            "converged": self.converged,
            "flagged": list(self.flagged),
            "rhat": {n: _jsonable(float(v)) for n, v in zip(self.names, self.rhat)},
            "ess": {n: _jsonable(float(v)) for n, v in zip(self.names, self.ess)},
            "degenerate": [n for n, d in zip(self.names, self.degenerate) if d],
            "acceptance": self.acceptance,
            "config": self.config.to_dict() if hasattr(self.config, "to_dict") else self.config,
            "spec": self.spec.to_dict() if hasattr(self.spec, "to_dict") else self.spec,
            "data_fingerprint": self.data_fingerprint,
        }

    def write_diagnostics(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.diagnostics_dict(), fh, indent=2)
            fh.write("\n")


# -------------------------------------------------------------- summaries


@dataclass(eq=False)
class Reconstruction:
    years: np.ndarray
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    median_orig: np.ndarray
    lower_orig: np.ndarray
    upper_orig: np.ndarray
    instrumental_years: np.ndarray
    instrumental_values: np.ndarray
    unit: str = "original"
    flagged: list[str] = field(default_factory=list)

    def at(self, years) -> np.ndarray:
        """Row positions of ``years``; raises DataError for absent years."""
        pos = {int(y): i for i, y in enumerate(self.years)}
        missing = [int(y) for y in np.atleast_1d(years) if int(y) not in pos]
        if missing:
            raise DataError(f"year(s) {missing} not in the reconstruction")
        return np.array([pos[int(y)] for y in np.atleast_1d(years)], dtype=np.int64)

    def to_frame(self, standardized: bool = False) -> pd.DataFrame:
        if standardized:
            cols, unit = (self.median, self.lower, self.upper), "standardized"
        else:
            cols, unit = (self.median_orig, self.lower_orig, self.upper_orig), self.unit
        return pd.DataFrame({
            "year": self.years,
            "median": cols[0],
            "lower95": cols[1],
            "upper95": cols[2],
            "unit": unit,
        })


def summarize(archive: PosteriorArchive, hydro: HydroSeries | None = None, years=None,
              unit: str = "original") -> Reconstruction:
    """Per-year median and 95% interval of the latent index, pooled over chains.

    Quantiles use linear interpolation between order statistics (numpy's
    default). Original-unit values are the back-transformed quantiles.
    """
    draws = archive.I_draws()
    recon_years = archive.recon_years
    if years is not None:
        pos = {int(y): i for i, y in enumerate(recon_years)}
        missing = [int(y) for y in years if int(y) not in pos]
        if missing:
            raise DataError(f"year(s) {missing} absent from the archive")
        cols = [pos[int(y)] for y in years]
        draws, recon_years = draws[:, cols], recon_years[cols]
    if draws.shape[0] == 0:
        raise DataError("archive holds no draws")
    lo, med, hi = np.quantile(draws, QUANTILES, axis=0)
    back = hydro.to_original if hydro is not None else (lambda v: np.asarray(v, dtype=float))
    inst_years = hydro.years if hydro is not None else np.zeros(0, dtype=np.int64)
    inst_vals = back(hydro.values) if hydro is not None else np.zeros(0)
    return Reconstruction(
        years=np.asarray(recon_years), median=med, lower=lo, upper=hi,
        median_orig=back(med), lower_orig=back(lo), upper_orig=back(hi),
        instrumental_years=inst_years, instrumental_values=inst_vals,
        unit=unit, flagged=list(archive.flagged),
    )


@dataclass(eq=False)
class ExceedanceTable:
    years: np.ndarray
    n_below_min: np.ndarray
    n_below_max: np.ndarray
    n_draws: int
    I_min: float
    I_max: float

    @property
    def p_below_min(self) -> np.ndarray:
        return self.n_below_min / self.n_draws

    @property
    def p_above_max(self) -> np.ndarray:
        return (self.n_draws - self.n_below_max) / self.n_draws

    def percent(self) -> pd.DataFrame:
        return pd.DataFrame({
            "year": self.years,
            "pct_below_min": 100.0 * self.p_below_min,
            "pct_above_max": 100.0 * self.p_above_max,
        })

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"year": self.years, "p_below_min": self.p_below_min, "p_above_max": self.p_above_max})


def exceedance(draws, years, I_min: float, I_max: float) -> ExceedanceTable:
    """Share of draws strictly below the instrumental minimum, and one minus
    the share strictly below the instrumental maximum.

    ``draws`` is ``(n_draws, n_years)`` on the same scale as the thresholds,
    or a PosteriorArchive.
    """
    if isinstance(draws, PosteriorArchive):
        draws = draws.I_draws()
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2 or draws.shape[1] != len(years):
        raise DataError("draws must be (n_draws, n_years)")
    if draws.shape[0] == 0:
        raise DataError("no draws")
    return ExceedanceTable(
        years=np.asarray(years),
        n_below_min=np.sum(draws < I_min, axis=0),
        n_below_max=np.sum(draws < I_max, axis=0),
        n_draws=draws.shape[0],
        I_min=float(I_min),
        I_max=float(I_max),
    )


def summary_stats(recon: Reconstruction, archive: PosteriorArchive | None = None,
                  hydro: HydroSeries | None = None) -> dict:
    """Means and sds of the reconstruction and of the instrumental record, original units.

    ``recon_sd_medians`` is the sd across years of the posterior medians;
    ``recon_sd_draws`` the across-year sd of each posterior trajectory,
    averaged over draws (needs ``archive`` and ``hydro``).
    """
    if len(recon.years) == 0:
        raise DataError("empty reconstruction period")
    if len(recon.instrumental_values) == 0:
        raise DataError("empty instrumental period")
    med = recon.median_orig
    inst = recon.instrumental_values
    out = {
        "recon_mean": float(np.mean(med)),
        "recon_sd_medians": float(np.std(med, ddof=1)) if len(med) > 1 else 0.0,
        "instrumental_mean": float(np.mean(inst)),
        "instrumental_sd": float(np.std(inst, ddof=1)) if len(inst) > 1 else 0.0,
        "n_recon_years": int(len(med)),
        "n_instrumental_years": int(len(inst)),
    }
    if archive is not None and hydro is not None and len(med) > 1:
        traj = hydro.to_original(archive.I_draws())
        out["recon_sd_draws"] = float(np.mean(np.std(traj, axis=1, ddof=1)))
    return out
