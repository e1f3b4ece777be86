"""Loading, transforming and aligning hydroclimate and proxy data.

The hydroclimate index is standardised with its instrumental-period mean and
standard deviation (after an optional Box-Cox transform). Each proxy record is
standardised with the statistics of its full record. Alignment maps every
proxy observation onto the latent annual grid through its lag, and tags it as
calibration (the lag-adjusted year has an instrumental measurement) or
reconstruction (it does not).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from scipy import optimize, stats

from .errors import DataError

log = logging.getLogger(__name__)

MIN_HYDRO_LENGTH = 10
MAX_ABS_LAG = 5
BOXCOX_BOUNDS = (-2.0, 2.0)
BOXCOX_XTOL = 1e-4

CALIBRATION = "calibration"
RECONSTRUCTION = "reconstruction"


@dataclass(frozen=True)
class BoxCoxState:
    """Box-Cox exponent plus a flag recording whether it was applied."""

    lmbda: float
    applied: bool = True

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if not self.applied:
            return x
        if np.any(x <= 0):
            raise DataError("Box-Cox transform requires strictly positive values")
        if self.lmbda == 0.0:
            return np.log(x)
        return np.expm1(self.lmbda * np.log(x)) / self.lmbda

    def inverse(self, y):
        """Map transformed values back to the original scale.

        Values outside the image of the forward transform map to the
        boundary of the original domain (0 or +inf).
        """
        y = np.asarray(y, dtype=float)
        if not self.applied:
            return y
        if self.lmbda == 0.0:
            return np.exp(y)
        base = self.lmbda * y + 1.0
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.exp(np.log1p(self.lmbda * y) / self.lmbda)
        if self.lmbda < 0:
            out = np.where(base <= 0, np.inf, out)
        else:
            out = np.where(base <= 0, 0.0, out)
        return out


@dataclass(frozen=True, eq=False)
class HydroSeries:
    years: np.ndarray
    values: np.ndarray
    transform: BoxCoxState | None = None
    standardization: tuple[float, float] | None = None
    name: str = "index"

    def __post_init__(self):
        years = np.asarray(self.years, dtype=np.int64)
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "years", years)
        object.__setattr__(self, "values", values)
        if years.shape != values.shape or years.ndim != 1:
            raise DataError("years and values must be 1-d arrays of equal length")
        if len(years) and np.any(np.diff(years) != 1):
            raise DataError("hydroclimate years must be contiguous and increasing (gap or duplicate found)")
        if not np.all(np.isfinite(values)):
            raise DataError("hydroclimate values must be finite")

    def __len__(self):
        return len(self.years)

    @property
    def start(self) -> int:
        return int(self.years[0])

    @property
    def end(self) -> int:
        return int(self.years[-1])

    def to_original(self, z):
        """Undo standardisation and then the Box-Cox transform."""
        z = np.asarray(z, dtype=float)
        if self.standardization is not None:
            mean, sd = self.standardization
            z = z * sd + mean
        if self.transform is not None:
            z = self.transform.inverse(z)
        return z

    def to_model_scale(self, x):
        """Apply this series' transform and standardisation to raw values."""
        x = np.asarray(x, dtype=float)
        if self.transform is not None:
            x = self.transform.forward(x)
        if self.standardization is not None:
            mean, sd = self.standardization
            x = (x - mean) / sd
        return x

    def subset(self, start: int | None = None, end: int | None = None) -> HydroSeries:
        mask = np.ones(len(self), dtype=bool)
        if start is not None:
            mask &= self.years >= start
        if end is not None:
            mask &= self.years <= end
        return replace(self, years=self.years[mask], values=self.values[mask])


@dataclass(frozen=True, eq=False)
class ProxyRecord:
    """One proxy dataset with its lag and (after alignment) split tags."""

    id: str
    archive: str
    years: np.ndarray
    values: np.ndarray
    lag: int = 0
    split: np.ndarray | None = None
    standardization: tuple[float, float] | None = None

    def __post_init__(self):
        years = np.asarray(self.years, dtype=np.int64)
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "years", years)
        object.__setattr__(self, "values", values)
        if years.shape != values.shape or years.ndim != 1:
            raise DataError(f"proxy {self.id}: years and values must be 1-d arrays of equal length")
        if len(years) > 1 and np.any(np.diff(years) <= 0):
            raise DataError(f"proxy {self.id}: observation years must be unique and sorted")
        if not np.all(np.isfinite(values)):
            raise DataError(f"proxy {self.id}: values must be finite")
        if int(self.lag) != self.lag or abs(self.lag) > MAX_ABS_LAG:
            raise DataError(f"proxy {self.id}: lag {self.lag} outside [-{MAX_ABS_LAG}, {MAX_ABS_LAG}]")
        object.__setattr__(self, "lag", int(self.lag))
        if self.split is not None:
            split = np.asarray(self.split, dtype=bool)
            if split.shape != years.shape:
                raise DataError(f"proxy {self.id}: split tags do not match observations")
            object.__setattr__(self, "split", split)

    def __len__(self):
        return len(self.years)

    @property
    def target_years(self) -> np.ndarray:
        """Lag-adjusted years, i.e. the hydroclimate year each obs informs."""
        return self.years + self.lag

    @property
    def calibration_mask(self) -> np.ndarray:
        if self.split is None:
            raise DataError(f"proxy {self.id} has not been aligned")
        return self.split

    @property
    def calibration_values(self) -> np.ndarray:
        return self.values[self.calibration_mask]

    @property
    def reconstruction_values(self) -> np.ndarray:
        return self.values[~self.calibration_mask]

    @property
    def tags(self) -> np.ndarray:
        return np.where(self.calibration_mask, CALIBRATION, RECONSTRUCTION)


@dataclass(frozen=True)
class TimeGrid:
    """Contiguous annual grid carrying the latent hydroclimate series."""

    t_min: int
    t_max: int

    def __post_init__(self):
        if self.t_max < self.t_min:
            raise DataError("empty time grid")

    def __len__(self):
        return self.t_max - self.t_min + 1

    def __contains__(self, year) -> bool:
        return self.t_min <= year <= self.t_max

    @property
    def years(self) -> np.ndarray:
        return np.arange(self.t_min, self.t_max + 1, dtype=np.int64)

    def index(self, year):
        """0-based grid position of ``year`` (scalar or array)."""
        year = np.asarray(year, dtype=np.int64)
        if np.any((year < self.t_min) | (year > self.t_max)):
            raise IndexError("year outside the time grid")
        idx = year - self.t_min
        return int(idx) if idx.ndim == 0 else idx


# ---------------------------------------------------------------- loading


def _read_csv(path, required: Sequence[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    try:
        df = pd.read_csv(path, encoding="utf-8", dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot parse {path}: {exc}") from exc
    df.columns = [c.strip() for c in df.columns]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing column(s) {missing}")
    return df


def _numeric(df: pd.DataFrame, column: str, path) -> np.ndarray:
    raw = df[column].str.strip()
    bad = pd.to_numeric(raw, errors="coerce").isna()
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(f"{path}: non-numeric value {df[column].iloc[row]!r} in column {column!r} (row {row + 1})")
    # Python's float() parses exactly, so written values read back bit-identical
    return raw.astype(float).to_numpy()


def _integer(df: pd.DataFrame, column: str, path) -> np.ndarray:
    vals = _numeric(df, column, path)
    if np.any(vals != np.round(vals)):
        raise DataError(f"{path}: column {column!r} must hold integers")
    return vals.astype(np.int64)


def load_hydro(path, year_col: str = "year", value_col: str = "value", name: str | None = None,
               min_length: int = MIN_HYDRO_LENGTH) -> HydroSeries:
    """Read a ``year,value`` CSV into a raw (untransformed) HydroSeries."""
    df = _read_csv(path, [year_col, value_col])
    years = _integer(df, year_col, path)
    values = _numeric(df, value_col, path)
    order = np.argsort(years, kind="stable")
    years, values = years[order], values[order]
    if len(years) < min_length:
        raise DataError(f"{path}: series too short ({len(years)} rows, need at least {min_length})")
    dup = years[1:][np.diff(years) == 0]
    if dup.size:
        raise DataError(f"{path}: duplicate year {int(dup[0])}")
    gaps = np.flatnonzero(np.diff(years) > 1)
    if gaps.size:
        raise DataError(f"{path}: gap in years after {int(years[gaps[0]])}")
    return HydroSeries(years, values, name=name or Path(path).stem)


def load_proxies(path) -> list[ProxyRecord]:
    """Read the long-format proxy CSV (``dataset_id,archive,year,value,lag``)."""
    df = _read_csv(path, ["dataset_id", "archive", "year", "value", "lag"])
    if df.empty:
        raise DataError(f"{path}: no proxy observations")
    years = _integer(df, "year", path)
    values = _numeric(df, "value", path)
    lags = _integer(df, "lag", path)
    ids = df["dataset_id"].str.strip().to_numpy()
    archives = df["archive"].str.strip().to_numpy()

    records = []
    # preserve first-appearance order of dataset ids
    for pid in dict.fromkeys(ids):
        rows = ids == pid
        rec_lags = np.unique(lags[rows])
        if rec_lags.size != 1:
            raise DataError(f"{path}: proxy {pid} has inconsistent lags {rec_lags.tolist()}")
        yrs = years[rows]
        order = np.argsort(yrs, kind="stable")
        yrs = yrs[order]
        dup = yrs[1:][np.diff(yrs) == 0]
        if dup.size:
            raise DataError(f"{path}: proxy {pid} has duplicate observations in year {int(dup[0])}")
        records.append(ProxyRecord(
            id=str(pid),
            archive=str(archives[rows][0]),
            years=yrs,
            values=values[rows][order],
            lag=int(rec_lags[0]),
        ))
    return records


def write_hydro(series: HydroSeries, path) -> None:
    pd.DataFrame({"year": series.years, "value": series.values}).to_csv(path, index=False)


def write_proxies(records: Iterable[ProxyRecord], path) -> None:
    frames = [
        pd.DataFrame({
            "dataset_id": r.id,
            "archive": r.archive,
            "year": r.years,
            "value": r.values,
            "lag": r.lag,
        })
        for r in records
    ]
    pd.concat(frames, ignore_index=True).to_csv(path, index=False)


# ------------------------------------------------------------- transforms


def boxcox_profile_loglik(x, lmbda: float) -> float:
    """Profile log-likelihood of the Box-Cox exponent (Jacobian included)."""
    return float(stats.boxcox_llf(lmbda, np.asarray(x, dtype=float)))


def fit_boxcox(x) -> BoxCoxState:
    """Maximum-likelihood Box-Cox exponent on [-2, 2]."""
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        raise DataError("Box-Cox fit needs at least two values")
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise DataError("Box-Cox fit requires strictly positive, finite values")
    res = optimize.minimize_scalar(
        lambda lam: -boxcox_profile_loglik(x, lam),
        bounds=BOXCOX_BOUNDS,
        method="bounded",
        options={"xatol": BOXCOX_XTOL},
    )
    return BoxCoxState(float(res.x), applied=True)


def apply_boxcox(series: HydroSeries, state: BoxCoxState | None = None) -> HydroSeries:
    """Transform raw values; fits the exponent when ``state`` is omitted."""
    if series.transform is not None or series.standardization is not None:
        raise DataError("Box-Cox must be applied to the raw, unstandardised series")
    state = fit_boxcox(series.values) if state is None else state
    return replace(series, values=state.forward(series.values), transform=state)


def _zscore_stats(values: np.ndarray, what: str) -> tuple[float, float]:
    if values.size < 2:
        raise DataError(f"{what}: need at least two values to standardise")
    mean = float(np.mean(values))
    sd = float(np.std(values, ddof=1))
    if not sd > 0:
        raise DataError(f"{what}: zero variance, cannot standardise")
    return mean, sd


def standardize(series: HydroSeries) -> HydroSeries:
    """Z-score the series (sample sd, n-1 denominator)."""
    if series.standardization is not None:
        raise DataError("series is already standardised")
    mean, sd = _zscore_stats(series.values, series.name)
    return replace(series, values=(series.values - mean) / sd, standardization=(mean, sd))


def unstandardize(series: HydroSeries) -> HydroSeries:
    if series.standardization is None:
        return series
    mean, sd = series.standardization
    return replace(series, values=series.values * sd + mean, standardization=None)


def standardize_proxy(record: ProxyRecord) -> ProxyRecord:
    """Z-score a proxy with the statistics of its full record."""
    if record.standardization is not None:
        raise DataError(f"proxy {record.id} is already standardised")
    mean, sd = _zscore_stats(record.values, f"proxy {record.id}")
    return replace(record, values=(record.values - mean) / sd, standardization=(mean, sd))


# -------------------------------------------------------------- alignment


def make_grid(records: Sequence[ProxyRecord], hydro: HydroSeries) -> TimeGrid:
    """Smallest contiguous grid covering the instrumental years and all lagged obs."""
    lo, hi = hydro.start, hydro.end
    for r in records:
        if len(r):
            t = r.target_years
            lo = min(lo, int(t.min()))
            hi = max(hi, int(t.max()))
    return TimeGrid(lo, hi)


def align(records: Sequence[ProxyRecord], hydro: HydroSeries) -> tuple[TimeGrid, list[ProxyRecord]]:
    """Tag each proxy observation and build the latent time grid.

    Observations whose lag-adjusted year falls after the instrumental period
    have no latent state to inform and are dropped. Records left without any
    observations are dropped with a warning.
    """
    aligned = []
    for r in records:
        target = r.target_years
        keep = target <= hydro.end
        if not keep.all():
            log.info("proxy %s: dropping %d obs mapped past %d", r.id, int((~keep).sum()), hydro.end)
        if not keep.any():
            log.warning("proxy %s: no observations map onto the time grid; record dropped", r.id)
            continue
        target = target[keep]
        split = target >= hydro.start
        aligned.append(replace(r, years=r.years[keep], values=r.values[keep], split=split))
    return make_grid(aligned, hydro), aligned
