"""Out-of-sample check: hold out the oldest instrumental years, reconstruct
them from the remaining data, and score the predictions.

Scores are on the standardised scale of the training fit. The error is
``truth - posterior median``, so a positive mean error means the model
under-predicts.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import DataError
from .ingest import HydroSeries, ProxyRecord
from .model import ModelSpec
from .pipeline import fit, prepare
from .posterior import summarize
from .proxy_filter import DEFAULT_THRESHOLD
from .sampler import McmcConfig

log = logging.getLogger(__name__)

DEFAULT_HOLDOUT = 15
MIN_TRAIN = 10
VALIDATION_COLUMNS = ["index", "description", "coverage", "mean_error", "rmse", "n", "converged"]


@dataclass(eq=False)
class ValidationResult:
    index: str
    description: str
    n: int
    coverage: float
    mean_error: float
    rmse: float
    converged: bool = True
    errors: np.ndarray = field(default_factory=lambda: np.zeros(0))
    covered: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    excluded: list[str] = field(default_factory=list)

    def row(self) -> dict:
        return {
            "index": self.index,
            "description": self.description,
            "coverage": self.coverage,
            "mean_error": self.mean_error,
            "rmse": self.rmse,
            "n": self.n,
            "converged": self.converged,
        }


def holdout_split(hydro: HydroSeries, k: int = DEFAULT_HOLDOUT) -> tuple[HydroSeries, HydroSeries | None]:
    """Split off the ``k`` oldest years. ``k=0`` returns the series unchanged and no test set."""
    if k < 0:
        raise DataError(f"holdout size must be non-negative, got {k}")
    if k == 0:
        return hydro, None
    if len(hydro) <= k + MIN_TRAIN:
        raise DataError(f"series too short for a {k}-year holdout ({len(hydro)} years, need more than {k + MIN_TRAIN})")
    cut = hydro.start + k
    return hydro.subset(start=cut), hydro.subset(end=cut - 1)


def score(truth, median, lower, upper, index: str = "", description: str = "",
          converged: bool = True) -> ValidationResult:
    truth, median, lower, upper = (np.asarray(a, dtype=float) for a in (truth, median, lower, upper))
    if truth.size == 0:
        raise DataError("nothing to score")
    if not truth.shape == median.shape == lower.shape == upper.shape:
        raise DataError("truths and predictions differ in length")
    if np.any(~np.isfinite(median)) or np.any(~np.isfinite(lower)) or np.any(~np.isfinite(upper)):
        raise DataError("missing prediction for a test year")
    err = truth - median
    covered = (truth >= lower) & (truth <= upper)
    return ValidationResult(
        index=index,
        description=description,
        n=int(truth.size),
        coverage=100.0 * float(np.mean(covered)),
        mean_error=float(np.mean(err)),
        rmse=math.sqrt(float(np.mean(err * err))),
        converged=converged,
        errors=err,
        covered=covered,
    )


def pool(results: Sequence[ValidationResult], index: str = "All", description: str = "") -> ValidationResult:
    """Pool the test points of the converged results into one score."""
    use = [r for r in results if r.converged]
    excluded = [r.index for r in results if not r.converged]
    if not use:
        out = ValidationResult(index, description, 0, math.nan, math.nan, math.nan, converged=False)
        out.excluded = excluded
        return out
    err = np.concatenate([r.errors for r in use])
    covered = np.concatenate([r.covered for r in use])
    out = ValidationResult(
        index=index,
        description=description,
        n=int(err.size),
        coverage=100.0 * float(np.mean(covered)),
        mean_error=float(np.mean(err)),
        rmse=math.sqrt(float(np.mean(err * err))),
        converged=True,
        errors=err,
        covered=covered,
    )
    out.excluded = excluded
    return out


def validate(
    raw_hydro: HydroSeries,
    raw_records: Sequence[ProxyRecord],
    spec: ModelSpec,
    config: McmcConfig,
    *,
    k: int = DEFAULT_HOLDOUT,
    boxcox: bool = False,
    threshold: float = DEFAULT_THRESHOLD,
    include: Iterable[str] = (),
    exclude: Iterable[str] = (),
    index: str = "",
    description: str = "",
) -> ValidationResult:
    """Holdout exercise on one index.

    The Box-Cox exponent, the standardisation and the proxy filter are all
    refitted on the training years only.
    """
    train, test = holdout_split(raw_hydro, k)
    if test is None:
        raise DataError("k=0 leaves nothing to validate")
    prepared = prepare(train, raw_records, boxcox=boxcox, threshold=threshold, include=include, exclude=exclude)
    archive = fit(prepared, spec, config)
    recon = summarize(archive, prepared.hydro, years=test.years)
    truth = prepared.hydro.to_model_scale(test.values)
    result = score(truth, recon.median, recon.lower, recon.upper, index=index or raw_hydro.name,
                   description=description, converged=archive.converged)
    if not archive.converged:
        log.warning("%s: convergence check failed for %s; excluded from the pooled score",
                    result.index, ", ".join(archive.flagged[:5]))
    return result


def _validate_case(case: dict) -> ValidationResult:
    return validate(**case)


def validate_many(cases: Sequence[dict], n_jobs: int = 1) -> tuple[list[ValidationResult], ValidationResult]:
    """Run ``validate(**case)`` for each case, then pool the converged ones."""
    if n_jobs > 1 and len(cases) > 1:
        with ProcessPoolExecutor(max_workers=min(n_jobs, len(cases))) as ex:
            results = list(ex.map(_validate_case, cases))
    else:
        results = [_validate_case(c) for c in cases]
    return results, pool(results)


def to_frame(results: Sequence[ValidationResult], pooled: ValidationResult | None = None) -> pd.DataFrame:
    rows = [r.row() for r in results]
    if pooled is not None:
        rows.append(pooled.row())
    return pd.DataFrame(rows, columns=VALIDATION_COLUMNS)
