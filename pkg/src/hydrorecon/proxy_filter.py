"""Modern-analogue screening of proxy records.

A proxy is dropped when its reconstruction-period extremes sit too many
calibration standard deviations away from its calibration mean, or when it
has fewer than two calibration observations.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import DataError
from .ingest import ProxyRecord

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 3.5

KEPT = "kept"
FILTERED_RANGE = "filtered_range"
FILTERED_SINGLE_OBS = "filtered_single_obs"
FILTERED_DEGENERATE = "filtered_degenerate"
FILTERED_MANUAL = "filtered_manual"


@dataclass(frozen=True)
class FilterEntry:
    dataset_id: str
    F: float
    calib_mean: float
    calib_sd: float
    recon_min: float
    recon_max: float
    n_calibration: int
    n_reconstruction: int
    decision: str
    reason: str

    @property
    def kept(self) -> bool:
        return self.decision == KEPT


@dataclass
class FilterReport:
    threshold: float
    entries: list[FilterEntry] = field(default_factory=list)
    threshold_overridden: bool = False

    @property
    def kept_ids(self) -> list[str]:
        return [e.dataset_id for e in self.entries if e.kept]

    @property
    def filtered_ids(self) -> list[str]:
        return [e.dataset_id for e in self.entries if not e.kept]

    def __getitem__(self, dataset_id: str) -> FilterEntry:
        for e in self.entries:
            if e.dataset_id == dataset_id:
                return e
        raise KeyError(dataset_id)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "dataset_id": [e.dataset_id for e in self.entries],
                "F": [e.F for e in self.entries],
                "decision": [e.decision for e in self.entries],
                "reason": [e.reason for e in self.entries],
            }
        )

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    def log_lines(self) -> list[str]:
        lines = [f"filter threshold {self.threshold:g}" + (" (user override)" if self.threshold_overridden else "")]
        for e in self.entries:
            lines.append(f"{e.dataset_id}: F={e.F:.3f} {e.decision} ({e.reason})")
        return lines


def filter_measure(record: ProxyRecord) -> float:
    """Largest distance, in calibration sds, of a reconstruction extreme from the calibration mean.

    Returns inf when the calibration values have zero spread and NaN when
    there are no reconstruction observations.
    """
    calib = record.calibration_values
    recon = record.reconstruction_values
    if calib.size < 2:
        raise DataError(f"proxy {record.id}: need at least two calibration observations")
    if recon.size == 0:
        return math.nan
    mean = float(np.mean(calib))
    sd = float(np.std(calib, ddof=1))
    lo, hi = float(np.min(recon)), float(np.max(recon))
    if sd == 0.0:
        return math.inf
    return max(abs(mean - lo) / sd, abs(hi - mean) / sd)


def _entry(record: ProxyRecord, threshold: float) -> FilterEntry:
    calib = record.calibration_values
    recon = record.reconstruction_values
    n_c, n_r = int(calib.size), int(recon.size)
    mean = float(np.mean(calib)) if n_c else math.nan
    sd = float(np.std(calib, ddof=1)) if n_c > 1 else math.nan
    lo = float(np.min(recon)) if n_r else math.nan
    hi = float(np.max(recon)) if n_r else math.nan

    def make(F, decision, reason):
        return FilterEntry(record.id, F, mean, sd, lo, hi, n_c, n_r, decision, reason)

    if n_c <= 1:
        return make(math.nan, FILTERED_SINGLE_OBS, f"{n_c} calibration observation(s)")
    if sd == 0.0:
        return make(math.inf, FILTERED_DEGENERATE, "degenerate calibration")
    if n_r == 0:
        return make(math.nan, KEPT, "no reconstruction observations")
    F = filter_measure(record)
    if F > threshold:
        return make(F, FILTERED_RANGE, f"F > {threshold:g}")
    return make(F, KEPT, f"F <= {threshold:g}")


def apply_filter(
    records: Sequence[ProxyRecord],
    threshold: float = DEFAULT_THRESHOLD,
    include: Iterable[str] = (),
    exclude: Iterable[str] = (),
) -> tuple[list[ProxyRecord], FilterReport]:
    """Screen aligned records; manual include/exclude lists win over the rule."""
    include, exclude = set(include), set(exclude)
    both = include & exclude
    if both:
        raise DataError(f"proxies both included and excluded: {sorted(both)}")
    if not threshold > 0:
        raise DataError(f"filter threshold must be positive, got {threshold}")

    report = FilterReport(threshold=threshold, threshold_overridden=threshold != DEFAULT_THRESHOLD)
    kept = []
    for r in records:
        e = _entry(r, threshold)
        if r.id in exclude:
            e = replace(e, decision=FILTERED_MANUAL, reason="manual")
        elif r.id in include and not e.kept:
            if e.n_calibration < 1:
                raise DataError(f"proxy {r.id} cannot be included: no calibration observations")
            e = replace(e, decision=KEPT, reason="manual")
        report.entries.append(e)
        if e.kept:
            kept.append(r)

    for line in report.log_lines():
        log.info(line)
    if not kept:
        raise DataError("no proxies survive filtering")
    return kept, report
