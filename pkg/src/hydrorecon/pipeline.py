"""End-to-end steps shared by the CLI and the validation harness."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError
from .ingest import (
    HydroSeries,
    ProxyRecord,
    TimeGrid,
    align,
    apply_boxcox,
    make_grid,
    standardize,
    standardize_proxy,
)
from .model import ModelData, ModelSpec, build_model_data
from .posterior import ExceedanceTable, PosteriorArchive, Reconstruction, exceedance, summarize, summary_stats
from .proxy_filter import DEFAULT_THRESHOLD, FilterReport, apply_filter
from .sampler import McmcConfig, run_chains

log = logging.getLogger(__name__)


@dataclass(eq=False)
class Prepared:
    """Model-ready inputs plus everything needed to map results back."""

    raw_hydro: HydroSeries
    hydro: HydroSeries
    records: list[ProxyRecord]
    report: FilterReport
    grid: TimeGrid
    data: ModelData


def _standardize_proxies(records: Sequence[ProxyRecord]) -> list[ProxyRecord]:
    out = []
    for r in records:
        if len(r) > 1 and np.std(r.values) > 0:
            out.append(standardize_proxy(r))
        else:
            # left raw; the filter rejects it as degenerate or single-obs
            log.warning("proxy %s: cannot standardise (constant or single value)", r.id)
            out.append(r)
    return out


def prepare(
    raw_hydro: HydroSeries,
    raw_records: Sequence[ProxyRecord],
    *,
    boxcox: bool = False,
    threshold: float = DEFAULT_THRESHOLD,
    include: Iterable[str] = (),
    exclude: Iterable[str] = (),
) -> Prepared:
    """Transform, standardise, align and filter, then lay out the model data."""
    hydro = apply_boxcox(raw_hydro) if boxcox else raw_hydro
    hydro = standardize(hydro)
    records = _standardize_proxies(raw_records)
    _, aligned = align(records, hydro)
    if not aligned:
        raise DataError("no proxy observations fall on the time grid")
    kept, report = apply_filter(aligned, threshold=threshold, include=include, exclude=exclude)
    grid = make_grid(kept, hydro)
    return Prepared(raw_hydro, hydro, kept, report, grid, build_model_data(hydro, kept, grid))


def fit(prepared: Prepared, spec: ModelSpec, config: McmcConfig) -> PosteriorArchive:
    return run_chains(prepared.data, spec, config)


@dataclass(eq=False)
class Results:
    reconstruction: Reconstruction
    exceedance: ExceedanceTable
    stats: dict


def reconstruct(prepared: Prepared, archive: PosteriorArchive, unit: str = "original") -> Results:
    """Quantiles, exceedance probabilities and period statistics.

    Exceedance thresholds are the instrumental extremes on the model scale,
    the scale of the draws.
    """
    hydro = prepared.hydro
    recon = summarize(archive, hydro, unit=unit)
    table = exceedance(archive, archive.recon_years, float(np.min(hydro.values)), float(np.max(hydro.values)))
    stats = summary_stats(recon, archive, hydro) if len(recon.years) else {}
    return Results(recon, table, stats)
