"""Bayesian multi-proxy reconstruction of hydroclimate indices."""
from .errors import ConfigError, DataError, HydroReconError, NumericalError, SupportError
from .ingest import (
    BoxCoxState,
    HydroSeries,
    ProxyRecord,
    TimeGrid,
    align,
    fit_boxcox,
    load_hydro,
    load_proxies,
    standardize,
    standardize_proxy,
)
from .model import ModelData, ModelSpec, ParameterState, ProxyDesign, TrueParameters, build_model_data, simulate
from .posterior import ExceedanceTable, PosteriorArchive, Reconstruction, exceedance, summarize, summary_stats
from .proxy_filter import FilterReport, apply_filter, filter_measure
from .sampler import McmcConfig, run_chains

__version__ = "0.1.0"

__all__ = [
    "BoxCoxState",
    "ConfigError",
    "DataError",
    "ExceedanceTable",
    "FilterReport",
    "HydroReconError",
    "HydroSeries",
    "McmcConfig",
    "ModelData",
    "ModelSpec",
    "NumericalError",
    "ParameterState",
    "PosteriorArchive",
    "ProxyDesign",
    "ProxyRecord",
    "Reconstruction",
    "SupportError",
    "TimeGrid",
    "TrueParameters",
    "align",
    "apply_filter",
    "build_model_data",
    "exceedance",
    "filter_measure",
    "fit_boxcox",
    "load_hydro",
    "load_proxies",
    "run_chains",
    "simulate",
    "standardize",
    "standardize_proxy",
    "summarize",
    "summary_stats",
]
