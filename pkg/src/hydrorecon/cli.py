"""Command-line interface.

Usage::

    hydrorecon {filter,fit,reconstruct,validate,simulate} --config run.json [flags]

The config file is a flat JSON object; command-line flags override its
values, and the merged result is echoed into ``manifest.json`` next to the
outputs. Relative paths in the config resolve against the config file's
directory.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 convergence check failed (all artifacts are still written).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, validation
from .errors import ConfigError, DataError, HydroReconError
from .ingest import load_hydro, load_proxies, write_hydro, write_proxies
from .model import ModelSpec, TrueParameters, simulate
from .pipeline import fit, prepare, reconstruct
from .proxy_filter import DEFAULT_THRESHOLD
from .sampler import McmcConfig

log = logging.getLogger("hydrorecon")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CONVERGENCE = 0, 1, 2, 3
COMMANDS = ("filter", "fit", "reconstruct", "validate", "simulate")

DEFAULTS = {
    "hydro": None,
    "proxies": None,
    "out": "out",
    "index": None,
    "description": "",
    "year_col": "year",
    "value_col": "value",
    "boxcox": False,
    "threshold": DEFAULT_THRESHOLD,
    "include": [],
    "exclude": [],
    "k_holdout": validation.DEFAULT_HOLDOUT,
    "truth": None,
    "seed": None,
}
SPEC_KEYS = tuple(f.name for f in fields(ModelSpec) if f.name != "seed")
MCMC_KEYS = tuple(f.name for f in fields(McmcConfig) if f.name != "seed")
PATH_KEYS = ("hydro", "proxies", "out", "truth")
KNOWN_KEYS = set(DEFAULTS) | set(SPEC_KEYS) | set(MCMC_KEYS)

# flag name -> config key
FLAG_KEYS = {
    "seed": "seed",
    "out": "out",
    "threshold": "threshold",
    "chains": "n_chains",
    "iters": "n_iter",
    "burn": "n_burn",
    "thin": "thin",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hydrorecon", description="Bayesian multi-proxy hydroclimate reconstruction.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="master random seed (required here or in the config)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--threshold", type=float, help="proxy filter threshold (default 3.5)")
    p.add_argument("--chains", type=int, help="number of MCMC chains")
    p.add_argument("--iters", type=int, help="iterations per chain")
    p.add_argument("--burn", type=int, help="burn-in iterations per chain")
    p.add_argument("--thin", type=int, help="keep every n-th post-burn-in draw")
    p.add_argument("--trend", action="store_true", default=None, help="include the linear trend in the process model")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    return p


def load_config(args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and command-line flags."""
    cfg = dict(DEFAULTS)
    base = Path.cwd()
    if args.config is not None:
        if not args.config.is_file():
            raise ConfigError(f"config file not found: {args.config}")
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
        unknown = sorted(set(file_cfg) - KNOWN_KEYS)
        if unknown:
            raise ConfigError(f"{args.config}: unknown key(s) {unknown}")
        base = args.config.resolve().parent
        for key in PATH_KEYS:
            if file_cfg.get(key) is not None:
                file_cfg[key] = str(base / file_cfg[key])
        cfg.update(file_cfg)
    for flag, key in FLAG_KEYS.items():
        v = getattr(args, flag)
        if v is not None:
            cfg[key] = str(v) if isinstance(v, Path) else v
    if args.trend:
        cfg["trend"] = True
    if cfg["seed"] is None:
        raise ConfigError("a seed is required (--seed or \"seed\" in the config)")
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool) or cfg["seed"] < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {cfg['seed']!r}")
    return cfg


def model_spec(cfg: dict) -> ModelSpec:
    return ModelSpec.from_dict({k: cfg[k] for k in SPEC_KEYS if k in cfg} | {"seed": cfg["seed"]})


def mcmc_config(cfg: dict) -> McmcConfig:
    try:
        return McmcConfig.from_dict({k: cfg[k] for k in MCMC_KEYS if k in cfg} | {"seed": cfg["seed"]})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(cfg: dict, *keys):
    for k in keys:
        if not cfg.get(k):
            raise ConfigError(f"config key {k!r} is required for this command")


def write_manifest(out: Path, command: str, cfg: dict, inputs: dict, outputs: list[str], extra=None) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg["seed"],
        "config": cfg,
        "inputs": {k: {"path": v, "sha256": sha256(v)} for k, v in inputs.items()},
        "outputs": {name: sha256(out / name) for name in outputs},
    }
    if extra:
        manifest.update(extra)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_inputs(cfg: dict):
    _require(cfg, "hydro", "proxies")
    hydro = load_hydro(cfg["hydro"], cfg["year_col"], cfg["value_col"], name=cfg["index"])
    records = load_proxies(cfg["proxies"])
    return hydro, records


def _prepare(cfg: dict):
    hydro, records = _load_inputs(cfg)
    return prepare(hydro, records, boxcox=bool(cfg["boxcox"]), threshold=float(cfg["threshold"]),
                   include=cfg["include"], exclude=cfg["exclude"])


def _inputs(cfg: dict) -> dict:
    return {"hydro": cfg["hydro"], "proxies": cfg["proxies"]}


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def cmd_filter(cfg: dict, out: Path) -> int:
    prepared = _prepare(cfg)
    prepared.report.to_csv(out / "filter_report.csv")
    write_manifest(out, "filter", cfg, _inputs(cfg), ["filter_report.csv"])
    return EXIT_OK


def _fit(cfg: dict, out: Path):
    spec, config = model_spec(cfg), mcmc_config(cfg)
    prepared = _prepare(cfg)
    prepared.report.to_csv(out / "filter_report.csv")
    log.info("fitting %d proxies on %d-%d (%d chains x %d iterations)", prepared.data.M,
             prepared.grid.t_min, prepared.grid.t_max, config.n_chains, config.n_iter)
    archive = fit(prepared, spec, config)
    archive.write_draws(out / "draws.csv")
    archive.write_diagnostics(out / "diagnostics.json")
    if archive.flagged:
        log.warning("convergence check failed for %d parameter(s): %s", len(archive.flagged),
                    ", ".join(archive.flagged[:10]) + (" ..." if len(archive.flagged) > 10 else ""))
    return prepared, archive


def cmd_fit(cfg: dict, out: Path) -> int:
    _, archive = _fit(cfg, out)
    write_manifest(out, "fit", cfg, _inputs(cfg), ["filter_report.csv", "draws.csv", "diagnostics.json"],
                   {"converged": archive.converged})
    return EXIT_OK if archive.converged else EXIT_CONVERGENCE


def cmd_reconstruct(cfg: dict, out: Path) -> int:
    prepared, archive = _fit(cfg, out)
    res = reconstruct(prepared, archive)
    res.reconstruction.to_frame().to_csv(out / "reconstruction.csv", index=False)
    res.reconstruction.to_frame(standardized=True).to_csv(out / "reconstruction_standardized.csv", index=False)
    res.exceedance.to_frame().to_csv(out / "exceedance.csv", index=False)
    summary = {
        "index": prepared.hydro.name,
        "boxcox_lambda": prepared.hydro.transform.lmbda if prepared.hydro.transform else None,
        "standardization": {"mean": prepared.hydro.standardization[0], "sd": prepared.hydro.standardization[1]},
        "I_min": res.exceedance.I_min,
        "I_max": res.exceedance.I_max,
        "converged": archive.converged,
        "flagged": archive.flagged,
        **res.stats,
    }
    _write_json(out / "summary.json", summary)
    outputs = ["filter_report.csv", "draws.csv", "diagnostics.json", "reconstruction.csv",
               "reconstruction_standardized.csv", "exceedance.csv", "summary.json"]
    write_manifest(out, "reconstruct", cfg, _inputs(cfg), outputs, {"converged": archive.converged})
    return EXIT_OK if archive.converged else EXIT_CONVERGENCE


def cmd_validate(cfg: dict, out: Path) -> int:
    hydro, records = _load_inputs(cfg)
    result = validation.validate(
        hydro, records, model_spec(cfg), mcmc_config(cfg),
        k=int(cfg["k_holdout"]), boxcox=bool(cfg["boxcox"]), threshold=float(cfg["threshold"]),
        include=cfg["include"], exclude=cfg["exclude"], index=cfg["index"] or hydro.name,
        description=cfg["description"],
    )
    pooled = validation.pool([result])
    validation.to_frame([result], pooled).to_csv(out / "validation.csv", index=False)
    log.info("validation: coverage %.1f%%, mean error %.3f, RMSE %.3f (n=%d)",
             result.coverage, result.mean_error, result.rmse, result.n)
    write_manifest(out, "validate", cfg, _inputs(cfg), ["validation.csv"], {"converged": result.converged})
    return EXIT_OK if result.converged else EXIT_CONVERGENCE


def cmd_simulate(cfg: dict, out: Path) -> int:
    _require(cfg, "truth")
    try:
        truth = TrueParameters.from_json(cfg["truth"])
    except FileNotFoundError as exc:
        raise DataError(f"file not found: {cfg['truth']}") from exc
    except (TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{cfg['truth']}: invalid true-parameter file ({exc})") from exc
    spec = model_spec(cfg)
    sim = simulate(spec, truth, cfg["seed"])
    write_hydro(sim.hydro, out / "hydro.csv")
    write_proxies(sim.proxies, out / "proxies.csv")
    pd.DataFrame({"year": sim.years, "I": sim.I_true, "eta": sim.eta_true}).to_csv(out / "truth.csv", index=False)
    _write_json(out / "truth.json", truth.to_dict())
    write_manifest(out, "simulate", cfg, {"truth": cfg["truth"]},
                   ["hydro.csv", "proxies.csv", "truth.csv", "truth.json"])
    return EXIT_OK


HANDLERS = {
    "filter": cmd_filter,
    "fit": cmd_fit,
    "reconstruct": cmd_reconstruct,
    "validate": cmd_validate,
    "simulate": cmd_simulate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = load_config(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        return HANDLERS[args.command](cfg, out)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except HydroReconError as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
