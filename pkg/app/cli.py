"""
Command-line entry point.

    python main.py single-run --config run.toml --out out/single
    python main.py coverage   --config cov.toml --reps 1000 --threads 4
    python main.py conformal  --config conf.toml
    python main.py gen-data   --design iv --config run.toml

A config file (TOML or JSON) holds a `[scenario]` table with generator fields
and an optional `[run]` table with command options. Precedence: built-in
defaults < environment / .env settings < config file < command-line flags.
Exit codes: 0 success, 2 configuration error, 3 estimation or pipeline error,
4 instability (all subsets weak, too many failed subsamples).
"""
import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from app import __version__
from app.core.config import settings
from app.core.errors import ConfigError, EbPoolError
from app.core.logging import configure_logging
from app.services import dgp
from app.services.experiment_service import (
    ConformalOptions,
    CoverageOptions,
    ExperimentService,
    SingleRunOptions,
    histogram_table,
    record_run,
)

logger = logging.getLogger(__name__)

LOG_TAU2_TRIM = 0.01

GENERATORS = {
    "iv": (dgp.SimConfig, dgp.gen_iv_environments),
    "meta": (dgp.MetaConfig, dgp.gen_meta_panel),
    "covariate": (dgp.CovariateConfig, dgp.gen_covariate_data),
    "two_period": (dgp.TwoPeriodConfig, dgp.gen_two_period),
    "staggered": (dgp.StaggeredConfig, dgp.gen_staggered),
    "rdd": (dgp.RddConfig, dgp.gen_rdd),
}


# =============================================================================
# CONFIG FILES
# =============================================================================

def load_config_file(path: Optional[str]) -> Dict[str, dict]:
    """Reads a TOML or JSON config into {"scenario": {...}, "run": {...}}."""
    if path is None:
        return {"scenario": {}, "run": {}}
    source = Path(path)
    try:
        if source.suffix.lower() == ".toml":
            import tomllib

            doc = tomllib.loads(source.read_text())
        else:
            doc = json.loads(source.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"Config file not found: {path}") from exc
    except (ValueError, OSError) as exc:
        raise ConfigError(f"Could not parse config file {path}: {exc}") from exc
    unknown = set(doc) - {"scenario", "run"}
    if unknown:
        raise ConfigError(f"Unknown top-level tables in {path}: {sorted(unknown)}")
    return {"scenario": dict(doc.get("scenario", {})), "run": dict(doc.get("run", {}))}


def build_model(model: type, values: dict, what: str) -> BaseModel:
    try:
        return model(**values)
    except ValidationError as exc:
        raise ConfigError(f"Invalid {what} configuration: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"Invalid {what} configuration: {exc}") from exc


def _with_seed(table: dict, seed: Optional[int]) -> dict:
    return table if seed is None else {**table, "seed": seed}


# =============================================================================
# RUN CONTEXT
# =============================================================================

@dataclass
class RunContext:
    """Collects the outputs of one command so the manifest can list them all."""
    command: str
    out_dir: Path
    seed: int = 0
    config: Dict[str, Any] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    coverage: Optional[pd.DataFrame] = None

    def _path(self, name: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / name
        self.outputs.append(str(path))
        return path

    def write_json(self, name: str, doc: dict) -> Path:
        path = self._path(name)
        path.write_text(json.dumps(doc, indent=2) + "\n")
        return path

    def write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        path = self._path(name)
        frame.to_csv(path, index=False, float_format="%.17g")
        return path

    def write_manifest(self, exit_code: int) -> Path:
        manifest = {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "version": __version__,
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "exit_code": exit_code,
            "outputs": list(self.outputs),
        }
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2) + "\n")
        return path


def _print_intervals(reports: Dict[str, Any]) -> None:
    print(f"{'method':<14}{'point':>14}{'lo':>14}{'hi':>14}{'level':>8}")
    for name, report in reports.items():
        print(f"{name:<14}{report.point:>14.6f}{report.lo:>14.6f}{report.hi:>14.6f}{report.level:>8.3f}")


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_single_run(args: argparse.Namespace, run: RunContext) -> int:
    tables = load_config_file(args.config)
    sim = build_model(dgp.SimConfig, _with_seed(tables["scenario"], args.seed), "scenario")
    options = build_model(SingleRunOptions, tables["run"], "run")
    run.seed = sim.seed
    run.config = {"scenario": sim.model_dump(mode="json"), "run": options.model_dump(mode="json")}

    result = ExperimentService(args.threads).single_run(sim, options)

    summary = {"command": run.command, "version": __version__, "seed": sim.seed, "config": run.config}
    summary.update(result.summary())
    run.write_json("summary.json", summary)
    run.write_csv("panel.csv", result.panel.to_frame())
    replicates = result.subsampling.replicates
    run.write_csv("replicates.csv", replicates)
    ok = replicates[replicates["error"] == ""]
    run.write_csv("hist_psi.csv", histogram_table(ok["psi_b"], options.hist_bins))
    run.write_csv(
        "hist_log_tau2.csv", histogram_table(np.log1p(ok["tau2_b"]), options.hist_bins, trim=LOG_TAU2_TRIM)
    )

    print(f"J={result.panel.J}  psi_EB={result.fit.psi_eb:.6f}  tau2={result.tau.tau2:.6g}")
    _print_intervals({"sandwich": result.sandwich, "subsampling": result.subsampling, "rct_only": result.rct_only})
    print(f"squared-length ratio (subsampling / rct_only) = {result.ratio:.4f}")
    return 0


def cmd_coverage(args: argparse.Namespace, run: RunContext) -> int:
    tables = load_config_file(args.config)
    run_table = dict(tables["run"])
    if args.reps is not None:
        run_table["reps"] = args.reps
    options = build_model(CoverageOptions, run_table, "run")
    scenario_table = _with_seed(tables["scenario"], args.seed)
    if options.scenario.startswith("meta"):
        meta = build_model(dgp.MetaConfig, scenario_table, "scenario")
        sim = dgp.SimConfig(seed=meta.seed)
        snapshot, seed = meta.model_dump(mode="json"), meta.seed
    else:
        sim = build_model(dgp.SimConfig, scenario_table, "scenario")
        meta = dgp.MetaConfig(seed=sim.seed)
        snapshot, seed = sim.model_dump(mode="json"), sim.seed
    run.seed = seed
    run.config = {"scenario": snapshot, "run": options.model_dump(mode="json")}

    table = ExperimentService(args.threads).coverage(options, sim, meta, seed)
    run.write_csv("coverage.csv", table)
    run.coverage = table
    print(table.to_string(index=False))
    return 0


def cmd_conformal(args: argparse.Namespace, run: RunContext) -> int:
    tables = load_config_file(args.config)
    meta = build_model(dgp.MetaConfig, _with_seed(tables["scenario"], args.seed), "scenario")
    options = build_model(ConformalOptions, tables["run"], "run")
    run.seed = meta.seed
    run.config = {"scenario": meta.model_dump(mode="json"), "run": options.model_dump(mode="json")}

    result = ExperimentService(args.threads).conformal(meta, options)
    doc = {"command": run.command, "version": __version__, "seed": meta.seed, "config": run.config}
    doc.update(result.summary())
    run.write_json("conformal.json", doc)

    print(f"J={result.panel.J}  tau2_train={result.fit.tau2_train:.6g}  q_hat={result.fit.q_hat:.6f}")
    _print_intervals(result.intervals)
    for message in result.fit.warnings:
        print(f"warning: {message}")
    return 0


def cmd_gen_data(args: argparse.Namespace, run: RunContext) -> int:
    model, generate = GENERATORS[args.design]
    tables = load_config_file(args.config)
    cfg = build_model(model, _with_seed(tables["scenario"], args.seed), "scenario")
    run.seed = cfg.seed
    run.config = {"design": args.design, "scenario": cfg.model_dump(mode="json")}

    generated = generate(cfg)
    if args.design == "meta":
        run.write_json("panel.json", generated.panel.to_dict())
        frame = generated.panel.to_frame()
        frame["latent"] = generated.latent
        run.write_csv("panel.csv", frame)
        run.write_json("held_out.json", {
            "latent": generated.new_latent,
            "estimate": generated.new_estimate,
            "variance": generated.new_variance,
        })
    else:
        run.write_csv("data.csv", generated.to_frame())
    print(f"Wrote {args.design} data to {run.out_dir}")
    return 0


# =============================================================================
# PARSER
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ebpool", description="Empirical-Bayes pooling of causal estimators.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="TOML or JSON file with [scenario] and [run] tables")
        p.add_argument("--seed", type=int, help="overrides scenario.seed")
        p.add_argument("--out", default=None, help="output directory (default: out/<command>)")
        p.add_argument("--threads", type=int, default=settings.THREADS, help="worker threads for replicates")
        p.add_argument("--log-level", default=None, help="overrides LOG_LEVEL")

    single = sub.add_parser("single-run", help="one IV-environments run with all three intervals")
    add_common(single)
    single.set_defaults(handler=cmd_single_run)

    coverage = sub.add_parser("coverage", help="Monte Carlo coverage of the interval procedures")
    add_common(coverage)
    coverage.add_argument("--reps", type=int, help="overrides run.reps")
    coverage.set_defaults(handler=cmd_coverage)

    conformal = sub.add_parser("conformal", help="one split-conformal draw from the meta-level model")
    add_common(conformal)
    conformal.set_defaults(handler=cmd_conformal)

    gen = sub.add_parser("gen-data", help="write a generated dataset")
    add_common(gen)
    gen.add_argument("--design", choices=sorted(GENERATORS), default="iv")
    gen.set_defaults(handler=cmd_gen_data)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    if args.threads < 1:
        logger.error("--threads must be at least 1")
        return ConfigError.exit_code
    out_dir = Path(args.out or Path("out") / args.command)
    run = RunContext(command=args.command, out_dir=out_dir)

    try:
        exit_code = args.handler(args, run)
    except EbPoolError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        exit_code = exc.exit_code

    if exit_code == 0:
        run.outputs.append(str(run.write_manifest(exit_code)))
    if run.config:
        record_run(
            run.command, run.seed, run.config, str(out_dir), run.outputs, exit_code,
            coverage=run.coverage,
        )
    return exit_code


if __name__ == "__main__":
    sys.exit(main())
