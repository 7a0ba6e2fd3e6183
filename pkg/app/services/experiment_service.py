"""
End-to-end procedures behind the CLI: one IV-environments run, Monte Carlo
coverage studies, and one split-conformal draw. Results are plain objects and
pandas tables; writing files is left to the caller. Finished runs can be
recorded in the SQL run ledger.
"""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Callable, Dict, List, Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from sqlalchemy.exc import SQLAlchemyError

from app import __version__
from app.core.config import settings
from app.core.errors import ConfigError, EbPoolError
from app.core.panel import EbFit, EstimatorPanel, Tau2Method, max_weight, orthogonality_gap
from app.services.conformal import (
    ConformalFit,
    ConformalMode,
    conformal_fit,
    conformal_interval,
    dkw_band,
    split_panel,
)
from app.services.dgp import MetaConfig, SimConfig, gen_iv_environments, gen_meta_panel
from app.services.functionals import EnvDataset, build_iv_panel
from app.services.heterogeneity import Tau2Result, fit_panel
from app.services.inference import (
    IntervalReport,
    effective_sample_gain,
    rct_only_interval,
    sandwich_interval,
    squared_length_ratio,
    subsampling_interval,
)
from app.services.rng import derive_seed, stream

logger = logging.getLogger(__name__)

MIN_COVERAGE_REPS = 100
Scenario = Literal["constant", "iv_exact", "meta_positive", "meta_zero"]


# =============================================================================
# RUN OPTIONS (the [run] table of a config file)
# =============================================================================

class _Options(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SingleRunOptions(_Options):
    tau2_method: Tau2Method = Tau2Method.PAIRWISE
    alpha: float = Field(0.1, gt=0, lt=1)
    B: int = Field(500, ge=50)
    m: Optional[int] = Field(None, ge=2)
    include_rct: bool = True
    robust: bool = False
    hist_bins: int = Field(30, ge=2)


class CoverageOptions(_Options):
    scenario: Scenario = "iv_exact"
    reps: int = Field(1000, ge=1)
    alpha: float = Field(0.1, gt=0, lt=1)
    tau2_method: Tau2Method = Tau2Method.PAIRWISE
    subsampling: bool = False
    B: int = Field(300, ge=50)


class ConformalOptions(_Options):
    alpha: float = Field(0.1, gt=0, lt=1)
    beta: float = Field(0.05, gt=0, lt=1)
    split_seed: Optional[int] = None


# =============================================================================
# RESULTS
# =============================================================================

@dataclass
class SingleRunResult:
    data: EnvDataset
    panel: EstimatorPanel
    fit: EbFit
    tau: Tau2Result
    fit_pm: EbFit
    tau_pm: Tau2Result
    sandwich: IntervalReport
    subsampling: IntervalReport
    rct_only: IntervalReport

    @property
    def ratio(self) -> float:
        return squared_length_ratio(self.subsampling, self.rct_only)

    def summary(self) -> dict:
        return {
            "J": self.panel.J,
            "excluded": list(self.panel.excluded),
            "psi_eb": self.fit.psi_eb,
            "tau2": self.tau.tau2,
            "tau2_method": self.tau.method.value,
            "tau2_boundary": self.tau.boundary,
            "paule_mandel": {
                "psi_eb": self.fit_pm.psi_eb,
                "tau2": self.tau_pm.tau2,
                "boundary": self.tau_pm.boundary,
            },
            "max_weight": max_weight(self.fit),
            "orthogonality_gap": orthogonality_gap(self.panel, self.fit.psi_eb, self.fit.tau2),
            "intervals": {
                "sandwich": self.sandwich.to_dict(),
                "subsampling": self.subsampling.to_dict(),
                "rct_only": self.rct_only.to_dict(),
            },
            "squared_length_ratio": self.ratio,
            "effective_sample_gain": effective_sample_gain(self.subsampling, self.rct_only),
        }


@dataclass
class ConformalRunResult:
    panel: EstimatorPanel
    fit: ConformalFit
    signed: IntervalReport
    two_sided: IntervalReport
    train_centered: IntervalReport
    new_latent: float
    dkw: float
    beta: float

    @property
    def intervals(self) -> Dict[str, IntervalReport]:
        return {
            ConformalMode.SIGNED.value: self.signed,
            ConformalMode.TWO_SIDED_ABS.value: self.two_sided,
            ConformalMode.TRAIN_CENTERED.value: self.train_centered,
        }

    def summary(self) -> dict:
        return {
            "J": self.panel.J,
            "fit": self.fit.to_dict(),
            "intervals": {name: report.to_dict() for name, report in self.intervals.items()},
            "new_latent": self.new_latent,
            "covered": {name: report.contains(self.new_latent) for name, report in self.intervals.items()},
            "dkw_band": self.dkw,
            "dkw_beta": self.beta,
            "noise_dominance": self.fit.noise_ratio,
            "warnings": list(self.fit.warnings),
        }


def histogram_table(values, bins: int, trim: Optional[float] = None) -> pd.DataFrame:
    """Bin edges and counts; `trim` drops values outside the [trim, 1 - trim] quantiles first."""
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if trim is not None and values.size:
        lo, hi = np.quantile(values, [trim, 1 - trim], method="inverted_cdf")
        values = values[(values >= lo) & (values <= hi)]
    counts, edges = np.histogram(values, bins=bins)
    return pd.DataFrame({"bin_lo": edges[:-1], "bin_hi": edges[1:], "count": counts})


# =============================================================================
# SERVICE
# =============================================================================

class ExperimentService:
    """
    Wires generators, panel builders, tau^2 estimators and interval
    procedures into the reproducible runs exposed by the CLI.
    """

    def __init__(self, threads: Optional[int] = None):
        self.threads = settings.THREADS if threads is None else max(1, int(threads))

    def iv_pipeline(self, method: Tau2Method, include_rct: bool = True) -> Callable[[EnvDataset], EbFit]:
        """Panel construction, tau^2 and the combiner, as re-run on every subsample."""

        def pipeline(data: EnvDataset) -> EbFit:
            panel = build_iv_panel(data, include_rct=include_rct, with_influence=False, strict_rct=False)
            fit, _ = fit_panel(panel, method)
            return fit

        return pipeline

    # --- single run ------------------------------------------------------

    def single_run(self, sim: SimConfig, options: SingleRunOptions) -> SingleRunResult:
        logger.info("Single run: q=%d, n_rct=%d, n_obs=%d, seed=%d", sim.q, sim.n_rct, sim.n_obs, sim.seed)
        data = gen_iv_environments(sim)
        panel = build_iv_panel(data, include_rct=options.include_rct, robust=options.robust, threads=self.threads)
        fit, tau = fit_panel(panel, options.tau2_method)
        fit_pm, tau_pm = fit_panel(panel, Tau2Method.PAULE_MANDEL)
        logger.info("J=%d, psi_EB=%.6g, tau2=%.6g (%s)", panel.J, fit.psi_eb, tau.tau2, tau.method.value)

        sandwich = sandwich_interval(panel, fit, options.alpha)
        subsampling = subsampling_interval(
            data,
            self.iv_pipeline(options.tau2_method, options.include_rct),
            m=options.m,
            B=options.B,
            alpha=options.alpha,
            seed=sim.seed,
            threads=self.threads,
            strata=data.z,
        )
        rct = rct_only_interval(data, options.alpha)
        return SingleRunResult(data, panel, fit, tau, fit_pm, tau_pm, sandwich, subsampling, rct)

    # --- conformal -------------------------------------------------------

    def conformal(self, meta: MetaConfig, options: ConformalOptions) -> ConformalRunResult:
        draw = gen_meta_panel(meta.model_copy(update={"with_influence": False}))
        split_seed = meta.seed if options.split_seed is None else options.split_seed
        plan = split_panel(draw.panel, split_seed)
        fit = conformal_fit(draw.panel, plan, options.alpha)
        signed = conformal_interval(fit, draw.new_estimate, draw.new_variance, ConformalMode.SIGNED)
        two_sided = conformal_interval(fit, draw.new_estimate, draw.new_variance, ConformalMode.TWO_SIDED_ABS)
        centered = conformal_interval(fit, draw.new_estimate, draw.new_variance, ConformalMode.TRAIN_CENTERED)
        return ConformalRunResult(
            panel=draw.panel,
            fit=fit,
            signed=signed,
            two_sided=two_sided,
            train_centered=centered,
            new_latent=draw.new_latent,
            dkw=dkw_band(fit.j_cal, options.beta),
            beta=options.beta,
        )

    # --- coverage --------------------------------------------------------

    def _replicate(
        self, options: CoverageOptions, sim: SimConfig, meta: MetaConfig, seed: int, r: int
    ) -> Dict[str, tuple]:
        """One replication: {method: (covered, width)}."""
        rep_seed = derive_seed(seed, "coverage", r)
        if options.scenario == "constant":
            values = stream(rep_seed, "constant-data").standard_normal(MIN_COVERAGE_REPS)
            report = subsampling_interval(values, lambda _: sim.psi_star, m=20, B=50, alpha=options.alpha, seed=rep_seed)
            return {"subsampling": (report.contains(sim.psi_star), report.width)}

        if options.scenario == "iv_exact":
            data = gen_iv_environments(sim.model_copy(update={"seed": rep_seed}))
            panel = build_iv_panel(data)
            fit, _ = fit_panel(panel, options.tau2_method)
            reports = {
                "sandwich": sandwich_interval(panel, fit, options.alpha),
                "rct_only": rct_only_interval(data, options.alpha),
            }
            if options.subsampling:
                reports["subsampling"] = subsampling_interval(
                    data, self.iv_pipeline(options.tau2_method), B=options.B,
                    alpha=options.alpha, seed=rep_seed, strata=data.z,
                )
            return {name: (rep.contains(sim.psi_star), rep.width) for name, rep in reports.items()}

        tau2 = meta.tau2 if options.scenario == "meta_positive" else 0.0
        cfg = meta.model_copy(update={"seed": rep_seed, "tau2": tau2, "with_influence": False})
        draw = gen_meta_panel(cfg)
        fit = conformal_fit(draw.panel, split_panel(draw.panel, derive_seed(rep_seed, "split", 0)), options.alpha)
        out = {}
        for mode in ConformalMode:
            report = conformal_interval(fit, draw.new_estimate, draw.new_variance, mode)
            out[f"conformal_{mode.value}"] = (report.contains(draw.new_latent), report.width)
        return out

    def coverage(self, options: CoverageOptions, sim: SimConfig, meta: MetaConfig, seed: int) -> pd.DataFrame:
        """
        Runs `options.reps` independent replications and tabulates coverage and
        mean width per interval method. Replication r always uses
        derive_seed(seed, "coverage", r), so the table does not depend on the
        thread count.
        """
        if options.reps < MIN_COVERAGE_REPS:
            raise ConfigError(f"A coverage study needs at least {MIN_COVERAGE_REPS} reps, got {options.reps}.")
        logger.info("Coverage study '%s': %d reps", options.scenario, options.reps)

        def run(r: int):
            try:
                return self._replicate(options, sim, meta, seed, r)
            except EbPoolError as exc:
                logger.debug("Replication %d failed: %s", r, exc)
                return None

        if self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(run, range(options.reps)))
        else:
            results = [run(r) for r in range(options.reps)]

        failures = sum(result is None for result in results)
        if failures:
            logger.warning("%d of %d replications failed.", failures, options.reps)
        rows = []
        methods: List[str] = sorted({name for result in results if result for name in result})
        for name in methods:
            hits = [result[name] for result in results if result and name in result]
            covered = np.array([h[0] for h in hits], dtype=float)
            widths = np.array([h[1] for h in hits], dtype=float)
            p = float(covered.mean())
            rows.append({
                "scenario": options.scenario,
                "method": name,
                "reps": len(hits),
                "failures": failures,
                "coverage": p,
                "coverage_se": math.sqrt(p * (1 - p) / len(hits)),
                "mean_width": float(np.mean(widths[np.isfinite(widths)])) if np.isfinite(widths).any() else math.inf,
                "nominal": 1 - options.alpha,
            })
        return pd.DataFrame(rows)


# =============================================================================
# RUN LEDGER
# =============================================================================

def record_run(
    command: str,
    seed: int,
    config: dict,
    out_dir: str,
    outputs: List[str],
    exit_code: int,
    coverage: Optional[pd.DataFrame] = None,
) -> Optional[int]:
    """Stores the run in the SQL ledger; returns its id, or None when recording is off or fails."""
    if not settings.RECORD_RUNS:
        return None
    from app.db.database import SessionLocal, init_db
    from app.db.models import CoverageRecord, RunRecord

    db = None
    try:
        init_db()
        db = SessionLocal()
        run = RunRecord(
            command=command,
            seed=seed,
            version=__version__,
            config_json=json.dumps(config, sort_keys=True, default=str),
            out_dir=out_dir,
            outputs_json=json.dumps(outputs),
            exit_code=exit_code,
            created_at=datetime.now(timezone.utc),
        )
        if coverage is not None:
            for row in coverage.to_dict("records"):
                run.coverage.append(CoverageRecord(
                    scenario=row["scenario"],
                    method=row["method"],
                    reps=int(row["reps"]),
                    coverage=float(row["coverage"]),
                    mean_width=float(row["mean_width"]),
                ))
        db.add(run)
        db.commit()
        return run.id
    except SQLAlchemyError as exc:
        logger.warning("Could not record the run in the ledger: %s", exc)
        if db is not None:
            db.rollback()
        return None
    finally:
        if db is not None:
            db.close()
