"""
Confidence intervals for the common target.

* `sandwich_interval` - Wald interval from the observation-level sandwich
  variance of the pooled estimator.
* `subsampling_interval` - re-runs a whole estimation pipeline on
  subsamples drawn without replacement, so the randomness of tau^2 at the
  boundary carries into the interval.
* `rct_only_interval` - the randomized-study comparator.

Influence columns follow the panel convention Var(column) = n * v_j, so the
sandwich V_hat is on the per-observation scale and intervals use V_hat / n.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import norm

from app.core.config import settings
from app.core.errors import (
    EbPoolError,
    InvalidArgument,
    MissingInfluence,
    NegativeTau2,
    PipelineFailure,
    SubsampleInstability,
    ZeroWidth,
)
from app.core.panel import EbFit, EstimatorPanel
from app.services.functionals import EnvDataset, rct_difference
from app.services.rng import stream

logger = logging.getLogger(__name__)

MIN_REPLICATES = 50


class IntervalMethod(str, Enum):
    SANDWICH_WALD = "sandwich_wald"
    SUBSAMPLING = "subsampling"
    RCT_ONLY = "rct_only"
    CONFORMAL = "conformal"


@dataclass(frozen=True)
class IntervalReport:
    point: float
    lo: float
    hi: float
    level: float
    method: IntervalMethod
    meta: Dict[str, Any] = field(default_factory=dict)
    replicates: Optional[pd.DataFrame] = None

    def __post_init__(self):
        if not 0 < self.level < 1:
            raise InvalidArgument(f"level must lie in (0, 1), got {self.level}.")
        if not self.lo <= self.hi:
            raise InvalidArgument(f"Interval endpoints out of order: [{self.lo}, {self.hi}].")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, value: float) -> bool:
        return self.lo <= value <= self.hi

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "point": self.point,
            "lo": self.lo,
            "hi": self.hi,
            "level": self.level,
            "meta": self.meta,
        }


def _check_alpha(alpha: Optional[float]) -> float:
    alpha = settings.DEFAULT_ALPHA if alpha is None else alpha
    if not 0 < alpha < 1:
        raise InvalidArgument(f"alpha must lie in (0, 1), got {alpha}.")
    return float(alpha)


def normal_quantile(p: float) -> float:
    return float(norm.ppf(p))


# =============================================================================
# SANDWICH
# =============================================================================

@dataclass(frozen=True)
class SandwichComponents:
    a_hat: float
    b_hat: float
    v_hat: float
    n: int


def sandwich_variance(panel: EstimatorPanel, tau2: float) -> SandwichComponents:
    """
    Bread A = sum_j 1/(v_j + tau2); meat B = mean_i (sum_j D_ij / (v_j + tau2))^2;
    V = B / A^2.
    """
    if panel.influence is None:
        raise MissingInfluence("The sandwich variance needs the panel's influence matrix.")
    if panel.n < 2:
        raise MissingInfluence(f"The influence matrix needs at least 2 rows, got {panel.n}.")
    if not tau2 >= 0:
        raise NegativeTau2(f"tau2 must be non-negative, got {tau2}.")
    precision = 1.0 / (panel.variances + tau2)
    a_hat = float(precision.sum())
    summed = panel.influence @ precision
    b_hat = float(np.mean(summed**2))
    return SandwichComponents(a_hat, b_hat, b_hat / a_hat**2, panel.n)


def working_independence_variance(panel: EstimatorPanel, tau2: float) -> float:
    """Variance of psi_EB if the functionals were independent: 1 / sum_j 1/(v_j + tau2)."""
    if not tau2 >= 0:
        raise NegativeTau2(f"tau2 must be non-negative, got {tau2}.")
    return float(1.0 / np.sum(1.0 / (panel.variances + tau2)))


def sandwich_interval(panel: EstimatorPanel, fit: EbFit, alpha: Optional[float] = None) -> IntervalReport:
    alpha = _check_alpha(alpha)
    parts = sandwich_variance(panel, fit.tau2)
    z = normal_quantile(1 - alpha / 2)
    half = z * math.sqrt(parts.v_hat / parts.n)
    return IntervalReport(
        point=fit.psi_eb,
        lo=fit.psi_eb - half,
        hi=fit.psi_eb + half,
        level=1 - alpha,
        method=IntervalMethod.SANDWICH_WALD,
        meta={
            "A_hat": parts.a_hat,
            "B_hat": parts.b_hat,
            "V_hat": parts.v_hat,
            "n": parts.n,
            "tau2": fit.tau2,
            "z": z,
            "working_independence_variance": working_independence_variance(panel, fit.tau2),
        },
    )


# =============================================================================
# SUBSAMPLING
# =============================================================================

def default_subsample_size(n: int) -> int:
    return int(math.floor(n ** (2.0 / 3.0)))


def _take(data, indices: np.ndarray):
    if hasattr(data, "subsample"):
        return data.subsample(indices)
    if isinstance(data, (pd.DataFrame, pd.Series)):
        return data.iloc[indices]
    return np.asarray(data)[indices]


def _unpack(result):
    """A pipeline returns a float, an EbFit, or an (EbFit, Tau2Result)-like tuple."""
    if isinstance(result, tuple):
        result = result[0]
    if hasattr(result, "psi_eb"):
        return float(result.psi_eb), float(getattr(result, "tau2", np.nan))
    return float(result), np.nan


def _draw_indices(rng: np.random.Generator, n: int, m: int, strata: Optional[np.ndarray]) -> np.ndarray:
    """
    Simple random sample of m rows, or, with strata, a proportional draw of
    max(2, round(m * n_s / n)) rows from each stratum.
    """
    if strata is None:
        return np.sort(rng.choice(n, size=m, replace=False))
    picks = []
    for label in np.unique(strata):
        rows = np.flatnonzero(strata == label)
        take = min(rows.size, max(2, int(math.floor(m * rows.size / n + 0.5))))
        picks.append(rng.choice(rows, size=take, replace=False))
    return np.sort(np.concatenate(picks))


def subsampling_interval(
    data,
    pipeline: Callable[[Any], Any],
    m: Optional[int] = None,
    B: Optional[int] = None,
    alpha: Optional[float] = None,
    seed: int = 0,
    threads: int = 1,
    strata: Optional[Sequence] = None,
) -> IntervalReport:
    """
    Interval [psi - q_{1-a/2}(d)/sqrt(n), psi - q_{a/2}(d)/sqrt(n)] with
    d_b = sqrt(m)(psi_b - psi) over B subsamples of size m drawn without
    replacement. Replicate b always uses stream(seed, "subsample", b).

    Replicates whose pipeline raises a library error are recorded as failed;
    more than SUBSAMPLE_MAX_FAIL_RATE of them aborts with SubsampleInstability.
    Any other exception is re-raised as PipelineFailure with the replicate index.
    """
    alpha = _check_alpha(alpha)
    n = len(data)
    m = default_subsample_size(n) if m is None else int(m)
    B = settings.SUBSAMPLE_B if B is None else int(B)
    if not 2 <= m < n:
        raise InvalidArgument(f"Subsample size must satisfy 2 <= m < n; got m={m}, n={n}.")
    if B < MIN_REPLICATES:
        raise InvalidArgument(f"Need at least {MIN_REPLICATES} subsamples, got B={B}.")
    strata = None if strata is None else np.asarray(strata)
    if strata is not None and strata.size != n:
        raise InvalidArgument("strata must have one label per row.")

    psi_hat, tau2_hat = _unpack(pipeline(data))

    def replicate(b: int):
        idx = _draw_indices(stream(seed, "subsample", b), n, m, strata)
        try:
            psi_b, tau2_b = _unpack(pipeline(_take(data, idx)))
        except (EbPoolError, np.linalg.LinAlgError) as exc:
            logger.debug("Subsample %d failed: %s", b, exc)
            return b, idx.size, np.nan, np.nan, f"{type(exc).__name__}: {exc}"
        except Exception as exc:
            raise PipelineFailure(f"Pipeline raised {type(exc).__name__} on subsample {b}: {exc}", index=b) from exc
        return b, idx.size, psi_b, tau2_b, ""

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(replicate, range(B)))
    else:
        rows = [replicate(b) for b in range(B)]

    table = pd.DataFrame(rows, columns=["b", "m", "psi_b", "tau2_b", "error"])
    table["d"] = np.sqrt(table["m"]) * (table["psi_b"] - psi_hat)
    failed = table.index[table["error"] != ""].tolist()
    if len(failed) > settings.SUBSAMPLE_MAX_FAIL_RATE * B:
        raise SubsampleInstability(
            f"{len(failed)} of {B} subsamples failed; first error: {table.loc[failed[0], 'error']}",
            failed_indices=[int(table.loc[i, 'b']) for i in failed],
        )
    if failed:
        logger.warning("%d of %d subsamples failed and were dropped.", len(failed), B)

    d = table.loc[table["error"] == "", "d"].to_numpy()
    q_lo, q_hi = np.quantile(d, [alpha / 2, 1 - alpha / 2], method="inverted_cdf")
    root_n = math.sqrt(n)
    return IntervalReport(
        point=psi_hat,
        lo=psi_hat - q_hi / root_n,
        hi=psi_hat - q_lo / root_n,
        level=1 - alpha,
        method=IntervalMethod.SUBSAMPLING,
        meta={
            "m": m,
            "B": B,
            "seed": seed,
            "n": n,
            "failures": len(failed),
            "stratified": strata is not None,
            "tau2": tau2_hat,
        },
        replicates=table[["b", "m", "psi_b", "d", "tau2_b", "error"]],
    )


# =============================================================================
# COMPARATORS
# =============================================================================

def rct_only_interval(data: EnvDataset, alpha: Optional[float] = None) -> IntervalReport:
    """Difference of arm means in environment 0 with a Wald interval from the arm-mean variances."""
    alpha = _check_alpha(alpha)
    rct = rct_difference(data)
    z = normal_quantile(1 - alpha / 2)
    half = z * math.sqrt(rct.variance)
    treated = int(np.count_nonzero((data.z == 0) & (data.a == 1)))
    control = int(np.count_nonzero((data.z == 0) & (data.a == 0)))
    return IntervalReport(
        point=rct.estimate,
        lo=rct.estimate - half,
        hi=rct.estimate + half,
        level=1 - alpha,
        method=IntervalMethod.RCT_ONLY,
        meta={"variance": rct.variance, "n_treated": treated, "n_control": control, "z": z},
    )


def squared_length_ratio(a: IntervalReport, b: IntervalReport) -> float:
    """(width of a / width of b)^2; its reciprocal is the effective sample-size gain of a over b."""
    for report in (a, b):
        if not (math.isfinite(report.width) and report.width > 0):
            raise ZeroWidth(f"{report.method.value} interval has unusable width {report.width}.")
    return (a.width / b.width) ** 2


def effective_sample_gain(a: IntervalReport, b: IntervalReport) -> float:
    return 1.0 / squared_length_ratio(a, b)
