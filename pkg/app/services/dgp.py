"""
Seedable data generators.

The outcome model of the IV-environments design is not taken from any
published description; it is the smallest model with hidden confounding and
valid environment instruments:

    U ~ N(0, 1),  A ~ Bernoulli(clamp(pi_z + k_z U)),  Y = psi_i A + c U + sd N(0, 1)

with psi_i independent of everything else. Because U is independent of Z and
psi_i is independent of A, every environment contrast identifies psi_star
exactly, while observational A-Y associations are biased through U.

Every generator draws from `app.services.rng.stream(cfg.seed, <purpose>)`, so
a config with a seed fully determines its dataset.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.panel import EstimatorPanel
from app.services.functionals import (
    CovariateDataset,
    EnvDataset,
    RddDataset,
    StaggeredPanel,
    TwoPeriodPanel,
)
from app.services.rng import stream

logger = logging.getLogger(__name__)

RCT_PROPENSITY = 0.5
CLAMP_LO, CLAMP_HI = 0.01, 0.99
# standard-normal 0.995 quantile: |U| exceeds it on 1% of draws
CLAMP_Z = 2.5758293035489


class _Config(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# =============================================================================
# IV ENVIRONMENTS
# =============================================================================

class SimConfig(_Config):
    q: int = Field(7, ge=2)
    n_rct: int = Field(50, gt=0)
    n_obs: int = Field(1000, gt=0)
    psi_star: float = 1.5
    propensity_lo: float = Field(0.2, gt=0, lt=1)
    propensity_hi: float = Field(0.8, gt=0, lt=1)
    confounding: float = Field(1.0, ge=0)
    outcome_sd: float = Field(1.0, gt=0)
    effect_heterogeneity_sd: float = Field(0.0, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_bounds(self):
        if not self.propensity_lo < self.propensity_hi:
            raise ValueError("propensity_lo must be below propensity_hi")
        return self


def confounding_slope(propensity: float, confounding: float) -> float:
    """
    Loading of U on the treatment probability. Chosen so that pi + k U leaves
    [0.01, 0.99] only when |U| > 2.576, i.e. on under 1% of draws.
    """
    if confounding == 0:
        return 0.0
    margin = min(propensity - CLAMP_LO, CLAMP_HI - propensity)
    return max(margin, 0.0) / CLAMP_Z


def gen_iv_environments(cfg: SimConfig) -> EnvDataset:
    """Environment 0 is the randomized study (n_rct rows), then q-1 observational environments."""
    rng = stream(cfg.seed, "iv-environments")
    propensities = np.concatenate([[RCT_PROPENSITY], rng.uniform(cfg.propensity_lo, cfg.propensity_hi, cfg.q - 1)])
    sizes = np.array([cfg.n_rct] + [cfg.n_obs] * (cfg.q - 1))
    z = np.repeat(np.arange(cfg.q), sizes)
    n = z.size

    u = rng.standard_normal(n)
    slopes = np.array([0.0] + [confounding_slope(p, cfg.confounding) for p in propensities[1:]])
    raw = propensities[z] + slopes[z] * u
    prob = np.clip(raw, CLAMP_LO, CLAMP_HI)
    clamped = int(np.count_nonzero(prob != raw))
    if clamped:
        logger.info("Clamped %d of %d treatment probabilities (%.3f%%).", clamped, n, 100 * clamped / n)
    a = (rng.random(n) < prob).astype(float)

    psi_i = cfg.psi_star + cfg.effect_heterogeneity_sd * rng.standard_normal(n)
    y = psi_i * a + cfg.confounding * u + cfg.outcome_sd * rng.standard_normal(n)
    logger.debug("Environment propensities: %s", np.round(propensities, 4).tolist())
    return EnvDataset(z, a, y, cfg.q)


# =============================================================================
# META-LEVEL WORKING MODEL
# =============================================================================

class MetaConfig(_Config):
    """
    psi_j = psi_star + eps_j, psi_hat_j = psi_j + xi_j with equicorrelated xi.
    v_j is `v` for every functional, or drawn from U(v, v_hi) when v_hi is set.
    """
    J: int = Field(200, ge=2)
    psi_star: float = 0.0
    tau2: float = Field(1.0, ge=0)
    v: float = Field(0.01, gt=0)
    v_hi: Optional[float] = Field(None, gt=0)
    rho: float = Field(0.0, ge=0, lt=1)
    n_effective: int = Field(10000, ge=2)
    with_influence: bool = True
    seed: int = 0

    @model_validator(mode="after")
    def _check_range(self):
        if self.v_hi is not None and self.v_hi < self.v:
            raise ValueError("v_hi must be at least v")
        return self


@dataclass(frozen=True)
class MetaDraw:
    panel: EstimatorPanel
    latent: np.ndarray
    eps: np.ndarray
    xi: np.ndarray
    new_latent: float
    new_estimate: float
    new_variance: float


def _equicorrelated(rng: np.random.Generator, rho: float, shape) -> np.ndarray:
    """Standard normals with correlation rho along the last axis."""
    shared = rng.standard_normal(shape[:-1] + (1,))
    own = rng.standard_normal(shape)
    return np.sqrt(rho) * shared + np.sqrt(1.0 - rho) * own


def gen_meta_panel(cfg: MetaConfig) -> MetaDraw:
    """
    Draws J + 1 functionals from the working model and holds the last one out.
    The influence matrix comes from its own stream, so the estimates do not
    depend on `with_influence`.
    """
    rng = stream(cfg.seed, "meta-panel")
    size = cfg.J + 1
    if cfg.v_hi is None:
        variances = np.full(size, cfg.v)
    else:
        variances = rng.uniform(cfg.v, cfg.v_hi, size)
    eps = np.sqrt(cfg.tau2) * rng.standard_normal(size)
    xi = np.sqrt(variances) * _equicorrelated(rng, cfg.rho, (size,))
    latent = cfg.psi_star + eps
    estimates = latent + xi

    influence = None
    if cfg.with_influence:
        n = cfg.n_effective
        draws = _equicorrelated(stream(cfg.seed, "meta-influence"), cfg.rho, (n, cfg.J))
        influence = draws * np.sqrt(n * variances[: cfg.J])
        influence -= influence.mean(axis=0)

    panel = EstimatorPanel(
        estimates=estimates[: cfg.J],
        variances=variances[: cfg.J],
        labels=[f"f{j + 1}" for j in range(cfg.J)],
        influence=influence,
    )
    return MetaDraw(
        panel=panel,
        latent=latent[: cfg.J],
        eps=eps[: cfg.J],
        xi=xi[: cfg.J],
        new_latent=float(latent[-1]),
        new_estimate=float(estimates[-1]),
        new_variance=float(variances[-1]),
    )


# =============================================================================
# OTHER DESIGNS
# =============================================================================

class CovariateConfig(_Config):
    n: int = Field(5000, ge=10)
    p: int = Field(2, ge=0)
    ate: float = 2.0
    randomized: bool = False
    propensity_strength: float = Field(0.5, ge=0)
    outcome_sd: float = Field(1.0, gt=0)
    known_propensity: bool = True
    seed: int = 0


def gen_covariate_data(cfg: CovariateConfig) -> CovariateDataset:
    """Unconfounded given W: A depends on W only, Y = ate*A + sum(W) + noise."""
    rng = stream(cfg.seed, "covariate")
    w = rng.standard_normal((cfg.n, cfg.p))
    if cfg.randomized or cfg.p == 0:
        pi = np.full(cfg.n, 0.5)
    else:
        index = cfg.propensity_strength * w.sum(axis=1) / np.sqrt(cfg.p)
        pi = 1.0 / (1.0 + np.exp(-index))
    a = (rng.random(cfg.n) < pi).astype(float)
    y = cfg.ate * a + w.sum(axis=1) + cfg.outcome_sd * rng.standard_normal(cfg.n)
    return CovariateDataset(w, a, y, pi if cfg.known_propensity else None)


class TwoPeriodConfig(_Config):
    n_per_group: int = Field(2000, ge=2)
    K: int = Field(3, ge=1)
    att: float = 1.2
    trend: float = 0.5
    group_effect_sd: float = Field(1.0, ge=0)
    outcome_sd: float = Field(1.0, gt=0)
    seed: int = 0


def gen_two_period(cfg: TwoPeriodConfig) -> TwoPeriodPanel:
    """Group-specific levels with a common trend, so parallel trends hold exactly."""
    rng = stream(cfg.seed, "two-period")
    c = np.repeat(np.arange(cfg.K + 1), cfg.n_per_group)
    levels = cfg.group_effect_sd * rng.standard_normal(cfg.K + 1)
    y_pre = levels[c] + cfg.outcome_sd * rng.standard_normal(c.size)
    y_post = levels[c] + cfg.trend + cfg.att * (c == 0) + cfg.outcome_sd * rng.standard_normal(c.size)
    return TwoPeriodPanel(c, y_pre, y_post)


class StaggeredConfig(_Config):
    n_per_cohort: int = Field(2000, ge=2)
    T: int = Field(4, ge=2)
    cohorts: List[int] = [2, 3]
    effect_slope: float = 0.5
    outcome_sd: float = Field(1.0, gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_cohorts(self):
        if any(g < 2 or g > self.T for g in self.cohorts):
            raise ValueError("cohorts must lie in 2..T")
        return self


def staggered_att(g: int, t: int, slope: float) -> float:
    return slope * (t - g + 1) if t >= g else 0.0


def gen_staggered(cfg: StaggeredConfig) -> StaggeredPanel:
    """Unit and period effects plus ATT(g, t) = effect_slope * (t - g + 1) once treated."""
    rng = stream(cfg.seed, "staggered")
    groups = [float(g) for g in cfg.cohorts] + [np.inf]
    g = np.repeat(groups, cfg.n_per_cohort)
    unit = rng.standard_normal(g.size)
    period = rng.standard_normal(cfg.T)
    y = unit[:, None] + period[None, :] + cfg.outcome_sd * rng.standard_normal((g.size, cfg.T))
    for cohort in cfg.cohorts:
        rows = g == cohort
        for t in range(cohort, cfg.T + 1):
            y[rows, t - 1] += staggered_att(cohort, t, cfg.effect_slope)
    return StaggeredPanel(g, y)


class RddConfig(_Config):
    cutoffs: List[float] = [-0.5, 0.0, 0.5]
    n_per_site: int = Field(5000, ge=40)
    half_range: float = Field(1.0, gt=0)
    jump: float = 0.8
    slope_left: float = 1.0
    slope_right: float = 0.5
    fuzzy: bool = False
    base_takeup: float = Field(0.3, ge=0, le=1)
    first_stage: float = Field(0.4, ge=0, le=1)
    late: float = 1.0
    outcome_sd: float = Field(1.0, gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if any(b <= a for a, b in zip(self.cutoffs, self.cutoffs[1:])):
            raise ValueError("cutoffs must be strictly increasing")
        if self.base_takeup + self.first_stage > 1:
            raise ValueError("base_takeup + first_stage must not exceed 1")
        return self


def gen_rdd(cfg: RddConfig) -> RddDataset:
    """
    Site k draws X ~ U(c_k - half_range, c_k + half_range). Sharp designs jump
    by `jump` at the cutoff; fuzzy designs raise take-up by `first_stage` and
    let the outcome respond to A with effect `late`.
    """
    rng = stream(cfg.seed, "rdd")
    cutoffs = np.asarray(cfg.cutoffs, dtype=float)
    site = np.repeat(np.arange(1, cutoffs.size + 1), cfg.n_per_site)
    c = cutoffs[site - 1]
    x = c + rng.uniform(-cfg.half_range, cfg.half_range, site.size)
    above = x >= c
    centered = x - c
    trend = np.where(above, cfg.slope_right * centered, cfg.slope_left * centered)
    noise = cfg.outcome_sd * rng.standard_normal(site.size)
    if cfg.fuzzy:
        a = (rng.random(site.size) < cfg.base_takeup + cfg.first_stage * above).astype(float)
        y = trend + cfg.late * a + noise
    else:
        a = above.astype(float)
        y = trend + cfg.jump * a + noise
    return RddDataset(x, site, y, cutoffs, a)
