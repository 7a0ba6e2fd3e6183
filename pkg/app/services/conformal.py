"""
Split conformal prediction for the latent target of a new functional.

Half of the panel (floor(J/2) functionals) fits the working-model
hyperparameters; the rest are scored with
S_j = (psi_hat_j - psi_train) / sqrt(tau2_train + v_j), and the empirical
(1 - alpha) quantile of those scores scales the interval for a new functional.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from app.core.config import settings
from app.core.errors import (
    InvalidArgument,
    NonPositiveTau2,
    NonPositiveVariance,
    PanelTooSmall,
    QuantileInfeasible,
)
from app.core.panel import EstimatorPanel, Tau2Method, eb_combine
from app.services.heterogeneity import tau2_pairwise
from app.services.inference import IntervalMethod, IntervalReport
from app.services.rng import stream

logger = logging.getLogger(__name__)

MIN_SPLIT_SIZE = 4
# guards ceil() against level * n landing a rounding error above an integer
_CEIL_SLACK = 1e-9


class ConformalMode(str, Enum):
    SIGNED = "signed"
    TWO_SIDED_ABS = "two_sided_abs"
    TRAIN_CENTERED = "train_centered"


@dataclass(frozen=True)
class SplitPlan:
    train_idx: Tuple[int, ...]
    cal_idx: Tuple[int, ...]
    seed: int

    @property
    def J(self) -> int:
        return len(self.train_idx) + len(self.cal_idx)

    def validate(self, J: int) -> None:
        train, cal = set(self.train_idx), set(self.cal_idx)
        if train & cal:
            raise InvalidArgument("Training and calibration sets overlap.")
        if train | cal != set(range(J)):
            raise InvalidArgument(f"Split plan does not partition the {J} functionals.")
        if len(train) != J // 2:
            raise InvalidArgument(f"Training set must hold floor(J/2) = {J // 2} functionals.")


def split_panel(panel: EstimatorPanel, seed: int) -> SplitPlan:
    J = panel.J
    if J < MIN_SPLIT_SIZE:
        raise PanelTooSmall(f"Split conformal needs J >= {MIN_SPLIT_SIZE} functionals, got J={J}.")
    order = stream(seed, "conformal-split").permutation(J)
    return SplitPlan(
        train_idx=tuple(sorted(int(j) for j in order[: J // 2])),
        cal_idx=tuple(sorted(int(j) for j in order[J // 2:])),
        seed=int(seed),
    )


def conformal_quantile(scores, alpha: float) -> float:
    """inf{s : (1/n) #{S_j <= s} >= 1 - alpha}, i.e. the ceil((1-alpha) n)-th smallest score."""
    values = np.sort(np.asarray(scores, dtype=float))
    if values.size == 0:
        raise QuantileInfeasible("No calibration scores.")
    if not 0 < alpha < 1:
        raise InvalidArgument(f"alpha must lie in (0, 1), got {alpha}.")
    k = max(1, math.ceil((1 - alpha) * values.size - _CEIL_SLACK))
    return float(values[k - 1])


def _check_feasible(j_cal: int, alpha: float) -> None:
    needed = math.ceil((1 - alpha) * (j_cal + 1) - _CEIL_SLACK)
    if needed > j_cal:
        raise QuantileInfeasible(
            f"alpha={alpha} needs at least {needed} calibration functionals, only {j_cal} available."
        )


@dataclass(frozen=True)
class ConformalFit:
    psi_train: float
    tau2_train: float
    cal_scores: np.ndarray
    alpha: float
    q_hat: float
    plan: SplitPlan
    noise_ratio: float
    warnings: Tuple[str, ...] = field(default=())

    @property
    def j_cal(self) -> int:
        return int(self.cal_scores.size)

    def to_dict(self) -> dict:
        return {
            "psi_train": self.psi_train,
            "tau2_train": self.tau2_train,
            "alpha": self.alpha,
            "q_hat": self.q_hat,
            "cal_scores": self.cal_scores.tolist(),
            "train_idx": list(self.plan.train_idx),
            "cal_idx": list(self.plan.cal_idx),
            "split_seed": self.plan.seed,
            "noise_ratio": self.noise_ratio,
            "warnings": list(self.warnings),
        }

    def to_json(self, path: Optional[Union[str, Path]] = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text


def conformal_fit(panel: EstimatorPanel, plan: SplitPlan, alpha: Optional[float] = None) -> ConformalFit:
    """
    Pairwise tau^2 and the EB combination on the training half, then the
    calibration scores and their quantile. The noise-dominance ratio is
    computed on the calibration half; ratios above DOMINANCE_THRESHOLD, and a
    zero training tau^2, are recorded as warnings.
    """
    alpha = settings.DEFAULT_ALPHA if alpha is None else alpha
    if not 0 < alpha < 1:
        raise InvalidArgument(f"alpha must lie in (0, 1), got {alpha}.")
    plan.validate(panel.J)
    _check_feasible(len(plan.cal_idx), alpha)

    train = panel.subset(plan.train_idx)
    tau = tau2_pairwise(train)
    fit = eb_combine(train, tau.tau2, Tau2Method.PAIRWISE)

    cal = list(plan.cal_idx)
    scores = (panel.estimates[cal] - fit.psi_eb) / np.sqrt(tau.tau2 + panel.variances[cal])
    scores.setflags(write=False)

    warnings = []
    if tau.tau2 > 0:
        ratio = noise_dominance_diag(panel.subset(cal), tau.tau2)
    else:
        ratio = math.inf
        warnings.append("Training tau^2 is 0: scores are pure sampling noise and the interval is not a prediction interval.")
    if ratio > settings.DOMINANCE_THRESHOLD:
        warnings.append(f"Noise-dominance ratio {ratio:.3g} exceeds {settings.DOMINANCE_THRESHOLD:g}.")
    for message in warnings:
        logger.warning(message)

    return ConformalFit(
        psi_train=fit.psi_eb,
        tau2_train=tau.tau2,
        cal_scores=scores,
        alpha=float(alpha),
        q_hat=conformal_quantile(scores, alpha),
        plan=plan,
        noise_ratio=ratio,
        warnings=tuple(warnings),
    )


def conformal_interval(
    fit: ConformalFit,
    psi_hat_new: float,
    v_new: float,
    mode: ConformalMode = ConformalMode.TWO_SIDED_ABS,
) -> IntervalReport:
    """
    SIGNED gives the half-line {y : (psi_hat_new - y)/s <= q_hat}
    = [psi_hat_new - q_hat s, inf). TWO_SIDED_ABS takes the quantile of |S_j|
    and returns psi_hat_new +/- q_abs s. TRAIN_CENTERED returns
    psi_train +/- q_abs s, the set whose coverage of the new latent target is
    governed by the calibration scores; the two psi_hat_new-centered sets only
    differ from the target by sampling noise and over-cover when tau2 > 0.
    Here s = sqrt(tau2_train + v_new).
    """
    if not v_new >= 0:
        raise NonPositiveVariance(f"v_new must be non-negative, got {v_new}.")
    mode = ConformalMode(mode)
    scale = math.sqrt(fit.tau2_train + v_new)
    center = fit.psi_train if mode is ConformalMode.TRAIN_CENTERED else float(psi_hat_new)
    meta = {"mode": mode.value, "alpha": fit.alpha, "scale": scale, "j_cal": fit.j_cal, "psi_hat_new": float(psi_hat_new)}
    if mode is ConformalMode.SIGNED:
        lo, hi = center - fit.q_hat * scale, math.inf
        meta["q_hat"] = fit.q_hat
    else:
        q_abs = conformal_quantile(np.abs(fit.cal_scores), fit.alpha)
        lo, hi = center - q_abs * scale, center + q_abs * scale
        meta["q_hat"] = q_abs
    return IntervalReport(
        point=center,
        lo=lo,
        hi=hi,
        level=1 - fit.alpha,
        method=IntervalMethod.CONFORMAL,
        meta=meta,
    )


def dkw_band(j_cal: int, beta: float) -> float:
    """Half-width sqrt(log(2/beta) / (2 j_cal)) of the DKW uniform band on the calibration CDF."""
    if j_cal < 1:
        raise InvalidArgument(f"j_cal must be positive, got {j_cal}.")
    if not 0 < beta < 1:
        raise InvalidArgument(f"beta must lie in (0, 1), got {beta}.")
    return math.sqrt(math.log(2.0 / beta) / (2.0 * j_cal))


def noise_dominance_diag(panel: EstimatorPanel, tau2: float) -> float:
    """max_j sqrt(v_j / tau2). Small values mean heterogeneity dominates sampling noise."""
    if not tau2 > 0:
        raise NonPositiveTau2(f"tau2 must be positive, got {tau2}.")
    return float(np.sqrt(panel.variances.max() / tau2))
