"""
Estimators of the heterogeneity hyperparameter tau^2.

Three estimators are exposed and never substituted for one another:

* the truncated pairwise-difference estimator (closed form),
* the root of the profiled marginal-likelihood score in tau^2,
* the Paule-Mandel moment estimator (generalized Q statistic equal to J - 1).

Both implicit equations are solved by bisection on [0, U]. Residuals are
reported on a scale-free footing (the score is divided by the summed
precisions, the Q statistic by J - 1), so the tolerance means the same thing
whatever the units of the target.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from app.core.config import settings
from app.core.errors import InvalidArgument, NeedsTwoEstimators, NegativeTau2, NoConvergence
from app.core.panel import EbFit, EstimatorPanel, Tau2Method, eb_combine, precision_weights

logger = logging.getLogger(__name__)

BRACKET_LIMIT = 1e12


@dataclass(frozen=True)
class Tau2Result:
    tau2: float
    method: Tau2Method
    boundary: bool
    iterations: int
    residual: float
    raw: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "tau2": self.tau2,
            "method": self.method.value,
            "boundary": self.boundary,
            "iterations": self.iterations,
            "residual": self.residual,
            "raw": self.raw,
        }


def _require_two(panel: EstimatorPanel) -> None:
    if panel.J < 2:
        raise NeedsTwoEstimators(f"tau^2 estimation needs J >= 2 estimators, got J={panel.J}.")


def pairwise_raw(panel: EstimatorPanel) -> float:
    """
    Untruncated average over pairs of (psi_j - psi_k)^2 - (v_j + v_k), halved.

    Uses sum_{j<k} (psi_j - psi_k)^2 = J * sum_j (psi_j - mean)^2, which is
    the unweighted random-effects variance estimator s^2 - mean(v).
    """
    _require_two(panel)
    J = panel.J
    centered = panel.estimates - panel.estimates.mean()
    squared_diffs = J * np.dot(centered, centered)
    variance_sums = (J - 1) * panel.variances.sum()
    return float((squared_diffs - variance_sums) / (J * (J - 1)))


def tau2_pairwise(panel: EstimatorPanel) -> Tau2Result:
    raw = pairwise_raw(panel)
    truncated = raw <= 0
    return Tau2Result(
        tau2=0.0 if truncated else raw,
        method=Tau2Method.PAIRWISE,
        boundary=bool(truncated),
        iterations=0,
        residual=0.0,
        raw=raw,
    )


def mmle_score(panel: EstimatorPanel, tau2: float) -> float:
    """
    Profiled tau^2 score with psi replaced by the precision-weighted mean,
    divided by sum_j 1/(v_j + tau2). Positive means the profile likelihood is
    still increasing in tau2.
    """
    if not tau2 >= 0:
        raise NegativeTau2(f"tau2 must be non-negative, got {tau2}.")
    total = panel.variances + tau2
    psi = float(np.dot(precision_weights(panel.variances, tau2), panel.estimates))
    score = np.sum(((panel.estimates - psi) ** 2 - total) / total**2)
    return float(score / np.sum(1.0 / total))


def paule_mandel_statistic(panel: EstimatorPanel, tau2: float) -> float:
    """Generalized Q: sum_j (psi_j - psi_bar(tau2))^2 / (v_j + tau2)."""
    if not tau2 >= 0:
        raise NegativeTau2(f"tau2 must be non-negative, got {tau2}.")
    total = panel.variances + tau2
    psi = float(np.dot(precision_weights(panel.variances, tau2), panel.estimates))
    return float(np.sum((panel.estimates - psi) ** 2 / total))


def _initial_upper(panel: EstimatorPanel) -> float:
    raw = pairwise_raw(panel)
    return max(4.0 * raw, 10.0 * float(panel.variances.max()), 1.0)


def _bisect_decreasing(
    residual: Callable[[float], float], upper: float, tol: float, max_iter: int, what: str
) -> Tuple[float, int, float]:
    """
    Finds a root of a residual that is positive at 0 and eventually negative.
    Doubles the upper bracket until the sign flips, then bisects. Each
    residual evaluation counts as one iteration against max_iter.
    """
    iterations = 0
    lo, hi = 0.0, upper
    r_hi = residual(hi)
    iterations += 1
    while r_hi > 0:
        if hi > BRACKET_LIMIT or iterations >= max_iter:
            raise NoConvergence(f"{what}: no sign change found below tau2={hi:.3g} after {iterations} evaluations.")
        lo, hi = hi, 2.0 * hi
        r_hi = residual(hi)
        iterations += 1
    logger.debug("%s: bracket [%g, %g] after %d evaluations", what, lo, hi, iterations)
    if abs(r_hi) <= tol:
        return hi, iterations, r_hi

    while True:
        mid = 0.5 * (lo + hi)
        r_mid = residual(mid)
        iterations += 1
        if abs(r_mid) <= tol:
            return mid, iterations, r_mid
        if mid in (lo, hi):
            # bracket exhausted at float resolution; the residual jumps across the root
            logger.warning(
                "%s: bracket collapsed at tau2=%.17g with residual %.3g above tolerance %.3g.",
                what, mid, r_mid, tol,
            )
            return mid, iterations, r_mid
        if iterations >= max_iter:
            raise NoConvergence(f"{what}: residual {r_mid:.3g} above tolerance after {iterations} evaluations.")
        if r_mid > 0:
            lo = mid
        else:
            hi = mid


def tau2_mmle(panel: EstimatorPanel, tol: Optional[float] = None, max_iter: Optional[int] = None) -> Tau2Result:
    """
    Root of the profiled marginal-likelihood score on [0, inf). Returns the
    boundary value 0 when the score is not positive at 0 (the constrained
    maximizer is then 0).
    """
    _require_two(panel)
    tol = settings.SOLVER_TOL if tol is None else tol
    max_iter = settings.SOLVER_MAX_ITER if max_iter is None else max_iter
    if not tol > 0:
        raise InvalidArgument(f"tol must be positive, got {tol}.")

    at_zero = mmle_score(panel, 0.0)
    if at_zero <= tol:
        return Tau2Result(0.0, Tau2Method.MMLE_SCORE, True, 1, at_zero)
    root, iterations, residual = _bisect_decreasing(
        lambda t: mmle_score(panel, t), _initial_upper(panel), tol, max_iter, "MMLE score"
    )
    return Tau2Result(root, Tau2Method.MMLE_SCORE, False, iterations, residual)


def tau2_paule_mandel(
    panel: EstimatorPanel, tol: Optional[float] = None, max_iter: Optional[int] = None
) -> Tau2Result:
    """Solves Q(tau2) = J - 1 by bisection; Q is nonincreasing in tau2."""
    _require_two(panel)
    tol = settings.SOLVER_TOL if tol is None else tol
    max_iter = settings.SOLVER_MAX_ITER if max_iter is None else max_iter
    if not tol > 0:
        raise InvalidArgument(f"tol must be positive, got {tol}.")

    dof = panel.J - 1
    at_zero = paule_mandel_statistic(panel, 0.0) / dof - 1.0
    if at_zero <= 0:
        return Tau2Result(0.0, Tau2Method.PAULE_MANDEL, True, 1, at_zero)
    root, iterations, residual = _bisect_decreasing(
        lambda t: paule_mandel_statistic(panel, t) / dof - 1.0,
        _initial_upper(panel), tol, max_iter, "Paule-Mandel",
    )
    return Tau2Result(root, Tau2Method.PAULE_MANDEL, False, iterations, residual)


def estimate_tau2(
    panel: EstimatorPanel,
    method: Tau2Method = Tau2Method.PAIRWISE,
    tau2: Optional[float] = None,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
) -> Tau2Result:
    method = Tau2Method(method)
    if method is Tau2Method.PAIRWISE:
        return tau2_pairwise(panel)
    if method is Tau2Method.MMLE_SCORE:
        return tau2_mmle(panel, tol, max_iter)
    if method is Tau2Method.PAULE_MANDEL:
        return tau2_paule_mandel(panel, tol, max_iter)
    if tau2 is None:
        raise InvalidArgument("The fixed method needs an explicit tau2.")
    if not tau2 >= 0:
        raise NegativeTau2(f"tau2 must be non-negative, got {tau2}.")
    return Tau2Result(float(tau2), Tau2Method.FIXED, tau2 == 0, 0, 0.0)


def fit_panel(
    panel: EstimatorPanel, method: Tau2Method = Tau2Method.PAIRWISE, tau2: Optional[float] = None
) -> Tuple[EbFit, Tau2Result]:
    """Estimates tau^2 and pools the panel at that value."""
    if panel.J == 1 and Tau2Method(method) is not Tau2Method.FIXED:
        # A single functional has nothing to be heterogeneous against.
        result = Tau2Result(0.0, Tau2Method(method), True, 0, 0.0)
    else:
        result = estimate_tau2(panel, method, tau2=tau2)
    return eb_combine(panel, result.tau2, result.method), result
