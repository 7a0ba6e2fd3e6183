"""
The estimator panel and the precision-weighted empirical Bayes combiner.

A panel holds J estimates of the same scalar target, their first-order
variances and, optionally, the n x J matrix of estimated influence-curve
values (row i = observation i). The combiner pools the estimates with weights
proportional to 1/(v_j + tau^2).
"""
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

from app.core.errors import (
    EmptyPanel,
    InvalidArgument,
    NegativeTau2,
    NonPositiveVariance,
)

logger = logging.getLogger(__name__)

# Advisory self-consistency tolerances for influence matrices
INFLUENCE_MEAN_SDS = 10.0
INFLUENCE_VARIANCE_RTOL = 0.20


class Tau2Method(str, Enum):
    PAIRWISE = "pairwise"
    MMLE_SCORE = "mmle"
    PAULE_MANDEL = "paule_mandel"
    FIXED = "fixed"


def _frozen_array(values, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != ndim:
        raise InvalidArgument(f"{name} must have {ndim} dimension(s), got shape {arr.shape}.")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class EstimatorPanel:
    """
    J estimates psi_hat_j with variances v_j and labels.

    `influence`, when present, is an (n, J) matrix of estimated influence-curve
    values over the pooled sample; `n` is its row count. `excluded` lists the
    labels of functionals dropped while the panel was built (weak first stage,
    etc.) so the exclusion is never silent.
    """
    estimates: np.ndarray
    variances: np.ndarray
    labels: tuple
    influence: Optional[np.ndarray] = None
    excluded: tuple = field(default=())

    def __post_init__(self):
        estimates = _frozen_array(self.estimates, 1, "estimates")
        variances = _frozen_array(self.variances, 1, "variances")
        labels = tuple(str(label) for label in self.labels)
        object.__setattr__(self, "estimates", estimates)
        object.__setattr__(self, "variances", variances)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "excluded", tuple(str(x) for x in self.excluded))

        if estimates.size == 0:
            raise EmptyPanel("A panel needs at least one estimator.")
        if not (estimates.size == variances.size == len(labels)):
            raise InvalidArgument(
                f"estimates, variances and labels must have equal length; got "
                f"{estimates.size}, {variances.size} and {len(labels)}."
            )
        if not np.all(np.isfinite(estimates)):
            raise InvalidArgument("estimates must be finite.")
        if not np.all(np.isfinite(variances)) or np.any(variances <= 0):
            bad = [labels[j] for j in np.flatnonzero(~(variances > 0))]
            raise NonPositiveVariance(f"All variances must be positive; offending functionals: {bad}.")

        if self.influence is not None:
            influence = _frozen_array(self.influence, 2, "influence")
            if influence.shape[1] != estimates.size:
                raise InvalidArgument(
                    f"influence must have one column per estimator; got {influence.shape[1]} "
                    f"columns for J={estimates.size}."
                )
            if influence.shape[0] < 1:
                raise InvalidArgument("influence must have at least one row.")
            object.__setattr__(self, "influence", influence)
            self._check_influence()

    @property
    def J(self) -> int:
        return int(self.estimates.size)

    @property
    def n(self) -> Optional[int]:
        return None if self.influence is None else int(self.influence.shape[0])

    def _check_influence(self) -> None:
        """Advisory: influence columns should be mean-zero and reproduce v_j."""
        n = self.n
        means = self.influence.mean(axis=0)
        col_var = self.influence.var(axis=0)
        sds = np.sqrt(col_var)
        off_center = np.abs(means) > INFLUENCE_MEAN_SDS * sds / np.sqrt(n) + 1e-12
        if np.any(off_center):
            logger.warning(
                "Influence columns not centered for %s (|mean| > %g sd/sqrt(n)).",
                [self.labels[j] for j in np.flatnonzero(off_center)], INFLUENCE_MEAN_SDS,
            )
        rel = np.abs(col_var / n - self.variances) / self.variances
        mismatched = rel > INFLUENCE_VARIANCE_RTOL
        if np.any(mismatched):
            logger.warning(
                "Influence variance/n differs from v_j by more than %.0f%% for %s.",
                100 * INFLUENCE_VARIANCE_RTOL, [self.labels[j] for j in np.flatnonzero(mismatched)],
            )

    def subset(self, indices: Sequence[int]) -> "EstimatorPanel":
        idx = np.asarray(indices, dtype=int)
        return EstimatorPanel(
            estimates=self.estimates[idx],
            variances=self.variances[idx],
            labels=tuple(self.labels[j] for j in idx),
            influence=None if self.influence is None else self.influence[:, idx],
            excluded=self.excluded,
        )

    # --- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        doc = {
            "labels": list(self.labels),
            "estimates": self.estimates.tolist(),
            "variances": self.variances.tolist(),
        }
        if self.influence is not None:
            doc["influence"] = self.influence.tolist()
            doc["n"] = self.n
        if self.excluded:
            doc["excluded"] = list(self.excluded)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "EstimatorPanel":
        influence = doc.get("influence")
        if influence is not None and doc.get("n") is not None and len(influence) != int(doc["n"]):
            raise InvalidArgument(f"n={doc['n']} does not match the {len(influence)} influence rows.")
        return cls(
            estimates=doc["estimates"],
            variances=doc["variances"],
            labels=doc.get("labels") or [f"f{j + 1}" for j in range(len(doc["estimates"]))],
            influence=influence,
            excluded=doc.get("excluded", ()),
        )

    def to_json(self, path: Optional[Union[str, Path]] = None) -> str:
        text = json.dumps(self.to_dict())
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, source: Union[str, Path]) -> "EstimatorPanel":
        """Accepts a path to a JSON document or the JSON text itself."""
        text = str(source)
        if not text.lstrip().startswith("{"):
            text = Path(source).read_text()
        return cls.from_dict(json.loads(text))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"label": self.labels, "estimate": self.estimates, "variance": self.variances})

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "EstimatorPanel":
        df = pd.read_csv(path)
        missing = {"label", "estimate", "variance"} - set(df.columns)
        if missing:
            raise InvalidArgument(f"Panel CSV is missing columns {sorted(missing)}.")
        return cls(estimates=df["estimate"], variances=df["variance"], labels=df["label"].astype(str))


@dataclass(frozen=True)
class EbFit:
    """Fitted hyperparameters of the working model and the pooling weights."""
    psi_eb: float
    tau2: float
    weights: np.ndarray
    tau2_method: Tau2Method

    def to_dict(self) -> dict:
        return {
            "psi_eb": self.psi_eb,
            "tau2": self.tau2,
            "tau2_method": self.tau2_method.value,
            "weights": self.weights.tolist(),
        }


def precision_weights(variances, tau2: float) -> np.ndarray:
    """W_j proportional to 1/(v_j + tau2), normalized to sum to one."""
    v = np.asarray(variances, dtype=float)
    if v.size == 0:
        raise EmptyPanel("Cannot weight an empty panel.")
    if np.any(~(v > 0)):
        raise NonPositiveVariance("All variances must be positive.")
    if not tau2 >= 0:
        raise NegativeTau2(f"tau2 must be non-negative, got {tau2}.")
    precision = 1.0 / (v + tau2)
    weights = precision / precision.sum()
    weights.setflags(write=False)
    return weights


def eb_combine(panel: EstimatorPanel, tau2: float, method: Tau2Method = Tau2Method.FIXED) -> EbFit:
    """Closed-form maximizer of the marginal likelihood in psi at the given tau2."""
    weights = precision_weights(panel.variances, tau2)
    psi_eb = float(np.dot(weights, panel.estimates))
    return EbFit(psi_eb=psi_eb, tau2=float(tau2), weights=weights, tau2_method=Tau2Method(method))


def max_weight(fit: EbFit) -> float:
    """Largest pooling weight; values near 1 mean one functional dominates."""
    return float(np.max(fit.weights))


def orthogonality_gap(panel: EstimatorPanel, psi: float, tau2: float) -> float:
    """
    Cross-partial of the marginal log-likelihood in (psi, tau2):
    -sum_j (psi_hat_j - psi) / (v_j + tau2)^2. Near zero at psi when all
    functionals identify the same target.
    """
    if not tau2 >= 0:
        raise NegativeTau2(f"tau2 must be non-negative, got {tau2}.")
    total = panel.variances + tau2
    return float(-np.sum((panel.estimates - psi) / total**2))


def marginal_loglik(panel: EstimatorPanel, psi: float, tau2: float) -> float:
    if not tau2 >= 0:
        raise NegativeTau2(f"tau2 must be non-negative, got {tau2}.")
    total = panel.variances + tau2
    return float(-0.5 * np.sum(np.log(total) + (panel.estimates - psi) ** 2 / total))
