"""
Identifying-functional estimators.

Each estimator returns a `FunctionalEstimate` (estimate, variance, influence
column). Conventions shared by all of them:

* the influence column has one entry per row of the pooled dataset, is zero
  for rows the functional does not use, and is explicitly centered;
* variances are first-order sampling variances on the target scale, i.e.
  Var{D*}/n, so panels can mix designs;
* for delta-method and mean-difference estimators the variance equals
  mean(column^2)/n exactly; regression-based estimators report their
  classical least-squares variance and the column matches it only
  approximately.

Panel builders assemble the columns into an `EstimatorPanel`, dropping (and
logging) functionals whose first stage is too weak to be estimated.
"""
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from app.core.config import settings
from app.core.errors import (
    AllSubsetsWeak,
    EmptyArm,
    EmptyGroup,
    EstimationError,
    InsufficientLocalData,
    InvalidArgument,
    PositivityViolation,
    WeakInstrument,
)
from app.core.panel import EstimatorPanel

logger = logging.getLogger(__name__)

MIN_SIDE_OBSERVATIONS = 10


class FunctionalEstimate(NamedTuple):
    estimate: float
    variance: float
    influence: np.ndarray


def _center_on(column: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Removes the column mean using only the rows in `mask`."""
    count = int(mask.sum())
    if count:
        column[mask] -= column.sum() / count
    return column


def _finish(estimate: float, column: np.ndarray, mask: np.ndarray, variance: Optional[float] = None):
    column = _center_on(column, mask)
    n = column.size
    if variance is None:
        variance = float(np.dot(column, column) / n**2)
    return FunctionalEstimate(float(estimate), float(variance), column)


def _binary(values: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if not np.all((arr == 0) | (arr == 1)):
        raise InvalidArgument(f"{name} must take values in {{0, 1}}.")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


# =============================================================================
# DATASETS
# =============================================================================

@dataclass(frozen=True)
class EnvDataset:
    """Observations (Z, A, Y) from q environments; Z = 0 is the randomized study."""
    z: np.ndarray
    a: np.ndarray
    y: np.ndarray
    q: int

    def __post_init__(self):
        z = np.asarray(self.z)
        if z.size and not np.all(np.equal(np.mod(z, 1), 0)):
            raise InvalidArgument("Environment ids must be integers.")
        z = _frozen(z.astype(int))
        a = _frozen(_binary(self.a, "a"))
        y = _frozen(np.asarray(self.y, dtype=float))
        if not (z.size == a.size == y.size):
            raise InvalidArgument(f"z, a, y must have equal length; got {z.size}, {a.size}, {y.size}.")
        if self.q < 1:
            raise InvalidArgument(f"q must be positive, got {self.q}.")
        if z.size and (z.min() < 0 or z.max() >= self.q):
            raise InvalidArgument(f"Environment ids must lie in 0..{self.q - 1}.")
        counts = np.bincount(z, minlength=self.q)
        thin = np.flatnonzero(counts < 2)
        if thin.size:
            raise EmptyGroup(f"Environments {thin.tolist()} have fewer than 2 rows.")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "q", int(self.q))

    def __len__(self) -> int:
        return int(self.z.size)

    def subsample(self, indices: Sequence[int]) -> "EnvDataset":
        idx = np.asarray(indices, dtype=int)
        return EnvDataset(self.z[idx], self.a[idx], self.y[idx], self.q)

    @property
    def strata(self) -> np.ndarray:
        return self.z

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"z": self.z, "a": self.a.astype(int), "y": self.y})

    @classmethod
    def from_frame(cls, df: pd.DataFrame, q: Optional[int] = None) -> "EnvDataset":
        _require_columns(df, ["z", "a", "y"], "EnvDataset")
        q = int(df["z"].max()) + 1 if q is None else q
        return cls(df["z"].to_numpy(), df["a"].to_numpy(), df["y"].to_numpy(), q)

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def read_csv(cls, path: Union[str, Path], q: Optional[int] = None) -> "EnvDataset":
        return cls.from_frame(pd.read_csv(path), q)


@dataclass(frozen=True)
class CovariateDataset:
    """Observations (W, A, Y) with optional known propensities pi_1(W)."""
    w: np.ndarray
    a: np.ndarray
    y: np.ndarray
    pi: Optional[np.ndarray] = None

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.ndim == 1:
            w = w.reshape(-1, 1)
        a = _binary(self.a, "a")
        y = np.asarray(self.y, dtype=float)
        if not (w.shape[0] == a.size == y.size):
            raise InvalidArgument("w, a, y must have the same number of rows.")
        object.__setattr__(self, "w", _frozen(w))
        object.__setattr__(self, "a", _frozen(a))
        object.__setattr__(self, "y", _frozen(y))
        if self.pi is not None:
            pi = np.asarray(self.pi, dtype=float)
            if pi.size != a.size:
                raise InvalidArgument("pi must have one entry per row.")
            object.__setattr__(self, "pi", _frozen(pi))

    def __len__(self) -> int:
        return int(self.a.size)

    def subsample(self, indices: Sequence[int]) -> "CovariateDataset":
        idx = np.asarray(indices, dtype=int)
        return CovariateDataset(self.w[idx], self.a[idx], self.y[idx], None if self.pi is None else self.pi[idx])

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.w, columns=[f"w{k + 1}" for k in range(self.w.shape[1])])
        df["a"] = self.a.astype(int)
        df["y"] = self.y
        if self.pi is not None:
            df["pi"] = self.pi
        return df

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "CovariateDataset":
        _require_columns(df, ["a", "y"], "CovariateDataset")
        w_cols = sorted((c for c in df.columns if c.startswith("w")), key=lambda c: int(c[1:]))
        pi = df["pi"].to_numpy() if "pi" in df.columns else None
        w = df[w_cols].to_numpy(dtype=float) if w_cols else np.zeros((len(df), 0))
        return cls(w, df["a"].to_numpy(), df["y"].to_numpy(), pi)

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> "CovariateDataset":
        return cls.from_frame(pd.read_csv(path))


@dataclass(frozen=True)
class TwoPeriodPanel:
    """Two-period outcomes; group 0 is treated, groups 1..K are candidate controls."""
    c: np.ndarray
    y_pre: np.ndarray
    y_post: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c).astype(int)
        y_pre = np.asarray(self.y_pre, dtype=float)
        y_post = np.asarray(self.y_post, dtype=float)
        if not (c.size == y_pre.size == y_post.size):
            raise InvalidArgument("c, y_pre, y_post must have equal length.")
        if c.size and c.min() < 0:
            raise InvalidArgument("Group ids must be non-negative.")
        if not np.any(c == 0):
            raise EmptyGroup("The treated group (c = 0) is empty.")
        object.__setattr__(self, "c", _frozen(c))
        object.__setattr__(self, "y_pre", _frozen(y_pre))
        object.__setattr__(self, "y_post", _frozen(y_post))

    def __len__(self) -> int:
        return int(self.c.size)

    @property
    def controls(self) -> List[int]:
        return sorted(int(k) for k in np.unique(self.c) if k > 0)

    def subsample(self, indices: Sequence[int]) -> "TwoPeriodPanel":
        idx = np.asarray(indices, dtype=int)
        return TwoPeriodPanel(self.c[idx], self.y_pre[idx], self.y_post[idx])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"c": self.c, "y_pre": self.y_pre, "y_post": self.y_post})

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "TwoPeriodPanel":
        _require_columns(df, ["c", "y_pre", "y_post"], "TwoPeriodPanel")
        return cls(df["c"].to_numpy(), df["y_pre"].to_numpy(), df["y_post"].to_numpy())

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> "TwoPeriodPanel":
        return cls.from_frame(pd.read_csv(path))


@dataclass(frozen=True)
class StaggeredPanel:
    """Cohort g (inf = never treated) and outcomes y[:, t-1] for t = 1..T."""
    g: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.g, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if y.ndim != 2 or y.shape[0] != g.size:
            raise InvalidArgument("y must be an (n, T) matrix with one row per unit.")
        if not np.any(np.isinf(g)):
            raise EmptyGroup("The never-treated cohort (g = inf) is empty.")
        treated = g[np.isfinite(g)]
        if treated.size and (treated.min() < 2 or np.any(np.mod(treated, 1) != 0)):
            raise InvalidArgument("Treated cohorts must be integers >= 2 so a pre-period exists.")
        object.__setattr__(self, "g", _frozen(g))
        object.__setattr__(self, "y", _frozen(y))

    def __len__(self) -> int:
        return int(self.g.size)

    @property
    def T(self) -> int:
        return int(self.y.shape[1])

    @property
    def cohorts(self) -> List[int]:
        return sorted(int(g) for g in np.unique(self.g[np.isfinite(self.g)]))

    def subsample(self, indices: Sequence[int]) -> "StaggeredPanel":
        idx = np.asarray(indices, dtype=int)
        return StaggeredPanel(self.g[idx], self.y[idx])

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.y, columns=[f"y{t + 1}" for t in range(self.T)])
        df.insert(0, "g", self.g)
        return df

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "StaggeredPanel":
        _require_columns(df, ["g"], "StaggeredPanel")
        y_cols = sorted((c for c in df.columns if c.startswith("y")), key=lambda c: int(c[1:]))
        # never-treated units are written as "inf"
        g = df["g"].astype(str).str.strip().str.lower().astype(float)
        return cls(g.to_numpy(), df[y_cols].to_numpy(dtype=float))

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> "StaggeredPanel":
        return cls.from_frame(pd.read_csv(path))


@dataclass(frozen=True)
class RddDataset:
    """Running variable x, site 1..K with cutoff cutoffs[site-1], optional treatment a, outcome y."""
    x: np.ndarray
    site: np.ndarray
    y: np.ndarray
    cutoffs: np.ndarray
    a: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        site = np.asarray(self.site).astype(int)
        y = np.asarray(self.y, dtype=float)
        cutoffs = np.atleast_1d(np.asarray(self.cutoffs, dtype=float))
        if not (x.size == site.size == y.size):
            raise InvalidArgument("x, site, y must have equal length.")
        if cutoffs.size > 1 and np.any(np.diff(cutoffs) <= 0):
            raise InvalidArgument("Cutoffs must be strictly increasing.")
        if site.size and (site.min() < 1 or site.max() > cutoffs.size):
            raise InvalidArgument(f"Sites must lie in 1..{cutoffs.size}.")
        for k in range(1, cutoffs.size + 1):
            at_site = x[site == k]
            c = cutoffs[k - 1]
            if not (np.any(at_site < c) and np.any(at_site >= c)):
                raise InsufficientLocalData(f"Site {k} lacks observations on both sides of its cutoff {c}.")
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "site", _frozen(site))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "cutoffs", _frozen(cutoffs))
        if self.a is not None:
            a = np.asarray(self.a, dtype=float)
            if a.size != x.size:
                raise InvalidArgument("a must have one entry per row.")
            if np.all(np.isnan(a)):
                a = None
            elif not np.all(np.isnan(a) | (a == 0) | (a == 1)):
                raise InvalidArgument("a must take values in {0, 1} or be blank.")
            object.__setattr__(self, "a", None if a is None else _frozen(a))

    def __len__(self) -> int:
        return int(self.x.size)

    @property
    def K(self) -> int:
        return int(self.cutoffs.size)

    def subsample(self, indices: Sequence[int]) -> "RddDataset":
        idx = np.asarray(indices, dtype=int)
        return RddDataset(self.x[idx], self.site[idx], self.y[idx], self.cutoffs,
                          None if self.a is None else self.a[idx])

    def to_frame(self) -> pd.DataFrame:
        a = np.full(self.x.size, np.nan) if self.a is None else self.a
        return pd.DataFrame({"x": self.x, "site": self.site, "a": a, "y": self.y})

    @classmethod
    def from_frame(cls, df: pd.DataFrame, cutoffs: Sequence[float]) -> "RddDataset":
        _require_columns(df, ["x", "site", "y"], "RddDataset")
        a = df["a"].to_numpy(dtype=float) if "a" in df.columns else None
        return cls(df["x"].to_numpy(), df["site"].to_numpy(), df["y"].to_numpy(), np.asarray(cutoffs), a)

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g", na_rep="")

    @classmethod
    def read_csv(cls, path: Union[str, Path], cutoffs: Sequence[float]) -> "RddDataset":
        return cls.from_frame(pd.read_csv(path), cutoffs)


def _require_columns(df: pd.DataFrame, columns: Iterable[str], what: str) -> None:
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise InvalidArgument(f"{what} CSV is missing columns {missing}.")


# =============================================================================
# INSTRUMENTAL-VARIABLE ENVIRONMENTS
# =============================================================================

@dataclass(frozen=True)
class EnvMoments:
    """Per-environment sufficient statistics of (A, Y); enough for every subset 2SLS fit."""
    count: np.ndarray
    sum_a: np.ndarray
    sum_y: np.ndarray
    sum_aa: np.ndarray
    sum_ay: np.ndarray
    sum_yy: np.ndarray

    @classmethod
    def from_data(cls, data: EnvDataset) -> "EnvMoments":
        def by_env(values):
            return np.bincount(data.z, weights=values, minlength=data.q)

        return cls(
            count=np.bincount(data.z, minlength=data.q).astype(float),
            sum_a=by_env(data.a),
            sum_y=by_env(data.y),
            sum_aa=by_env(data.a * data.a),
            sum_ay=by_env(data.a * data.y),
            sum_yy=by_env(data.y * data.y),
        )

    @property
    def a_bar(self) -> np.ndarray:
        return self.sum_a / self.count

    @property
    def y_bar(self) -> np.ndarray:
        return self.sum_y / self.count


def _check_envs(data: EnvDataset, envs: Sequence[int]) -> List[int]:
    envs = [int(s) for s in envs]
    if len(set(envs)) != len(envs):
        raise InvalidArgument(f"Environment ids must be distinct, got {envs}.")
    bad = [s for s in envs if not 0 <= s < data.q]
    if bad:
        raise InvalidArgument(f"Unknown environments {bad} for q={data.q}.")
    return envs


def wald_ratio(
    data: EnvDataset, s1: int, s2: int, min_first_stage: Optional[float] = None
) -> FunctionalEstimate:
    """
    (E[Y|s1] - E[Y|s2]) / (E[A|s1] - E[A|s2]) with a delta-method variance
    over the four environment means.
    """
    s1, s2 = _check_envs(data, [s1, s2])
    min_first_stage = settings.MIN_FIRST_STAGE if min_first_stage is None else min_first_stage
    n = len(data)
    in1, in2 = data.z == s1, data.z == s2
    a1, a2 = data.a[in1].mean(), data.a[in2].mean()
    y1, y2 = data.y[in1].mean(), data.y[in2].mean()
    first_stage = a1 - a2
    if abs(first_stage) < min_first_stage:
        raise WeakInstrument(
            f"First stage {first_stage:.4g} between environments {s1} and {s2} is below {min_first_stage}."
        )
    psi = (y1 - y2) / first_stage

    p1, p2 = in1.sum() / n, in2.sum() / n
    column = np.zeros(n)
    column[in1] = ((data.y[in1] - y1) - psi * (data.a[in1] - a1)) / (p1 * first_stage)
    column[in2] = -((data.y[in2] - y2) - psi * (data.a[in2] - a2)) / (p2 * first_stage)
    return _finish(psi, column, in1 | in2)


def _tsls_from_moments(
    moments: EnvMoments, subset: Sequence[int], min_first_stage: float, gram_rel_threshold: float
) -> Tuple[float, float, float, float, np.ndarray]:
    """Returns (psi, intercept, homoskedastic variance, det G, per-env projected weights)."""
    idx = np.asarray(subset, dtype=int)
    counts = moments.count[idx]
    n_s = counts.sum()
    p = counts / n_s
    a_bar = moments.sum_a[idx] / counts
    y_bar = moments.sum_y[idx] / counts
    a_mean = float(np.dot(p, a_bar))
    y_mean = float(np.dot(p, y_bar))
    det = float(np.dot(p, (a_bar - a_mean) ** 2))

    pair_mass = 0.5 * (1.0 - np.dot(p, p))
    spread = np.sqrt(max(det, 0.0) / pair_mass)
    if det <= gram_rel_threshold * float(np.prod(p)) or spread < min_first_stage:
        label = "{" + ",".join(map(str, idx.tolist())) + "}"
        raise WeakInstrument(
            f"Subset {label}: first-stage Gram determinant {det:.3g} (spread {spread:.3g}) is too small."
        )

    psi = float(np.dot(p, (a_bar - a_mean) * (y_bar - y_mean)) / det)
    intercept = y_mean - psi * a_mean
    ssr = np.sum(
        moments.sum_yy[idx]
        - 2 * intercept * moments.sum_y[idx]
        - 2 * psi * moments.sum_ay[idx]
        + counts * intercept**2
        + 2 * intercept * psi * moments.sum_a[idx]
        + psi**2 * moments.sum_aa[idx]
    )
    sigma2 = max(float(ssr) / n_s, 0.0)
    variance = sigma2 / (n_s * det)
    projected = (a_bar - a_mean) / det
    return psi, intercept, variance, det, projected


def tsls_subset(
    data: EnvDataset,
    subset: Iterable[int],
    min_first_stage: Optional[float] = None,
    robust: bool = False,
    moments: Optional[EnvMoments] = None,
    with_influence: bool = True,
) -> FunctionalEstimate:
    """
    2SLS of Y on (1, A) with the one-hot environment indicators of `subset` as
    instruments, using only rows with Z in the subset.

    The fit only needs within-subset environment means, so it runs on
    `EnvMoments`. The variance is the homoskedastic 2SLS formula with the
    within-subset residual variance; `robust=True` uses the influence column
    instead. With `with_influence=False` no row-level work is done and the
    returned column is empty (robust variance is then unavailable).
    """
    envs = _check_envs(data, list(subset))
    if len(envs) < 2:
        raise InvalidArgument(f"A 2SLS subset needs at least two environments, got {envs}.")
    envs = sorted(envs)
    min_first_stage = settings.MIN_FIRST_STAGE if min_first_stage is None else min_first_stage
    moments = EnvMoments.from_data(data) if moments is None else moments
    psi, intercept, variance, _, projected = _tsls_from_moments(
        moments, envs, min_first_stage, settings.GRAM_REL_THRESHOLD
    )

    if not with_influence:
        if robust:
            raise InvalidArgument("The robust variance needs the influence column.")
        return FunctionalEstimate(psi, variance, np.empty(0))

    n = len(data)
    mask = np.isin(data.z, envs)
    share = mask.sum() / n
    weight_by_env = np.zeros(data.q)
    weight_by_env[envs] = projected
    residual = data.y - intercept - psi * data.a
    column = np.where(mask, weight_by_env[data.z] * residual / share, 0.0)
    return _finish(psi, column, mask, variance=None if robust else variance)


def rct_difference(data: EnvDataset) -> FunctionalEstimate:
    """Difference of arm means inside the randomized environment Z = 0."""
    n = len(data)
    treated = (data.z == 0) & (data.a == 1)
    control = (data.z == 0) & (data.a == 0)
    if treated.sum() < 2 or control.sum() < 2:
        raise EmptyArm(
            f"The randomized environment needs at least 2 rows per arm; got "
            f"{int(treated.sum())} treated and {int(control.sum())} control."
        )
    y1, y0 = data.y[treated].mean(), data.y[control].mean()
    column = np.zeros(n)
    column[treated] = (data.y[treated] - y1) * n / treated.sum()
    column[control] = -(data.y[control] - y0) * n / control.sum()
    return _finish(y1 - y0, column, treated | control)


def iv_subsets(q: int) -> List[Tuple[int, ...]]:
    """All subsets of {0..q-1} with at least two environments, by size then lexicographically."""
    return [s for size in range(2, q + 1) for s in itertools.combinations(range(q), size)]


def subset_label(subset: Sequence[int]) -> str:
    return "S{" + ",".join(map(str, subset)) + "}"


def build_iv_panel(
    data: EnvDataset,
    include_rct: bool = True,
    min_first_stage: Optional[float] = None,
    robust: bool = False,
    with_influence: bool = True,
    strict_rct: bool = True,
    threads: int = 1,
) -> EstimatorPanel:
    """
    One 2SLS functional per environment subset of size >= 2, optionally led
    by the RCT functional. Subsets with a weak first stage are dropped and
    listed in `panel.excluded`. With `strict_rct=False` a failing RCT
    functional is excluded the same way instead of raising.
    """
    if data.q < 2:
        raise InvalidArgument(f"An IV panel needs q >= 2 environments, got q={data.q}.")
    moments = EnvMoments.from_data(data)
    subsets = iv_subsets(data.q)

    def evaluate(subset):
        try:
            return tsls_subset(data, subset, min_first_stage, robust=robust, moments=moments,
                               with_influence=with_influence)
        except WeakInstrument as exc:
            logger.debug("Excluding %s: %s", subset_label(subset), exc)
            return None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fitted = list(pool.map(evaluate, subsets))
    else:
        fitted = [evaluate(s) for s in subsets]

    entries, excluded = [], []
    for subset, result in zip(subsets, fitted):
        if result is None or not result.variance > 0:
            excluded.append(subset_label(subset))
        else:
            entries.append((subset_label(subset), result))
    if not entries:
        raise AllSubsetsWeak(f"All {len(subsets)} environment subsets have a weak first stage.")
    if excluded:
        logger.info("Excluded %d of %d IV subsets: %s", len(excluded), len(subsets), excluded)

    if include_rct:
        try:
            rct = rct_difference(data)
            if not rct.variance > 0:
                raise EmptyArm("The RCT functional has zero variance.")
            entries.insert(0, ("rct", rct))
        except EmptyArm:
            if strict_rct:
                raise
            excluded.insert(0, "rct")
    return _assemble(entries, excluded, with_influence)


def _assemble(entries, excluded, with_influence: bool) -> EstimatorPanel:
    labels = [label for label, _ in entries]
    influence = np.column_stack([r.influence for _, r in entries]) if with_influence else None
    return EstimatorPanel(
        estimates=[r.estimate for _, r in entries],
        variances=[r.variance for _, r in entries],
        labels=labels,
        influence=influence,
        excluded=excluded,
    )


# =============================================================================
# NO UNMEASURED CONFOUNDING: IPW AND OUTCOME REGRESSION
# =============================================================================

def linear_basis(w: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(w.shape[0]), w])


def fit_propensity(data: CovariateDataset) -> np.ndarray:
    """Logistic regression of A on (1, W)."""
    import statsmodels.api as sm
    from statsmodels.tools.sm_exceptions import PerfectSeparationError

    design = linear_basis(data.w)
    try:
        model = sm.Logit(data.a, design).fit(disp=0)
    except (PerfectSeparationError, np.linalg.LinAlgError) as exc:
        raise PositivityViolation(f"Propensity model could not be fitted: {exc}") from exc
    return np.asarray(model.predict(design), dtype=float)


def _nuisances(
    data: CovariateDataset, delta: Optional[float], basis: Optional[Callable[[np.ndarray], np.ndarray]]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    delta = settings.POSITIVITY_DELTA if delta is None else delta
    pi1 = fit_propensity(data) if data.pi is None else data.pi
    outside = (pi1 <= delta) | (pi1 >= 1 - delta)
    if np.any(outside):
        raise PositivityViolation(
            f"{int(outside.sum())} propensities fall outside ({delta}, {1 - delta})."
        )
    design = (basis or linear_basis)(data.w)
    mu = []
    for arm in (0.0, 1.0):
        rows = data.a == arm
        if not rows.any():
            raise EmptyArm(f"No observations with A = {int(arm)}.")
        coef, *_ = np.linalg.lstsq(design[rows], data.y[rows], rcond=None)
        mu.append(design @ coef)
    return pi1, mu[0], mu[1]


def _efficient_influence(data: CovariateDataset, pi1, mu0, mu1) -> np.ndarray:
    a, y = data.a, data.y
    return a / pi1 * (y - mu1) - (1 - a) / (1 - pi1) * (y - mu0) + mu1 - mu0


def ipw_ate(
    data: CovariateDataset,
    delta: Optional[float] = None,
    basis: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> FunctionalEstimate:
    """E[YA/pi_1(W)] - E[Y(1-A)/pi_0(W)], variance from the efficient influence curve."""
    pi1, mu0, mu1 = _nuisances(data, delta, basis)
    a, y = data.a, data.y
    psi = float(np.mean(y * a / pi1 - y * (1 - a) / (1 - pi1)))
    column = _efficient_influence(data, pi1, mu0, mu1)
    return _finish(psi, column, np.ones(len(data), dtype=bool))


def or_ate(
    data: CovariateDataset,
    delta: Optional[float] = None,
    basis: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> FunctionalEstimate:
    """E[mu_1(W)] - E[mu_0(W)] with per-arm least squares on `basis` (default linear in W)."""
    pi1, mu0, mu1 = _nuisances(data, delta, basis)
    psi = float(np.mean(mu1 - mu0))
    column = _efficient_influence(data, pi1, mu0, mu1)
    return _finish(psi, column, np.ones(len(data), dtype=bool))


def build_ate_panel(data: CovariateDataset, delta: Optional[float] = None) -> EstimatorPanel:
    return _assemble([("ipw", ipw_ate(data, delta)), ("or", or_ate(data, delta))], [], True)


# =============================================================================
# DIFFERENCE-IN-DIFFERENCES
# =============================================================================

def _mean_difference(values: np.ndarray, treated: np.ndarray, control: np.ndarray) -> FunctionalEstimate:
    n = values.size
    m1, m0 = values[treated].mean(), values[control].mean()
    column = np.zeros(n)
    column[treated] = (values[treated] - m1) * n / treated.sum()
    column[control] = -(values[control] - m0) * n / control.sum()
    return _finish(m1 - m0, column, treated | control)


def did_controls(data: TwoPeriodPanel, k: int) -> FunctionalEstimate:
    """E[dY | C=0] - E[dY | C=k]."""
    if k < 1:
        raise InvalidArgument(f"Control group ids start at 1, got {k}.")
    treated, control = data.c == 0, data.c == k
    if not control.any():
        raise EmptyGroup(f"Control group {k} is empty.")
    return _mean_difference(data.y_post - data.y_pre, treated, control)


def did_group_time(data: StaggeredPanel, g: int, t: int) -> FunctionalEstimate:
    """E[Y_t - Y_{g-1} | G=g] - E[Y_t - Y_{g-1} | G=inf]."""
    if g - 1 < 1:
        raise InvalidArgument(f"Cohort {g} has no pre-treatment period.")
    if not g <= t <= data.T:
        raise InvalidArgument(f"Period t={t} must satisfy {g} <= t <= {data.T}.")
    cohort, never = data.g == g, np.isinf(data.g)
    if not cohort.any():
        raise EmptyGroup(f"Cohort {g} is empty.")
    change = data.y[:, t - 1] - data.y[:, g - 2]
    return _mean_difference(change, cohort, never)


def build_did_panel(data: TwoPeriodPanel) -> EstimatorPanel:
    return _assemble([(f"control{k}", did_controls(data, k)) for k in data.controls], [], True)


def build_staggered_panel(data: StaggeredPanel) -> EstimatorPanel:
    entries = [
        (f"att(g={g},t={t})", did_group_time(data, g, t))
        for g in data.cohorts if g <= data.T
        for t in range(g, data.T + 1)
    ]
    return _assemble(entries, [], True)


# =============================================================================
# REGRESSION DISCONTINUITY
# =============================================================================

def _local_linear_side(
    x: np.ndarray, outcome: np.ndarray, cutoff: float, side: np.ndarray
) -> Tuple[float, float, np.ndarray]:
    """
    Least-squares line on (1, x - cutoff) over the rows in `side`; returns the
    intercept at the cutoff, its classical variance and the full-length
    influence column of the intercept.
    """
    n = x.size
    n_side = int(side.sum())
    design = np.column_stack([np.ones(n_side), x[side] - cutoff])
    coef, *_ = np.linalg.lstsq(design, outcome[side], rcond=None)
    resid = outcome[side] - design @ coef
    gram_inv = np.linalg.inv(design.T @ design)
    sigma2 = float(resid @ resid) / (n_side - 2)
    column = np.zeros(n)
    column[side] = (design @ gram_inv[:, 0]) * resid * n
    return float(coef[0]), sigma2 * float(gram_inv[0, 0]), column


def _rdd_window(data: RddDataset, site: int, bandwidth: float):
    if not 1 <= site <= data.K:
        raise InvalidArgument(f"Site must lie in 1..{data.K}, got {site}.")
    if not bandwidth > 0:
        raise InvalidArgument(f"Bandwidth must be positive, got {bandwidth}.")
    cutoff = float(data.cutoffs[site - 1])
    at_site = data.site == site
    left = at_site & (data.x >= cutoff - bandwidth) & (data.x < cutoff)
    right = at_site & (data.x >= cutoff) & (data.x <= cutoff + bandwidth)
    if left.sum() < MIN_SIDE_OBSERVATIONS or right.sum() < MIN_SIDE_OBSERVATIONS:
        raise InsufficientLocalData(
            f"Site {site}, bandwidth {bandwidth}: {int(left.sum())} rows left and {int(right.sum())} right "
            f"of the cutoff; need {MIN_SIDE_OBSERVATIONS} on each side."
        )
    return cutoff, left, right


def rdd_sharp(data: RddDataset, site: int, bandwidth: float) -> FunctionalEstimate:
    """Jump in local-linear (rectangular kernel) fits of Y at the site's cutoff."""
    cutoff, left, right = _rdd_window(data, site, bandwidth)
    alpha_r, var_r, col_r = _local_linear_side(data.x, data.y, cutoff, right)
    alpha_l, var_l, col_l = _local_linear_side(data.x, data.y, cutoff, left)
    return _finish(alpha_r - alpha_l, col_r - col_l, left | right, variance=var_r + var_l)


def rdd_fuzzy(
    data: RddDataset, site: int, bandwidth: float, min_first_stage: Optional[float] = None
) -> FunctionalEstimate:
    """Outcome jump divided by the treatment jump; delta-method variance via the influence column."""
    if data.a is None:
        raise InvalidArgument("A fuzzy design needs the treatment column a.")
    min_first_stage = settings.MIN_FIRST_STAGE if min_first_stage is None else min_first_stage
    cutoff, left, right = _rdd_window(data, site, bandwidth)
    window = left | right
    if np.any(np.isnan(data.a[window])):
        raise InvalidArgument(f"Treatment is missing for rows in the window of site {site}.")
    a = np.nan_to_num(data.a)
    y_r, _, ycol_r = _local_linear_side(data.x, data.y, cutoff, right)
    y_l, _, ycol_l = _local_linear_side(data.x, data.y, cutoff, left)
    a_r, _, acol_r = _local_linear_side(data.x, a, cutoff, right)
    a_l, _, acol_l = _local_linear_side(data.x, a, cutoff, left)
    jump_y, jump_a = y_r - y_l, a_r - a_l
    if abs(jump_a) < min_first_stage:
        raise WeakInstrument(f"Site {site}: first-stage jump {jump_a:.4g} is below {min_first_stage}.")
    psi = jump_y / jump_a
    column = ((ycol_r - ycol_l) - psi * (acol_r - acol_l)) / jump_a
    return _finish(psi, column, window)


def build_rdd_panel(
    data: RddDataset,
    bandwidths: Sequence[float],
    fuzzy: bool = False,
    min_first_stage: Optional[float] = None,
) -> EstimatorPanel:
    """One functional per (site, bandwidth); unusable windows are excluded, not fatal."""
    entries, excluded = [], []
    for site in range(1, data.K + 1):
        for h in bandwidths:
            label = f"site{site}:h={h:g}"
            try:
                result = (rdd_fuzzy(data, site, h, min_first_stage) if fuzzy else rdd_sharp(data, site, h))
            except (InsufficientLocalData, WeakInstrument) as exc:
                logger.info("Excluding %s: %s", label, exc)
                excluded.append(label)
                continue
            if result.variance > 0:
                entries.append((label, result))
            else:
                excluded.append(label)
    if not entries:
        raise EstimationError("No (site, bandwidth) pair produced a usable estimate.")
    return _assemble(entries, excluded, True)
