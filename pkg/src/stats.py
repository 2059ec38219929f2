"""
Statistical inference: paired bootstrap intervals, Spearman correlation,
random-intercept mixed model with Wald contrasts and the quadratic lift fit
"""

import logging
import math
from collections import defaultdict
from enum import Enum
from itertools import combinations
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import minimize_scalar
from scipy.stats import norm, rankdata

from .exceptions import ConvergenceError, StatsError
from .metrics import CellSummary, HvConfig, cost_reference, hypervolume_2d
from .rng import substream
from .trace_model import BASELINE_CONDITION, Benchmark, Condition, TaskRecord

logger = logging.getLogger(__name__)


class BootstrapMethod(str, Enum):
    BASIC_HALL_REFLECTED = "basic_hall_reflected"


class BootstrapStatistic(str, Enum):
    MEAN_DIFFERENCE = "mean_difference"
    HYPERVOLUME_DIFFERENCE = "hypervolume_difference"


class BootstrapConfig(BaseModel):
    n_boot: int = Field(5000, ge=100, description="Bootstrap replicates")
    seed: int = Field(0, ge=0, description="Base seed; replicate i uses substream (seed, i)")
    method: BootstrapMethod = BootstrapMethod.BASIC_HALL_REFLECTED
    alpha: float = Field(0.05, gt=0.0, lt=1.0)


class BootstrapResult(NamedTuple):
    estimate: float
    ci_low: float
    ci_high: float


def _mean_difference(sample: np.ndarray, cost_ref: Optional[float]) -> float:
    return float(np.mean(sample[:, 1] - sample[:, 0]))


def _hypervolume_difference(sample: np.ndarray, cost_ref: Optional[float]) -> float:
    return hypervolume_2d(sample[:, 1, :], cost_ref=cost_ref) - hypervolume_2d(sample[:, 0, :], cost_ref=cost_ref)


_STATISTICS = {
    BootstrapStatistic.MEAN_DIFFERENCE: _mean_difference,
    BootstrapStatistic.HYPERVOLUME_DIFFERENCE: _hypervolume_difference,
}


def basic_interval(estimate: float, replicates: np.ndarray, alpha: float) -> Tuple[float, float]:
    """Hall-reflected interval [2t - Q(1 - a/2), 2t - Q(a/2)]"""
    upper_q, lower_q = np.quantile(replicates, [1 - alpha / 2, alpha / 2])
    return 2 * estimate - float(upper_q), 2 * estimate - float(lower_q)


def paired_bootstrap(
    pairs: Sequence,
    cfg: BootstrapConfig = BootstrapConfig(),
    statistic: BootstrapStatistic = BootstrapStatistic.MEAN_DIFFERENCE,
    cost_ref: Optional[float] = None,
) -> BootstrapResult:
    """
    Paired bootstrap confidence interval

    For ``mean_difference`` each pair is (baseline_q, treatment_q) for one task;
    for ``hypervolume_difference`` each pair is ((q, cost) baseline,
    (q, cost) treatment) for one agent and agents are resampled.

    Args:
        pairs: Matched units
        cfg: Replicates, seed and alpha
        statistic: Which difference to estimate
        cost_ref: Fixed cost reference for the hypervolume statistic; derived
            from the full sample when omitted

    Returns:
        (estimate, ci_low, ci_high)

    Raises:
        StatsError: If there are no pairs
    """
    if len(pairs) == 0:
        raise StatsError("paired bootstrap needs at least one pair")
    statistic = BootstrapStatistic(statistic)
    # sorted so the result does not depend on input order
    try:
        if statistic == BootstrapStatistic.HYPERVOLUME_DIFFERENCE:
            units = sorted(tuple(tuple(side) for side in p) for p in pairs)
        else:
            units = sorted(tuple(p) for p in pairs)
    except TypeError:
        raise StatsError(f"pairs do not match the {statistic.value} layout")
    sample = np.asarray(units, dtype=float)
    if statistic == BootstrapStatistic.HYPERVOLUME_DIFFERENCE:
        if sample.ndim != 3 or sample.shape[1:] != (2, 2):
            raise StatsError("hypervolume pairs must be ((q, cost), (q, cost)) per agent")
        if cost_ref is None:
            cost_ref = cost_reference(sample[:, :, 1].ravel(), HvConfig())
    elif sample.ndim != 2 or sample.shape[1] != 2:
        raise StatsError("mean-difference pairs must be (baseline, treatment) per task")

    fn = _STATISTICS[statistic]
    n = len(sample)
    estimate = fn(sample, cost_ref)
    replicates = np.empty(cfg.n_boot)
    for i in range(cfg.n_boot):
        idx = substream(cfg.seed, "boot", i).integers(0, n, size=n)
        replicates[i] = fn(sample[idx], cost_ref)
    low, high = basic_interval(estimate, replicates, cfg.alpha)
    logger.debug("Bootstrap %s over %d units: %.4f [%.4f, %.4f]", statistic.value, n, estimate, low, high)
    return BootstrapResult(estimate, low, high)


def spearman(xs: Sequence[float], ys: Sequence[float]) -> Optional[float]:
    """
    Spearman rank correlation with average ranks on ties

    Returns:
        rho in [-1, 1], or None when either input is constant

    Raises:
        StatsError: If the inputs differ in length or have fewer than two values
    """
    if len(xs) != len(ys):
        raise StatsError(f"length mismatch: {len(xs)} vs {len(ys)}")
    if len(xs) < 2:
        raise StatsError("spearman needs at least two observations")
    rx = rankdata(xs, method="average")
    ry = rankdata(ys, method="average")
    if np.ptp(rx) == 0 or np.ptp(ry) == 0:
        return None
    rho = float(np.corrcoef(rx, ry)[0, 1])
    return max(-1.0, min(1.0, rho))


class JudgeAgreement(BaseModel):
    per_model: Dict[str, Optional[float]]
    mean_rho: Optional[float]


def inter_judge_agreement(
    judge_a: Mapping[str, Mapping[str, float]],
    judge_b: Mapping[str, Mapping[str, float]],
) -> JudgeAgreement:
    """
    Per-model Spearman correlation between two judges' per-skill scores,
    plus the mean over models where it is defined
    """
    per_model: Dict[str, Optional[float]] = {}
    for model in sorted(set(judge_a) & set(judge_b)):
        skills = sorted(set(judge_a[model]) & set(judge_b[model]))
        if len(skills) < 2:
            per_model[model] = None
            continue
        per_model[model] = spearman([judge_a[model][s] for s in skills], [judge_b[model][s] for s in skills])
    defined = [rho for rho in per_model.values() if rho is not None]
    return JudgeAgreement(per_model=per_model, mean_rho=float(np.mean(defined)) if defined else None)


class MixedFitResult(BaseModel):
    """Random-intercept fit q ~ condition + (1 | group), maximum likelihood"""
    model_config = ConfigDict(frozen=True)

    intercept: float
    intercept_se: float
    beta: Dict[Condition, float] = Field(..., description="Fixed effects vs the blind reference")
    se: Dict[Condition, float]
    sigma2_u: float = Field(..., ge=0.0)
    sigma2_e: float = Field(..., ge=0.0)
    loglik: float
    n_obs: int
    n_groups: int

    @property
    def icc(self) -> float:
        total = self.sigma2_u + self.sigma2_e
        return self.sigma2_u / total if total > 0 else 0.0

    @property
    def n_params(self) -> int:
        return 1 + len(self.beta) + 2

    @property
    def aic(self) -> float:
        return 2 * self.n_params - 2 * self.loglik

    @property
    def bic(self) -> float:
        return self.n_params * math.log(self.n_obs) - 2 * self.loglik


class _GroupSums(NamedTuple):
    n: np.ndarray
    xtx: np.ndarray
    xsum: np.ndarray
    xty: np.ndarray
    ysum: np.ndarray
    yty: np.ndarray


class ProfiledLikelihood:
    """
    ML log-likelihood of the random-intercept model profiled over the
    variance ratio gamma = sigma2_u / sigma2_e

    With V_g = I + gamma * 11' every group inverse is I - c_g 11' where
    c_g = gamma / (1 + n_g gamma), so only per-group sums are needed.
    """

    def __init__(self, X: np.ndarray, y: np.ndarray, groups: np.ndarray):
        labels, inverse = np.unique(groups, return_inverse=True)
        p = X.shape[1]
        g = len(labels)
        self.n_obs = len(y)
        self.n_groups = g
        n = np.bincount(inverse, minlength=g).astype(float)
        xtx = np.zeros((g, p, p))
        np.add.at(xtx, inverse, X[:, :, None] * X[:, None, :])
        xsum = np.zeros((g, p))
        np.add.at(xsum, inverse, X)
        xty = np.zeros((g, p))
        np.add.at(xty, inverse, X * y[:, None])
        self.sums = _GroupSums(
            n=n,
            xtx=xtx,
            xsum=xsum,
            xty=xty,
            ysum=np.bincount(inverse, weights=y, minlength=g),
            yty=np.bincount(inverse, weights=y * y, minlength=g),
        )

    def solve(self, gamma: float) -> Tuple[float, np.ndarray, float, np.ndarray]:
        """(loglik, beta, sigma2_e, X'V^-1X) at the given variance ratio"""
        s = self.sums
        c = gamma / (1.0 + s.n * gamma)
        xvx = s.xtx.sum(axis=0) - np.einsum("g,gi,gj->ij", c, s.xsum, s.xsum)
        xvy = s.xty.sum(axis=0) - (c[:, None] * s.xsum * s.ysum[:, None]).sum(axis=0)
        yvy = float(s.yty.sum() - np.sum(c * s.ysum ** 2))
        beta = np.linalg.solve(xvx, xvy)
        quad = max(yvy - float(beta @ xvy), 0.0)
        sigma2_e = quad / self.n_obs
        if sigma2_e <= 0:
            return -math.inf, beta, 0.0, xvx
        logdet = float(np.sum(np.log1p(s.n * gamma)))
        loglik = -0.5 * self.n_obs * (math.log(2 * math.pi * sigma2_e) + 1.0) - 0.5 * logdet
        return loglik, beta, sigma2_e, xvx

    def loglik(self, gamma: float) -> float:
        return self.solve(gamma)[0]


LOG10_GAMMA_BOUNDS = (-8.0, 4.0)


def _design(rows: Sequence[Tuple[float, Condition, str]]) -> Tuple[np.ndarray, np.ndarray, np.ndarray, List[Condition]]:
    conditions = {Condition(c) for _, c, _ in rows}
    if BASELINE_CONDITION not in conditions:
        raise StatsError("rows must include the blind reference level")
    levels = [c for c in Condition if c in conditions and c != BASELINE_CONDITION]
    column = {c: i + 1 for i, c in enumerate(levels)}
    X = np.zeros((len(rows), 1 + len(levels)))
    X[:, 0] = 1.0
    y = np.empty(len(rows))
    groups = np.empty(len(rows), dtype=object)
    for i, (q, cond, group) in enumerate(rows):
        y[i] = q
        groups[i] = str(group)
        cond = Condition(cond)
        if cond != BASELINE_CONDITION:
            X[i, column[cond]] = 1.0
    return X, y, groups.astype(str), levels


def fit_random_intercept(rows: Sequence[Tuple[float, Condition, str]], max_iter: int = 500) -> MixedFitResult:
    """
    Maximum-likelihood random-intercept fit q ~ condition + (1 | group)

    The likelihood is profiled over gamma = sigma2_u / sigma2_e and maximised
    with a bounded Brent search on log10(gamma); the gamma = 0 boundary is
    always considered.

    Args:
        rows: (q, condition, group_id) observations
        max_iter: Optimiser iteration budget

    Returns:
        The fit

    Raises:
        StatsError: If fewer than two groups or no blind rows are present
        ConvergenceError: If the search exhausts its budget
    """
    X, y, groups, levels = _design(rows)
    if len(np.unique(groups)) < 2:
        raise StatsError("random-intercept fit needs at least two groups")
    profile = ProfiledLikelihood(X, y, groups)

    result = minimize_scalar(
        lambda t: -profile.loglik(10.0 ** t),
        bounds=LOG10_GAMMA_BOUNDS,
        method="bounded",
        options={"xatol": 1e-8, "maxiter": max_iter},
    )
    if not result.success:
        raise ConvergenceError("variance-ratio search did not converge", last_iterate=10.0 ** float(result.x))

    gamma = 10.0 ** float(result.x)
    if profile.loglik(0.0) >= profile.loglik(gamma):
        gamma = 0.0
    loglik, beta, sigma2_e, xvx = profile.solve(gamma)
    cov = sigma2_e * np.linalg.inv(xvx)
    se = np.sqrt(np.diag(cov))

    fit = MixedFitResult(
        intercept=float(beta[0]),
        intercept_se=float(se[0]),
        beta={c: float(beta[i + 1]) for i, c in enumerate(levels)},
        se={c: float(se[i + 1]) for i, c in enumerate(levels)},
        sigma2_u=gamma * sigma2_e,
        sigma2_e=sigma2_e,
        loglik=loglik,
        n_obs=profile.n_obs,
        n_groups=profile.n_groups,
    )
    logger.info("Mixed fit: %d obs, %d groups, sigma2_u=%.4f sigma2_e=%.4f icc=%.3f", fit.n_obs, fit.n_groups, fit.sigma2_u, fit.sigma2_e, fit.icc)
    return fit


class WaldResult(NamedTuple):
    delta_beta: float
    z: float
    p: float


def wald_contrast(fit: MixedFitResult, a: Condition, b: Condition) -> WaldResult:
    """
    Wald test of beta_a - beta_b

    Both coefficients share the blind intercept, so their covariance is
    approximated by half the geometric mean of their variances.

    Raises:
        StatsError: If either level is the baseline or absent from the fit
    """
    a, b = Condition(a), Condition(b)
    for level in (a, b):
        if level == BASELINE_CONDITION:
            raise StatsError("contrasts are between non-baseline conditions")
        if level not in fit.beta:
            raise StatsError(f"condition {level.value} is not in the fit")
    if a == b:
        return WaldResult(0.0, 0.0, 1.0)
    va, vb = fit.se[a] ** 2, fit.se[b] ** 2
    cov = 0.5 * math.sqrt(va * vb)
    var = va + vb - 2 * cov
    delta = fit.beta[a] - fit.beta[b]
    if var <= 0:
        return WaldResult(delta, 0.0, 1.0)
    z = delta / math.sqrt(var)
    return WaldResult(delta, z, float(2 * norm.sf(abs(z))))


def all_contrasts(fit: MixedFitResult) -> List[Tuple[Condition, Condition, WaldResult]]:
    levels = list(fit.beta)
    return [(a, b, wald_contrast(fit, a, b)) for a, b in combinations(levels, 2)]


def format_mixed_table(fit: MixedFitResult, alpha: float = 0.05) -> str:
    """Fixed-order tab-separated fit table: coefficients, variances, fit statistics, contrasts"""
    crit = float(norm.isf(alpha / 2))
    lines = ["term\tbeta\tse\tz\tp\tci_low\tci_high"]
    terms = [("Intercept", fit.intercept, fit.intercept_se)]
    terms += [(f"condition[{c.value}]", fit.beta[c], fit.se[c]) for c in fit.beta]
    for name, beta, se in terms:
        z = beta / se if se > 0 else 0.0
        p = float(2 * norm.sf(abs(z)))
        lines.append(f"{name}\t{beta:.4f}\t{se:.4f}\t{z:.3f}\t{p:.3f}\t{beta - crit * se:.4f}\t{beta + crit * se:.4f}")
    lines += [
        "",
        f"sigma2_u\t{fit.sigma2_u:.4f}",
        f"sigma2_e\t{fit.sigma2_e:.4f}",
        f"icc\t{fit.icc:.3f}",
        f"loglik\t{fit.loglik:.2f}",
        f"aic\t{fit.aic:.2f}",
        f"bic\t{fit.bic:.2f}",
        f"n_obs\t{fit.n_obs}",
        f"n_groups\t{fit.n_groups}",
        "",
        "contrast\tdelta_beta\tz\tp",
    ]
    for a, b, w in all_contrasts(fit):
        lines.append(f"{a.value} - {b.value}\t{w.delta_beta:.4f}\t{w.z:.3f}\t{w.p:.3f}")
    return "\n".join(lines) + "\n"


def mixed_rows(records: Iterable[TaskRecord]) -> List[Tuple[float, Condition, str]]:
    """Rows for fit_random_intercept, grouping on agent x benchmark"""
    return [(r.q, r.condition, f"{r.agent}/{r.benchmark.value}") for r in records]


class QuadFit(BaseModel):
    model_config = ConfigDict(frozen=True)

    coefficients: Tuple[float, float, float] = Field(..., description="(a, b, c) of a x^2 + b x + c")
    vertex_x: Optional[float] = None
    vertex_y: Optional[float] = None
    concave: bool


QUAD_TOLERANCE = 1e-9


def quad_fit(points: Sequence[Tuple[float, float]]) -> QuadFit:
    """
    Least-squares degree-2 fit of lift against blind quality

    Raises:
        StatsError: If fewer than three distinct x values are given
    """
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or len(np.unique(arr[:, 0])) < 3:
        raise StatsError("quadratic fit needs at least three distinct x values")
    x, y = arr[:, 0], arr[:, 1]
    a, b, c = (float(v) for v in np.polyfit(x, y, 2))
    if abs(a) <= QUAD_TOLERANCE * max(1.0, float(np.max(np.abs(y)))):
        b, c = (float(v) for v in np.polyfit(x, y, 1))
        return QuadFit(coefficients=(0.0, b, c), concave=False)
    vx = -b / (2 * a)
    return QuadFit(coefficients=(a, b, c), vertex_x=vx, vertex_y=a * vx * vx + b * vx + c, concave=a < 0)


def matched_pairs(records: Iterable[TaskRecord], benchmark: Benchmark, condition: Condition) -> List[Tuple[float, float]]:
    """(blind q, condition q) pairs matched on (agent, task_id) within one benchmark"""
    blind: Dict[Tuple[str, str], float] = {}
    treated: Dict[Tuple[str, str], float] = {}
    for r in records:
        if r.benchmark != benchmark:
            continue
        if r.condition == BASELINE_CONDITION:
            blind[(r.agent, r.task_id)] = r.q
        elif r.condition == condition:
            treated[(r.agent, r.task_id)] = r.q
    return [(blind[k], treated[k]) for k in sorted(set(blind) & set(treated))]


def hypervolume_pairs(
    summaries: Iterable[CellSummary],
    benchmark: Benchmark,
    condition: Condition,
) -> List[Tuple[Tuple[float, float], Tuple[float, float]]]:
    """Per-agent ((q, cost) blind, (q, cost) condition) pairs for one benchmark"""
    blind: Dict[str, Tuple[float, float]] = {}
    treated: Dict[str, Tuple[float, float]] = {}
    for s in summaries:
        if s.cell.benchmark != benchmark:
            continue
        if s.cell.condition == BASELINE_CONDITION:
            blind[s.cell.agent] = (s.mean_q, s.mean_cost)
        elif s.cell.condition == condition:
            treated[s.cell.agent] = (s.mean_q, s.mean_cost)
    return [(blind[a], treated[a]) for a in sorted(set(blind) & set(treated))]


def capability_points(summaries: Iterable[CellSummary], benchmark: Benchmark) -> List[Tuple[float, float]]:
    """(blind q, best aware lift) per agent on one benchmark"""
    blind: Dict[str, float] = {}
    aware: Dict[str, List[float]] = defaultdict(list)
    for s in summaries:
        if s.cell.benchmark != benchmark:
            continue
        if s.cell.condition == BASELINE_CONDITION:
            blind[s.cell.agent] = s.mean_q
        else:
            aware[s.cell.agent].append(s.mean_q)
    return [(blind[a], max(aware[a]) - blind[a]) for a in sorted(blind) if aware.get(a)]
