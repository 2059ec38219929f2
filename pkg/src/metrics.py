"""
Per-cell metric suite: rollups, delegation fidelity, vendor self-preference,
counterfactual-delegation ceiling, Pareto frontier / hypervolume and per-skill lift
"""

import logging
from collections import defaultdict
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .exceptions import MetricError
from .profiles import PoolStats, rank_peers
from .tagger import (
    DEFAULT_TAGGER_CONFIG,
    SkillId,
    TaggerConfig,
    dominant_of_tags,
    record_dominant_skill,
    skill_rank,
    tag_trajectory,
)
from .trace_model import (
    BASELINE_CONDITION,
    Benchmark,
    Cell,
    Condition,
    Delegation,
    PoolRegistry,
    TaskRecord,
    count_delegation_calls,
    group_by_cell,
)

logger = logging.getLogger(__name__)

Point = Tuple[float, ...]


def _cell_sort_key(cell: Cell):
    return (cell.agent, cell.benchmark.value, cell.condition.value)


class CellSummary(BaseModel):
    model_config = ConfigDict(frozen=True)

    cell: Cell
    mean_q: float
    mean_cost: float
    mean_latency_s: float
    p90_latency_s: float
    delegation_rate: float = Field(..., description="Mean call_model invocations per task")
    n_tasks: int = Field(..., ge=1)


def rollup(records: Iterable[TaskRecord]) -> List[CellSummary]:
    """
    One summary per populated cell, in sorted cell order

    Args:
        records: Validated task records

    Returns:
        Cell summaries
    """
    summaries: List[CellSummary] = []
    for cell, members in group_by_cell(records).items():
        q = np.array([r.q for r in members], dtype=float)
        cost = np.array([r.cost_usd for r in members], dtype=float)
        latency = np.array([r.latency_s for r in members], dtype=float)
        calls = np.array([count_delegation_calls(r) for r in members], dtype=float)
        summaries.append(CellSummary(
            cell=cell,
            mean_q=float(q.mean()),
            mean_cost=float(cost.mean()),
            mean_latency_s=float(latency.mean()),
            p90_latency_s=float(np.percentile(latency, 90)),
            delegation_rate=float(calls.mean()),
            n_tasks=len(members),
        ))
    logger.info("Rolled up %d cells", len(summaries))
    return summaries


class ConditionSummary(BaseModel):
    """Cell summaries of one (benchmark, condition) averaged across agents"""
    model_config = ConfigDict(frozen=True)

    benchmark: Benchmark
    condition: Condition
    mean_q: float
    delta_q: Optional[float] = Field(None, description="mean_q minus the blind mean_q of the same benchmark")
    mean_cost: float
    mean_latency_s: float
    p90_latency_s: float
    delegation_rate: float
    n_agents: int


def rollup_by_condition(summaries: Sequence[CellSummary]) -> List[ConditionSummary]:
    groups: Dict[Tuple[Benchmark, Condition], List[CellSummary]] = defaultdict(list)
    for s in summaries:
        groups[(s.cell.benchmark, s.cell.condition)].append(s)

    def mean(values) -> float:
        return float(np.mean(list(values)))

    blind_q = {
        bench: mean(s.mean_q for s in members)
        for (bench, cond), members in groups.items()
        if cond == BASELINE_CONDITION
    }
    rows: List[ConditionSummary] = []
    for (bench, cond) in sorted(groups, key=lambda k: (k[0].value, list(Condition).index(k[1]))):
        members = groups[(bench, cond)]
        q = mean(s.mean_q for s in members)
        rows.append(ConditionSummary(
            benchmark=bench,
            condition=cond,
            mean_q=q,
            delta_q=q - blind_q[bench] if bench in blind_q else None,
            mean_cost=mean(s.mean_cost for s in members),
            mean_latency_s=mean(s.mean_latency_s for s in members),
            p90_latency_s=mean(s.p90_latency_s for s in members),
            delegation_rate=mean(s.delegation_rate for s in members),
            n_agents=len(members),
        ))
    return rows


class FidelityResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    hits: int = 0
    n: int = Field(0, description="Rankable delegations (the denominator)")
    excluded: int = Field(0, description="Delegations with no dominant skill or no ranked peer")

    @property
    def share(self) -> Optional[float]:
        return self.hits / self.n if self.n else None


class JudgedDelegation(BaseModel):
    model_config = ConfigDict(frozen=True)

    delegation: Delegation
    skill: Optional[SkillId]
    hit: Optional[bool] = Field(None, description="None when the delegation is not rankable")


def judge_delegations(
    delegations: Iterable[Delegation],
    records: Iterable[TaskRecord],
    pool_stats: PoolStats,
    k: int = 1,
    cfg: TaggerConfig = DEFAULT_TAGGER_CONFIG,
) -> List[JudgedDelegation]:
    """
    Decide, per delegation, whether the chosen peer is in the top-k for the
    dominant skill of the trajectory before the call

    Raises:
        MetricError: If k < 1 or a delegation's source record is missing
    """
    if k < 1:
        raise MetricError(f"k must be at least 1, got {k}")
    by_ref = {(r.cell, r.task_id): r for r in records}
    tag_cache: Dict[Tuple[Cell, str], list] = {}
    judged: List[JudgedDelegation] = []
    for d in delegations:
        record = by_ref.get(d.record_ref)
        if record is None:
            raise MetricError(f"no record for delegation {d.cell}/{d.task_id}")
        if d.record_ref not in tag_cache:
            tag_cache[d.record_ref] = list(zip(record.steps, tag_trajectory(record.steps, record.benchmark, cfg)))
        # a step's tag depends only on earlier steps, so prefix tags are full-trajectory tags
        skill = dominant_of_tags(tag for step, tag in tag_cache[d.record_ref] if step.index < d.step_index)
        ranking = rank_peers(skill, pool_stats, exclude=d.orchestrator) if skill is not None else []
        hit = d.peer in ranking[:k] if ranking else None
        judged.append(JudgedDelegation(delegation=d, skill=skill, hit=hit))
    return judged


def _tally(judged: Iterable[JudgedDelegation]) -> FidelityResult:
    hits = n = excluded = 0
    for j in judged:
        if j.hit is None:
            excluded += 1
        else:
            n += 1
            hits += int(j.hit)
    return FidelityResult(hits=hits, n=n, excluded=excluded)


def fidelity_at_k(
    delegations: Iterable[Delegation],
    records: Iterable[TaskRecord],
    pool_stats: PoolStats,
    k: int = 1,
    cfg: TaggerConfig = DEFAULT_TAGGER_CONFIG,
) -> FidelityResult:
    """
    Share of delegations whose chosen peer ranks in the top-k by Stage-1
    pass rate on the delegation's dominant skill

    Unrankable delegations leave the denominator; ``share`` is None when no
    delegation is rankable.
    """
    result = _tally(judge_delegations(delegations, records, pool_stats, k, cfg))
    logger.info("fidelity@%d: %d/%d (excluded %d)", k, result.hits, result.n, result.excluded)
    return result


class FidelityGrouping(str, Enum):
    CONDITION = "condition"
    CELL = "cell"
    SKILL = "skill"


def fidelity_by_group(
    delegations: Iterable[Delegation],
    records: Iterable[TaskRecord],
    pool_stats: PoolStats,
    by: FidelityGrouping,
    k: int = 1,
    cfg: TaggerConfig = DEFAULT_TAGGER_CONFIG,
) -> Dict[str, FidelityResult]:
    """Fidelity@k split per condition, per cell or per dominant skill; keys sorted"""
    groups: Dict[str, List[JudgedDelegation]] = defaultdict(list)
    for j in judge_delegations(delegations, records, pool_stats, k, cfg):
        if by == FidelityGrouping.CONDITION:
            key = j.delegation.cell.condition.value
        elif by == FidelityGrouping.CELL:
            key = str(j.delegation.cell)
        else:
            if j.skill is None:
                continue
            key = j.skill.value
        groups[key].append(j)
    if by == FidelityGrouping.SKILL:
        order = sorted(groups, key=lambda s: skill_rank(SkillId(s)))
    else:
        order = sorted(groups)
    return {key: _tally(groups[key]) for key in order}


class SelfPreference(BaseModel):
    model_config = ConfigDict(frozen=True)

    orchestrator: str
    vendor: str
    n: int
    same_vendor: int
    observed_share: float
    chance: float
    ratio: Optional[float] = Field(None, description="observed / chance; None for singleton vendors")


def self_preference(delegations: Iterable[Delegation], registry: PoolRegistry) -> List[SelfPreference]:
    """
    Same-vendor delegation share per orchestrator against the pool-composition
    chance rate (k - 1) / (N - 1)

    Raises:
        MetricError: If an orchestrator or peer is not in the registry
    """
    totals: Dict[str, int] = defaultdict(int)
    same: Dict[str, int] = defaultdict(int)
    for d in delegations:
        for name in (d.orchestrator, d.peer):
            if name not in registry:
                raise MetricError(f"model {name} is not in the pool registry")
        totals[d.orchestrator] += 1
        same[d.orchestrator] += int(registry.vendor_of(d.peer) == registry.vendor_of(d.orchestrator))

    rows: List[SelfPreference] = []
    for orchestrator in sorted(totals):
        vendor = registry.vendor_of(orchestrator)
        chance = (registry.vendor_size(vendor) - 1) / (registry.size - 1)
        observed = same[orchestrator] / totals[orchestrator]
        rows.append(SelfPreference(
            orchestrator=orchestrator,
            vendor=vendor,
            n=totals[orchestrator],
            same_vendor=same[orchestrator],
            observed_share=observed,
            chance=chance,
            ratio=observed / chance if chance > 0 else None,
        ))
    return rows


def vendor_matrix(delegations: Iterable[Delegation], registry: PoolRegistry) -> Dict[Tuple[str, str], int]:
    """Delegation counts keyed by (orchestrator vendor, peer vendor), every vendor pair present"""
    matrix = {(a, b): 0 for a in registry.vendors for b in registry.vendors}
    for d in delegations:
        for name in (d.orchestrator, d.peer):
            if name not in registry:
                raise MetricError(f"model {name} is not in the pool registry")
        matrix[(registry.vendor_of(d.orchestrator), registry.vendor_of(d.peer))] += 1
    return matrix


class CeilingConfig(BaseModel):
    realization_rate: float = Field(1.0, gt=0.0, le=1.0, description="Share of the best peer's pass rate realised on delegation")


class CeilingResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    cell: Cell
    actual: float
    ceiling: float
    gap: float
    n_tasks: int


def best_peer_rate(skill: Optional[SkillId], agent: str, pool_stats: PoolStats) -> Optional[float]:
    if skill is None:
        return None
    ranking = rank_peers(skill, pool_stats, exclude=agent)
    if not ranking:
        return None
    return pool_stats[(ranking[0], skill)].pass_rate


def counterfactual_ceiling(
    blind_records: Iterable[TaskRecord],
    pool_stats: PoolStats,
    cfg: CeilingConfig = CeilingConfig(),
    tagger_cfg: TaggerConfig = DEFAULT_TAGGER_CONFIG,
) -> List[CeilingResult]:
    """
    Most-optimistic per-cell quality if every task had been delegated whole
    to the Stage-1-best peer on its dominant skill

    Per task the outcome is max(q, r * p_best); tasks without a dominant
    skill or a ranked peer keep q.

    Raises:
        MetricError: If a record is not from the blind condition
    """
    results: List[CeilingResult] = []
    for cell, members in group_by_cell(blind_records).items():
        if cell.condition != BASELINE_CONDITION:
            raise MetricError(f"ceiling needs blind records, got {cell}")
        actual = np.array([r.q for r in members], dtype=float)
        counterfactual = actual.copy()
        for i, record in enumerate(members):
            p_best = best_peer_rate(record_dominant_skill(record, tagger_cfg), record.agent, pool_stats)
            if p_best is not None:
                counterfactual[i] = max(record.q, cfg.realization_rate * p_best)
        results.append(CeilingResult(
            cell=cell,
            actual=float(actual.mean()),
            ceiling=float(counterfactual.mean()),
            gap=float(counterfactual.mean() - actual.mean()),
            n_tasks=len(members),
        ))
    logger.info("Computed ceiling for %d blind cells at r=%.2f", len(results), cfg.realization_rate)
    return results


class SensitivityRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    benchmark: Benchmark
    realization_rate: float
    actual: float
    ceiling: float
    gap: float


SENSITIVITY_RATES = (1.0, 0.9, 0.8, 0.7)


def ceiling_sensitivity(
    blind_records: Sequence[TaskRecord],
    pool_stats: PoolStats,
    rates: Sequence[float] = SENSITIVITY_RATES,
    tagger_cfg: TaggerConfig = DEFAULT_TAGGER_CONFIG,
) -> List[SensitivityRow]:
    """Per-benchmark ceiling (mean over cells) at each peer-realization rate"""
    rows: List[SensitivityRow] = []
    for rate in rates:
        per_bench: Dict[Benchmark, List[CeilingResult]] = defaultdict(list)
        for result in counterfactual_ceiling(blind_records, pool_stats, CeilingConfig(realization_rate=rate), tagger_cfg):
            per_bench[result.cell.benchmark].append(result)
        for bench in sorted(per_bench, key=lambda b: b.value):
            cells = per_bench[bench]
            actual = float(np.mean([c.actual for c in cells]))
            ceiling = float(np.mean([c.ceiling for c in cells]))
            rows.append(SensitivityRow(benchmark=bench, realization_rate=rate, actual=actual, ceiling=ceiling, gap=ceiling - actual))
    return sorted(rows, key=lambda r: (r.benchmark.value, -r.realization_rate))


def _as_array(points: Sequence[Point]) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] not in (2, 3):
        raise MetricError("points must be (q, cost) or (q, cost, latency) tuples of one width")
    return arr


def pareto_frontier(points: Sequence[Point]) -> List[Point]:
    """
    Non-dominated subset in (max q, min cost[, min latency]) space

    A point is dominated iff another is at least as good on every axis and
    strictly better on one. Output is sorted by q descending, then cost and
    latency ascending.
    """
    if len(points) == 0:
        return []
    arr = _as_array(points)
    # flip q so every axis is minimised
    v = arr.copy()
    v[:, 0] = -v[:, 0]
    no_worse = (v[:, None, :] <= v[None, :, :]).all(axis=2)
    better = (v[:, None, :] < v[None, :, :]).any(axis=2)
    dominated = (no_worse & better).any(axis=0)
    keep = [tuple(float(x) for x in row) for row in arr[~dominated]]
    return sorted(keep, key=lambda p: (-p[0],) + tuple(p[1:]))


class HvConfig(BaseModel):
    cost_ref_multiplier: float = Field(1.05, ge=1.0, description="cost_ref = multiplier x max observed mean cost")


def cost_reference(costs: Iterable[float], cfg: HvConfig = HvConfig()) -> float:
    costs = list(costs)
    if not costs:
        raise MetricError("cost reference needs at least one cost")
    return cfg.cost_ref_multiplier * max(costs)


def hypervolume_2d(points: Sequence[Point], cfg: HvConfig = HvConfig(), cost_ref: Optional[float] = None) -> float:
    """
    Area of the union of rectangles [0, q_i] x [cost_i, cost_ref]

    Args:
        points: (q, cost) pairs; extra axes are ignored
        cfg: Used to derive cost_ref when it is not given
        cost_ref: Fixed cost reference; points at or beyond it add nothing

    Returns:
        Unnormalised hypervolume
    """
    if len(points) == 0:
        return 0.0
    arr = _as_array(points)[:, :2]
    if cost_ref is None:
        cost_ref = cost_reference(arr[:, 1], cfg)
    arr = arr[(arr[:, 1] < cost_ref) & (arr[:, 0] > 0)]
    if len(arr) == 0:
        return 0.0
    order = np.lexsort((-arr[:, 0], arr[:, 1]))
    costs = arr[order, 1]
    heights = np.maximum.accumulate(arr[order, 0])
    widths = np.diff(np.append(costs, cost_ref))
    return float(np.sum(widths * heights))


class HypervolumeRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    benchmark: Benchmark
    condition: Condition
    hypervolume: float
    cost_ref: float
    n_agents: int


def condition_hypervolumes(summaries: Sequence[CellSummary], cfg: HvConfig = HvConfig()) -> List[HypervolumeRow]:
    """
    HV per (benchmark, condition) over the agents' (mean q, mean cost) points,
    with one cost reference per benchmark shared by all its conditions
    """
    by_bench: Dict[Benchmark, List[CellSummary]] = defaultdict(list)
    for s in summaries:
        by_bench[s.cell.benchmark].append(s)
    rows: List[HypervolumeRow] = []
    for bench in sorted(by_bench, key=lambda b: b.value):
        cells = by_bench[bench]
        ref = cost_reference((s.mean_cost for s in cells), cfg)
        for cond in Condition:
            points = [(s.mean_q, s.mean_cost) for s in cells if s.cell.condition == cond]
            if points:
                rows.append(HypervolumeRow(
                    benchmark=bench,
                    condition=cond,
                    hypervolume=hypervolume_2d(points, cfg, ref),
                    cost_ref=ref,
                    n_agents=len(points),
                ))
    return rows


class SkillLift(BaseModel):
    model_config = ConfigDict(frozen=True)

    condition: Condition
    skill: SkillId
    n: int
    blind_mean_q: float
    aware_mean_q: float
    delta_q: float


class LiftCoverage(BaseModel):
    matched: int = 0
    blind_only: int = 0
    aware_only: int = 0
    unattributed: int = Field(0, description="Matched tasks whose blind trajectory has no dominant skill")


def per_skill_lift(
    blind_records: Iterable[TaskRecord],
    aware_records: Iterable[TaskRecord],
    tagger_cfg: TaggerConfig = DEFAULT_TAGGER_CONFIG,
) -> Tuple[List[SkillLift], LiftCoverage]:
    """
    Quality change per skill bucket, tasks bucketed by their blind-condition
    dominant skill and matched on (agent, benchmark, task_id)

    Returns:
        (lift rows sorted by condition then taxonomy order, coverage report)
    """
    blind = {(r.agent, r.benchmark, r.task_id): r for r in blind_records}
    blind_skill = {key: record_dominant_skill(r, tagger_cfg) for key, r in blind.items()}
    coverage = LiftCoverage()
    buckets: Dict[Tuple[Condition, SkillId], List[Tuple[float, float]]] = defaultdict(list)
    matched_blind = set()

    for r in aware_records:
        if r.condition == BASELINE_CONDITION:
            raise MetricError("aware records must not include the blind condition")
        key = (r.agent, r.benchmark, r.task_id)
        if key not in blind:
            coverage.aware_only += 1
            continue
        coverage.matched += 1
        matched_blind.add(key)
        skill = blind_skill[key]
        if skill is None:
            coverage.unattributed += 1
            continue
        buckets[(r.condition, skill)].append((blind[key].q, r.q))
    coverage.blind_only = len(set(blind) - matched_blind)

    rows: List[SkillLift] = []
    for (cond, skill) in sorted(buckets, key=lambda k: (list(Condition).index(k[0]), skill_rank(k[1]))):
        pairs = np.array(buckets[(cond, skill)], dtype=float)
        blind_mean = float(pairs[:, 0].mean())
        aware_mean = float(pairs[:, 1].mean())
        rows.append(SkillLift(
            condition=cond,
            skill=skill,
            n=len(pairs),
            blind_mean_q=blind_mean,
            aware_mean_q=aware_mean,
            delta_q=aware_mean - blind_mean,
        ))
    if coverage.aware_only or coverage.blind_only:
        logger.warning("Lift coverage: %d aware-only and %d blind-only tasks excluded", coverage.aware_only, coverage.blind_only)
    return rows, coverage
