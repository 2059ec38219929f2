"""
Synthetic DecisionBench substrate

Generates TaskRecords through the call_model delegation interface from
configurable peers and orchestrator policies whose ground truth is known, so
the whole analysis pipeline can be checked against oracles.
"""

import json
import logging
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .exceptions import SimulationError
from .profiles import PoolStats, SkillStats, percentile_rank, rank_peers
from .rng import substream
from .tagger import SKILL_ORDER, SkillId
from .trace_model import (
    CALL_MODEL,
    DELEGATION_CAP,
    READ_PROFILE,
    Benchmark,
    Condition,
    PoolRegistry,
    PoolEntry,
    Role,
    StepEvent,
    TaskRecord,
    Tier,
    ToolCall,
    canonical_task_id,
    default_pool_registry,
)

logger = logging.getLogger(__name__)


class SyntheticPeer(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = Field(..., min_length=1)
    vendor: str = Field(..., min_length=1)
    skill_pass: Dict[SkillId, float] = Field(..., description="True per-skill success probability")
    cost_dist: Tuple[float, float] = Field((0.05, 0.01), description="(mean USD, spread) per task")
    latency_dist: Tuple[float, float] = Field((30.0, 5.0), description="(mean s, spread) per task")

    @field_validator("skill_pass")
    @classmethod
    def _check_rates(cls, rates: Dict[SkillId, float]) -> Dict[SkillId, float]:
        for skill, rate in rates.items():
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"pass rate for {skill.value} out of range: {rate}")
        return rates

    @field_validator("cost_dist", "latency_dist")
    @classmethod
    def _check_dist(cls, dist: Tuple[float, float]) -> Tuple[float, float]:
        if dist[0] < 0 or dist[1] < 0:
            raise ValueError("distribution mean and spread must be non-negative")
        return dist


class PolicyKind(str, Enum):
    NO_DELEGATE = "no_delegate"
    BLIND_UNIFORM = "blind_uniform"
    ORACLE_TOP1 = "oracle_top1"
    EPSILON_NOISY = "epsilon_noisy"


class Policy(BaseModel):
    """How a simulated orchestrator picks its peer"""
    model_config = ConfigDict(frozen=True)

    kind: PolicyKind
    epsilon: Optional[float] = Field(None, ge=0.0, le=1.0, description="Uniform-pick probability for epsilon_noisy")

    @model_validator(mode="after")
    def _check_epsilon(self) -> "Policy":
        if (self.kind == PolicyKind.EPSILON_NOISY) != (self.epsilon is not None):
            raise ValueError("epsilon is set iff kind is epsilon_noisy")
        return self

    @classmethod
    def no_delegate(cls) -> "Policy":
        return cls(kind=PolicyKind.NO_DELEGATE)

    @classmethod
    def blind_uniform(cls) -> "Policy":
        return cls(kind=PolicyKind.BLIND_UNIFORM)

    @classmethod
    def oracle_top1(cls) -> "Policy":
        return cls(kind=PolicyKind.ORACLE_TOP1)

    @classmethod
    def epsilon_noisy(cls, epsilon: float) -> "Policy":
        return cls(kind=PolicyKind.EPSILON_NOISY, epsilon=epsilon)


# Blind orchestrators delegate from priors; richer cards move the pick toward the best peer
DEFAULT_CONDITION_POLICIES: List[Tuple[Condition, Policy]] = [
    (Condition.BLIND, Policy.blind_uniform()),
    (Condition.AWARE_C1, Policy.epsilon_noisy(0.5)),
    (Condition.AWARE_C2, Policy.epsilon_noisy(0.3)),
    (Condition.AWARE_C3, Policy.epsilon_noisy(0.5)),
    (Condition.AWARE_TOOL_ONLY, Policy.oracle_top1()),
]

BENCHMARK_SKILLS: Dict[Benchmark, Tuple[SkillId, ...]] = {
    Benchmark.GAIA: (
        SkillId.TOOL_SCHEMA_ADHERENCE,
        SkillId.INFORMATION_RETRIEVAL,
        SkillId.MULTI_STEP_REASONING,
        SkillId.NUMERICAL_COMPUTATION,
        SkillId.LONG_INPUT_HANDLING,
    ),
    Benchmark.TAU_BENCH: (
        SkillId.TOOL_SCHEMA_ADHERENCE,
        SkillId.MULTI_TURN_STATE_TRACKING,
        SkillId.DOMAIN_POLICY_COMPLIANCE,
        SkillId.INFORMATION_RETRIEVAL,
        SkillId.NUMERICAL_COMPUTATION,
        SkillId.LONG_INPUT_HANDLING,
    ),
    Benchmark.BFCL: (
        SkillId.TOOL_SCHEMA_ADHERENCE,
        SkillId.MULTI_TURN_STATE_TRACKING,
        SkillId.INFORMATION_RETRIEVAL,
        SkillId.NUMERICAL_COMPUTATION,
        SkillId.LONG_INPUT_HANDLING,
    ),
}

TAU_SHARDS = ("airline", "retail")


class SimTask(BaseModel):
    model_config = ConfigDict(frozen=True)

    task_id: str = Field(..., min_length=1)
    benchmark: Benchmark
    dominant_skill: SkillId
    difficulty: float = Field(1.0, gt=0.0, le=1.0, description="Multiplicative success-probability factor")
    shard: Optional[str] = None

    @model_validator(mode="after")
    def _check_skill(self) -> "SimTask":
        if self.dominant_skill not in BENCHMARK_SKILLS[self.benchmark]:
            raise ValueError(f"{self.benchmark.value} cannot exercise {self.dominant_skill.value}")
        return self


class SimConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    seed: int = Field(0, ge=0)
    pool: List[SyntheticPeer]
    orchestrator: SyntheticPeer
    tasks: List[SimTask] = Field(default_factory=list)
    delegation_cap: int = Field(DELEGATION_CAP, ge=0, description="Maximum call_model steps per record")
    delegation_propensity: float = Field(1.0, ge=0.0, le=1.0, description="Probability a task is delegated at all")
    delegations_per_task: int = Field(1, ge=1, description="call_model steps emitted when a task is delegated")

    @field_validator("pool")
    @classmethod
    def _check_pool(cls, pool: List[SyntheticPeer]) -> List[SyntheticPeer]:
        names = [p.name for p in pool]
        if len(pool) < 2:
            raise ValueError("the synthetic pool needs at least two peers")
        if len(set(names)) != len(names):
            raise ValueError("peer names must be unique")
        return pool

    def peer(self, name: str) -> SyntheticPeer:
        for p in self.pool:
            if p.name == name:
                return p
        raise SimulationError(f"peer {name} is not in the synthetic pool")

    def registry(self) -> PoolRegistry:
        return PoolRegistry(entries=[PoolEntry(model_name=p.name, vendor=p.vendor, tier=Tier.STRONG_MID) for p in self.pool])


TRUTH_WEIGHT = 1_000_000


def true_skill_stats(pool: Sequence[SyntheticPeer]) -> PoolStats:
    """
    Ground-truth SkillStats built from the peers' configured pass rates

    The oracle policy and the fidelity oracle rank peers over these.
    """
    unranked: PoolStats = {}
    for p in pool:
        for skill in SKILL_ORDER:
            if skill not in p.skill_pass:
                continue
            rate = p.skill_pass[skill]
            passes = round(rate * TRUTH_WEIGHT)
            unranked[(p.name, skill)] = SkillStats(
                model=p.name,
                skill=skill,
                n_tasks=TRUTH_WEIGHT,
                passes=passes,
                pass_rate=rate,
                mean_latency_s=p.latency_dist[0],
                cost_per_task=p.cost_dist[0],
                cost_per_success=p.cost_dist[0] / rate if passes else None,
            )
    return {
        key: s.model_copy(update={"percentile_rank": percentile_rank(key[0], key[1], unranked)})
        for key, s in unranked.items()
    }


def choose_peer(
    policy: Policy,
    orchestrator: str,
    skill: SkillId,
    candidates: Sequence[str],
    truth: PoolStats,
    rng: np.random.Generator,
) -> Optional[str]:
    """
    Peer picked by a policy, or None for no_delegate

    Raises:
        SimulationError: If there is no candidate or no ranked peer for the oracle
    """
    if policy.kind == PolicyKind.NO_DELEGATE:
        return None
    others = sorted(c for c in candidates if c != orchestrator)
    if not others:
        raise SimulationError(f"{orchestrator} has no peer to delegate to")

    def top1() -> str:
        ranking = rank_peers(skill, truth, exclude=orchestrator)
        if not ranking:
            raise SimulationError(f"no peer exercises {skill.value}")
        return ranking[0]

    if policy.kind == PolicyKind.BLIND_UNIFORM:
        return others[int(rng.integers(len(others)))]
    if policy.kind == PolicyKind.ORACLE_TOP1:
        return top1()
    if rng.random() < policy.epsilon:
        return others[int(rng.integers(len(others)))]
    return top1()


class _StepWriter:
    def __init__(self):
        self.steps: List[StepEvent] = []

    def add(self, role: Role, text: str = "", tools: Iterable[Tuple[str, dict]] = (), prompt_tokens: Optional[int] = None,
            completion_tokens: Optional[int] = None) -> None:
        calls = [ToolCall(name=name, args_text=json.dumps(args, sort_keys=True)) for name, args in tools]
        self.steps.append(StepEvent(
            index=len(self.steps),
            role=role,
            text=text,
            tool_calls=calls,
            prompt_tokens=prompt_tokens,
            completion_tokens=completion_tokens,
            finish_reason="tool_calls" if calls else ("stop" if role == Role.ASSISTANT else ""),
        ))

    def tool_step(self, name: str, args: dict, position: int) -> None:
        self.add(Role.ASSISTANT, tools=[(name, args)], prompt_tokens=1200 + 300 * position, completion_tokens=90)
        self.add(Role.TOOL_RESULT, text=f"{name} result")

    def text_step(self, text: str, position: int, prompt_tokens: Optional[int] = None) -> None:
        self.add(Role.ASSISTANT, text=text, prompt_tokens=prompt_tokens or 900 + 200 * position, completion_tokens=140)


SKILL_TOOLS: Dict[SkillId, Tuple[Tuple[str, dict], ...]] = {
    SkillId.TOOL_SCHEMA_ADHERENCE: (
        ("update_profile", {"field": "email", "value": "user at example"}),
        ("set_preference", {"key": "seat", "value": "aisle"}),
        ("create_ticket", {"summary": "account change", "priority": "normal"}),
    ),
    SkillId.INFORMATION_RETRIEVAL: (
        ("web_search", {"query": "reference material"}),
        ("fetch_url", {"url": "https://example.org/source"}),
        ("parse_pdf", {"path": "attachment.pdf"}),
    ),
    SkillId.NUMERICAL_COMPUTATION: (
        ("calculator", {"expression": "12 * 7"}),
        ("python_eval", {"code": "sum(values) / len(values)"}),
        ("calculator", {"expression": "84 - 19"}),
    ),
}

SKILL_TEXTS: Dict[SkillId, str] = {
    SkillId.MULTI_TURN_STATE_TRACKING: "Noted. Continuing with the request.",
    SkillId.DOMAIN_POLICY_COMPLIANCE: "Please confirm the change before I proceed.",
    SkillId.LONG_INPUT_HANDLING: "Summarising the attached material.",
    SkillId.MULTI_STEP_REASONING: "Combining the earlier findings into the next step.",
}

SKILL_STEP_COUNT = 3
LONG_INPUT_PROMPT_TOKENS = 16000


def emit_skill_steps(writer: _StepWriter, task: SimTask) -> None:
    """Steps whose tagged dominant skill is the task's configured skill"""
    skill = task.dominant_skill
    if skill in SKILL_TOOLS:
        for i, (name, args) in enumerate(SKILL_TOOLS[skill][:SKILL_STEP_COUNT]):
            writer.tool_step(name, args, i)
        return
    if skill == SkillId.MULTI_STEP_REASONING:
        # two graded tool calls unlock the reasoning rule; three reasoning turns outvote them
        for i, (name, args) in enumerate(SKILL_TOOLS[SkillId.INFORMATION_RETRIEVAL][:2]):
            writer.tool_step(name, args, i)
    for i in range(SKILL_STEP_COUNT):
        prompt = LONG_INPUT_PROMPT_TOKENS + 500 * i if skill == SkillId.LONG_INPUT_HANDLING else None
        writer.text_step(SKILL_TEXTS[skill], i, prompt)
        if skill in (SkillId.MULTI_TURN_STATE_TRACKING, SkillId.DOMAIN_POLICY_COMPLIANCE) and i < SKILL_STEP_COUNT - 1:
            writer.add(Role.USER, text="Yes, go ahead with that.")


def _truncated(rng: np.random.Generator, dist: Tuple[float, float]) -> float:
    return max(0.0, float(rng.normal(dist[0], dist[1])))


def simulate_task(
    cfg: SimConfig,
    task: SimTask,
    policy: Policy,
    condition: Condition = Condition.BLIND,
    truth: Optional[PoolStats] = None,
) -> TaskRecord:
    """
    Simulate one task for cfg.orchestrator

    Args:
        cfg: Pool, orchestrator and delegation settings
        task: Task with its intended dominant skill and difficulty
        policy: Peer-selection policy
        condition: Condition label written on the record
        truth: Precomputed true_skill_stats(cfg.pool)

    Returns:
        The task record; q is Bernoulli with the acting model's pass rate
        scaled by difficulty

    Raises:
        SimulationError: If the orchestrator is not a pool member
    """
    orchestrator = cfg.orchestrator
    condition = Condition(condition)
    if orchestrator.name not in {p.name for p in cfg.pool}:
        raise SimulationError(f"orchestrator {orchestrator.name} is not in the synthetic pool")
    truth = truth if truth is not None else true_skill_stats(cfg.pool)
    rng = substream(cfg.seed, orchestrator.name, task.benchmark.value, Condition(condition).value, task.task_id)
    candidates = [p.name for p in cfg.pool]

    delegating = rng.random() < cfg.delegation_propensity
    chosen: List[str] = []
    if delegating and policy.kind != PolicyKind.NO_DELEGATE:
        for _ in range(min(cfg.delegations_per_task, cfg.delegation_cap)):
            chosen.append(choose_peer(policy, orchestrator.name, task.dominant_skill, candidates, truth, rng))
    actor = cfg.peer(chosen[0]) if chosen else orchestrator

    success_p = actor.skill_pass.get(task.dominant_skill, 0.0) * task.difficulty
    q = 1.0 if rng.random() < success_p else 0.0
    cost = _truncated(rng, orchestrator.cost_dist)
    latency = _truncated(rng, orchestrator.latency_dist)
    for name in chosen:
        cost += _truncated(rng, cfg.peer(name).cost_dist)
        latency += _truncated(rng, cfg.peer(name).latency_dist)

    writer = _StepWriter()
    writer.add(Role.USER, text=f"Task {task.task_id}")
    emit_skill_steps(writer, task)
    for i, name in enumerate(chosen):
        if condition == Condition.AWARE_TOOL_ONLY:
            writer.add(Role.ASSISTANT, tools=[(READ_PROFILE, {"name": name})], completion_tokens=30)
            writer.add(Role.TOOL_RESULT, text=f"profile card for {name}")
        args = {"name": name, "subtask": f"subtask-{i + 1}", "budget_usd": 0.5}
        writer.add(Role.ASSISTANT, tools=[(CALL_MODEL, args)], completion_tokens=60)
        writer.add(Role.TOOL_RESULT, text=f"{name} answered subtask-{i + 1}")

    return TaskRecord(
        task_id=task.task_id,
        benchmark=task.benchmark,
        shard=task.shard,
        agent=orchestrator.name,
        condition=condition,
        q=q,
        cost_usd=round(cost, 6),
        latency_s=round(latency, 6),
        steps=writer.steps,
    )


def generate_tasks(seed: int, benchmark: Benchmark, n: int) -> List[SimTask]:
    """Deterministic task catalogue for one benchmark, skills drawn from those it can exercise"""
    skills = BENCHMARK_SKILLS[benchmark]
    tasks: List[SimTask] = []
    for i in range(n):
        rng = substream(seed, "catalogue", benchmark.value, i)
        skill = skills[int(rng.integers(len(skills)))]
        difficulty = round(float(rng.uniform(0.7, 1.0)), 6)
        if benchmark == Benchmark.TAU_BENCH:
            shard = TAU_SHARDS[i % len(TAU_SHARDS)]
            task_id = canonical_task_id(benchmark, shard, f"{i:04d}")
        else:
            shard = None
            task_id = f"{benchmark.value}-{i:04d}"
        tasks.append(SimTask(task_id=task_id, benchmark=benchmark, dominant_skill=skill, difficulty=difficulty, shard=shard))
    return tasks


TIER_PASS_RATE: Dict[Tier, float] = {Tier.FRONTIER: 0.75, Tier.STRONG_MID: 0.60, Tier.SMALL: 0.45}
TIER_COST: Dict[Tier, Tuple[float, float]] = {Tier.FRONTIER: (0.20, 0.05), Tier.STRONG_MID: (0.08, 0.02), Tier.SMALL: (0.02, 0.005)}
TIER_LATENCY: Dict[Tier, Tuple[float, float]] = {Tier.FRONTIER: (60.0, 15.0), Tier.STRONG_MID: (35.0, 10.0), Tier.SMALL: (25.0, 8.0)}
SKILL_JITTER = 0.15


def default_sim_config(
    seed: int = 0,
    n_tasks: int = 20,
    benchmarks: Sequence[Benchmark] = tuple(Benchmark),
    registry: Optional[PoolRegistry] = None,
) -> SimConfig:
    """
    Synthetic pool shaped like the reference registry

    Each peer's per-skill pass rate is its tier's base rate plus a fixed
    seeded jitter, so peers differ by skill.
    """
    registry = registry or default_pool_registry()
    pool: List[SyntheticPeer] = []
    for entry in registry.entries:
        rng = substream(seed, "peer", entry.model_name)
        jitter = rng.uniform(-SKILL_JITTER, SKILL_JITTER, size=len(SKILL_ORDER))
        pool.append(SyntheticPeer(
            name=entry.model_name,
            vendor=entry.vendor,
            skill_pass={s: round(float(np.clip(TIER_PASS_RATE[entry.tier] + j, 0.05, 0.98)), 4) for s, j in zip(SKILL_ORDER, jitter)},
            cost_dist=TIER_COST[entry.tier],
            latency_dist=TIER_LATENCY[entry.tier],
        ))
    tasks = [t for bench in benchmarks for t in generate_tasks(seed, Benchmark(bench), n_tasks)]
    return SimConfig(seed=seed, pool=pool, orchestrator=pool[0], tasks=tasks)


def simulate_sweep(
    cfg: SimConfig,
    conditions: Sequence[Tuple[Condition, Policy]] = DEFAULT_CONDITION_POLICIES,
    n_tasks_per_cell: int = 20,
    orchestrators: Optional[Sequence[str]] = None,
    benchmarks: Optional[Sequence[Benchmark]] = None,
) -> List[TaskRecord]:
    """
    Full cross product of orchestrators x benchmarks x conditions

    Each cell takes the first n tasks of its benchmark from cfg.tasks; every
    task draws from its own substream keyed by (seed, cell, task_id), so any
    cell can be regenerated alone.

    Args:
        cfg: Pool and task catalogue
        conditions: (condition, policy) pairs
        n_tasks_per_cell: Tasks per cell
        orchestrators: Orchestrator names; defaults to the whole pool
        benchmarks: Benchmarks; defaults to those in the catalogue

    Returns:
        Records sorted by cell, then task id

    Raises:
        SimulationError: If a benchmark has fewer than n_tasks_per_cell tasks
    """
    names = list(orchestrators) if orchestrators is not None else [p.name for p in cfg.pool]
    if benchmarks is None:
        benchmarks = [b for b in Benchmark if any(t.benchmark == b for t in cfg.tasks)]
    truth = true_skill_stats(cfg.pool)

    records: List[TaskRecord] = []
    for name in sorted(names):
        cell_cfg = cfg.model_copy(update={"orchestrator": cfg.peer(name)})
        for bench in sorted((Benchmark(b) for b in benchmarks), key=lambda b: b.value):
            tasks = [t for t in cfg.tasks if t.benchmark == bench][:n_tasks_per_cell]
            if len(tasks) < n_tasks_per_cell:
                raise SimulationError(f"{bench.value} has {len(tasks)} tasks, {n_tasks_per_cell} requested")
            for condition, policy in sorted(conditions, key=lambda cp: Condition(cp[0]).value):
                records.extend(simulate_task(cell_cfg, t, policy, condition, truth) for t in sorted(tasks, key=lambda t: t.task_id))
    logger.info("Simulated %d records (%d orchestrators x %d benchmarks x %d conditions)", len(records), len(names), len(benchmarks), len(conditions))
    return records
