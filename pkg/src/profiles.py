"""
Per-(model, skill) Stage-1 statistics and byte-stable C2 profile cards
"""

import json
import logging
import math
from collections import defaultdict
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .exceptions import CardBuildError
from .tagger import DEFAULT_TAGGER_CONFIG, SKILL_ORDER, SkillId, TaggerConfig, record_dominant_skill, skill_rank
from .trace_model import Role, TaskRecord

logger = logging.getLogger(__name__)

PASS_THRESHOLD = 0.5
STRENGTH_COUNT = 3
# Below this many exercised skills, strengths and weaknesses may overlap
DISJOINT_MIN_SKILLS = 6


class SkillStats(BaseModel):
    model_config = ConfigDict(frozen=True)

    model: str
    skill: SkillId
    n_tasks: int = Field(..., ge=0)
    passes: int = Field(..., ge=0)
    pass_rate: float = Field(..., ge=0.0, le=1.0)
    mean_steps: float = 0.0
    mean_output_tokens: float = 0.0
    mean_latency_s: float = 0.0
    cost_per_task: float = 0.0
    cost_per_success: Optional[float] = None
    percentile_rank: Optional[Tuple[int, int]] = Field(None, description="(rank, of) among exercising models")

    @model_validator(mode="after")
    def _check_counts(self) -> "SkillStats":
        if self.passes > self.n_tasks:
            raise ValueError("passes cannot exceed n_tasks")
        if self.passes == 0 and self.cost_per_success is not None:
            raise ValueError("cost_per_success is undefined without a success")
        if self.percentile_rank is not None and self.percentile_rank[0] > self.percentile_rank[1]:
            raise ValueError("rank cannot exceed the number of ranked models")
        return self


PoolStats = Dict[Tuple[str, SkillId], SkillStats]


def _rate_key(rate: float) -> float:
    # pass rates are ratios of small integers; rounding makes 4/5 and 8/10 tie
    return round(rate, 12)


def _cost_key(stats: SkillStats) -> float:
    return stats.cost_per_success if stats.cost_per_success is not None else math.inf


def exercisers(skill: SkillId, pool_stats: PoolStats) -> List[SkillStats]:
    return [s for (_, sk), s in pool_stats.items() if sk == skill and s.n_tasks > 0]


def percentile_rank(model: str, skill: SkillId, pool_stats: PoolStats) -> Optional[Tuple[int, int]]:
    """
    Rank of a model's pass rate among models exercising the skill

    Ties share the smaller rank (1, 1, 3). Returns None when the model did not
    exercise the skill.
    """
    own = pool_stats.get((model, skill))
    if own is None or own.n_tasks == 0:
        return None
    ranked = exercisers(skill, pool_stats)
    better = sum(1 for s in ranked if _rate_key(s.pass_rate) > _rate_key(own.pass_rate))
    return (better + 1, len(ranked))


def rank_peers(skill: SkillId, pool_stats: PoolStats, exclude: Optional[str] = None) -> List[str]:
    """
    Candidate peers for a skill, best first

    Ordered by descending Stage-1 pass rate, then lower cost per success, then
    name; ``exclude`` (the orchestrator) never appears.
    """
    candidates = [s for s in exercisers(skill, pool_stats) if s.model != exclude]
    candidates.sort(key=lambda s: (-_rate_key(s.pass_rate), _cost_key(s), s.model))
    return [s.model for s in candidates]


class _Accumulator:
    __slots__ = ("n", "passes", "steps", "tokens", "latency", "cost")

    def __init__(self):
        self.n = 0
        self.passes = 0
        self.steps = 0.0
        self.tokens = 0.0
        self.latency = 0.0
        self.cost = 0.0

    def add(self, record: TaskRecord) -> None:
        self.n += 1
        self.passes += int(record.q >= PASS_THRESHOLD)
        self.steps += sum(1 for s in record.steps if s.role == Role.ASSISTANT)
        self.tokens += sum(s.completion_tokens or 0 for s in record.steps)
        self.latency += record.latency_s
        self.cost += record.cost_usd


def compute_skill_stats(
    stage1: Iterable[TaskRecord],
    cfg: TaggerConfig = DEFAULT_TAGGER_CONFIG,
) -> PoolStats:
    """
    Per-(model, skill) Stage-1 aggregates

    A task counts toward skill s iff the dominant skill of its full trajectory
    is s; it passes iff q >= 0.5.

    Args:
        stage1: Stage-1 records of a single condition
        cfg: Tagger used for attribution

    Returns:
        Map (model, skill) -> SkillStats with percentile ranks filled in

    Raises:
        CardBuildError: If the records mix conditions
    """
    records = list(stage1)
    if not records:
        return {}
    conditions = {r.condition for r in records}
    if len(conditions) > 1:
        raise CardBuildError(f"stage-1 records must share one condition, got {sorted(c.value for c in conditions)}")

    buckets: Dict[Tuple[str, SkillId], _Accumulator] = defaultdict(_Accumulator)
    for record in records:
        skill = record_dominant_skill(record, cfg)
        if skill is not None:
            buckets[(record.agent, skill)].add(record)

    unranked: PoolStats = {}
    for (model, skill), acc in sorted(buckets.items(), key=lambda kv: (kv[0][0], skill_rank(kv[0][1]))):
        unranked[(model, skill)] = SkillStats(
            model=model,
            skill=skill,
            n_tasks=acc.n,
            passes=acc.passes,
            pass_rate=acc.passes / acc.n,
            mean_steps=acc.steps / acc.n,
            mean_output_tokens=acc.tokens / acc.n,
            mean_latency_s=acc.latency / acc.n,
            cost_per_task=acc.cost / acc.n,
            cost_per_success=acc.cost / acc.passes if acc.passes else None,
        )

    pool_stats = {
        key: stats.model_copy(update={"percentile_rank": percentile_rank(key[0], key[1], unranked)})
        for key, stats in unranked.items()
    }
    logger.info("Computed %d (model, skill) stats over %d stage-1 records", len(pool_stats), len(records))
    return pool_stats


def stats_for_model(model: str, pool_stats: PoolStats) -> Dict[SkillId, SkillStats]:
    return {skill: s for (m, skill), s in pool_stats.items() if m == model}


class CardVariant(str, Enum):
    C1_HUMAN = "c1_human"
    C2_STATIC = "c2_static"
    C3_LLM_JUDGE = "c3_llm_judge"


class CardFrontmatter(BaseModel):
    """Frontmatter shared by all card variants; only C2 is generated here"""
    model_config = ConfigDict(frozen=True, extra="allow")

    model: str = Field(..., min_length=1)
    variant: CardVariant
    tagger: Optional[str] = None
    n_tasks: Optional[int] = Field(None, ge=0)
    benchmarks: List[str] = Field(default_factory=list)
    manifest: Optional[str] = Field(None, description="Configuration hash of the run that wrote the card")

    @model_validator(mode="after")
    def _check_tagger(self) -> "CardFrontmatter":
        if self.variant == CardVariant.C2_STATIC and not self.tagger:
            raise ValueError("c2_static cards must pin the tagger version")
        return self


class ProfileCard(BaseModel):
    model_config = ConfigDict(frozen=True)

    frontmatter: CardFrontmatter
    strengths: List[SkillStats]
    weaknesses: List[SkillStats]
    all_skills: List[SkillStats]
    unexercised: List[SkillId]


def skill_display(skill: SkillId) -> str:
    return skill.value.replace("_", "-")


def build_c2_card(
    model: str,
    stats: Dict[SkillId, SkillStats],
    pool_stats: PoolStats,
    n_tasks: int,
    benchmarks: Sequence[str],
    tagger_version: str = DEFAULT_TAGGER_CONFIG.version,
) -> ProfileCard:
    """
    Assemble a C2 card from a model's Stage-1 skill stats

    Args:
        model: Model the card characterises
        stats: The model's per-skill stats
        pool_stats: All models' stats, used for percentile ranks
        n_tasks: Stage-1 tasks the model ran
        benchmarks: Suites those tasks came from
        tagger_version: Tagger version pinned in the frontmatter

    Returns:
        The card

    Raises:
        CardBuildError: If the model has no Stage-1 tasks or no exercised skill
    """
    if n_tasks <= 0:
        raise CardBuildError(f"model {model} has no stage-1 tasks")
    exercised = [
        s.model_copy(update={"percentile_rank": percentile_rank(model, s.skill, pool_stats) or s.percentile_rank})
        for s in stats.values()
        if s.n_tasks > 0
    ]
    if not exercised:
        raise CardBuildError(f"model {model} exercised no skill in stage 1")

    strengths = sorted(exercised, key=lambda s: (-_rate_key(s.pass_rate), _cost_key(s), skill_rank(s.skill)))
    weaknesses = sorted(exercised, key=lambda s: (_rate_key(s.pass_rate), _cost_key(s), skill_rank(s.skill)))
    seen = {s.skill for s in exercised}

    return ProfileCard(
        frontmatter=CardFrontmatter(
            model=model,
            variant=CardVariant.C2_STATIC,
            tagger=tagger_version,
            n_tasks=n_tasks,
            benchmarks=sorted(set(benchmarks)),
        ),
        strengths=strengths[:STRENGTH_COUNT],
        weaknesses=weaknesses[:STRENGTH_COUNT],
        all_skills=sorted(exercised, key=lambda s: skill_display(s.skill)),
        unexercised=[skill for skill in SKILL_ORDER if skill not in seen],
    )


def build_all_c2_cards(
    stage1: Sequence[TaskRecord],
    cfg: TaggerConfig = DEFAULT_TAGGER_CONFIG,
    pool_stats: Optional[PoolStats] = None,
) -> List[ProfileCard]:
    """One card per model present in the Stage-1 records, sorted by model name"""
    if pool_stats is None:
        pool_stats = compute_skill_stats(stage1, cfg)
    tasks: Dict[str, int] = defaultdict(int)
    suites: Dict[str, set] = defaultdict(set)
    for record in stage1:
        tasks[record.agent] += 1
        suites[record.agent].add(record.benchmark.value)

    cards = [
        build_c2_card(model, stats_for_model(model, pool_stats), pool_stats, tasks[model], sorted(suites[model]), cfg.version)
        for model in sorted(tasks)
        if stats_for_model(model, pool_stats)
    ]
    logger.info("Built %d C2 cards", len(cards))
    return cards


def _yaml_scalar(value: str) -> str:
    try:
        plain_ok = yaml.safe_load(value) == value and ":" not in value and "#" not in value
    except yaml.YAMLError:
        plain_ok = False
    return value if plain_ok else json.dumps(value, ensure_ascii=False)


def _percent(rate: float) -> str:
    return f"{100 * rate:.0f}%"


def _usd(value: float) -> str:
    return f"{value:.3f}"


def _skill_line(s: SkillStats) -> str:
    rank = f"rank {s.percentile_rank[0]}/{s.percentile_rank[1]}" if s.percentile_rank else "unranked"
    success = f"${_usd(s.cost_per_success)}/success" if s.cost_per_success is not None else "no successes"
    return f"- {skill_display(s.skill)} ({rank}): {s.passes}/{s.n_tasks}={_percent(s.pass_rate)} ({success})"


def render_card(card: ProfileCard) -> str:
    """
    Byte-stable markdown rendering of a C2 card

    Frontmatter keys are emitted in the fixed order model, variant, tagger,
    n_tasks, benchmarks, then manifest when set; percentages carry no
    decimals and USD three.
    """
    fm = card.frontmatter
    if not card.all_skills:
        raise CardBuildError(f"card for {fm.model} has no measured skills")
    benchmarks = ", ".join(_yaml_scalar(b) for b in fm.benchmarks)
    lines = [
        "---",
        f"model: {_yaml_scalar(fm.model)}",
        f"variant: {fm.variant.value}",
        f"tagger: {_yaml_scalar(fm.tagger or '')}",
        f"n_tasks: {fm.n_tasks if fm.n_tasks is not None else 0}",
        f"benchmarks: [{benchmarks}]",
    ]
    if fm.manifest:
        lines.append(f"manifest: {_yaml_scalar(fm.manifest)}")
    lines += [
        "---",
        f"# {fm.model} - derived skill profile (C2)",
        "",
        f"Generated automatically from {fm.n_tasks} Stage-1 tasks across {len(fm.benchmarks)} benchmarks "
        f"via the rule-based tagger {fm.tagger}. No LLM judgment.",
        "",
        "## Strengths",
        *[_skill_line(s) for s in card.strengths],
        "",
        "## Weaknesses",
        *[_skill_line(s) for s in card.weaknesses],
        "",
        "## All measured skills",
        "| Skill | pass | n | avg steps | avg out-tok | $/task |",
        "|---|---:|---:|---:|---:|---:|",
    ]
    for s in card.all_skills:
        lines.append(
            f"| {skill_display(s.skill)} | {_percent(s.pass_rate)} | {s.n_tasks} | "
            f"{s.mean_steps:.1f} | {s.mean_output_tokens:.0f} | {_usd(s.cost_per_task)} |"
        )
    lines += ["", "## Skills not exercised in Stage 1"]
    lines += [f"- {skill.value}" for skill in card.unexercised] or ["- none"]
    lines += [
        "",
        "Recommended delegation patterns: none. C2 is metric-only; orchestrators combine "
        "per-skill rates with the cost and latency tier in the registry.",
        "",
    ]
    return "\n".join(lines)


def parse_frontmatter(text: str) -> CardFrontmatter:
    """
    Parse and validate the frontmatter block of any card variant

    Raises:
        CardBuildError: If the block is missing or fails the schema
    """
    if not text.startswith("---\n"):
        raise CardBuildError("card does not start with a frontmatter block")
    end = text.find("\n---\n", 4)
    if end < 0:
        raise CardBuildError("unterminated frontmatter block")
    try:
        data = yaml.safe_load(text[4:end]) or {}
        return CardFrontmatter.model_validate(data)
    except (yaml.YAMLError, ValidationError) as e:
        raise CardBuildError(f"invalid card frontmatter: {e}")


def card_path(out_dir: Union[str, Path], model: str, variant: CardVariant = CardVariant.C2_STATIC) -> Path:
    return Path(out_dir) / "profile_cards" / variant.value / f"{model}.md"


def write_cards(cards: Iterable[ProfileCard], out_dir: Union[str, Path], manifest_hash: Optional[str] = None) -> List[Path]:
    paths: List[Path] = []
    for card in cards:
        if manifest_hash:
            fm = card.frontmatter.model_copy(update={"manifest": manifest_hash})
            card = card.model_copy(update={"frontmatter": fm})
        path = card_path(out_dir, card.frontmatter.model, card.frontmatter.variant)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(render_card(card), encoding="utf-8", newline="\n")
        paths.append(path)
    logger.info("Wrote %d cards under %s", len(paths), out_dir)
    return paths
