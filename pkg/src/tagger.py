"""
Frozen rule-based step tagger and the emergent-taxonomy audit clustering
"""

import logging
import re
from collections import Counter
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Pattern, Sequence, Tuple, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .exceptions import TaggerConfigError
from .trace_model import Benchmark, StepEvent, TaskRecord

logger = logging.getLogger(__name__)


class SkillId(str, Enum):
    # Declaration order is the frozen taxonomy order and the tie-break order
    TOOL_SCHEMA_ADHERENCE = "tool_schema_adherence"
    MULTI_TURN_STATE_TRACKING = "multi_turn_state_tracking"
    DOMAIN_POLICY_COMPLIANCE = "domain_policy_compliance"
    INFORMATION_RETRIEVAL = "information_retrieval"
    MULTI_STEP_REASONING = "multi_step_reasoning"
    NUMERICAL_COMPUTATION = "numerical_computation"
    LONG_INPUT_HANDLING = "long_input_handling"


SKILL_ORDER: Tuple[SkillId, ...] = tuple(SkillId)


def skill_rank(skill: SkillId) -> int:
    return SKILL_ORDER.index(skill)


class TagKind(str, Enum):
    SKILL = "skill"
    INFRA_DELEGATION = "_infra_delegation"
    NONE = "none"


class StepTag(BaseModel):
    """Exactly one of: a skill, the infra delegation marker, or none"""
    model_config = ConfigDict(frozen=True)

    kind: TagKind
    skill: Optional[SkillId] = None

    @model_validator(mode="after")
    def _check_skill(self) -> "StepTag":
        if (self.kind == TagKind.SKILL) != (self.skill is not None):
            raise ValueError("skill is set iff kind is 'skill'")
        return self

    @classmethod
    def of(cls, skill: SkillId) -> "StepTag":
        return cls(kind=TagKind.SKILL, skill=skill)

    @property
    def label(self) -> str:
        return self.skill.value if self.skill is not None else self.kind.value


INFRA_TAG = StepTag(kind=TagKind.INFRA_DELEGATION)
NO_TAG = StepTag(kind=TagKind.NONE)

NUMERICAL_TOOL_NAMES = [
    "calculator",
    "compute",
    "eval_python",
    "evaluate_expression",
    "math_eval",
    "python_eval",
]

RETRIEVAL_TOOL_SUBSTRINGS = [
    "web_search",
    "search",
    "fetch_url",
    "browse",
    "find_user_id",
    "find_user",
    "lookup",
    "get_user_details",
    "get_order",
    "list_orders",
    "get_product",
    "list_products",
    "get_reservation",
    "list_reservation",
    "search_direct_flight",
    "search_onestop_flight",
    "parse_pdf",
    "extract_table",
    "ocr",
    "read_document",
]

POLICY_PATTERNS = [
    r"\bagainst\s+(?:our\s+|the\s+)?policy\b",
    r"\bnot\s+permitted\b",
    r"\bI\s+cannot\b.{0,40}\bpolicy\b",
    r"\btransfer.{0,20}human\s+agent",
    r"\boutside\s+(?:my|our)\s+scope\b",
    r"\bplease\s+confirm\b",
    r"\bI\s+(?:will\s+)?need\s+(?:your\s+)?confirmation\b",
]

# One expression per class: ISO date(-time), clock time, currency amount, decimal, digit run.
# Alternation order matters: the longest class is tried first at each position.
NUMERIC_PATTERNS = [
    r"\b\d{4}-\d{2}-\d{2}(?:[T ]\d{1,2}:\d{2}(?::\d{2})?)?\b",
    r"\b\d{1,2}:\d{2}(?::\d{2})?\b",
    r"[$€£¥]\s?\d[\d,]*(?:\.\d+)?",
    r"\d+\.\d+",
    r"\d+",
]


class TaggerConfig(BaseModel):
    """Version-pinned tagger rules; the version is echoed into every artefact"""
    model_config = ConfigDict(frozen=True)

    version: str = Field("v2.0-2026-05-01", min_length=1, description="Tagger version pin")
    infra_tool_names: List[str] = Field(default_factory=lambda: ["call_model", "read_profile"])
    numerical_tool_names: List[str] = Field(default_factory=lambda: list(NUMERICAL_TOOL_NAMES))
    retrieval_tool_substrings: List[str] = Field(default_factory=lambda: list(RETRIEVAL_TOOL_SUBSTRINGS))
    policy_patterns: List[str] = Field(default_factory=lambda: list(POLICY_PATTERNS))
    numeric_patterns: List[str] = Field(default_factory=lambda: list(NUMERIC_PATTERNS))
    long_input_threshold: int = Field(15000, gt=0, description="Prompt tokens at which a turn counts as long input")
    numeric_token_min: int = Field(3, ge=1, description="Numeric tokens in tool args that mark a numerical call")
    chars_per_token_fallback: int = Field(4, ge=1, description="Characters per token when usage is absent")

    @field_validator("policy_patterns", "numeric_patterns")
    @classmethod
    def _check_regexes(cls, patterns: List[str]) -> List[str]:
        for source in patterns:
            try:
                re.compile(source)
            except re.error as e:
                raise ValueError(f"invalid regular expression {source!r}: {e}")
        return patterns

    @classmethod
    def from_yaml(cls, path: Union[str, Path]) -> "TaggerConfig":
        """
        Load a tagger configuration file

        Raises:
            TaggerConfigError: If the file is unreadable or fails validation
        """
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
            return cls.model_validate(data)
        except (OSError, yaml.YAMLError, ValidationError) as e:
            raise TaggerConfigError(f"cannot load tagger config {path}: {e}")

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False, allow_unicode=True)


DEFAULT_TAGGER_CONFIG = TaggerConfig()


@lru_cache(maxsize=32)
def _policy_regex(sources: Tuple[str, ...]) -> Pattern:
    return re.compile("|".join(f"(?:{s})" for s in sources), re.IGNORECASE)


@lru_cache(maxsize=32)
def _numeric_regex(sources: Tuple[str, ...]) -> Pattern:
    return re.compile("|".join(f"(?:{s})" for s in sources))


def count_numeric_tokens(args_text: str, cfg: TaggerConfig = DEFAULT_TAGGER_CONFIG) -> int:
    """Number of non-overlapping numeric tokens (dates, times, amounts, numbers) in the text"""
    if not args_text:
        return 0
    return sum(1 for _ in _numeric_regex(tuple(cfg.numeric_patterns)).finditer(args_text))


def match_policy_phrase(text: str, cfg: TaggerConfig = DEFAULT_TAGGER_CONFIG) -> bool:
    """True iff any refusal / confirmation pattern matches (case-insensitive)"""
    if not text:
        return False
    return _policy_regex(tuple(cfg.policy_patterns)).search(text) is not None


class TagContext(NamedTuple):
    benchmark: Benchmark
    prior_tool_calls_in_task: int = 0


def _graded_calls(step: StepEvent, cfg: TaggerConfig):
    infra = set(cfg.infra_tool_names)
    return [call for call in step.tool_calls if call.name not in infra]


def _prompt_tokens(step: StepEvent, cfg: TaggerConfig) -> int:
    if step.prompt_tokens is not None:
        return step.prompt_tokens
    return len(step.text) // cfg.chars_per_token_fallback


def tag_step(step: StepEvent, ctx: TagContext, cfg: TaggerConfig = DEFAULT_TAGGER_CONFIG) -> StepTag:
    """
    Assign exactly one tag to a step

    Tool-call branch: infra-only, numerical, retrieval, tool-schema. Non-tool
    branch: policy (tau_bench), long input, multi-step reasoning (GAIA),
    multi-turn state (tau_bench / BFCL). First matching rule wins.

    Args:
        step: The step to tag
        ctx: Suite and number of graded tool calls earlier in the same task
        cfg: Tagger rules

    Returns:
        The step's tag
    """
    if not step.is_assistant:
        return NO_TAG

    if step.tool_calls:
        graded = _graded_calls(step, cfg)
        if not graded:
            return INFRA_TAG
        numerical_names = set(cfg.numerical_tool_names)
        for call in graded:
            if call.name.lower() in numerical_names:
                return StepTag.of(SkillId.NUMERICAL_COMPUTATION)
            if count_numeric_tokens(call.args_text, cfg) >= cfg.numeric_token_min:
                return StepTag.of(SkillId.NUMERICAL_COMPUTATION)
        for call in graded:
            name = call.name.lower()
            if any(fragment in name for fragment in cfg.retrieval_tool_substrings):
                return StepTag.of(SkillId.INFORMATION_RETRIEVAL)
        return StepTag.of(SkillId.TOOL_SCHEMA_ADHERENCE)

    benchmark = Benchmark(ctx.benchmark)
    if benchmark == Benchmark.TAU_BENCH and match_policy_phrase(step.text, cfg):
        return StepTag.of(SkillId.DOMAIN_POLICY_COMPLIANCE)
    if _prompt_tokens(step, cfg) >= cfg.long_input_threshold:
        return StepTag.of(SkillId.LONG_INPUT_HANDLING)
    if benchmark == Benchmark.GAIA:
        if ctx.prior_tool_calls_in_task >= 2:
            return StepTag.of(SkillId.MULTI_STEP_REASONING)
        return NO_TAG
    if benchmark in (Benchmark.TAU_BENCH, Benchmark.BFCL):
        return StepTag.of(SkillId.MULTI_TURN_STATE_TRACKING)
    return NO_TAG


def tag_trajectory(
    steps: Sequence[StepEvent],
    benchmark: Benchmark,
    cfg: TaggerConfig = DEFAULT_TAGGER_CONFIG,
) -> List[StepTag]:
    """Tag every step, carrying the graded prior-tool-call count forward"""
    tags: List[StepTag] = []
    prior = 0
    for step in steps:
        tags.append(tag_step(step, TagContext(benchmark, prior), cfg))
        if step.is_assistant:
            prior += len(_graded_calls(step, cfg))
    return tags


def dominant_of_tags(tags: Iterable[StepTag]) -> Optional[SkillId]:
    counts = Counter(tag.skill for tag in tags if tag.skill is not None)
    if not counts:
        return None
    return min(counts, key=lambda s: (-counts[s], skill_rank(s)))


def dominant_skill(
    steps_prefix: Sequence[StepEvent],
    benchmark: Benchmark,
    cfg: TaggerConfig = DEFAULT_TAGGER_CONFIG,
) -> Optional[SkillId]:
    """
    Modal graded skill over a trajectory prefix

    Ties go to the skill listed first in the frozen taxonomy; infra and
    untagged steps are ignored.

    Returns:
        The dominant skill, or None when no step carries a skill
    """
    return dominant_of_tags(tag_trajectory(steps_prefix, benchmark, cfg))


def record_dominant_skill(record: TaskRecord, cfg: TaggerConfig = DEFAULT_TAGGER_CONFIG) -> Optional[SkillId]:
    return dominant_skill(record.steps, record.benchmark, cfg)


def prefix_before(record: TaskRecord, step_index: int) -> List[StepEvent]:
    return [step for step in record.steps if step.index < step_index]


class AuditConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    jaccard_threshold: float = Field(0.45, gt=0.0, lt=1.0, description="Single-link merge threshold")
    max_label_words: int = Field(5, ge=1, description="Words kept per free-form label")


DEFAULT_AUDIT_KEYWORDS: Dict[SkillId, List[str]] = {
    SkillId.TOOL_SCHEMA_ADHERENCE: ["function call", "api call", "tool call", "schema", "argument", "parameter", "invoke"],
    SkillId.MULTI_TURN_STATE_TRACKING: ["state", "tracking", "conversation", "dialogue", "follow-up", "multi-turn"],
    SkillId.DOMAIN_POLICY_COMPLIANCE: ["policy", "refus", "confirm", "compliance"],
    SkillId.INFORMATION_RETRIEVAL: ["search", "retriev", "lookup", "look up", "browse", "fetch", "web"],
    SkillId.MULTI_STEP_REASONING: ["reason", "planning", "decompos", "deduc", "inference", "multi-step"],
    SkillId.NUMERICAL_COMPUTATION: ["calculat", "arithmetic", "math", "numer", "comput"],
    SkillId.LONG_INPUT_HANDLING: ["long", "document", "summar", "lengthy"],
}


class AuditResult(BaseModel):
    labels: List[str]
    cluster_of: List[int] = Field(..., description="Cluster id per label, numbered by first appearance")
    clusters: List[List[str]]
    skills: List[Optional[SkillId]] = Field(..., description="Keyword-rule skill per label")
    coverage: float = Field(..., description="Share of labels mapping to a skill")


def _label_tokens(label: str, cfg: AuditConfig) -> frozenset:
    return frozenset(label.lower().split()[: cfg.max_label_words])


def jaccard(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def map_label_to_skill(label: str, keyword_rules: Dict[SkillId, List[str]]) -> Optional[SkillId]:
    text = label.lower()
    for skill in SKILL_ORDER:
        if any(keyword in text for keyword in keyword_rules.get(skill, [])):
            return skill
    return None


def audit_cluster(
    labels: Sequence[str],
    cfg: AuditConfig = AuditConfig(),
    keyword_rules: Optional[Dict[SkillId, List[str]]] = None,
) -> AuditResult:
    """
    Single-link clustering of free-form skill labels on token Jaccard similarity

    Two labels link iff Jaccard(token sets) >= threshold; clusters are the
    connected components of that graph.

    Args:
        labels: Free-form labels (lowercased and whitespace-tokenised here)
        cfg: Threshold and label length
        keyword_rules: Skill -> keywords table used for the coverage figure

    Returns:
        Clusters, per-label skill mapping and coverage
    """
    rules = keyword_rules if keyword_rules is not None else DEFAULT_AUDIT_KEYWORDS
    labels = list(labels)
    n = len(labels)
    if n == 0:
        return AuditResult(labels=[], cluster_of=[], clusters=[], skills=[], coverage=0.0)

    tokens = [_label_tokens(label, cfg) for label in labels]
    adjacency = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(i + 1, n):
            if jaccard(tokens[i], tokens[j]) >= cfg.jaccard_threshold:
                adjacency[i, j] = adjacency[j, i] = True
    _, components = connected_components(csr_matrix(adjacency), directed=False)

    renumber: Dict[int, int] = {}
    cluster_of: List[int] = []
    for component in components:
        renumber.setdefault(int(component), len(renumber))
        cluster_of.append(renumber[int(component)])
    clusters: List[List[str]] = [[] for _ in renumber]
    for label, cluster_id in zip(labels, cluster_of):
        clusters[cluster_id].append(label)

    skills = [map_label_to_skill(label, rules) for label in labels]
    coverage = sum(1 for s in skills if s is not None) / n
    logger.info("Audit: %d labels, %d clusters, coverage %.1f%%", n, len(clusters), 100 * coverage)
    return AuditResult(labels=labels, cluster_of=cluster_of, clusters=clusters, skills=skills, coverage=coverage)
