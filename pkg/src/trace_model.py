"""
Record schema, identity keys, pool registry and the Stage-1/Stage-2 splitter
"""

import gzip
import io
import json
import logging
import math
import zlib
from enum import Enum
from pathlib import Path
from typing import BinaryIO, Dict, Iterable, List, NamedTuple, Optional, Set, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .exceptions import DuplicateRecordError, RecordParseError, TaskIdError
from .rng import seeded_generator

logger = logging.getLogger(__name__)

CALL_MODEL = "call_model"
READ_PROFILE = "read_profile"
INFRA_TOOL_NAMES = frozenset({CALL_MODEL, READ_PROFILE})
DELEGATION_CAP = 10

GZIP_MAGIC = b"\x1f\x8b"


class Benchmark(str, Enum):
    GAIA = "gaia"
    TAU_BENCH = "tau_bench"
    BFCL = "bfcl"


class Condition(str, Enum):
    BLIND = "blind"
    AWARE_C1 = "aware_c1"
    AWARE_C2 = "aware_c2"
    AWARE_C3 = "aware_c3"
    AWARE_TOOL_ONLY = "aware_tool_only"


# Reference level for every delta metric
BASELINE_CONDITION = Condition.BLIND


class Tier(str, Enum):
    FRONTIER = "frontier"
    STRONG_MID = "strong_mid"
    SMALL = "small"


class Role(str, Enum):
    ASSISTANT = "assistant"
    USER = "user"
    TOOL_RESULT = "tool_result"


class Cell(NamedTuple):
    """One (agent, benchmark, condition) evaluation unit"""
    agent: str
    benchmark: Benchmark
    condition: Condition

    def __str__(self) -> str:
        return f"{self.agent}/{self.benchmark.value}/{self.condition.value}"


class PoolEntry(BaseModel):
    model_config = ConfigDict(frozen=True, protected_namespaces=())

    model_name: str = Field(..., min_length=1, description="Pool-unique model name")
    vendor: str = Field(..., min_length=1, description="Vendor family")
    tier: Tier = Field(..., description="Loose capability tier")


class PoolRegistry(BaseModel):
    """Fixed set of models a delegation may target"""
    model_config = ConfigDict(frozen=True)

    entries: List[PoolEntry] = Field(..., description="Pool members")

    @field_validator("entries")
    @classmethod
    def _check_entries(cls, entries: List[PoolEntry]) -> List[PoolEntry]:
        names = [e.model_name for e in entries]
        if len(set(names)) != len(names):
            raise ValueError("model names must be unique")
        if len(entries) < 2:
            raise ValueError("pool registry needs at least two models")
        return entries

    @property
    def names(self) -> List[str]:
        return [e.model_name for e in self.entries]

    @property
    def size(self) -> int:
        return len(self.entries)

    def __contains__(self, model_name: object) -> bool:
        return any(e.model_name == model_name for e in self.entries)

    def entry(self, model_name: str) -> PoolEntry:
        for e in self.entries:
            if e.model_name == model_name:
                return e
        raise KeyError(model_name)

    def vendor_of(self, model_name: str) -> str:
        return self.entry(model_name).vendor

    def vendor_size(self, vendor: str) -> int:
        return sum(1 for e in self.entries if e.vendor == vendor)

    @property
    def vendors(self) -> List[str]:
        return sorted({e.vendor for e in self.entries})


def default_pool_registry() -> PoolRegistry:
    """The eleven-model reference pool: seven vendor families, three tiers"""
    rows = [
        ("claude-opus-4.7", "anthropic", Tier.FRONTIER),
        ("claude-sonnet-4.6", "anthropic", Tier.STRONG_MID),
        ("gpt-5.5", "openai", Tier.FRONTIER),
        ("gpt-5.4", "openai", Tier.STRONG_MID),
        ("gemini-3.1-pro", "google", Tier.FRONTIER),
        ("gemini-3-flash", "google", Tier.STRONG_MID),
        ("deepseek-v4-pro", "deepseek", Tier.STRONG_MID),
        ("deepseek-v4-flash", "deepseek", Tier.SMALL),
        ("kimi-k2.6", "moonshot", Tier.SMALL),
        ("qwen3.6-plus", "alibaba", Tier.SMALL),
        ("minimax-m2.5", "minimax", Tier.SMALL),
    ]
    return PoolRegistry(entries=[PoolEntry(model_name=n, vendor=v, tier=t) for n, v, t in rows])


class ToolCall(BaseModel):
    model_config = ConfigDict(frozen=True, extra="allow")

    name: str = Field(..., min_length=1, description="Tool name")
    args_text: str = Field("", description="Serialized arguments")


class StepEvent(BaseModel):
    """One turn of a trajectory; the tagger's unit of work"""
    model_config = ConfigDict(frozen=True, extra="allow")

    index: int = Field(..., ge=0, description="Ordinal position within the record")
    role: Role = Field(..., description="Speaker of the turn")
    text: str = Field("", description="Turn text, possibly empty")
    tool_calls: List[ToolCall] = Field(default_factory=list, description="Tool calls issued in this turn")
    prompt_tokens: Optional[int] = Field(None, ge=0, description="Prompt tokens billed for this turn")
    completion_tokens: Optional[int] = Field(None, ge=0, description="Completion tokens, reasoning included")
    finish_reason: str = Field("", description="Provider finish reason")

    @property
    def is_assistant(self) -> bool:
        return self.role == Role.ASSISTANT


class TaskRecord(BaseModel):
    """One scored task trajectory"""
    model_config = ConfigDict(frozen=True, extra="allow")

    task_id: str = Field(..., min_length=1, description="Canonical task id")
    benchmark: Benchmark
    shard: Optional[str] = Field(None, description="Environment shard (tau_bench only)")
    agent: str = Field(..., min_length=1, description="Orchestrator model name")
    condition: Condition
    q: float = Field(..., description="Native quality score in [0, 1]")
    cost_usd: float = Field(..., description="Task cost in USD")
    latency_s: float = Field(..., description="Wall-clock latency in seconds")
    steps: List[StepEvent] = Field(default_factory=list)

    @property
    def cell(self) -> Cell:
        return Cell(self.agent, self.benchmark, self.condition)

    @property
    def key(self) -> Tuple[str, str, str, str]:
        return (self.agent, self.benchmark.value, self.condition.value, self.task_id)


class Delegation(BaseModel):
    """A call_model invocation derived from a record's steps"""
    model_config = ConfigDict(frozen=True)

    cell: Cell
    task_id: str
    step_index: int = Field(..., ge=0)
    peer: str
    subtask: str = ""
    budget_usd: float = 0.0

    @property
    def orchestrator(self) -> str:
        return self.cell.agent

    @property
    def record_ref(self) -> Tuple[Cell, str]:
        return (self.cell, self.task_id)


class Violation(BaseModel):
    model_config = ConfigDict(frozen=True)

    cell: str
    task_id: str
    message: str

    def render(self) -> str:
        return f"{self.cell}\t{self.task_id}\t{self.message}"


class SplitSpec(BaseModel):
    """Deterministic stratified Stage-1/Stage-2 split parameters"""

    fraction: float = Field(0.2, gt=0.0, lt=1.0, description="Stage-1 share per stratum")
    seed: int = Field(10, ge=0, description="PCG64 seed")
    stratum_of: Dict[str, str] = Field(
        default_factory=dict,
        description="Task id -> stratum label; empty means a single stratum",
    )


def canonical_task_id(benchmark: Benchmark, shard: Optional[str], raw_id: str) -> str:
    """
    Canonical task id, shard-prefixed for tau_bench so airline and retail ids never collide

    Args:
        benchmark: Task suite
        shard: Environment shard, required iff benchmark is tau_bench
        raw_id: Suite-native task id

    Returns:
        "<shard>:<raw_id>" for tau_bench, raw_id otherwise

    Raises:
        TaskIdError: If the shard is missing for tau_bench or given for another suite
    """
    benchmark = Benchmark(benchmark)
    if benchmark == Benchmark.TAU_BENCH:
        if not shard:
            raise TaskIdError(f"tau_bench task {raw_id!r} requires a shard")
        prefix = f"{shard}:"
        return raw_id if raw_id.startswith(prefix) else prefix + raw_id
    if shard:
        raise TaskIdError(f"{benchmark.value} task {raw_id!r} must not carry a shard")
    return raw_id


def _read_bytes(stream: Union[bytes, str, Path, BinaryIO]) -> bytes:
    if isinstance(stream, (bytes, bytearray)):
        return bytes(stream)
    if isinstance(stream, (str, Path)):
        return Path(stream).read_bytes()
    return stream.read()


def _split_lines(data: bytes) -> List[bytes]:
    if data[:2] == GZIP_MAGIC:
        data = gzip.decompress(data)
    return data.split(b"\n")


def parse_records(stream: Union[bytes, str, Path, BinaryIO]) -> List[TaskRecord]:
    """
    Parse a gzip-compressed JSON-lines record stream

    Args:
        stream: Raw bytes, a path, or a binary file object (plain text is accepted too)

    Returns:
        Records in stream order; unknown fields are kept on the models

    Raises:
        RecordParseError: If a line is not a valid record object
        DuplicateRecordError: If two records share a (cell, task_id) key
    """
    records: List[TaskRecord] = []
    seen: Set[Tuple[str, str, str, str]] = set()
    try:
        lines = _split_lines(_read_bytes(stream))
    except (OSError, EOFError, zlib.error) as e:
        raise RecordParseError(0, f"stream not decodable: {e}")

    for line_number, raw in enumerate(lines, start=1):
        try:
            line = raw.decode("utf-8").rstrip("\r")
        except UnicodeDecodeError as e:
            raise RecordParseError(line_number, f"invalid UTF-8: {e.reason}")
        if not line.strip():
            continue
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as e:
            raise RecordParseError(line_number, f"invalid JSON: {e.msg}")
        if not isinstance(payload, dict):
            raise RecordParseError(line_number, "line is not a JSON object")
        try:
            record = TaskRecord.model_validate(payload)
        except ValidationError as e:
            raise RecordParseError(line_number, f"schema violation: {e.errors()[0]['msg']}")
        if record.key in seen:
            raise DuplicateRecordError(record.key, line_number)
        seen.add(record.key)
        records.append(record)

    logger.debug("Parsed %d records", len(records))
    return records


def canonical_json(record: TaskRecord) -> str:
    return json.dumps(record.model_dump(mode="json"), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def emit_records(records: Iterable[TaskRecord]) -> bytes:
    """Canonical gzip JSON-lines serialization; byte-stable for equal inputs"""
    text = "".join(canonical_json(r) + "\n" for r in records)
    buffer = io.BytesIO()
    with gzip.GzipFile(fileobj=buffer, mode="wb", mtime=0, filename="") as gz:
        gz.write(text.encode("utf-8"))
    return buffer.getvalue()


def read_records(path: Union[str, Path]) -> List[TaskRecord]:
    records = parse_records(Path(path))
    logger.info("Read %d records from %s", len(records), path)
    return records


def write_records(path: Union[str, Path], records: Iterable[TaskRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = list(records)
    path.write_bytes(emit_records(records))
    logger.info("Wrote %d records to %s", len(records), path)
    return path


def group_by_cell(records: Iterable[TaskRecord]) -> Dict[Cell, List[TaskRecord]]:
    """Partition records by cell; keys come back in sorted order"""
    groups: Dict[Cell, List[TaskRecord]] = {}
    for record in records:
        groups.setdefault(record.cell, []).append(record)
    return {cell: groups[cell] for cell in sorted(groups, key=lambda c: (c.agent, c.benchmark.value, c.condition.value))}


def split_key(record: TaskRecord) -> str:
    """Task identity used by the splitter; unique across suites"""
    return f"{record.benchmark.value}/{record.task_id}"


def stratum_of_record(record: TaskRecord) -> str:
    """
    Default stratum: the suite plus its finer label when the record carries one
    (tau_bench shard, GAIA level, BFCL task family)
    """
    extra = record.model_extra or {}
    detail = record.shard or extra.get("level") or extra.get("family") or extra.get("stratum") or ""
    return f"{record.benchmark.value}:{detail}"


def build_split_spec(records: Iterable[TaskRecord], fraction: float = 0.2, seed: int = 10) -> SplitSpec:
    return SplitSpec(
        fraction=fraction,
        seed=seed,
        stratum_of={split_key(r): stratum_of_record(r) for r in records},
    )


def stratified_split(task_ids: Iterable[str], spec: SplitSpec) -> Tuple[Set[str], Set[str]]:
    """
    Deterministic stratified Stage-1/Stage-2 split

    Within each stratum the ids are sorted, permuted by a PCG64 generator seeded
    with spec.seed (strata visited in sorted order) and the first
    ceil(fraction * n) ids go to Stage-1.

    Args:
        task_ids: Task ids in any order; duplicates are ignored
        spec: Split parameters

    Returns:
        (stage1, stage2) disjoint sets covering all ids

    Raises:
        TaskIdError: If an id has no stratum while the mapping is non-empty
    """
    ids = sorted(set(task_ids))
    if not ids:
        return set(), set()

    strata: Dict[str, List[str]] = {}
    for task_id in ids:
        if spec.stratum_of:
            if task_id not in spec.stratum_of:
                raise TaskIdError(f"task {task_id!r} has no stratum")
            label = spec.stratum_of[task_id]
        else:
            label = ""
        strata.setdefault(label, []).append(task_id)

    generator = seeded_generator(spec.seed)
    stage1: Set[str] = set()
    for label in sorted(strata):
        members = strata[label]
        # rounding guard: 0.2 * 15 must give 3, not 4
        take = math.ceil(round(spec.fraction * len(members), 9))
        order = generator.permutation(len(members))
        stage1.update(members[i] for i in order[:take])

    stage2 = set(ids) - stage1
    logger.debug("Split %d ids into %d stage-1 / %d stage-2 across %d strata", len(ids), len(stage1), len(stage2), len(strata))
    return stage1, stage2


def count_delegation_calls(record: TaskRecord) -> int:
    return sum(1 for step in record.steps for call in step.tool_calls if call.name == CALL_MODEL)


def extract_delegations(record: TaskRecord) -> Tuple[List[Delegation], List[str]]:
    """
    Derive delegations from call_model steps

    Returns:
        (delegations, problems) where problems describe unparseable call_model arguments
    """
    delegations: List[Delegation] = []
    problems: List[str] = []
    for step in record.steps:
        for call in step.tool_calls:
            if call.name != CALL_MODEL:
                continue
            try:
                args = json.loads(call.args_text) if call.args_text else {}
            except json.JSONDecodeError:
                args = None
            if not isinstance(args, dict) or not isinstance(args.get("name"), str):
                problems.append(f"malformed call_model arguments at step {step.index}")
                continue
            try:
                budget = float(args.get("budget_usd", 0.0) or 0.0)
            except (TypeError, ValueError):
                problems.append(f"malformed delegation budget at step {step.index}")
                continue
            delegations.append(Delegation(
                cell=record.cell,
                task_id=record.task_id,
                step_index=step.index,
                peer=args["name"],
                subtask=str(args.get("subtask", "")),
                budget_usd=budget,
            ))
    return delegations, problems


def extract_all_delegations(records: Iterable[TaskRecord]) -> List[Delegation]:
    delegations: List[Delegation] = []
    for record in records:
        found, _ = extract_delegations(record)
        delegations.extend(found)
    return delegations


def validate_record(
    r: TaskRecord,
    pool: PoolRegistry,
    delegation_cap: int = DELEGATION_CAP,
) -> List[Violation]:
    """
    Check every record invariant; violations are returned, never raised

    Args:
        r: Record to check
        pool: Pool registry delegations must target
        delegation_cap: Maximum call_model invocations per task

    Returns:
        Empty list iff the record is valid
    """
    messages: List[str] = []

    if not 0.0 <= r.q <= 1.0:
        messages.append(f"quality out of range ({r.q})")
    if r.cost_usd < 0:
        messages.append(f"negative cost ({r.cost_usd})")
    if r.latency_s < 0:
        messages.append(f"negative latency ({r.latency_s})")
    if r.agent not in pool:
        messages.append(f"unknown agent {r.agent}")

    if r.benchmark == Benchmark.TAU_BENCH:
        if not r.shard:
            messages.append("tau_bench record missing shard")
        elif not r.task_id.startswith(f"{r.shard}:"):
            messages.append("task id not prefixed by shard")
    elif r.shard:
        messages.append(f"shard given for {r.benchmark.value} record")

    previous = -1
    for step in r.steps:
        if step.index <= previous:
            messages.append(f"step indices not strictly increasing at step {step.index}")
        previous = step.index
        if not step.is_assistant and step.tool_calls:
            messages.append(f"non-assistant step {step.index} carries tool calls")

    n_calls = count_delegation_calls(r)
    if n_calls > delegation_cap:
        messages.append(f"delegation cap exceeded ({n_calls} > {delegation_cap})")

    delegations, problems = extract_delegations(r)
    messages.extend(problems)
    for d in delegations:
        if d.peer == r.agent:
            messages.append(f"self-delegation at step {d.step_index}")
        elif d.peer not in pool:
            messages.append(f"unknown peer {d.peer} at step {d.step_index}")
        if d.budget_usd < 0:
            messages.append(f"negative delegation budget at step {d.step_index}")

    return [Violation(cell=str(r.cell), task_id=r.task_id, message=m) for m in messages]


def validate_records(records: Iterable[TaskRecord], pool: PoolRegistry) -> List[Violation]:
    violations: List[Violation] = []
    n = 0
    for record in records:
        violations.extend(validate_record(record, pool))
        n += 1
    logger.info("Validated %d records: %d violations", n, len(violations))
    return violations


def render_violations(violations: Iterable[Violation]) -> str:
    return "".join(v.render() + "\n" for v in violations)
