"""
Record and step builders shared by the test modules
"""

import json
import os
import sys
from typing import Iterable, List, Optional, Sequence

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from src.profiles import SkillStats
from src.tagger import SkillId
from src.trace_model import CALL_MODEL, Benchmark, Condition, Role, StepEvent, TaskRecord, ToolCall


def step(
    index: int,
    role: Role = Role.ASSISTANT,
    text: str = "",
    tools: Sequence = (),
    prompt_tokens: Optional[int] = None,
    completion_tokens: Optional[int] = None,
) -> StepEvent:
    """Step with tool calls given as names or (name, args_text) pairs"""
    calls = [ToolCall(name=t) if isinstance(t, str) else ToolCall(name=t[0], args_text=t[1]) for t in tools]
    return StepEvent(
        index=index,
        role=role,
        text=text,
        tool_calls=calls,
        prompt_tokens=prompt_tokens,
        completion_tokens=completion_tokens,
    )


def delegation(index: int, peer: str, subtask: str = "sub", budget: float = 0.5) -> StepEvent:
    args = json.dumps({"name": peer, "subtask": subtask, "budget_usd": budget})
    return step(index, tools=[(CALL_MODEL, args)])


def numerical_steps(start: int = 0, n: int = 1) -> List[StepEvent]:
    return [step(start + i, tools=[("calculator", '{"expression": "1+1"}')]) for i in range(n)]


def record(
    task_id: str = "t1",
    benchmark: Benchmark = Benchmark.GAIA,
    agent: str = "gpt-5.5",
    condition: Condition = Condition.BLIND,
    q: float = 1.0,
    cost: float = 0.1,
    latency: float = 10.0,
    steps: Iterable[StepEvent] = (),
    shard: Optional[str] = None,
    **extra,
) -> TaskRecord:
    return TaskRecord(
        task_id=task_id,
        benchmark=benchmark,
        shard=shard,
        agent=agent,
        condition=condition,
        q=q,
        cost_usd=cost,
        latency_s=latency,
        steps=list(steps),
        **extra,
    )


def make_stats(model: str, skill: SkillId, n: int, passes: int, cost: float = 0.1, rank=None) -> SkillStats:
    """Stage-1 stats with a flat cost per task"""
    return SkillStats(
        model=model,
        skill=skill,
        n_tasks=n,
        passes=passes,
        pass_rate=passes / n if n else 0.0,
        mean_steps=2.0,
        mean_output_tokens=50.0,
        mean_latency_s=3.0,
        cost_per_task=cost,
        cost_per_success=cost * n / passes if passes else None,
        percentile_rank=rank,
    )
