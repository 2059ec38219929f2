"""
Test cases for the record schema, parser, emitter, registry and splitter
"""

import gzip
import hashlib
import json
import math
import pytest
import sys
import os

# Add the src directory to the Python path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from pydantic import ValidationError

from src.exceptions import DuplicateRecordError, RecordParseError, TaskIdError
from src.trace_model import (
    Benchmark,
    Cell,
    Condition,
    PoolEntry,
    PoolRegistry,
    Role,
    SplitSpec,
    Tier,
    build_split_spec,
    canonical_task_id,
    count_delegation_calls,
    default_pool_registry,
    emit_records,
    extract_delegations,
    group_by_cell,
    parse_records,
    read_records,
    render_violations,
    stratified_split,
    validate_record,
    write_records,
)
from tests.builders import delegation, numerical_steps, record, step


def _payload(**overrides):
    data = {
        "task_id": "t1",
        "benchmark": "gaia",
        "agent": "gpt-5.5",
        "condition": "blind",
        "q": 1.0,
        "cost_usd": 0.12,
        "latency_s": 30.0,
        "steps": [{"index": 0, "role": "user", "text": "hi"}],
    }
    data.update(overrides)
    return data


def _stream(*payloads, compress=True) -> bytes:
    text = "".join(json.dumps(p) + "\n" for p in payloads).encode("utf-8")
    return gzip.compress(text) if compress else text


class TestTaskIds:
    """Test cases for canonical task ids"""

    def test_tau_bench_ids_are_shard_prefixed(self):
        assert canonical_task_id(Benchmark.TAU_BENCH, "airline", "12") == "airline:12"
        assert canonical_task_id(Benchmark.TAU_BENCH, "retail", "12") == "retail:12"

    def test_already_prefixed_id_is_unchanged(self):
        assert canonical_task_id(Benchmark.TAU_BENCH, "airline", "airline:12") == "airline:12"

    def test_tau_bench_without_shard_raises(self):
        with pytest.raises(TaskIdError):
            canonical_task_id(Benchmark.TAU_BENCH, None, "12")

    def test_shard_on_other_suite_raises(self):
        with pytest.raises(TaskIdError):
            canonical_task_id(Benchmark.GAIA, "airline", "12")

    def test_other_suites_keep_raw_id(self):
        assert canonical_task_id(Benchmark.BFCL, None, "multi_turn_base_3") == "multi_turn_base_3"


class TestPoolRegistry:
    """Test cases for the pool registry"""

    def test_default_pool_shape(self):
        pool = default_pool_registry()
        assert pool.size == 11
        assert len(pool.vendors) == 7
        assert pool.vendor_size("openai") == 2
        assert pool.vendor_size("moonshot") == 1
        assert "gpt-5.5" in pool
        assert "gpt-4" not in pool

    def test_duplicate_names_rejected(self):
        entry = PoolEntry(model_name="a", vendor="v", tier=Tier.SMALL)
        with pytest.raises(ValidationError):
            PoolRegistry(entries=[entry, entry])

    def test_single_member_rejected(self):
        with pytest.raises(ValidationError):
            PoolRegistry(entries=[PoolEntry(model_name="a", vendor="v", tier=Tier.SMALL)])


class TestParseRecords:
    """Test cases for parsing the gzip JSON-lines stream"""

    def test_parse_gzip_stream(self):
        records = parse_records(_stream(_payload(), _payload(task_id="t2")))
        assert [r.task_id for r in records] == ["t1", "t2"]
        assert records[0].cell == Cell("gpt-5.5", Benchmark.GAIA, Condition.BLIND)
        assert records[0].steps[0].role == Role.USER

    def test_plain_text_stream_accepted(self):
        records = parse_records(_stream(_payload(), compress=False))
        assert len(records) == 1

    def test_blank_lines_skipped(self):
        data = gzip.compress(b"\n" + json.dumps(_payload()).encode() + b"\n\n")
        assert len(parse_records(data)) == 1

    def test_invalid_json_reports_line_number(self):
        data = gzip.compress(json.dumps(_payload()).encode() + b"\n{not json}\n")
        with pytest.raises(RecordParseError) as exc:
            parse_records(data)
        assert exc.value.line_number == 2
        assert "line 2" in str(exc.value)

    def test_invalid_utf8_reports_line_number(self):
        good = json.dumps(_payload()).encode()
        data = gzip.compress(good + b"\n" + json.dumps(_payload(task_id="t2")).encode() + b"\n\xff\xfe{}\n")
        with pytest.raises(RecordParseError) as exc:
            parse_records(data)
        assert exc.value.line_number == 3

    def test_crlf_line_endings(self):
        data = json.dumps(_payload()).encode() + b"\r\n" + json.dumps(_payload(task_id="t2")).encode() + b"\r\n"
        assert [r.task_id for r in parse_records(data)] == ["t1", "t2"]

    def test_missing_field_is_parse_error(self):
        payload = _payload()
        del payload["q"]
        with pytest.raises(RecordParseError):
            parse_records(_stream(payload))

    def test_non_object_line_is_parse_error(self):
        with pytest.raises(RecordParseError):
            parse_records(gzip.compress(b"[1, 2]\n"))

    def test_duplicate_key_raises(self):
        with pytest.raises(DuplicateRecordError) as exc:
            parse_records(_stream(_payload(), _payload(q=0.0)))
        assert exc.value.key == ("gpt-5.5", "gaia", "blind", "t1")

    def test_same_task_in_other_condition_is_not_duplicate(self):
        records = parse_records(_stream(_payload(), _payload(condition="aware_c2")))
        assert len(records) == 2

    def test_unknown_fields_survive_round_trip(self):
        records = parse_records(_stream(_payload(level=2, notes={"a": 1})))
        assert records[0].model_extra["level"] == 2
        again = parse_records(emit_records(records))
        assert again[0].model_extra == {"level": 2, "notes": {"a": 1}}

    def test_corrupt_gzip_is_parse_error(self):
        with pytest.raises(RecordParseError):
            parse_records(b"\x1f\x8b\x08garbage")


class TestEmitRecords:
    """Test cases for the canonical emitter"""

    def setup_method(self):
        """Set up test fixtures"""
        self.records = parse_records(_stream(_payload(), _payload(task_id="t2", q=0.0)))

    def test_emission_is_byte_stable(self):
        assert emit_records(self.records) == emit_records(self.records)

    def test_parse_emit_parse_is_identity(self):
        once = emit_records(self.records)
        assert emit_records(parse_records(once)) == once

    def test_write_and_read(self, tmp_path):
        path = write_records(tmp_path / "out" / "records.jsonl.gz", self.records)
        assert read_records(path) == self.records

    def test_golden_bytes(self):
        calc = {"index": 0, "role": "assistant", "tool_calls": [{"name": "calculator", "args_text": '{"expression": "1+1"}'}]}
        records = parse_records(_stream(_payload(), _payload(task_id="t2", q=0.0, steps=[calc])))
        data = emit_records(records)
        # gzip header: no file name, zero mtime
        assert data[:2] == b"\x1f\x8b"
        assert data[3] == 0
        assert data[4:8] == b"\x00\x00\x00\x00"
        text = gzip.decompress(data)
        assert text.splitlines()[1] == (
            b'{"agent":"gpt-5.5","benchmark":"gaia","condition":"blind","cost_usd":0.12,"latency_s":30.0,'
            b'"q":0.0,"shard":null,"steps":[{"completion_tokens":null,"finish_reason":"","index":0,'
            b'"prompt_tokens":null,"role":"assistant","text":"","tool_calls":[{"args_text":'
            b'"{\\"expression\\": \\"1+1\\"}","name":"calculator"}]}],"task_id":"t2"}'
        )
        assert hashlib.sha256(text).hexdigest() == "5f632260637a71ab2e20059203aed809afcd6f5cf7def0729be6357139680b14"

    def test_lines_have_sorted_keys(self):
        line = gzip.decompress(emit_records(self.records)).decode().splitlines()[0]
        keys = list(json.loads(line))
        assert keys == sorted(keys)


class TestValidateRecord:
    """Test cases for record invariants"""

    def setup_method(self):
        """Set up test fixtures"""
        self.pool = default_pool_registry()

    def test_valid_record_has_no_violations(self):
        r = record(steps=[step(0, Role.USER, "task"), *numerical_steps(1), delegation(2, "kimi-k2.6")])
        assert validate_record(r, self.pool) == []

    def test_quality_out_of_range(self):
        violations = validate_record(record(q=1.5), self.pool)
        assert any("quality out of range" in v.message for v in violations)

    def test_negative_cost_and_latency(self):
        messages = [v.message for v in validate_record(record(cost=-0.1, latency=-1), self.pool)]
        assert any("negative cost" in m for m in messages)
        assert any("negative latency" in m for m in messages)

    def test_unknown_peer(self):
        r = record(steps=[delegation(0, "gpt-4")])
        assert [v.message for v in validate_record(r, self.pool)] == ["unknown peer gpt-4 at step 0"]

    def test_self_delegation(self):
        r = record(steps=[delegation(0, "gpt-5.5")])
        assert [v.message for v in validate_record(r, self.pool)] == ["self-delegation at step 0"]

    def test_delegation_cap(self):
        r = record(steps=[delegation(i, "kimi-k2.6") for i in range(11)])
        messages = [v.message for v in validate_record(r, self.pool)]
        assert "delegation cap exceeded (11 > 10)" in messages

    def test_ten_delegations_allowed(self):
        r = record(steps=[delegation(i, "kimi-k2.6") for i in range(10)])
        assert validate_record(r, self.pool) == []
        assert count_delegation_calls(r) == 10

    def test_step_order(self):
        r = record(steps=[step(1, Role.USER), step(1, Role.ASSISTANT)])
        assert any("strictly increasing" in v.message for v in validate_record(r, self.pool))

    def test_tool_calls_on_user_step(self):
        r = record(steps=[step(0, Role.USER, tools=["calculator"])])
        assert any("non-assistant step 0" in v.message for v in validate_record(r, self.pool))

    def test_tau_bench_shard_prefix(self):
        r = record(task_id="12", benchmark=Benchmark.TAU_BENCH, shard="airline")
        assert any("not prefixed by shard" in v.message for v in validate_record(r, self.pool))

    def test_violation_rendering(self):
        r = record(steps=[delegation(0, "gpt-5.5")])
        text = render_violations(validate_record(r, self.pool))
        assert text == "gpt-5.5/gaia/blind\tt1\tself-delegation at step 0\n"


class TestDelegations:
    """Test cases for delegation extraction"""

    def test_extract_fields(self):
        r = record(steps=[*numerical_steps(0), delegation(1, "kimi-k2.6", "compute total", 0.25)])
        found, problems = extract_delegations(r)
        assert problems == []
        assert len(found) == 1
        d = found[0]
        assert (d.peer, d.subtask, d.budget_usd, d.step_index) == ("kimi-k2.6", "compute total", 0.25, 1)
        assert d.orchestrator == "gpt-5.5"

    def test_malformed_arguments_reported(self):
        r = record(steps=[step(0, tools=[("call_model", "not json")])])
        found, problems = extract_delegations(r)
        assert found == []
        assert problems == ["malformed call_model arguments at step 0"]


class TestGrouping:
    """Test cases for cell grouping"""

    def test_cells_sorted(self):
        records = [
            record(agent="b", condition=Condition.AWARE_C2),
            record(agent="a", condition=Condition.BLIND),
            record(task_id="t2", agent="b", condition=Condition.AWARE_C2),
        ]
        groups = group_by_cell(records)
        assert [str(c) for c in groups] == ["a/gaia/blind", "b/gaia/aware_c2"]
        assert len(groups[Cell("b", Benchmark.GAIA, Condition.AWARE_C2)]) == 2


class TestStratifiedSplit:
    """Test cases for the deterministic Stage-1/Stage-2 split"""

    def setup_method(self):
        """Set up test fixtures: a 133-task GAIA-shaped suite over three levels"""
        sizes = {"1": 53, "2": 62, "3": 18}
        self.stratum_of = {}
        for level, n in sizes.items():
            for i in range(n):
                self.stratum_of[f"gaia/L{level}-{i:03d}"] = f"gaia:{level}"
        self.spec = SplitSpec(fraction=0.2, seed=10, stratum_of=self.stratum_of)

    def test_disjoint_cover(self):
        stage1, stage2 = stratified_split(self.stratum_of.keys(), self.spec)
        assert stage1.isdisjoint(stage2)
        assert stage1 | stage2 == set(self.stratum_of)

    def test_ceil_fraction_per_stratum(self):
        stage1, _ = stratified_split(self.stratum_of.keys(), self.spec)
        for level, n in {"1": 53, "2": 62, "3": 18}.items():
            picked = [t for t in stage1 if self.stratum_of[t] == f"gaia:{level}"]
            assert len(picked) == math.ceil(0.2 * n)
        assert len(stage1) == 11 + 13 + 4

    def test_deterministic_and_order_independent(self):
        ids = list(self.stratum_of)
        first, _ = stratified_split(ids, self.spec)
        second, _ = stratified_split(reversed(ids), self.spec)
        assert first == second

    def test_seed_changes_selection(self):
        first, _ = stratified_split(self.stratum_of, self.spec)
        other, _ = stratified_split(self.stratum_of, self.spec.model_copy(update={"seed": 11}))
        assert first != other

    def test_exact_multiple_does_not_round_up(self):
        spec = SplitSpec(fraction=0.2, seed=10)
        stage1, stage2 = stratified_split([f"t{i}" for i in range(15)], spec)
        assert (len(stage1), len(stage2)) == (3, 12)

    def test_empty_mapping_is_single_stratum(self):
        stage1, _ = stratified_split([f"t{i}" for i in range(7)], SplitSpec())
        assert len(stage1) == 2

    def test_unmapped_id_raises(self):
        with pytest.raises(TaskIdError):
            stratified_split(["unknown"], self.spec)

    def test_empty_input(self):
        assert stratified_split([], SplitSpec()) == (set(), set())

    def test_build_split_spec_uses_shard(self):
        r = record(task_id="airline:1", benchmark=Benchmark.TAU_BENCH, shard="airline")
        spec = build_split_spec([r, record(level=2)])
        assert spec.stratum_of == {"tau_bench/airline:1": "tau_bench:airline", "gaia/t1": "gaia:2"}


if __name__ == "__main__":
    pytest.main([__file__])
