"""
Test cases for Stage-1 skill statistics and C2 profile cards
"""

import pytest
import sys
import os

# Add the src directory to the Python path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from src.exceptions import CardBuildError
from src.profiles import (
    CardFrontmatter,
    CardVariant,
    SkillStats,
    build_all_c2_cards,
    build_c2_card,
    card_path,
    compute_skill_stats,
    parse_frontmatter,
    percentile_rank,
    rank_peers,
    render_card,
    stats_for_model,
    write_cards,
)
from src.tagger import SkillId
from src.trace_model import Benchmark, Condition, Role
from tests.builders import make_stats, numerical_steps, record, step

DP = SkillId.DOMAIN_POLICY_COMPLIANCE


def policy_records(agent="gpt-5.5", n=11, passes=9):
    """Tau-bench airline tasks whose only graded step is a confirmation request"""
    records = []
    for i in range(n):
        records.append(record(
            task_id=f"airline:{i}",
            benchmark=Benchmark.TAU_BENCH,
            shard="airline",
            agent=agent,
            q=1.0 if i < passes else 0.0,
            cost=0.121 if i == 0 else 0.05,
            latency=4.0,
            steps=[
                step(0, Role.USER, "Change my seat."),
                step(1, text="Please confirm the change.", completion_tokens=100),
            ],
        ))
    return records


class TestSkillStats:
    """Test cases for per-(model, skill) aggregation"""

    def test_policy_fixture(self):
        stats = compute_skill_stats(policy_records())
        s = stats[("gpt-5.5", DP)]
        assert (s.n_tasks, s.passes) == (11, 9)
        assert s.pass_rate == pytest.approx(9 / 11)
        assert s.cost_per_success == pytest.approx(0.069)
        assert s.cost_per_task == pytest.approx(0.621 / 11)
        assert s.mean_steps == 1.0
        assert s.mean_output_tokens == 100.0
        assert s.mean_latency_s == 4.0
        assert s.percentile_rank == (1, 1)

    def test_pass_threshold_is_inclusive(self):
        records = [
            record("a", q=0.5, steps=numerical_steps()),
            record("b", q=0.49, steps=numerical_steps()),
        ]
        s = compute_skill_stats(records)[("gpt-5.5", SkillId.NUMERICAL_COMPUTATION)]
        assert s.passes == 1
        assert s.cost_per_success == pytest.approx(0.2)

    def test_no_success_has_no_cost_per_success(self):
        s = compute_skill_stats([record(q=0.0, steps=numerical_steps())])[("gpt-5.5", SkillId.NUMERICAL_COMPUTATION)]
        assert s.passes == 0
        assert s.cost_per_success is None

    def test_untagged_tasks_are_skipped(self):
        assert compute_skill_stats([record(steps=[step(0, text="The answer is 4.")])]) == {}

    def test_empty_input(self):
        assert compute_skill_stats([]) == {}

    def test_mixed_conditions_rejected(self):
        records = [record("a"), record("b", condition=Condition.AWARE_C2)]
        with pytest.raises(CardBuildError):
            compute_skill_stats(records)

    def test_stats_for_model(self):
        stats = compute_skill_stats(policy_records() + policy_records(agent="kimi-k2.6", passes=3))
        assert list(stats_for_model("kimi-k2.6", stats)) == [DP]
        assert stats[("kimi-k2.6", DP)].percentile_rank == (2, 2)

    def test_inconsistent_counts_rejected(self):
        with pytest.raises(ValueError):
            SkillStats(model="m", skill=DP, n_tasks=2, passes=3, pass_rate=1.0)


class TestRanking:
    """Test cases for percentile ranks and peer ranking"""

    def setup_method(self):
        self.pool = {
            ("claude-opus-4.7", DP): make_stats("claude-opus-4.7", DP, 10, 8, cost=0.05),
            ("gpt-5.5", DP): make_stats("gpt-5.5", DP, 5, 4, cost=0.04),
            ("kimi-k2.6", DP): make_stats("kimi-k2.6", DP, 10, 5, cost=0.01),
        }

    def test_ties_share_the_smaller_rank(self):
        assert percentile_rank("claude-opus-4.7", DP, self.pool) == (1, 3)
        assert percentile_rank("gpt-5.5", DP, self.pool) == (1, 3)
        assert percentile_rank("kimi-k2.6", DP, self.pool) == (3, 3)

    def test_unexercised_skill_has_no_rank(self):
        assert percentile_rank("gpt-5.5", SkillId.LONG_INPUT_HANDLING, self.pool) is None
        assert percentile_rank("qwen3.6-plus", DP, self.pool) is None

    def test_rank_peers_breaks_ties_on_cost(self):
        # equal pass rates; cost per success 0.05 beats 0.0625
        assert rank_peers(DP, self.pool) == ["gpt-5.5", "claude-opus-4.7", "kimi-k2.6"]

    def test_rank_peers_breaks_remaining_ties_on_name(self):
        pool = {
            ("gpt-5.4", DP): make_stats("gpt-5.4", DP, 4, 2, cost=0.1),
            ("deepseek-v4-pro", DP): make_stats("deepseek-v4-pro", DP, 4, 2, cost=0.1),
        }
        assert rank_peers(DP, pool) == ["deepseek-v4-pro", "gpt-5.4"]

    def test_rank_peers_excludes_orchestrator(self):
        assert rank_peers(DP, self.pool, exclude="claude-opus-4.7") == ["gpt-5.5", "kimi-k2.6"]


class TestCards:
    """Test cases for C2 card assembly and rendering"""

    def setup_method(self):
        self.stats = {
            SkillId.NUMERICAL_COMPUTATION: make_stats("gpt-5.5", SkillId.NUMERICAL_COMPUTATION, 4, 4),
            SkillId.INFORMATION_RETRIEVAL: make_stats("gpt-5.5", SkillId.INFORMATION_RETRIEVAL, 4, 2),
            SkillId.TOOL_SCHEMA_ADHERENCE: make_stats("gpt-5.5", SkillId.TOOL_SCHEMA_ADHERENCE, 4, 2),
            SkillId.MULTI_TURN_STATE_TRACKING: make_stats("gpt-5.5", SkillId.MULTI_TURN_STATE_TRACKING, 4, 0),
        }
        self.pool = {("gpt-5.5", s): v for s, v in self.stats.items()}

    def test_strengths_and_weaknesses_order(self):
        card = build_c2_card("gpt-5.5", self.stats, self.pool, 16, ["bfcl", "gaia"])
        assert [s.skill for s in card.strengths] == [
            SkillId.NUMERICAL_COMPUTATION,
            SkillId.TOOL_SCHEMA_ADHERENCE,
            SkillId.INFORMATION_RETRIEVAL,
        ]
        assert [s.skill for s in card.weaknesses] == [
            SkillId.MULTI_TURN_STATE_TRACKING,
            SkillId.TOOL_SCHEMA_ADHERENCE,
            SkillId.INFORMATION_RETRIEVAL,
        ]

    def test_few_skills_may_overlap(self):
        stats = {k: v for k, v in self.stats.items() if k != SkillId.MULTI_TURN_STATE_TRACKING}
        card = build_c2_card("gpt-5.5", stats, self.pool, 12, ["gaia"])
        assert {s.skill for s in card.strengths} == {s.skill for s in card.weaknesses} == set(stats)

    def test_unexercised_in_taxonomy_order(self):
        card = build_c2_card("gpt-5.5", self.stats, self.pool, 16, ["gaia"])
        assert card.unexercised == [
            SkillId.DOMAIN_POLICY_COMPLIANCE,
            SkillId.MULTI_STEP_REASONING,
            SkillId.LONG_INPUT_HANDLING,
        ]

    def test_all_skills_sorted_by_display_name(self):
        card = build_c2_card("gpt-5.5", self.stats, self.pool, 16, ["gaia"])
        assert [s.skill.value for s in card.all_skills] == [
            "information_retrieval",
            "multi_turn_state_tracking",
            "numerical_computation",
            "tool_schema_adherence",
        ]

    def test_no_tasks_rejected(self):
        with pytest.raises(CardBuildError):
            build_c2_card("gpt-5.5", self.stats, self.pool, 0, ["gaia"])

    def test_no_exercised_skill_rejected(self):
        with pytest.raises(CardBuildError):
            build_c2_card("gpt-5.5", {}, {}, 5, ["gaia"])

    def test_render_exact(self):
        stats = compute_skill_stats(policy_records())
        card = build_c2_card("gpt-5.5", stats_for_model("gpt-5.5", stats), stats, 11, ["tau_bench"])
        line = "- domain-policy-compliance (rank 1/1): 9/11=82% ($0.069/success)"
        expected = "\n".join([
            "---",
            "model: gpt-5.5",
            "variant: c2_static",
            "tagger: v2.0-2026-05-01",
            "n_tasks: 11",
            "benchmarks: [tau_bench]",
            "---",
            "# gpt-5.5 - derived skill profile (C2)",
            "",
            "Generated automatically from 11 Stage-1 tasks across 1 benchmarks "
            "via the rule-based tagger v2.0-2026-05-01. No LLM judgment.",
            "",
            "## Strengths",
            line,
            "",
            "## Weaknesses",
            line,
            "",
            "## All measured skills",
            "| Skill | pass | n | avg steps | avg out-tok | $/task |",
            "|---|---:|---:|---:|---:|---:|",
            "| domain-policy-compliance | 82% | 11 | 1.0 | 100 | 0.056 |",
            "",
            "## Skills not exercised in Stage 1",
            "- tool_schema_adherence",
            "- multi_turn_state_tracking",
            "- information_retrieval",
            "- multi_step_reasoning",
            "- numerical_computation",
            "- long_input_handling",
            "",
            "Recommended delegation patterns: none. C2 is metric-only; orchestrators combine "
            "per-skill rates with the cost and latency tier in the registry.",
            "",
        ])
        assert render_card(card) == expected

    def test_percentages_have_no_decimals(self):
        stats = {DP: make_stats("gpt-5.5", DP, 22, 12)}
        card = build_c2_card("gpt-5.5", stats, {("gpt-5.5", DP): stats[DP]}, 22, ["tau_bench"])
        assert "12/22=55%" in render_card(card)

    def test_render_is_byte_stable(self):
        a = build_c2_card("gpt-5.5", self.stats, self.pool, 16, ["gaia", "bfcl"])
        b = build_c2_card("gpt-5.5", dict(reversed(list(self.stats.items()))), self.pool, 16, ["bfcl", "gaia", "gaia"])
        assert render_card(a) == render_card(b)

    def test_frontmatter_round_trip(self):
        card = build_c2_card("gpt-5.5", self.stats, self.pool, 16, ["gaia", "bfcl"])
        fm = parse_frontmatter(render_card(card))
        assert fm == card.frontmatter
        assert fm.benchmarks == ["bfcl", "gaia"]

    def test_awkward_model_names_are_quoted(self):
        stats = {DP: make_stats("lab: model #2", DP, 2, 1)}
        card = build_c2_card("lab: model #2", stats, {("lab: model #2", DP): stats[DP]}, 2, ["tau_bench"])
        text = render_card(card)
        assert 'model: "lab: model #2"' in text
        assert parse_frontmatter(text).model == "lab: model #2"


class TestFrontmatter:
    """Test cases for frontmatter validation across card variants"""

    def test_missing_block(self):
        with pytest.raises(CardBuildError):
            parse_frontmatter("# no frontmatter\n")

    def test_unterminated_block(self):
        with pytest.raises(CardBuildError):
            parse_frontmatter("---\nmodel: x\n")

    def test_c2_requires_tagger(self):
        with pytest.raises(CardBuildError):
            parse_frontmatter("---\nmodel: gpt-5.5\nvariant: c2_static\n---\n")

    def test_hand_written_variants_need_no_tagger(self):
        fm = parse_frontmatter("---\nmodel: gpt-5.5\nvariant: c1_human\nauthor: lab\n---\n# card\n")
        assert fm.variant == CardVariant.C1_HUMAN
        assert fm.tagger is None
        assert fm.model_extra == {"author": "lab"}

    def test_unknown_variant_rejected(self):
        with pytest.raises(CardBuildError):
            parse_frontmatter("---\nmodel: gpt-5.5\nvariant: c9\n---\n")


class TestCardFiles:
    """Test cases for building and writing the whole card set"""

    def test_one_card_per_model(self, tmp_path):
        stage1 = policy_records() + policy_records(agent="kimi-k2.6", passes=3)
        cards = build_all_c2_cards(stage1)
        assert [c.frontmatter.model for c in cards] == ["gpt-5.5", "kimi-k2.6"]

        paths = write_cards(cards, tmp_path)
        assert paths == [card_path(tmp_path, "gpt-5.5"), card_path(tmp_path, "kimi-k2.6")]
        assert paths[0] == tmp_path / "profile_cards" / "c2_static" / "gpt-5.5.md"
        assert "rank 2/2" in paths[1].read_text(encoding="utf-8")

    def test_cards_carry_the_run_hash(self, tmp_path):
        cards = build_all_c2_cards(policy_records())
        [path] = write_cards(cards, tmp_path, manifest_hash="1234567890")
        text = path.read_text(encoding="utf-8")
        assert 'manifest: "1234567890"\n' in text
        assert parse_frontmatter(text).manifest == "1234567890"
        assert "manifest:" not in render_card(cards[0])

    def test_models_without_skills_get_no_card(self):
        stage1 = policy_records() + [record("x", agent="kimi-k2.6", steps=[step(0, text="4")])]
        assert [c.frontmatter.model for c in build_all_c2_cards(stage1)] == ["gpt-5.5"]

    def test_frontmatter_model(self):
        fm = CardFrontmatter(model="gpt-5.5", variant=CardVariant.C2_STATIC, tagger="v1")
        assert fm.benchmarks == []


if __name__ == "__main__":
    pytest.main([__file__])
