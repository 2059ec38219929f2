"""
Test cases for the frozen step tagger and the emergent-taxonomy audit
"""

import pytest
import sys
import os

# Add the src directory to the Python path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from pydantic import ValidationError

from src.exceptions import TaggerConfigError
from src.tagger import (
    DEFAULT_TAGGER_CONFIG,
    INFRA_TAG,
    NO_TAG,
    AuditConfig,
    SkillId,
    StepTag,
    TagContext,
    TaggerConfig,
    audit_cluster,
    count_numeric_tokens,
    dominant_skill,
    jaccard,
    map_label_to_skill,
    DEFAULT_AUDIT_KEYWORDS,
    match_policy_phrase,
    prefix_before,
    record_dominant_skill,
    tag_step,
    tag_trajectory,
)
from src.trace_model import Benchmark, Role
from tests.builders import delegation, record, step

GAIA, TAU, BFCL = Benchmark.GAIA, Benchmark.TAU_BENCH, Benchmark.BFCL
CONFIG_PATH = os.path.join(os.path.dirname(__file__), '..', 'config', 'tagger.yaml')

TS = SkillId.TOOL_SCHEMA_ADHERENCE.value
MT = SkillId.MULTI_TURN_STATE_TRACKING.value
DP = SkillId.DOMAIN_POLICY_COMPLIANCE.value
IR = SkillId.INFORMATION_RETRIEVAL.value
MS = SkillId.MULTI_STEP_REASONING.value
NC = SkillId.NUMERICAL_COMPUTATION.value
LI = SkillId.LONG_INPUT_HANDLING.value
INFRA = "_infra_delegation"
NONE = "none"

# (description, step, benchmark, prior graded tool calls, expected label)
GOLDEN_STEPS = [
    # infra-only tool calls
    ("call_model only", step(0, tools=["call_model"]), GAIA, 0, INFRA),
    ("read_profile then call_model", step(0, tools=["read_profile", "call_model"]), TAU, 0, INFRA),
    ("infra plus graded call", step(0, tools=["call_model", "web_search"]), GAIA, 0, IR),
    # numerical tools
    ("calculator", step(0, tools=["calculator"]), GAIA, 0, NC),
    ("tool name case-insensitive", step(0, tools=["Python_Eval"]), BFCL, 0, NC),
    ("three numeric tokens in args", step(0, tools=[("book_flight", '{"date": "2024-05-01", "time": "14:30", "price": "$120.50"}')]), TAU, 0, NC),
    ("numerical beats retrieval", step(0, tools=["web_search", "calculator"]), GAIA, 0, NC),
    # retrieval tools
    ("web search", step(0, tools=["web_search"]), GAIA, 0, IR),
    ("user lookup", step(0, tools=["get_user_details"]), TAU, 0, IR),
    ("flight search", step(0, tools=["search_direct_flight"]), TAU, 0, IR),
    ("pdf parsing", step(0, tools=["parse_pdf"]), GAIA, 0, IR),
    ("retrieval case-insensitive", step(0, tools=["Fetch_URL"]), BFCL, 0, IR),
    # any other tool call
    ("two numeric tokens only", step(0, tools=[("update_seat", '{"flight": "HAT170", "seat": 12}')]), TAU, 0, TS),
    ("plain function call", step(0, tools=["create_ticket"]), BFCL, 0, TS),
    # domain policy, one step per refusal / confirmation pattern
    ("against policy", step(0, text="Sorry, that is against our policy."), TAU, 0, DP),
    ("not permitted", step(0, text="Changing basic economy is not permitted."), TAU, 0, DP),
    ("cannot ... policy", step(0, text="I cannot refund this ticket under the airline policy."), TAU, 0, DP),
    ("transfer to human", step(0, text="Let me transfer you to a human agent."), TAU, 0, DP),
    ("outside scope", step(0, text="That request is outside my scope."), TAU, 0, DP),
    ("please confirm", step(0, text="Please confirm the new shipping address."), TAU, 0, DP),
    ("need confirmation", step(0, text="I will need your confirmation before booking."), TAU, 0, DP),
    ("policy beats long input", step(0, text="Please confirm.", prompt_tokens=20000), TAU, 0, DP),
    ("policy phrase outside tau_bench", step(0, text="Please confirm the call."), BFCL, 0, MT),
    # long input
    ("long prompt", step(0, text="Summary follows.", prompt_tokens=15000), TAU, 0, LI),
    ("length fallback", step(0, text="x" * 60000), GAIA, 0, LI),
    ("just under threshold", step(0, text="Done.", prompt_tokens=14999), TAU, 0, MT),
    # multi-step reasoning on GAIA
    ("gaia after two tool calls", step(0, text="Combining results."), GAIA, 2, MS),
    ("gaia after one tool call", step(0, text="Combining results."), GAIA, 1, NONE),
    ("gaia policy phrase ignored", step(0, text="Please confirm."), GAIA, 3, MS),
    # multi-turn state on tau_bench / BFCL
    ("tau text", step(0, text="Noted, updating the order."), TAU, 0, MT),
    ("bfcl text", step(0, text="Continuing with the request."), BFCL, 0, MT),
    # non-assistant steps
    ("user turn", step(0, Role.USER, text="Please confirm my booking."), TAU, 0, NONE),
    ("tool result", step(0, Role.TOOL_RESULT, text="42"), GAIA, 5, NONE),
]


class TestGoldenSteps:
    """Hand-constructed steps covering every tagging rule and policy pattern"""

    @pytest.mark.parametrize(
        "description,golden_step,benchmark,prior,expected",
        GOLDEN_STEPS,
        ids=[g[0] for g in GOLDEN_STEPS],
    )
    def test_golden_step(self, description, golden_step, benchmark, prior, expected):
        tag = tag_step(golden_step, TagContext(benchmark, prior))
        assert tag.label == expected

    def test_golden_suite_size(self):
        assert len(GOLDEN_STEPS) >= 25


class TestPatterns:
    """Test cases for the numeric and policy pattern helpers"""

    def test_numeric_token_classes(self):
        assert count_numeric_tokens("2024-05-01T10:30:00") == 1
        assert count_numeric_tokens("$1,234.56") == 1
        assert count_numeric_tokens("at 09:15") == 1
        assert count_numeric_tokens("3.14 and 42") == 2
        assert count_numeric_tokens("") == 0
        assert count_numeric_tokens("no digits") == 0

    def test_policy_match_is_case_insensitive(self):
        assert match_policy_phrase("PLEASE CONFIRM")
        assert not match_policy_phrase("Confirmed, thank you.")
        assert not match_policy_phrase("")

    def test_policy_gap_stays_on_one_line(self):
        assert match_policy_phrase("I cannot do that, it is our policy.")
        assert not match_policy_phrase("I cannot\n\ndo that, it is our policy.")
        assert not match_policy_phrase("I will transfer\nyou to a human agent")


class TestTrajectory:
    """Test cases for trajectory tagging and dominant skill"""

    def test_prior_count_carries_forward(self):
        steps = [step(0, tools=["web_search"]), step(1, tools=["fetch_url"]), step(2, text="Therefore the answer is B.")]
        assert [t.label for t in tag_trajectory(steps, GAIA)] == [IR, IR, MS]

    def test_prior_count_is_per_call(self):
        steps = [step(0, tools=["web_search", "fetch_url"]), step(1, text="So.")]
        assert tag_trajectory(steps, GAIA)[1] == StepTag.of(SkillId.MULTI_STEP_REASONING)

    def test_infra_calls_do_not_count(self):
        steps = [step(0, tools=["call_model"]), step(1, tools=["read_profile"]), step(2, text="So.")]
        assert tag_trajectory(steps, GAIA) == [INFRA_TAG, INFRA_TAG, NO_TAG]

    def test_dominant_skill_is_modal(self):
        steps = [step(0, tools=["web_search"]), step(1, tools=["calculator"]), step(2, tools=["calculator"])]
        assert dominant_skill(steps, GAIA) == SkillId.NUMERICAL_COMPUTATION

    def test_dominant_tie_goes_to_taxonomy_order(self):
        steps = [step(0, tools=["calculator"]), step(1, tools=["create_ticket"])]
        assert dominant_skill(steps, BFCL) == SkillId.TOOL_SCHEMA_ADHERENCE

    def test_infra_steps_never_dominate(self):
        steps = [delegation(0, "kimi-k2.6"), delegation(1, "kimi-k2.6"), step(2, tools=["web_search"])]
        assert dominant_skill(steps, GAIA) == SkillId.INFORMATION_RETRIEVAL

    def test_no_skill_gives_none(self):
        assert dominant_skill([], GAIA) is None
        assert dominant_skill([step(0, Role.USER, "hi"), delegation(1, "kimi-k2.6")], GAIA) is None

    def test_prefix_before_delegation(self):
        r = record(steps=[step(0, tools=["calculator"]), delegation(1, "kimi-k2.6"), step(2, tools=["web_search"])])
        assert [s.index for s in prefix_before(r, 1)] == [0]
        assert dominant_skill(prefix_before(r, 1), r.benchmark) == SkillId.NUMERICAL_COMPUTATION
        # numerical and retrieval tie over the full trajectory
        assert record_dominant_skill(r) == SkillId.INFORMATION_RETRIEVAL


class TestTaggerConfig:
    """Test cases for the version-pinned tagger configuration"""

    def test_shipped_yaml_matches_defaults(self):
        assert TaggerConfig.from_yaml(CONFIG_PATH) == DEFAULT_TAGGER_CONFIG

    def test_yaml_round_trip(self, tmp_path):
        path = tmp_path / "tagger.yaml"
        path.write_text(DEFAULT_TAGGER_CONFIG.to_yaml(), encoding="utf-8")
        assert TaggerConfig.from_yaml(path) == DEFAULT_TAGGER_CONFIG

    def test_invalid_regex_rejected(self):
        with pytest.raises(ValidationError):
            TaggerConfig(policy_patterns=["(unclosed"])

    def test_unreadable_file_raises(self, tmp_path):
        with pytest.raises(TaggerConfigError):
            TaggerConfig.from_yaml(tmp_path / "missing.yaml")

    def test_bad_yaml_values_raise(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("long_input_threshold: -5\n", encoding="utf-8")
        with pytest.raises(TaggerConfigError):
            TaggerConfig.from_yaml(path)

    def test_threshold_is_configurable(self):
        cfg = TaggerConfig(long_input_threshold=100)
        assert tag_step(step(0, text="Ok.", prompt_tokens=150), TagContext(TAU, 0), cfg).label == LI


class TestAudit:
    """Test cases for the emergent-taxonomy audit clustering"""

    def test_jaccard(self):
        assert jaccard(frozenset({"web", "search"}), frozenset({"searching", "the", "web"})) == 0.25
        assert jaccard(frozenset(), frozenset()) == 1.0

    def test_threshold_splits_dissimilar_labels(self):
        result = audit_cluster(["web search", "searching the web", "web search tool"])
        assert result.cluster_of == [0, 1, 0]
        assert result.clusters == [["web search", "web search tool"], ["searching the web"]]

    def test_single_link_chains(self):
        result = audit_cluster(["a b c", "b c d", "c d e"])
        assert result.cluster_of == [0, 0, 0]

    def test_labels_truncated_to_max_words(self):
        labels = ["alpha beta gamma delta epsilon zeta", "alpha beta gamma delta epsilon eta"]
        assert audit_cluster(labels, AuditConfig(max_label_words=5)).cluster_of == [0, 0]
        assert audit_cluster(labels, AuditConfig(max_label_words=6)).cluster_of == [0, 0]
        assert audit_cluster(labels, AuditConfig(jaccard_threshold=0.9, max_label_words=6)).cluster_of == [0, 1]

    def test_keyword_mapping_and_coverage(self):
        result = audit_cluster(["web search", "policy refusal", "image understanding", "arithmetic"])
        assert result.skills == [
            SkillId.INFORMATION_RETRIEVAL,
            SkillId.DOMAIN_POLICY_COMPLIANCE,
            None,
            SkillId.NUMERICAL_COMPUTATION,
        ]
        assert result.coverage == 0.75

    def test_mapping_uses_taxonomy_order(self):
        # "tool call" and "search" both match; tool-schema comes first
        assert map_label_to_skill("search tool call", DEFAULT_AUDIT_KEYWORDS) == SkillId.TOOL_SCHEMA_ADHERENCE

    def test_empty_labels(self):
        result = audit_cluster([])
        assert result.clusters == [] and result.coverage == 0.0


if __name__ == "__main__":
    pytest.main([__file__])
