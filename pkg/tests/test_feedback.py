import json
from unittest import mock

import numpy as np
import pytest
import requests

from learnloop.feedback import (
    FeedbackContext,
    FeedbackParseError,
    FeedbackReport,
    ProviderConfig,
    build_prompt,
    fallback_feedback,
    generate_feedback,
    parse_feedback,
    render_report,
)
from learnloop.ingest import QMatrix


@pytest.fixture
def context():
    return FeedbackContext(
        mastery_row=np.array([0.32, 0.85, 0.55, 0.95]),
        knowledge_names=["Fractions", "Decimals", "Ratios", "Percentages"],
        recommended=[1, 3],
        item_texts=[
            "Solve 3/4 + 1/8.",
            "Compare 0.3 and 1/3.",
            "Simplify the ratio 12:18.",
            "A price rises from 40 to 50; find the percentage increase.",
        ],
        q_matrix=QMatrix(rows=[{0}, {0, 1}, {2}, {3}]),
    )


WELL_FORMED = """## Mastery Analysis
- Fractions mastery is low at 0.32.
- Decimals are in good shape.

## Recommendation Evaluation
- Item 1 targets Fractions directly.

## Learning Suggestions
- Revisit fraction addition with unlike denominators.
- Practice converting decimals to fractions.
"""


class TestBuildPrompt:
    def test_mastery_lines_formatted_to_two_decimals(self, context):
        bundle = build_prompt(context)
        assert "Fractions: 0.32" in bundle.rendered
        assert "Percentages: 0.95" in bundle.rendered

    def test_each_knowledge_point_appears_exactly_once(self, context):
        bundle = build_prompt(context)
        for name in context.knowledge_names:
            assert bundle.rendered.count(f"{name}: ") == 1

    def test_zero_recommended_items(self, context):
        context.recommended = []
        bundle = build_prompt(context)
        assert "none were recommended" in bundle.rendered

    def test_recommended_texts_and_knowledge_present(self, context):
        bundle = build_prompt(context)
        assert "Compare 0.3 and 1/3." in bundle.rendered
        assert "(knowledge: Fractions, Decimals)" in bundle.rendered

    def test_oversized_item_texts_truncated_but_mastery_kept(self, context):
        context.item_texts = [t * 400 for t in context.item_texts]
        bundle = build_prompt(context, cap=3000)
        assert len(bundle.rendered) <= 3000
        for name in context.knowledge_names:
            assert f"{name}: " in bundle.rendered

    def test_missing_item_text_rejected(self, context):
        context.item_texts[1] = ""
        with pytest.raises(ValueError, match="item 1"):
            build_prompt(context)


class TestParseFeedback:
    def test_canonical_three_sections(self):
        report = parse_feedback(WELL_FORMED)
        assert report.provider == "llm"
        assert "0.32" in report.mastery_analysis
        assert report.learning_suggestions == [
            "Revisit fraction addition with unlike denominators.",
            "Practice converting decimals to fractions.",
        ]

    def test_out_of_order_sections_fail(self):
        shuffled = WELL_FORMED.replace("Mastery Analysis", "ZZZ").replace(
            "Recommendation Evaluation", "Mastery Analysis").replace(
            "ZZZ", "Recommendation Evaluation")
        with pytest.raises(FeedbackParseError, match="order"):
            parse_feedback(shuffled)

    def test_empty_string_fails(self):
        with pytest.raises(FeedbackParseError):
            parse_feedback("")

    def test_missing_section_fails(self):
        with pytest.raises(FeedbackParseError, match="Learning Suggestions"):
            parse_feedback(WELL_FORMED.split("## Learning")[0])

    def test_empty_section_fails(self):
        text = "## Mastery Analysis\n\n## Recommendation Evaluation\nok\n## Learning Suggestions\n- x"
        with pytest.raises(FeedbackParseError, match="empty"):
            parse_feedback(text)

    def test_case_insensitive_headings(self):
        report = parse_feedback(WELL_FORMED.lower())
        assert report.learning_suggestions

    def test_long_bullets_capped_at_500(self):
        text = ("## Mastery Analysis\nok\n## Recommendation Evaluation\nok\n"
                "## Learning Suggestions\n- " + "x" * 900)
        report = parse_feedback(text)
        assert len(report.learning_suggestions[0]) == 500


class TestFallback:
    def test_weak_point_named_and_coverage_noted(self, context):
        report = fallback_feedback(context)
        assert "Fractions" in report.mastery_analysis
        assert "0.32" in report.mastery_analysis
        assert "item 1" in report.recommendation_evaluation
        assert "Fractions" in report.recommendation_evaluation
        assert report.provider == "fallback"

    def test_all_strong_gives_consolidation(self, context):
        context.mastery_row = np.array([0.92, 0.95, 0.9, 0.99])
        report = fallback_feedback(context)
        assert "No weak knowledge points" in report.mastery_analysis
        assert len(report.learning_suggestions) == 1
        assert "consolidat" in report.learning_suggestions[0].lower()

    def test_deterministic(self, context):
        a, b = fallback_feedback(context), fallback_feedback(context)
        assert a == b

    def test_weakest_three_ascending_with_id_tiebreak(self, context):
        context.mastery_row = np.array([0.5, 0.5, 0.1, 0.4])
        report = fallback_feedback(context)
        pos = [report.mastery_analysis.index(n)
               for n in ("Ratios", "Percentages", "Fractions")]
        assert pos == sorted(pos)
        assert "Decimals (" not in report.mastery_analysis

    def test_round_trip_through_parser(self, context):
        report = fallback_feedback(context)
        reparsed = parse_feedback(render_report(report))
        assert reparsed.mastery_analysis == report.mastery_analysis
        assert reparsed.recommendation_evaluation == report.recommendation_evaluation
        assert reparsed.learning_suggestions == report.learning_suggestions

    def test_references_only_known_evidence(self, context):
        report = fallback_feedback(context)
        text = " ".join([report.mastery_analysis, report.recommendation_evaluation,
                         *report.learning_suggestions])
        mentioned = [w for w in ("Fractions", "Decimals", "Ratios", "Percentages")
                     if w in text]
        assert mentioned  # names come from inputs
        assert "item 0" not in text and "item 2" not in text


def fake_response(status=200, body=None, text=""):
    resp = mock.Mock()
    resp.status_code = status
    resp.json.return_value = body if body is not None else {
        "choices": [{"message": {"content": text}}]}
    if status >= 400:
        resp.raise_for_status.side_effect = requests.HTTPError(f"status {status}")
    else:
        resp.raise_for_status.return_value = None
    return resp


class TestGenerateFeedback:
    def provider(self):
        return ProviderConfig(endpoint="http://llm.invalid/v1/chat/completions",
                              model="test-model")

    def test_well_formed_body_parses_on_first_call(self, context, monkeypatch):
        calls = []

        def post(url, **kwargs):
            calls.append(kwargs)
            return fake_response(text=WELL_FORMED)

        monkeypatch.setattr("learnloop.feedback.requests.post", post)
        bundle = build_prompt(context)
        report = generate_feedback(bundle, self.provider(), context)
        assert report.provider == "llm"
        assert len(calls) == 1
        sent = calls[0]["json"]
        assert sent["messages"][0]["role"] == "system"
        assert sent["messages"][1]["content"] == bundle.dynamic_part
        assert sent["temperature"] == 0.2 and sent["max_tokens"] == 700

    def test_garbage_body_degrades_after_exactly_one_retry(self, context, monkeypatch):
        calls = []

        def post(url, **kwargs):
            calls.append(url)
            return fake_response(text="complete nonsense, no sections")

        monkeypatch.setattr("learnloop.feedback.requests.post", post)
        report = generate_feedback(build_prompt(context), self.provider(), context)
        assert report.provider == "fallback"
        assert len(calls) == 2

    def test_unreachable_endpoint_degrades(self, context, monkeypatch):
        def post(url, **kwargs):
            raise requests.ConnectionError("unreachable")

        monkeypatch.setattr("learnloop.feedback.requests.post", post)
        report = generate_feedback(build_prompt(context), self.provider(), context)
        assert report.provider == "fallback"
        assert report.learning_suggestions

    def test_http_error_degrades(self, context, monkeypatch):
        monkeypatch.setattr("learnloop.feedback.requests.post",
                            lambda url, **kw: fake_response(status=500))
        report = generate_feedback(build_prompt(context), self.provider(), context)
        assert report.provider == "fallback"

    def test_no_endpoint_goes_straight_to_fallback(self, context, monkeypatch):
        def post(url, **kwargs):  # would blow up if ever called
            raise AssertionError("network should not be touched")

        monkeypatch.setattr("learnloop.feedback.requests.post", post)
        report = generate_feedback(build_prompt(context), ProviderConfig(), context)
        assert report.provider == "fallback"

    def test_token_sourced_from_environment(self, context, monkeypatch):
        seen = {}

        def post(url, **kwargs):
            seen.update(kwargs)
            return fake_response(text=WELL_FORMED)

        monkeypatch.setattr("learnloop.feedback.requests.post", post)
        monkeypatch.setenv("EDULOOP_LLM_TOKEN", "sekrit")
        generate_feedback(build_prompt(context), self.provider(), context)
        assert seen["headers"]["Authorization"] == "Bearer sekrit"

    def test_totality_over_random_contexts(self, context, monkeypatch):
        monkeypatch.setattr(
            "learnloop.feedback.requests.post",
            lambda url, **kw: (_ for _ in ()).throw(requests.Timeout("slow")))
        rng = np.random.default_rng(0)
        for _ in range(10):
            context.mastery_row = rng.random(4)
            report = generate_feedback(build_prompt(context), self.provider(),
                                       context)
            assert isinstance(report, FeedbackReport)
            assert report.mastery_analysis
            assert report.recommendation_evaluation
            assert report.learning_suggestions
