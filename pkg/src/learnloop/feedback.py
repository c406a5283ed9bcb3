"""Evidence-grounded feedback: prompt assembly, a chat-completion HTTP
provider, a strict three-section parser, and a deterministic offline
fallback so the loop always produces a report.

Feedback is presentation-only: nothing returned here ever feeds back into
mastery values or selection state.
"""

from __future__ import annotations

import logging
import os
import re
import threading
from dataclasses import dataclass, field

import numpy as np
import requests

from .ingest import QMatrix

logger = logging.getLogger(__name__)

SECTION_HEADINGS = (
    "Mastery Analysis",
    "Recommendation Evaluation",
    "Learning Suggestions",
)
MAX_BULLET_CHARS = 500
WEAK_MASTERY_THRESHOLD = 0.6
_OMITTED = "[item text omitted to fit the prompt budget]"


class FeedbackParseError(ValueError):
    """Provider output does not contain the three required sections."""


@dataclass
class ProviderConfig:
    endpoint: str = ""
    model: str = ""
    token_env: str = "EDULOOP_LLM_TOKEN"
    timeout: float = 20.0
    temperature: float = 0.2
    max_tokens: int = 700
    max_concurrency: int = 2

    def __post_init__(self):
        self._gate = threading.BoundedSemaphore(max(1, self.max_concurrency))

    def to_dict(self) -> dict:
        return {
            "endpoint": self.endpoint,
            "model": self.model,
            "token_env": self.token_env,
            "timeout": self.timeout,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "max_concurrency": self.max_concurrency,
        }


@dataclass
class PromptBundle:
    fixed_part: str
    dynamic_part: str
    rendered: str


@dataclass
class FeedbackReport:
    mastery_analysis: str
    recommendation_evaluation: str
    learning_suggestions: list[str]
    provider: str  # "llm" | "fallback"
    raw_response: str

    def sections(self) -> dict:
        return {
            "mastery_analysis": self.mastery_analysis,
            "recommendation_evaluation": self.recommendation_evaluation,
            "learning_suggestions": list(self.learning_suggestions),
        }


@dataclass
class FeedbackContext:
    """The diagnostic evidence a report is built from."""

    mastery_row: np.ndarray            # per-knowledge mastery in [0,1]
    knowledge_names: list[str]
    recommended: list[int]             # dense item ids, most relevant first
    item_texts: list[str]
    q_matrix: QMatrix


FIXED_PROMPT = """You are an educational assessment expert and teaching assistant.

Your tasks:
1. Analyze the student's mastery of each knowledge point listed below.
2. Evaluate how well the recommended items target the student's weaknesses.
3. Provide personalized learning suggestions the student can act on.

Output rules:
- Respond with exactly three sections, in this order, using these literal headings:
## Mastery Analysis
## Recommendation Evaluation
## Learning Suggestions
- Use short bullet points ("- ") under each heading.
- Keep every bullet under 500 characters.
- Refer only to the knowledge points and items listed below; do not invent evidence."""


def _item_block(context: FeedbackContext, item: int, text: str) -> str:
    names = ", ".join(
        context.knowledge_names[k] for k in sorted(context.q_matrix.rows[item])
    )
    return f"- Item {item}: {text} (knowledge: {names})"


def build_prompt(context: FeedbackContext, cap: int = 8000) -> PromptBundle:
    """Assemble the fixed instructions and the evidence block.

    Every knowledge point appears exactly once as "Name: value" with two
    decimals. When the rendered prompt would exceed the cap, the texts of
    the least relevant recommended items are omitted first; mastery lines
    are never dropped.
    """
    for item in context.recommended:
        if not context.item_texts[item]:
            raise ValueError(f"missing text for item {item}")

    mastery_lines = [
        f"{name}: {float(value):.2f}"
        for name, value in zip(context.knowledge_names, context.mastery_row)
    ]

    def render_dynamic(texts: list[str], keep: int) -> str:
        parts = ["Student mastery by knowledge point:", *mastery_lines, ""]
        if not context.recommended:
            parts.append("Recommended items: none were recommended this session.")
        else:
            parts.append("Recommended items (most relevant first):")
            for idx, item in enumerate(context.recommended[:keep]):
                parts.append(_item_block(context, item, texts[idx]))
        return "\n".join(parts)

    texts = [context.item_texts[item] for item in context.recommended]
    keep = len(context.recommended)
    dynamic = render_dynamic(texts, keep)
    rendered = FIXED_PROMPT + "\n\n" + dynamic

    # omit item texts from the tail, then whole item lines, until it fits
    for cut in range(len(texts), 0, -1):
        if len(rendered) <= cap:
            break
        texts[cut - 1] = _OMITTED
        dynamic = render_dynamic(texts, keep)
        rendered = FIXED_PROMPT + "\n\n" + dynamic
    while len(rendered) > cap and keep > 0:
        keep -= 1
        dynamic = render_dynamic(texts, keep)
        rendered = FIXED_PROMPT + "\n\n" + dynamic

    return PromptBundle(fixed_part=FIXED_PROMPT, dynamic_part=dynamic,
                        rendered=rendered)


_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[\.\)])\s+(.*)$")


def _heading_pattern(heading: str) -> re.Pattern:
    return re.compile(
        r"^[ \t]*(?:#+\s*|\d+[\.\)]\s*|\*+\s*)?" + re.escape(heading) + r"\b.*$",
        re.IGNORECASE | re.MULTILINE,
    )


def parse_feedback(text: str) -> FeedbackReport:
    """Extract the three required sections, enforcing presence and order.

    Suggestions are split on leading bullet markers (plain non-empty lines
    count as bullets when no markers are used); every bullet is capped at
    500 characters.
    """
    if not text or not text.strip():
        raise FeedbackParseError("empty feedback body")
    matches = []
    for heading in SECTION_HEADINGS:
        m = _heading_pattern(heading).search(text)
        if m is None:
            raise FeedbackParseError(f"missing section heading {heading!r}")
        matches.append(m)
    positions = [m.start() for m in matches]
    if positions != sorted(positions):
        raise FeedbackParseError("section headings are out of order")

    bodies = []
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        body = text[m.end():end].strip()
        if not body:
            raise FeedbackParseError(
                f"section {SECTION_HEADINGS[i]!r} is empty")
        bodies.append(body)

    bullets = []
    for line in bodies[2].splitlines():
        if not line.strip():
            continue
        m = _BULLET.match(line)
        bullets.append((m.group(1) if m else line.strip())[:MAX_BULLET_CHARS])
    if not bullets:
        raise FeedbackParseError("no learning suggestions found")

    return FeedbackReport(
        mastery_analysis=bodies[0],
        recommendation_evaluation=bodies[1],
        learning_suggestions=bullets,
        provider="llm",
        raw_response=text,
    )


def render_report(report: FeedbackReport) -> str:
    """Serialize a report back into the three-section marker format; the
    result re-parses to an equal report."""
    lines = [f"## {SECTION_HEADINGS[0]}", report.mastery_analysis, "",
             f"## {SECTION_HEADINGS[1]}", report.recommendation_evaluation, "",
             f"## {SECTION_HEADINGS[2]}"]
    lines.extend(f"- {s}" for s in report.learning_suggestions)
    return "\n".join(lines)


def _weak_points(context: FeedbackContext) -> list[int]:
    order = sorted(range(len(context.knowledge_names)),
                   key=lambda k: (float(context.mastery_row[k]), k))
    return [k for k in order if context.mastery_row[k] < WEAK_MASTERY_THRESHOLD][:3]


def fallback_feedback(context: FeedbackContext) -> FeedbackReport:
    """Deterministic rule-based report built purely from the evidence:
    weakest knowledge points, which of them the recommended items cover,
    and one suggestion per weak point."""
    weak = _weak_points(context)
    names = context.knowledge_names

    if weak:
        listed = "; ".join(f"{names[k]} ({float(context.mastery_row[k]):.2f})"
                           for k in weak)
        analysis = (f"The weakest knowledge points are: {listed}. "
                    f"Mastery below {WEAK_MASTERY_THRESHOLD:.2f} indicates these "
                    "need focused practice.")
    else:
        analysis = (f"No weak knowledge points were identified: mastery is at "
                    f"or above {WEAK_MASTERY_THRESHOLD:.2f} across the board.")

    if not context.recommended:
        evaluation = "No items were recommended in this session."
    else:
        covered_parts = []
        weak_set = set(weak)
        for item in context.recommended:
            hits = sorted(context.q_matrix.rows[item] & weak_set)
            if hits:
                covered_parts.append(
                    f"item {item} targets {', '.join(names[k] for k in hits)}")
        if covered_parts:
            evaluation = ("The recommended items address the identified weak "
                          f"points: {'; '.join(covered_parts)}.")
        elif weak:
            evaluation = ("The recommended items do not directly cover the "
                          "identified weak points; treat them as consolidation "
                          "practice.")
        else:
            evaluation = ("The recommended items provide consolidation practice "
                          "across already-mastered knowledge points.")

    if weak:
        suggestions = [
            (f"Review {names[k]}: current mastery {float(context.mastery_row[k]):.2f}. "
             "Work through practice items covering this knowledge point and revisit "
             "the underlying concept before moving on.")[:MAX_BULLET_CHARS]
            for k in weak
        ]
    else:
        suggestions = ["Keep consolidating: attempt harder mixed-topic items to "
                       "maintain mastery across all knowledge points."]

    report = FeedbackReport(
        mastery_analysis=analysis,
        recommendation_evaluation=evaluation,
        learning_suggestions=suggestions,
        provider="fallback",
        raw_response="",
    )
    report.raw_response = render_report(report)
    return report


def _call_provider(bundle: PromptBundle, config: ProviderConfig) -> str:
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(config.token_env, "")
    if token:
        headers["Authorization"] = f"Bearer {token}"
    payload = {
        "model": config.model,
        "messages": [
            {"role": "system", "content": bundle.fixed_part},
            {"role": "user", "content": bundle.dynamic_part},
        ],
        "temperature": config.temperature,
        "max_tokens": config.max_tokens,
    }
    with config._gate:
        response = requests.post(config.endpoint, json=payload, headers=headers,
                                 timeout=config.timeout)
    response.raise_for_status()
    body = response.json()
    choice = body["choices"][0]
    if "message" in choice:
        return choice["message"]["content"]
    return choice["text"]


def generate_feedback(bundle: PromptBundle, config: ProviderConfig,
                      context: FeedbackContext) -> FeedbackReport:
    """Send the prompt to the chat-completion endpoint and parse the reply;
    after one retry, any transport or parse failure degrades to the
    deterministic fallback. Always returns a well-formed report."""
    if config.endpoint:
        for attempt in (1, 2):
            try:
                text = _call_provider(bundle, config)
                return parse_feedback(text)
            except (requests.RequestException, FeedbackParseError,
                    KeyError, IndexError, ValueError) as exc:
                logger.warning("feedback provider attempt %d failed: %s",
                               attempt, exc)
    else:
        logger.info("no feedback endpoint configured; using fallback")
    return fallback_feedback(context)


def report_document(report: FeedbackReport, student_id: str,
                    recommended_raw: list[str], created_at: str) -> dict:
    """The on-disk feedback_report.json schema."""
    return {
        "student_id": student_id,
        "provider": report.provider,
        "sections": report.sections(),
        "recommended_items": list(recommended_raw),
        "created_at": created_at,
    }
