"""Parsers for the tagged blocks the agents are instructed to emit."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

from ..corpus import (
    RESERVED_TAGS,
    DialoguePlan,
    Utterance,
    parse_dialogue_block,
    plan_from_json,
)
from ..errors import AgentOutputError, DialogueParseError, PlanParseError, StyleParseError

_FENCE = re.compile(r"^```[a-zA-Z]*\s*|\s*```$")


def extract_block(text: str, tag: str, error: type[AgentOutputError] = AgentOutputError) -> str:
    """Return the content of the first ``<tag>...</tag>`` block."""
    open_t, close_t = f"<{tag}>", f"</{tag}>"
    start = text.find(open_t)
    if start < 0:
        stray = text.find(close_t)
        raise error(f"missing {open_t}", text, stray if stray >= 0 else 0)
    body_start = start + len(open_t)
    end = text.find(close_t, body_start)
    if end < 0:
        raise error(f"{open_t} is never closed", text, start)
    reopened = text.find(open_t, body_start)
    if 0 <= reopened < end:
        raise error(f"nested {open_t}", text, reopened)
    return text[body_start:end]


def _strip_fences(s: str) -> str:
    return _FENCE.sub("", s.strip()).strip()


def parse_plan_response(text: str) -> DialoguePlan:
    body = _strip_fences(extract_block(text, "plan", PlanParseError))
    try:
        items = json.loads(body)
    except json.JSONDecodeError as exc:
        raise PlanParseError(f"plan block is not valid JSON ({exc.msg})", text, text.find("<plan>") + 6 + exc.pos) from exc
    if not isinstance(items, list):
        raise PlanParseError("plan block must be a JSON array of steps", text)
    try:
        plan = plan_from_json(items)
    except ValueError as exc:
        raise PlanParseError(str(exc), text) from exc
    if not plan.steps:
        raise PlanParseError("plan has no steps", text)
    return plan


def parse_dialogue_response(text: str) -> tuple[list[Utterance], list[DialogueParseError]]:
    """Utterances plus per-line errors; a missing block raises :class:`AgentOutputError`."""
    return parse_dialogue_block(_strip_fences(extract_block(text, "dialogue")))


@dataclass(frozen=True)
class StyleReport:
    approved: bool
    critiques: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.approved and not self.critiques:
            raise ValueError("an unapproved style report needs at least one critique")

    def to_json(self) -> dict:
        return {"approved": self.approved, "critiques": list(self.critiques)}


_NUMBERED = re.compile(r"^(?:\d+[.)]|[-*•])\s+")


def _critique_items(body: str) -> list[str]:
    stripped = body.strip()
    if stripped.startswith("["):
        try:
            items = json.loads(stripped)
        except json.JSONDecodeError:
            items = None
        if isinstance(items, list) and all(isinstance(i, str) for i in items):
            return [i.strip() for i in items if i.strip()]
    out = []
    for line in stripped.splitlines():
        line = line.strip()
        if not line or line == "...":
            continue
        out.append(_NUMBERED.sub("", line, count=1))
    return [c for c in out if c]


def parse_style_response(text: str) -> StyleReport:
    approved_raw = extract_block(text, "approved", StyleParseError)
    token = approved_raw.strip().lower()
    if token not in ("true", "false"):
        raise StyleParseError(f"<approved> must hold true or false, got {approved_raw.strip()!r}", text, text.find("<approved>"))
    body = extract_block(text, "critique", StyleParseError)
    for tag in RESERVED_TAGS:
        if tag in body:
            raise StyleParseError(f"reserved tag {tag} inside <critique>", text, text.find(tag, text.find("<critique>") + 1))
    critiques = tuple(_critique_items(body))
    approved = token == "true"
    if not approved and not critiques:
        raise StyleParseError("unapproved dialogue without any critique", text, text.find("<critique>"))
    return StyleReport(approved, critiques)


def render_style_response(report: StyleReport) -> str:
    lines = [f"<approved>{'true' if report.approved else 'false'}</approved>", "<critique>"]
    lines += [f"{i}. {c}" for i, c in enumerate(report.critiques, 1)]
    lines.append("</critique>")
    return "\n".join(lines)
