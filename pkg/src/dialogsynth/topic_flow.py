"""Topic-sequence validation against a :class:`TopicOntology`."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .corpus import norm_label
from .ontology import TopicOntology

TRANSITION_ERROR = "transition_error"
HALLUCINATED_TOPIC = "hallucinated_topic"
UNKNOWN_INTENT = "unknown_micro_intent"


@dataclass(frozen=True)
class FlowViolation:
    index: int
    kind: str
    to_topic: str
    from_topic: str | None = None
    detail: str = ""

    def describe(self) -> str:
        if self.kind == HALLUCINATED_TOPIC:
            return f"position {self.index}: topic {self.to_topic!r} is not in the topic flow"
        if self.kind == UNKNOWN_INTENT:
            return f"position {self.index}: {self.detail}"
        msg = f"position {self.index - 1}->{self.index}: transition {self.from_topic!r} -> {self.to_topic!r} is not allowed"
        return f"{msg} ({self.detail})" if self.detail else msg

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "kind": self.kind,
            "from_topic": self.from_topic,
            "to_topic": self.to_topic,
            "detail": self.detail,
        }


def validate_flow(
    topics: Sequence[str],
    ont: TopicOntology,
    branch: str | None = None,
    micro_intents: Sequence[str] | None = None,
    strict_intents: bool = False,
) -> list[FlowViolation]:
    """Return violations in discovery order; an empty list means the sequence passes.

    A topic outside the ontology is reported once as hallucinated and does not
    additionally produce transition errors for its neighbours. ``index`` of a
    transition error is the position of the destination topic.
    """
    if not topics:
        raise ValueError("topic sequence must be non-empty")
    seq = [norm_label(t) for t in topics]
    rule = ont.branch_rules.get(branch) if branch else None
    reached_until = False
    out: list[FlowViolation] = []
    for i, t in enumerate(seq):
        if t not in ont:
            out.append(FlowViolation(i, HALLUCINATED_TOPIC, t))
            continue
        if strict_intents and micro_intents is not None:
            intent = norm_label(micro_intents[i])
            if intent not in ont.micro_intents[t]:
                out.append(FlowViolation(i, UNKNOWN_INTENT, t, None, f"micro_intent {intent!r} not listed for {t!r}"))
        if i > 0 and seq[i - 1] in ont:
            prev = seq[i - 1]
            if not ont.allowed(prev, t):
                out.append(FlowViolation(i, TRANSITION_ERROR, t, prev))
            elif rule is not None and not reached_until and t in rule.deferred and prev != t:
                out.append(
                    FlowViolation(i, TRANSITION_ERROR, t, prev, f"{branch} branch defers {t!r} until {rule.until!r}")
                )
        if rule is not None and t == rule.until:
            reached_until = True
    return out


def render_flow_feedback(violations: Sequence[FlowViolation]) -> str:
    if not violations:
        return "Topic flow check passed."
    lines = ["Topic flow violations:"]
    lines += [f"{i}. {v.describe()}" for i, v in enumerate(violations, 1)]
    return "\n".join(lines)
