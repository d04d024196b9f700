"""Domain types and wire formats for patient care records, dialogues and plans."""

from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Iterable, Iterator, Mapping, Sequence

from .errors import (
    DialogueParseError,
    IngestError,
    LabelUniverseError,
    SerializationError,
)

VITAL_KINDS = frozenset({"pulse", "respiration", "blood_pressure", "glucose", "spo2", "ekg"})
INTERVENTION_KINDS = frozenset({"procedure", "medication"})
RESERVED_TAGS = ("<dialogue>", "</dialogue>", "<plan>", "</plan>", "<approved>", "</approved>", "<critique>", "</critique>")

RECORD_FIELDS = (
    "record_id",
    "chief_complaint",
    "medical_history",
    "current_medications",
    "allergies",
    "vitals",
    "interventions",
    "narrative",
    "diagnosis_labels",
)


def norm_label(text: str) -> str:
    """NFC-normalize and trim; used for topic, intent and role comparison."""
    return unicodedata.normalize("NFC", text).strip()


def _check_timestamp(ts: str | None, path: str) -> str | None:
    if ts is None or ts == "":
        return None
    if not isinstance(ts, str):
        raise IngestError("timestamp must be a string", path)
    try:
        datetime.fromisoformat(ts.replace("Z", "+00:00"))
    except ValueError as exc:
        raise IngestError(f"not ISO-8601: {ts!r}", path) from exc
    return ts


@dataclass(frozen=True)
class VitalReading:
    kind: str
    value: str
    timestamp: str | None = None

    def __post_init__(self):
        if self.kind not in VITAL_KINDS:
            raise IngestError(f"unknown vital kind {self.kind!r}", "vitals.kind")
        _check_timestamp(self.timestamp, "vitals.timestamp")


@dataclass(frozen=True)
class Intervention:
    kind: str
    description: str
    timestamp: str | None = None

    def __post_init__(self):
        if self.kind not in INTERVENTION_KINDS:
            raise IngestError(f"unknown intervention kind {self.kind!r}", "interventions.kind")
        _check_timestamp(self.timestamp, "interventions.timestamp")


@dataclass(frozen=True)
class PatientCareRecord:
    record_id: str
    diagnosis_labels: tuple[str, ...]
    chief_complaint: str = ""
    medical_history: str = ""
    current_medications: tuple[str, ...] = ()
    allergies: tuple[str, ...] = ()
    vitals: tuple[VitalReading, ...] = ()
    interventions: tuple[Intervention, ...] = ()
    narrative: str = ""

    def __post_init__(self):
        if not self.record_id:
            raise IngestError("must be non-empty", "record_id")
        if not self.diagnosis_labels:
            raise IngestError("must be non-empty", "diagnosis_labels")

    def to_json(self) -> dict[str, Any]:
        return {
            "record_id": self.record_id,
            "chief_complaint": self.chief_complaint,
            "medical_history": self.medical_history,
            "current_medications": list(self.current_medications),
            "allergies": list(self.allergies),
            "vitals": [
                {"kind": v.kind, "value": v.value, "timestamp": v.timestamp} for v in self.vitals
            ],
            "interventions": [
                {"kind": i.kind, "description": i.description, "timestamp": i.timestamp}
                for i in self.interventions
            ],
            "narrative": self.narrative,
            "diagnosis_labels": list(self.diagnosis_labels),
        }

    def render(self) -> str:
        """Plain-text view handed to the agents; plan evidence must quote it verbatim."""
        lines = [f"Record ID: {self.record_id}"]
        if self.chief_complaint:
            lines.append(f"Chief Complaint: {self.chief_complaint}")
        if self.medical_history:
            lines.append(f"Medical History: {self.medical_history}")
        if self.current_medications:
            lines.append("Current Medications: " + "; ".join(self.current_medications))
        if self.allergies:
            lines.append("Medication Allergies: " + "; ".join(self.allergies))
        if self.vitals:
            lines.append("Vital Signs:")
            for v in self.vitals:
                ts = f"[{v.timestamp}] " if v.timestamp else ""
                lines.append(f"- {ts}{v.kind}: {v.value}")
        if self.interventions:
            lines.append("Interventions:")
            for iv in self.interventions:
                ts = f"[{iv.timestamp}] " if iv.timestamp else ""
                lines.append(f"- {ts}{iv.kind}: {iv.description}")
        if self.narrative:
            lines.append(f"Medic Note: {self.narrative}")
        lines.append("Protocol (Diagnosis): " + "; ".join(self.diagnosis_labels))
        return "\n".join(lines)


def _str_field(doc: Mapping[str, Any], name: str) -> str:
    value = doc.get(name, "")
    if value is None:
        return ""
    if not isinstance(value, str):
        raise IngestError("expected a string", name)
    return value


def _str_list(doc: Mapping[str, Any], name: str) -> tuple[str, ...]:
    value = doc.get(name, [])
    if value is None:
        return ()
    if not isinstance(value, list):
        raise IngestError("expected a list of strings", name)
    for i, item in enumerate(value):
        if not isinstance(item, str):
            raise IngestError("expected a string", f"{name}[{i}]")
    return tuple(value)


def parse_epcr(document: str | Mapping[str, Any], label_universe: Iterable[str] | None = None) -> PatientCareRecord:
    """Build a record from one ingest document (a JSON line or an already-decoded mapping).

    Unknown keys are rejected rather than dropped so that no populated source
    field silently disappears.
    """
    if isinstance(document, str):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            raise IngestError(f"malformed JSON: {exc.msg}", f"$:{exc.pos}") from exc
    else:
        doc = document
    if not isinstance(doc, Mapping):
        raise IngestError("record must be an object", "$")

    unknown = sorted(set(doc) - set(RECORD_FIELDS))
    if unknown:
        raise IngestError(f"unknown field(s) {unknown}", unknown[0])

    record_id = doc.get("record_id")
    if not isinstance(record_id, str) or not record_id:
        raise IngestError("missing or empty", "record_id")

    vitals = []
    raw_vitals = doc.get("vitals") or []
    if not isinstance(raw_vitals, list):
        raise IngestError("expected a list", "vitals")
    for i, v in enumerate(raw_vitals):
        if not isinstance(v, Mapping) or "kind" not in v or "value" not in v:
            raise IngestError("expected {kind, value[, timestamp]}", f"vitals[{i}]")
        try:
            vitals.append(VitalReading(str(v["kind"]), str(v["value"]), v.get("timestamp")))
        except IngestError as exc:
            raise IngestError(str(exc), f"vitals[{i}]") from exc

    interventions = []
    raw_iv = doc.get("interventions") or []
    if not isinstance(raw_iv, list):
        raise IngestError("expected a list", "interventions")
    for i, iv in enumerate(raw_iv):
        if not isinstance(iv, Mapping) or "kind" not in iv or "description" not in iv:
            raise IngestError("expected {kind, description[, timestamp]}", f"interventions[{i}]")
        try:
            interventions.append(Intervention(str(iv["kind"]), str(iv["description"]), iv.get("timestamp")))
        except IngestError as exc:
            raise IngestError(str(exc), f"interventions[{i}]") from exc

    labels = _str_list(doc, "diagnosis_labels")
    if not labels:
        raise IngestError("must list at least one label", "diagnosis_labels")
    if label_universe is not None:
        universe = set(label_universe)
        bad = [lab for lab in labels if lab not in universe]
        if bad:
            raise LabelUniverseError(f"label(s) outside the configured universe: {bad}", "diagnosis_labels")

    return PatientCareRecord(
        record_id=record_id,
        diagnosis_labels=labels,
        chief_complaint=_str_field(doc, "chief_complaint"),
        medical_history=_str_field(doc, "medical_history"),
        current_medications=_str_list(doc, "current_medications"),
        allergies=_str_list(doc, "allergies"),
        vitals=tuple(vitals),
        interventions=tuple(interventions),
        narrative=_str_field(doc, "narrative"),
    )


def read_records(lines: Iterable[str], label_universe: Iterable[str] | None = None) -> Iterator[PatientCareRecord]:
    universe = None if label_universe is None else frozenset(label_universe)
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            yield parse_epcr(line, universe)
        except IngestError as exc:
            raise type(exc)(f"line {lineno}: {exc}", exc.field_path) from exc


def _contains_reserved(text: str) -> str | None:
    for tag in RESERVED_TAGS:
        if tag in text:
            return tag
    return None


@dataclass(frozen=True)
class Utterance:
    turn: int
    topic: str
    micro_intent: str
    role: str
    text: str

    def __post_init__(self):
        if self.turn < 1:
            raise ValueError("turn must be >= 1")
        if not self.text.strip():
            raise ValueError("utterance text must be non-empty")
        tag = _contains_reserved(self.text)
        if tag is not None:
            raise ValueError(f"utterance text contains reserved tag {tag}")

    def to_json(self) -> dict[str, Any]:
        return {
            "turn": self.turn,
            "topic": self.topic,
            "micro_intent": self.micro_intent,
            "role": self.role,
            "text": self.text,
        }


# INT "." WS TOPIC ";" WS INTENT ";" WS ROLE ":" WS TEXT
_LINE_RE = re.compile(
    r"^(?P<turn>\d+)\.[ \t]+(?P<topic>[^;]+?);[ \t]+(?P<intent>[^;]+?);[ \t]+(?P<role>[^;:]+?):[ \t]+(?P<text>\S.*)$"
)
_PREFIX_STEPS = (
    (re.compile(r"^\d+"), "expected a turn number"),
    (re.compile(r"^\d+\."), "expected '.' after the turn number"),
    (re.compile(r"^\d+\.[ \t]+"), "expected whitespace after '.'"),
    (re.compile(r"^\d+\.[ \t]+[^;]+;"), "expected '<topic>;'"),
    (re.compile(r"^\d+\.[ \t]+[^;]+;[ \t]+"), "expected whitespace after the topic"),
    (re.compile(r"^\d+\.[ \t]+[^;]+;[ \t]+[^;]+;"), "expected '<micro_intent>;'"),
    (re.compile(r"^\d+\.[ \t]+[^;]+;[ \t]+[^;]+;[ \t]+"), "expected whitespace after the micro-intent"),
    (re.compile(r"^\d+\.[ \t]+[^;]+;[ \t]+[^;]+;[ \t]+[^;:]+:"), "expected '<role>:'"),
    (re.compile(r"^\d+\.[ \t]+[^;]+;[ \t]+[^;]+;[ \t]+[^;:]+:[ \t]+"), "expected whitespace after the role"),
)


def _locate(line: str) -> tuple[int, str]:
    pos = 0
    for rx, message in _PREFIX_STEPS:
        m = rx.match(line)
        if m is None:
            return pos, message
        pos = m.end()
    return pos, "expected non-empty utterance text"


def parse_dialogue_line(line: str, lineno: int | None = None) -> Utterance:
    """Parse ``"4. Vital Signs; blood_pressure; Partner: We're taking your blood pressure."``."""
    stripped = line.rstrip()
    m = _LINE_RE.match(stripped)
    if m is None:
        column, message = _locate(stripped)
        raise DialogueParseError(message, line, lineno, column)
    turn = int(m["turn"])
    if turn < 1:
        raise DialogueParseError("turn numbers start at 1", line, lineno, 0)
    text = m["text"]
    tag = _contains_reserved(text)
    if tag is not None:
        raise DialogueParseError(f"reserved tag {tag} inside utterance", line, lineno, m.start("text") + text.index(tag))
    topic, intent, role = (norm_label(m[g]) for g in ("topic", "intent", "role"))
    return Utterance(turn, topic, intent, role, text)


def serialize_utterance(u: Utterance) -> str:
    for name in ("topic", "micro_intent", "role"):
        value = getattr(u, name)
        if not value or value != value.strip() or ";" in value or "\n" in value:
            raise SerializationError(f"{name} {value!r} cannot be written in the line grammar")
    if ":" in u.role:
        raise SerializationError(f"role {u.role!r} cannot contain ':'")
    if "\n" in u.text or u.text != u.text.strip():
        raise SerializationError(f"turn {u.turn}: text must be a single trimmed line")
    tag = _contains_reserved(u.text)
    if tag is not None:
        raise SerializationError(f"turn {u.turn}: reserved tag {tag} inside utterance")
    return f"{u.turn}. {u.topic}; {u.micro_intent}; {u.role}: {u.text}"


@dataclass(frozen=True)
class Dialogue:
    dialogue_id: str
    source_record_id: str
    utterances: tuple[Utterance, ...]
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.utterances:
            raise ValueError("dialogue must contain at least one utterance")
        prev = 0
        for u in self.utterances:
            if u.turn <= prev:
                raise ValueError(f"turns must strictly increase from 1 (got {u.turn} after {prev})")
            prev = u.turn
        if self.utterances[0].turn != 1:
            raise ValueError("turn numbering must start at 1")

    @property
    def topics(self) -> list[str]:
        return [u.topic for u in self.utterances]

    def text(self) -> str:
        return " ".join(u.text for u in self.utterances)

    def prefix(self, n: int) -> "Dialogue":
        return Dialogue(self.dialogue_id, self.source_record_id, self.utterances[:n], self.labels)

    def to_json(self) -> dict[str, Any]:
        return {
            "dialogue_id": self.dialogue_id,
            "source_record_id": self.source_record_id,
            "labels": list(self.labels),
            "utterances": [u.to_json() for u in self.utterances],
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "Dialogue":
        try:
            utts = tuple(
                Utterance(int(u["turn"]), norm_label(u["topic"]), norm_label(u["micro_intent"]), norm_label(u["role"]), u["text"])
                for u in doc["utterances"]
            )
            return cls(str(doc["dialogue_id"]), str(doc["source_record_id"]), utts, tuple(doc.get("labels") or ()))
        except (KeyError, TypeError) as exc:
            raise IngestError(f"malformed dialogue object: {exc}", "utterances") from exc


def serialize_dialogue(d: Dialogue) -> str:
    return "\n".join(serialize_utterance(u) for u in d.utterances)


def parse_dialogue_block(text: str) -> tuple[list[Utterance], list[DialogueParseError]]:
    """Parse every non-blank line; collect failures instead of stopping at the first."""
    utts: list[Utterance] = []
    errors: list[DialogueParseError] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            utts.append(parse_dialogue_line(line.strip(), lineno))
        except DialogueParseError as exc:
            errors.append(exc)
    return utts, errors


def read_dialogues(lines: Iterable[str]) -> Iterator[Dialogue]:
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise IngestError(f"line {lineno}: malformed JSON ({exc.msg})", f"$:{exc.pos}") from exc
        try:
            yield Dialogue.from_json(doc)
        except ValueError as exc:
            raise IngestError(f"line {lineno}: {exc}", "utterances") from exc


@dataclass(frozen=True)
class PlanStep:
    topic: str
    micro_intent: str
    evidence: tuple[str, ...] = ()

    def to_json(self) -> dict[str, Any]:
        return {"topic": self.topic, "micro_intent": self.micro_intent, "evidence": list(self.evidence)}


@dataclass(frozen=True)
class DialoguePlan:
    steps: tuple[PlanStep, ...] = field(default_factory=tuple)

    @property
    def topics(self) -> list[str]:
        return [s.topic for s in self.steps]

    def evidence_text(self) -> str:
        return "\n".join(e for s in self.steps for e in s.evidence)

    def to_json(self) -> list[dict[str, Any]]:
        return [s.to_json() for s in self.steps]


def _collapse(text: str) -> str:
    return " ".join(text.split())


def plan_evidence_problems(plan: DialoguePlan, record: PatientCareRecord) -> list[str]:
    """Evidence must quote the rendered record verbatim and be used at most once."""
    source = _collapse(record.render())
    problems = []
    seen: dict[str, int] = {}
    for i, step in enumerate(plan.steps):
        for snippet in step.evidence:
            key = _collapse(snippet)
            if not key:
                problems.append(f"step {i + 1}: empty evidence snippet")
                continue
            if key not in source:
                problems.append(f"step {i + 1}: evidence not found verbatim in the record: {snippet!r}")
            if key in seen:
                problems.append(f"step {i + 1}: evidence already used in step {seen[key] + 1}: {snippet!r}")
            else:
                seen[key] = i
    return problems


def plan_from_json(items: Sequence[Any]) -> DialoguePlan:
    steps = []
    for i, item in enumerate(items):
        if not isinstance(item, Mapping):
            raise ValueError(f"plan step {i + 1} is not an object")
        topic = item.get("topic")
        intent = item.get("micro_intent", "")
        evidence = item.get("evidence", [])
        if not isinstance(topic, str) or not topic.strip():
            raise ValueError(f"plan step {i + 1} has no topic")
        if not isinstance(intent, str):
            raise ValueError(f"plan step {i + 1}: micro_intent must be a string")
        if isinstance(evidence, str):
            evidence = [evidence]
        if not isinstance(evidence, list) or not all(isinstance(e, str) for e in evidence):
            raise ValueError(f"plan step {i + 1}: evidence must be a list of strings")
        steps.append(PlanStep(norm_label(topic), norm_label(intent), tuple(e for e in evidence if e.strip())))
    return DialoguePlan(tuple(steps))
