from __future__ import annotations

import json

import pytest
from hypothesis import given, settings

from dialogsynth.corpus import (
    Dialogue,
    DialoguePlan,
    PlanStep,
    Utterance,
    parse_dialogue_block,
    parse_dialogue_line,
    parse_epcr,
    plan_evidence_problems,
    plan_from_json,
    read_dialogues,
    read_records,
    serialize_dialogue,
    serialize_utterance,
)
from dialogsynth.errors import DialogueParseError, IngestError, LabelUniverseError, SerializationError

from strategies import dialogues, utterances


def test_parse_epcr_fields(record):
    assert record.record_id == "R1"
    assert record.current_medications == ("lisinopril", "metformin")
    assert record.vitals[0].kind == "blood_pressure"
    assert record.interventions[1].description == "12-lead"
    assert record.diagnosis_labels == ("Cardiac - Chest Pain",)


def test_epcr_json_round_trip(record):
    assert parse_epcr(json.dumps(record.to_json())) == record


def test_render_lists_every_populated_field(record):
    text = record.render()
    for needle in ("Chief Complaint: chest pain", "Current Medications: lisinopril; metformin",
                   "Medication Allergies: penicillin", "- [2024-03-01T10:02:00] blood_pressure: 150/90",
                   "- procedure: 12-lead", "Medic Note: Patient reports nausea. GCS 15.",
                   "Protocol (Diagnosis): Cardiac - Chest Pain"):
        assert needle in text


def test_missing_record_id_names_the_field(record_doc):
    del record_doc["record_id"]
    with pytest.raises(IngestError) as ei:
        parse_epcr(record_doc)
    assert ei.value.field_path == "record_id"


def test_unknown_field_rejected(record_doc):
    record_doc["insurance"] = "x"
    with pytest.raises(IngestError, match="insurance"):
        parse_epcr(record_doc)


def test_label_outside_universe(record_doc):
    with pytest.raises(LabelUniverseError):
        parse_epcr(record_doc, ["Respiratory Distress"])
    assert parse_epcr(record_doc, ["Cardiac - Chest Pain"]).record_id == "R1"


@pytest.mark.parametrize(
    "mutate,path",
    [
        (lambda d: d["vitals"].append({"kind": "mood", "value": "ok"}), "vitals[2]"),
        (lambda d: d["vitals"][0].update(timestamp="yesterday"), "vitals[0]"),
        (lambda d: d["interventions"].append({"kind": "prayer", "description": "x"}), "interventions[2]"),
        (lambda d: d.update(current_medications="aspirin"), "current_medications"),
        (lambda d: d.update(diagnosis_labels=[]), "diagnosis_labels"),
    ],
)
def test_bad_structured_fields(record_doc, mutate, path):
    mutate(record_doc)
    with pytest.raises(IngestError) as ei:
        parse_epcr(record_doc)
    assert ei.value.field_path == path


def test_read_records_reports_line_numbers(record_doc):
    lines = [json.dumps(record_doc), "", "{not json"]
    with pytest.raises(IngestError, match="line 3"):
        list(read_records(lines))


def test_parse_line_example():
    u = parse_dialogue_line("4. Vital Signs; blood_pressure; Partner: We're taking your blood pressure.")
    assert (u.turn, u.topic, u.micro_intent, u.role) == (4, "Vital Signs", "blood_pressure", "Partner")
    assert u.text == "We're taking your blood pressure."


def test_text_may_contain_separators():
    u = parse_dialogue_line("2. Introduction; introduction; EMT: Hi; it's 10:30: ok")
    assert u.text == "Hi; it's 10:30: ok"


@pytest.mark.parametrize(
    "line,column",
    [
        ("Vital Signs; bp; EMT: hello", 0),
        ("4 Vital Signs; bp; EMT: hello", 1),
        ("4.Vital Signs; bp; EMT: hello", 2),
        ("4. Vital Signs bp EMT hello", 3),
        ("4. Vital Signs;bp; EMT: hi", 15),
        ("4. Vital Signs; bp; EMT hello", 20),
        ("4. Vital Signs; bp; EMT:", 24),
    ],
)
def test_malformed_lines_are_located(line, column):
    with pytest.raises(DialogueParseError) as ei:
        parse_dialogue_line(line, 7)
    assert ei.value.lineno == 7
    assert ei.value.column == column


def test_reserved_tag_in_text_rejected():
    with pytest.raises(DialogueParseError) as ei:
        parse_dialogue_line("1. Dispatch; radio_dispatch; EMT: see </dialogue> here")
    assert ei.value.column == 38


def test_turn_zero_rejected():
    with pytest.raises(DialogueParseError):
        parse_dialogue_line("0. Dispatch; radio_dispatch; EMT: hello")


def test_serialize_refuses_unwritable_fields():
    with pytest.raises(SerializationError):
        serialize_utterance(Utterance(1, "A;B", "x", "EMT", "hi"))
    with pytest.raises(SerializationError):
        serialize_utterance(Utterance(1, "A", "x", "EMT:", "hi"))


@settings(max_examples=200, deadline=None)
@given(utterances())
def test_utterance_round_trip(u):
    assert parse_dialogue_line(serialize_utterance(u)) == u


@settings(max_examples=100, deadline=None)
@given(dialogues())
def test_dialogue_block_round_trip(d):
    utts, errors = parse_dialogue_block(serialize_dialogue(d))
    assert errors == []
    assert tuple(utts) == d.utterances


@settings(max_examples=50, deadline=None)
@given(dialogues())
def test_dialogue_json_round_trip(d):
    assert Dialogue.from_json(json.loads(json.dumps(d.to_json()))) == d


def test_dialogue_turns_must_start_at_one_and_increase():
    u = lambda t: Utterance(t, "Dispatch", "radio_dispatch", "EMT", "hi")
    with pytest.raises(ValueError):
        Dialogue("d", "r", (u(2), u(3)))
    with pytest.raises(ValueError):
        Dialogue("d", "r", (u(1), u(1)))


def test_block_collects_errors_per_line():
    block = "1. Dispatch; radio_dispatch; EMT: hi\nnonsense\n\n3. Introduction; introduction; EMT: hello"
    utts, errors = parse_dialogue_block(block)
    assert [u.turn for u in utts] == [1, 3]
    assert [e.lineno for e in errors] == [2]


def test_read_dialogues_malformed_json():
    with pytest.raises(IngestError, match="line 1"):
        list(read_dialogues(["{"]))


def test_plan_evidence_checks(record):
    plan = DialoguePlan((
        PlanStep("Chief Complaint", "identify_primary_complaint", ("chest pain",)),
        PlanStep("Vital Signs", "blood_pressure", ("chest   pain", "120/80")),
    ))
    problems = plan_evidence_problems(plan, record)
    assert len(problems) == 2
    assert "already used" in problems[0]
    assert "not found verbatim" in problems[1]


def test_plan_from_json_validation():
    with pytest.raises(ValueError):
        plan_from_json([{"micro_intent": "x"}])
    plan = plan_from_json([{"topic": " Dispatch ", "micro_intent": "radio_dispatch", "evidence": "chest pain"}])
    assert plan.steps[0].topic == "Dispatch"
    assert plan.steps[0].evidence == ("chest pain",)
