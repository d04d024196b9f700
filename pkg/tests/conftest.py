from __future__ import annotations

import json

import pytest

from dialogsynth.agents.parsing import StyleReport, render_style_response
from dialogsynth.corpus import parse_epcr

RECORD_DOC = {
    "record_id": "R1",
    "chief_complaint": "chest pain",
    "medical_history": "hypertension and diabetes",
    "current_medications": ["lisinopril", "metformin"],
    "allergies": ["penicillin"],
    "vitals": [
        {"kind": "blood_pressure", "value": "150/90", "timestamp": "2024-03-01T10:02:00"},
        {"kind": "spo2", "value": "94%"},
    ],
    "interventions": [
        {"kind": "medication", "description": "aspirin", "timestamp": "2024-03-01T10:05:00"},
        {"kind": "procedure", "description": "12-lead"},
    ],
    "narrative": "Patient reports nausea. GCS 15.",
    "diagnosis_labels": ["Cardiac - Chest Pain"],
}

GOOD_LINES = [
    "1. Dispatch; radio_dispatch; Dispatcher: Medic 3, respond to a residence for a male with chest pain.",
    "2. Introduction; introduction; EMT: Hi, I'm Sam with the ambulance crew. What's going on today?",
    "3. Chief Complaint; identify_primary_complaint; Patient: It started an hour ago and now I have nausea too.",
    "4. Responsiveness Exam; verbal_response; EMT: Can you tell me your name and today's date?",
    "5. Primary Assessment; check_airway; Partner: Airway is open and he's talking in full sentences.",
    "6. Vital Signs; blood_pressure; Partner: Blood pressure is 150/90, saturation 94%.",
    "7. History of Present Illness; past_history; Patient: I have hypertension and diabetes, and I take lisinopril and metformin.",
    "8. History of Present Illness; allergies; Patient: I'm allergic to penicillin.",
    "9. Interventions; administer_medications; EMT: We're giving you aspirin and running a 12-lead.",
    "10. Exit to Protocol; decide_ems_protocol; EMT: We'll treat this under our cardiac protocol.",
    "11. Transport; destination_decision; EMT: We're heading to the hospital now.",
]

GOOD_PLAN = [
    {"topic": "Dispatch", "micro_intent": "radio_dispatch", "evidence": []},
    {"topic": "Introduction", "micro_intent": "introduction", "evidence": []},
    {"topic": "Chief Complaint", "micro_intent": "identify_primary_complaint", "evidence": ["chest pain", "Patient reports nausea"]},
    {"topic": "Responsiveness Exam", "micro_intent": "verbal_response", "evidence": []},
    {"topic": "Primary Assessment", "micro_intent": "check_airway", "evidence": []},
    {"topic": "Vital Signs", "micro_intent": "blood_pressure", "evidence": ["150/90", "94%"]},
    {"topic": "History of Present Illness", "micro_intent": "past_history", "evidence": ["hypertension and diabetes", "lisinopril; metformin", "penicillin"]},
    {"topic": "Interventions", "micro_intent": "administer_medications", "evidence": ["aspirin", "12-lead"]},
    {"topic": "Exit to Protocol", "micro_intent": "decide_ems_protocol", "evidence": []},
    {"topic": "Transport", "micro_intent": "destination_decision", "evidence": []},
]


def plan_reply(steps) -> str:
    return "Here is the plan.\n<plan>\n" + json.dumps(steps, indent=1) + "\n</plan>"


def dialogue_reply(lines) -> str:
    return "<dialogue>\n" + "\n".join(lines) + "\n</dialogue>"


def style_reply(approved: bool, critiques=()) -> str:
    return render_style_response(StyleReport(approved, tuple(critiques)))


def gating_script():
    """Plan fails once (missing concept), generate fails once (hallucination), style approves on the third refine."""
    bad_plan = [dict(s) for s in GOOD_PLAN]
    bad_plan[6] = dict(bad_plan[6], evidence=["hypertension and diabetes", "lisinopril; metformin"])
    bad_lines = list(GOOD_LINES)
    bad_lines[8] = "9. Interventions; administer_medications; EMT: We're giving you aspirin, oxygen and running a 12-lead."
    return {
        "plan": [plan_reply(bad_plan), plan_reply(GOOD_PLAN)],
        "generate": [dialogue_reply(bad_lines), dialogue_reply(GOOD_LINES)],
        "refine": [dialogue_reply(GOOD_LINES)],
        "style": [
            style_reply(False, ["Turn 2 sounds scripted."]),
            style_reply(False, ["Turn 9 should confirm the allergy first."]),
            style_reply(True),
        ],
    }


@pytest.fixture
def record():
    return parse_epcr(RECORD_DOC)


@pytest.fixture
def record_doc():
    return json.loads(json.dumps(RECORD_DOC))
