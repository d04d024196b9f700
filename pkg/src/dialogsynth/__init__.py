"""Grounded EMS dialogue synthesis: agents, checkers and evaluation harnesses."""

from __future__ import annotations

from .concept_checker import ConceptReport, MatchConfig, factuality_pr, match_concepts
from .corpus import (
    Dialogue,
    DialoguePlan,
    PatientCareRecord,
    PlanStep,
    Utterance,
    parse_dialogue_line,
    parse_epcr,
    serialize_dialogue,
    serialize_utterance,
)
from .extractor import Concept, ConceptSet, Lexicon, extract_concepts, extract_gcs, load_lexicon, select_branch
from .ontology import TopicOntology, load_topic_ontology
from .topic_flow import FlowViolation, validate_flow

__version__ = "0.1.0"

__all__ = [
    "Concept",
    "ConceptReport",
    "ConceptSet",
    "Dialogue",
    "DialoguePlan",
    "FlowViolation",
    "Lexicon",
    "MatchConfig",
    "PatientCareRecord",
    "PlanStep",
    "TopicOntology",
    "Utterance",
    "extract_concepts",
    "extract_gcs",
    "factuality_pr",
    "load_lexicon",
    "load_topic_ontology",
    "match_concepts",
    "parse_dialogue_line",
    "parse_epcr",
    "select_branch",
    "serialize_dialogue",
    "serialize_utterance",
    "validate_flow",
]
