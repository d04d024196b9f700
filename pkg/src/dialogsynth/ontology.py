"""Topic graph with per-topic micro-intent inventories."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml

from .corpus import norm_label
from .errors import OntologyConfigError

BRANCHES = ("conscious", "comatose")


@dataclass(frozen=True)
class BranchRule:
    """Topics that may not appear before ``until`` on a given branch."""

    deferred: frozenset[str]
    until: str


@dataclass(frozen=True)
class TopicOntology:
    topics: tuple[str, ...]
    adjacency: Mapping[str, tuple[str, ...]]
    micro_intents: Mapping[str, tuple[str, ...]]
    branch_rules: Mapping[str, BranchRule] = field(default_factory=dict)

    def __post_init__(self):
        declared = set(self.topics)
        if not declared:
            raise OntologyConfigError("ontology declares no topics")
        for src, targets in self.adjacency.items():
            if src not in declared:
                raise OntologyConfigError(f"edge source {src!r} is not a declared topic")
            for dst in targets:
                if dst not in declared:
                    raise OntologyConfigError(f"edge {src!r} -> {dst!r} targets an undeclared topic")
        for t in self.topics:
            if not self.micro_intents.get(t):
                raise OntologyConfigError(f"topic {t!r} has no micro-intents")
        for name, rule in self.branch_rules.items():
            for t in (*rule.deferred, rule.until):
                if t not in declared:
                    raise OntologyConfigError(f"branch {name!r} references undeclared topic {t!r}")

    def __contains__(self, topic: str) -> bool:
        return topic in self._topic_set

    @property
    def _topic_set(self) -> frozenset[str]:
        cached = self.__dict__.get("_ts")
        if cached is None:
            cached = frozenset(self.topics)
            object.__setattr__(self, "_ts", cached)
        return cached

    def allowed(self, src: str, dst: str) -> bool:
        return dst in self.adjacency.get(src, ())

    def edges(self) -> set[tuple[str, str]]:
        return {(s, d) for s, ds in self.adjacency.items() for d in ds}

    def render(self, branch: str | None = None) -> str:
        """Human-readable flow description for prompts."""
        lines = []
        for t in self.topics:
            intents = ", ".join(self.micro_intents[t])
            nxt = ", ".join(d for d in self.adjacency.get(t, ()) if d != t) or "(end)"
            lines.append(f"- {t} [micro_intents: {intents}] -> {nxt}")
        if branch is not None:
            rule = self.branch_rules.get(branch)
            lines.append(f"Branch: {branch}.")
            if rule is not None:
                lines.append(
                    f"On this branch do not use {', '.join(sorted(rule.deferred))} before {rule.until}."
                )
        return "\n".join(lines)

    def to_config(self) -> dict[str, Any]:
        return {
            "topics": [{"id": t, "micro_intents": list(self.micro_intents[t])} for t in self.topics],
            "edges": {s: list(ds) for s, ds in self.adjacency.items()},
            "branches": {
                name: {"deferred": sorted(r.deferred), "until": r.until} for name, r in self.branch_rules.items()
            },
        }


def ontology_from_config(doc: Mapping[str, Any]) -> TopicOntology:
    if not isinstance(doc, Mapping):
        raise OntologyConfigError("ontology config must be a mapping")
    raw_topics = doc.get("topics")
    if not raw_topics:
        raise OntologyConfigError("'topics' must be a non-empty list")
    topics: list[str] = []
    intents: dict[str, tuple[str, ...]] = {}
    for i, entry in enumerate(raw_topics):
        if isinstance(entry, str):
            tid, mis = entry, []
        elif isinstance(entry, Mapping) and "id" in entry:
            tid, mis = entry["id"], entry.get("micro_intents") or []
        else:
            raise OntologyConfigError(f"topics[{i}] must be a string or {{id, micro_intents}}")
        tid = norm_label(str(tid))
        if tid in intents:
            raise OntologyConfigError(f"duplicate topic {tid!r}")
        topics.append(tid)
        intents[tid] = tuple(norm_label(str(m)) for m in mis)

    raw_edges = doc.get("edges") or {}
    if not isinstance(raw_edges, Mapping):
        raise OntologyConfigError("'edges' must map a topic to a list of next topics")
    adjacency: dict[str, tuple[str, ...]] = {}
    for src, dsts in raw_edges.items():
        if isinstance(dsts, str):
            dsts = [dsts]
        adjacency[norm_label(str(src))] = tuple(dict.fromkeys(norm_label(str(d)) for d in dsts))

    rules = {}
    for name, branch in (doc.get("branches") or {}).items():
        if name not in BRANCHES:
            raise OntologyConfigError(f"unknown branch {name!r}")
        rules[name] = BranchRule(frozenset(norm_label(t) for t in branch.get("deferred", [])), norm_label(branch["until"]))

    return TopicOntology(tuple(topics), adjacency, intents, rules)


def load_topic_ontology(source: str | Path | Mapping[str, Any] | None = None) -> TopicOntology:
    """Load an ontology from a mapping, a JSON/YAML file, or the bundled EMS default."""
    if source is None:
        text = resources.files("dialogsynth.data").joinpath("ems_ontology.json").read_text("utf-8")
        return ontology_from_config(json.loads(text))
    if isinstance(source, Mapping):
        return ontology_from_config(source)
    path = Path(source)
    text = path.read_text("utf-8")
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise OntologyConfigError(f"{path}: unreadable config ({exc})") from exc
    return ontology_from_config(doc)
