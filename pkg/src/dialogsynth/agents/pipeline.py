"""Planner -> Generator -> Refiner loops gated by the concept and topic-flow checkers."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Sequence

from ..concept_checker import ConceptReport, Embedder, MatchConfig, match_concepts
from ..corpus import Dialogue, DialoguePlan, PatientCareRecord, plan_evidence_problems, serialize_dialogue
from ..errors import AgentOutputError, DialogSynthError, PlanParseError, StyleParseError
from ..extractor import ConceptSet, Lexicon, extract_concepts, extract_gcs, record_lexicon, select_branch
from ..gateway import ChatBackend, ChatRequest
from ..ontology import TopicOntology
from ..topic_flow import FlowViolation, validate_flow
from .parsing import StyleReport, parse_dialogue_response, parse_plan_response, parse_style_response
from .prompts import PromptTemplates, default_exemplar, default_rules

log = logging.getLogger(__name__)

ACCEPTED = "accepted"
EXHAUSTED = "exhausted"
ERROR = "error"


@dataclass(frozen=True)
class LoopConfig:
    max_plan_iterations: int = 8
    max_generate_iterations: int = 8
    max_refine_iterations: int = 5

    def __post_init__(self):
        for name in ("max_plan_iterations", "max_generate_iterations", "max_refine_iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class IterationRecord:
    iteration: int
    passed: bool
    problems: list[str] = field(default_factory=list)
    concept: dict | None = None
    flow: list[dict] = field(default_factory=list)
    style: dict | None = None
    format_retries: int = 0

    @property
    def n_missing(self) -> int:
        return len(self.concept["missing"]) if self.concept else 0

    @property
    def n_hallucinated(self) -> int:
        return len(self.concept["hallucinated"]) if self.concept else 0

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "passed": self.passed,
            "problems": self.problems,
            "concept": self.concept,
            "flow": self.flow,
            "style": self.style,
            "format_retries": self.format_retries,
        }


@dataclass
class StageTrace:
    stage: str
    status: str = ""
    iterations: list[IterationRecord] = field(default_factory=list)
    error: str | None = None

    @property
    def count(self) -> int:
        return len(self.iterations)

    def to_json(self) -> dict:
        return {
            "stage": self.stage,
            "status": self.status,
            "count": self.count,
            "error": self.error,
            "iterations": [it.to_json() for it in self.iterations],
        }


@dataclass
class PipelineTrace:
    record_id: str
    branch: str = ""
    gcs: int | None = None
    stages: dict[str, StageTrace] = field(default_factory=dict)
    status: str = ""
    style_approved: bool | None = None
    error: str | None = None

    def stage(self, name: str) -> StageTrace:
        st = StageTrace(name)
        self.stages[name] = st
        return st

    def counts(self) -> dict[str, int]:
        return {name: st.count for name, st in self.stages.items()}

    def to_json(self) -> dict:
        return {
            "record_id": self.record_id,
            "branch": self.branch,
            "gcs": self.gcs,
            "status": self.status,
            "style_approved": self.style_approved,
            "error": self.error,
            "iterations": self.counts(),
            "stages": {name: st.to_json() for name, st in self.stages.items()},
        }


@dataclass
class RecordResult:
    record_id: str
    dialogue: Dialogue | None
    trace: PipelineTrace

    @property
    def accepted(self) -> bool:
        return self.dialogue is not None


def feedback_turn(previous: str, problems: Sequence[str]) -> str:
    lines = [f"{i}. {p}" for i, p in enumerate(problems, 1)]
    return (
        "Your previous output:\n"
        f"{previous.strip()}\n\n"
        "The checkers found these problems. Fix every one of them and return the complete corrected output "
        "in the same tagged format.\n" + "\n".join(lines)
    )


def _concept_problems(rep: ConceptReport) -> list[str]:
    out = [f"missing concept: {s}" for s in sorted(rep.missing.surfaces())]
    out += [f"hallucinated concept: {s}" for s in sorted(rep.hallucinated.surfaces())]
    return out


def _flow_problems(violations: Sequence[FlowViolation]) -> list[str]:
    return [f"{v.kind}: {v.describe()}" for v in violations]


PLAN_FORMAT_REMINDER = (
    "Your reply could not be parsed ({error}). Return ONLY a <plan>...</plan> block containing a JSON array of "
    'objects with "topic", "micro_intent" and "evidence" (a list of verbatim ePCR snippets).'
)
STYLE_FORMAT_REMINDER = (
    "Your reply could not be parsed ({error}). Return ONLY <approved>true|false</approved> followed by "
    "<critique>...</critique> with numbered critiques."
)


class DialoguePipeline:
    """Holds the shared, read-only services one record needs to be turned into a dialogue."""

    def __init__(
        self,
        chat: ChatBackend,
        lexicon: Lexicon,
        ontology: TopicOntology,
        embedder: Embedder | None = None,
        *,
        critic: ChatBackend | None = None,
        loop: LoopConfig = LoopConfig(),
        match: MatchConfig = MatchConfig(),
        templates: PromptTemplates | None = None,
        rules: str | None = None,
        exemplars: Sequence[str] | None = None,
        temperature: float = 0.7,
        max_tokens: int = 8192,
        model_id: str = "",
    ):
        self.chat = chat
        self.critic = critic or chat
        self.lexicon = lexicon
        self.ontology = ontology
        self.embedder = embedder
        self.loop = loop
        self.match = match
        self.templates = templates or PromptTemplates()
        self.rules = default_rules() if rules is None else rules
        self.exemplars = list(exemplars) if exemplars is not None else [default_exemplar()]
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.model_id = model_id

    # -- helpers -----------------------------------------------------------

    def _ask(self, backend: ChatBackend, stage: str, subject: str, system: str, user: str, followups=()) -> str:
        req = ChatRequest(
            system=system,
            user=user,
            temperature=self.temperature,
            max_tokens=self.max_tokens,
            model_id=self.model_id,
            followups=tuple(followups),
            stage=stage,
            subject=subject,
        )
        return backend.chat(req)

    def check_concepts(self, record: PatientCareRecord, target: DialoguePlan | Dialogue, source: ConceptSet | None = None) -> ConceptReport:
        src = source if source is not None else extract_concepts(record, self.lexicon)
        tgt = extract_concepts(target, record_lexicon(record, self.lexicon))
        return match_concepts(src, tgt, self.embedder, self.match)

    def check_flow(self, topics: Sequence[str], branch: str | None) -> list[FlowViolation]:
        return validate_flow(topics, self.ontology, branch)

    # -- stages ------------------------------------------------------------

    def plan(
        self,
        record: PatientCareRecord,
        concepts: ConceptSet,
        branch: str | None = None,
        trace: PipelineTrace | None = None,
    ) -> tuple[DialoguePlan | None, PipelineTrace]:
        trace = trace or PipelineTrace(record.record_id, branch or "")
        st = trace.stage("plan")
        system = self.templates.render("planner_system", topic_flow=self.ontology.render(branch))
        user = self.templates.render(
            "planner_user", epcr=record.render(), concepts="; ".join(c.surface for c in concepts)
        )
        followups: tuple[str, ...] = ()
        for it in range(1, self.loop.max_plan_iterations + 1):
            rec = IterationRecord(it, False)
            st.iterations.append(rec)
            reply = self._ask(self.chat, "plan", record.record_id, system, user, followups)
            try:
                plan = parse_plan_response(reply)
            except PlanParseError as exc:
                rec.format_retries = 1
                reminder = PLAN_FORMAT_REMINDER.format(error=exc)
                reply = self._ask(self.chat, "plan", record.record_id, system, user, followups + (reminder,))
                try:
                    plan = parse_plan_response(reply)
                except PlanParseError as exc2:
                    rec.problems.append(str(exc2))
                    st.status, st.error = ERROR, str(exc2)
                    raise
            problems = plan_evidence_problems(plan, record)
            report = self.check_concepts(record, plan, concepts)
            flow = self.check_flow(plan.topics, branch)
            rec.problems = problems
            rec.concept = report.to_json()
            rec.flow = [v.to_json() for v in flow]
            rec.passed = report.ok and not flow and not problems
            if rec.passed:
                st.status = ACCEPTED
                return plan, trace
            followups = (feedback_turn(reply, problems + _concept_problems(report) + _flow_problems(flow)),)
        st.status = EXHAUSTED
        return None, trace

    def _dialogue_from_reply(self, record: PatientCareRecord, reply: str) -> tuple[Dialogue | None, list[str]]:
        try:
            utts, line_errors = parse_dialogue_response(reply)
        except AgentOutputError as exc:
            return None, [f"format: {exc}"]
        problems = [f"unparseable line {e.lineno}: {e.line.strip()!r} ({str(e).split(':')[0]})" for e in line_errors]
        if not utts:
            return None, problems or ["format: the <dialogue> block is empty"]
        try:
            d = Dialogue(f"dlg-{record.record_id}", record.record_id, tuple(utts), record.diagnosis_labels)
        except ValueError as exc:
            return None, problems + [f"turn numbering: {exc}"]
        return d, problems

    def generate(
        self,
        record: PatientCareRecord,
        plan: DialoguePlan,
        branch: str | None = None,
        trace: PipelineTrace | None = None,
        concepts: ConceptSet | None = None,
    ) -> tuple[Dialogue | None, PipelineTrace]:
        trace = trace or PipelineTrace(record.record_id, branch or "")
        st = trace.stage("generate")
        concepts = concepts if concepts is not None else extract_concepts(record, self.lexicon)
        system = self.templates.render("generator_system", topic_flow=self.ontology.render(branch))
        user = self.templates.render(
            "generator_user", epcr=record.render(), plan=json.dumps(plan.to_json(), ensure_ascii=False, indent=1)
        )
        followups: tuple[str, ...] = ()
        for it in range(1, self.loop.max_generate_iterations + 1):
            rec = IterationRecord(it, False)
            st.iterations.append(rec)
            reply = self._ask(self.chat, "generate", record.record_id, system, user, followups)
            dialogue, problems = self._dialogue_from_reply(record, reply)
            rec.problems = problems
            extra: list[str] = []
            if dialogue is not None:
                report = self.check_concepts(record, dialogue, concepts)
                flow = self.check_flow(dialogue.topics, branch)
                rec.concept = report.to_json()
                rec.flow = [v.to_json() for v in flow]
                extra = _concept_problems(report) + _flow_problems(flow)
            rec.passed = dialogue is not None and not problems and not extra
            if rec.passed:
                st.status = ACCEPTED
                return dialogue, trace
            followups = (feedback_turn(reply, problems + extra),)
        st.status = EXHAUSTED
        return None, trace

    def style_check(self, record: PatientCareRecord, dialogue: Dialogue, branch: str | None = None, rules: str | None = None) -> StyleReport:
        system = self.templates.render("style_system", rules=self.rules if rules is None else rules)
        user = self.templates.render(
            "style_user",
            topic_flow=self.ontology.render(branch),
            epcr=record.render(),
            dialogue=serialize_dialogue(dialogue),
        )
        reply = self._ask(self.critic, "style", record.record_id, system, user)
        try:
            return parse_style_response(reply)
        except StyleParseError as exc:
            reminder = STYLE_FORMAT_REMINDER.format(error=exc)
            reply = self._ask(self.critic, "style", record.record_id, system, user, (reminder,))
            return parse_style_response(reply)

    def refine(
        self,
        record: PatientCareRecord,
        dialogue: Dialogue,
        branch: str | None = None,
        trace: PipelineTrace | None = None,
        concepts: ConceptSet | None = None,
    ) -> tuple[Dialogue, PipelineTrace]:
        """Polish style; the returned dialogue always passes the concept and flow checks.

        Stops early once all three checks pass. At the cap, the latest clean
        candidate is returned and ``trace.style_approved`` stays False.
        """
        trace = trace or PipelineTrace(record.record_id, branch or "")
        st = trace.stage("refine")
        concepts = concepts if concepts is not None else extract_concepts(record, self.lexicon)
        system = self.templates.render("refiner_system", rules=self.rules, examples="\n\n".join(self.exemplars))
        best = dialogue
        followups: tuple[str, ...] = ()
        trace.style_approved = False
        for it in range(1, self.loop.max_refine_iterations + 1):
            rec = IterationRecord(it, False)
            st.iterations.append(rec)
            user = self.templates.render(
                "refiner_user",
                topic_flow=self.ontology.render(branch),
                epcr=record.render(),
                dialogue=serialize_dialogue(best),
            )
            reply = self._ask(self.chat, "refine", record.record_id, system, user, followups)
            candidate, problems = self._dialogue_from_reply(record, reply)
            rec.problems = problems
            if candidate is None or problems:
                followups = (feedback_turn(reply, problems),)
                continue
            report = self.check_concepts(record, candidate, concepts)
            flow = self.check_flow(candidate.topics, branch)
            rec.concept = report.to_json()
            rec.flow = [v.to_json() for v in flow]
            if not report.ok or flow:
                followups = (feedback_turn(reply, _concept_problems(report) + _flow_problems(flow)),)
                continue
            best = candidate
            try:
                style = self.style_check(record, candidate, branch)
            except StyleParseError as exc:
                rec.problems.append(f"style checker output unusable: {exc}")
                followups = ()
                continue
            rec.style = style.to_json()
            if style.approved:
                rec.passed = True
                trace.style_approved = True
                st.status = ACCEPTED
                return best, trace
            followups = (feedback_turn(reply, [f"style: {c}" for c in style.critiques]),)
        st.status = EXHAUSTED
        return best, trace

    # -- whole record ------------------------------------------------------

    def run(self, record: PatientCareRecord) -> RecordResult:
        gcs = extract_gcs(record)
        branch = select_branch(gcs)
        trace = PipelineTrace(record.record_id, branch, gcs)
        try:
            concepts = extract_concepts(record, self.lexicon)
            plan, _ = self.plan(record, concepts, branch, trace)
            if plan is None:
                trace.status = EXHAUSTED
                return RecordResult(record.record_id, None, trace)
            dialogue, _ = self.generate(record, plan, branch, trace, concepts)
            if dialogue is None:
                trace.status = EXHAUSTED
                return RecordResult(record.record_id, None, trace)
            dialogue, _ = self.refine(record, dialogue, branch, trace, concepts)
        except DialogSynthError as exc:
            log.warning("record %s rejected: %s", record.record_id, exc)
            trace.status, trace.error = ERROR, f"{type(exc).__name__}: {exc}"
            return RecordResult(record.record_id, None, trace)
        trace.status = ACCEPTED
        return RecordResult(record.record_id, dialogue, trace)


@dataclass
class PipelineResult:
    results: list[RecordResult]

    @property
    def dialogues(self) -> list[Dialogue]:
        return [r.dialogue for r in self.results if r.dialogue is not None]

    @property
    def rejects(self) -> list[PipelineTrace]:
        return [r.trace for r in self.results if r.dialogue is None]

    @property
    def traces(self) -> list[PipelineTrace]:
        return [r.trace for r in self.results]


def iter_pipeline(
    records: Iterable[PatientCareRecord], pipeline: DialoguePipeline, workers: int = 1
) -> Iterator[RecordResult]:
    """Yield per-record results in input order; records run in parallel, stages within a record do not."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if workers == 1:
        for r in records:
            yield pipeline.run(r)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(pipeline.run, records)


def run_pipeline(
    records: Iterable[PatientCareRecord], pipeline: DialoguePipeline, workers: int = 1
) -> PipelineResult:
    return PipelineResult(list(iter_pipeline(records, pipeline, workers)))


def mean_iterations(traces: Sequence[PipelineTrace | dict[str, Any]], stages=("plan", "generate")) -> float:
    """Mean per-record sum of iterations over ``stages``."""
    if not traces:
        return 0.0
    total = 0
    for t in traces:
        counts = t["iterations"] if isinstance(t, dict) else t.counts()
        total += sum(counts.get(s, 0) for s in stages)
    return total / len(traces)
