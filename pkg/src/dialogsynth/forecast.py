"""Diagnosis forecasting over growing dialogue prefixes.

A model emits per-turn label confidences; the harness decides commit/defer at
a threshold, scores each trajectory, aggregates, and builds training data.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .corpus import Dialogue, serialize_dialogue
from .errors import IngestError, PreconditionError
from .extractor import Concept, ConceptSet


@dataclass(frozen=True)
class TurnPrediction:
    t: int
    probs: Mapping[str, float]

    def __post_init__(self):
        if self.t < 1:
            raise PreconditionError(f"turn index must be >= 1, got {self.t}")
        for label, p in self.probs.items():
            if isinstance(p, bool) or not isinstance(p, (int, float)) or math.isnan(p) or not 0.0 <= p <= 1.0:
                raise PreconditionError(f"turn {self.t}: probability for {label!r} must be in [0, 1], got {p!r}")


@dataclass(frozen=True)
class PredictionTrajectory:
    dialogue_id: str
    turns: tuple[TurnPrediction, ...]
    # dialogue length; defaults to the last predicted turn
    length: int | None = None

    def __post_init__(self):
        ts = [tp.t for tp in self.turns]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise PreconditionError(f"{self.dialogue_id}: turn indices must strictly increase")
        if self.length is not None and ts and ts[-1] > self.length:
            raise PreconditionError(f"{self.dialogue_id}: turn {ts[-1]} beyond dialogue length {self.length}")

    @property
    def T(self) -> int:
        if self.length is not None:
            return self.length
        return self.turns[-1].t if self.turns else 0

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "PredictionTrajectory":
        try:
            turns = tuple(TurnPrediction(int(t["t"]), dict(t["probs"])) for t in doc["turns"])
            return cls(str(doc["dialogue_id"]), turns, doc.get("T"))
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestError(f"malformed trajectory: {exc}", "turns") from exc

    def to_json(self) -> dict:
        doc: dict[str, Any] = {"dialogue_id": self.dialogue_id, "turns": [{"t": tp.t, "probs": dict(tp.probs)} for tp in self.turns]}
        if self.length is not None:
            doc["T"] = self.length
        return doc


@dataclass(frozen=True)
class CommitPolicy:
    tau: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise PreconditionError(f"tau must be in (0, 1), got {self.tau}")


@dataclass(frozen=True)
class CommitDecision:
    labels: frozenset[str]
    top: str | None = None
    confidence: float | None = None

    @property
    def deferred(self) -> bool:
        return not self.labels


def commit(tp: TurnPrediction, pol: CommitPolicy = CommitPolicy()) -> CommitDecision:
    chosen = {label: p for label, p in tp.probs.items() if p >= pol.tau}
    if not chosen:
        return CommitDecision(frozenset())
    top = min(chosen, key=lambda label: (-chosen[label], label))
    return CommitDecision(frozenset(chosen), top, chosen[top])


def earliness(t_pred: int, T: int) -> float:
    if not 1 <= t_pred <= T:
        raise PreconditionError(f"need 1 <= t_pred <= T, got t_pred={t_pred}, T={T}")
    return 1.0 - t_pred / T


def edit_overheads(seq: Sequence[str], gt: Iterable[str]) -> float:
    """Share of post-commit label changes that were not the one needed correction."""
    if not seq:
        raise PreconditionError("edit_overheads needs a non-empty sequence")
    gt = set(gt)
    changes = sum(1 for a, b in zip(seq, seq[1:]) if a != b)
    first_wrong = seq[0] not in gt
    if changes == 0:
        return 1.0 if first_wrong else 0.0
    necessary = 1 if first_wrong and any(y in gt for y in seq) else 0
    return (changes - necessary) / changes


@dataclass(frozen=True)
class TrajectoryMetrics:
    dialogue_id: str
    committed: bool
    first_label: str | None = None
    first_conf: float | None = None
    first_correct: bool | None = None
    last_label: str | None = None
    last_conf: float | None = None
    last_correct: bool | None = None
    earliness_first: float = 0.0
    earliness_first_correct: float = 0.0
    edit_overhead: float | None = None

    def to_json(self) -> dict:
        return dict(self.__dict__)


def evaluate_trajectory(
    traj: PredictionTrajectory, gt: Iterable[str], pol: CommitPolicy = CommitPolicy()
) -> TrajectoryMetrics:
    gt = set(gt)
    decisions = [(tp.t, commit(tp, pol)) for tp in traj.turns]
    committed = [(t, d) for t, d in decisions if not d.deferred]
    if not committed:
        return TrajectoryMetrics(traj.dialogue_id, False)
    T = traj.T
    t_first, first = committed[0]
    _, last = committed[-1]
    correct_turns = [t for t, d in committed if d.top in gt]
    return TrajectoryMetrics(
        traj.dialogue_id,
        True,
        first.top,
        first.confidence,
        first.top in gt,
        last.top,
        last.confidence,
        last.top in gt,
        earliness(t_first, T),
        earliness(correct_turns[0], T) if correct_turns else 0.0,
        edit_overheads([d.top for _, d in committed], gt),
    )


SUMMARY_FIELDS = (
    "first_accuracy",
    "last_accuracy",
    "first_confidence",
    "last_confidence",
    "earliness_first",
    "earliness_first_correct",
    "edit_overhead",
    "non_commit_rate",
)


def aggregate(ms: Sequence[TrajectoryMetrics]) -> dict[str, float | int | None]:
    """Percentages; everything but the non-commit rate is over committed trajectories only."""
    if not ms:
        raise PreconditionError("aggregate needs at least one trajectory")
    done = [m for m in ms if m.committed]
    n = len(done)

    def pct(values) -> float | None:
        values = list(values)
        return 100.0 * sum(values) / n if n else None

    return {
        "n": len(ms),
        "committed": n,
        "first_accuracy": pct(m.first_correct for m in done),
        "last_accuracy": pct(m.last_correct for m in done),
        "first_confidence": pct(m.first_conf for m in done),
        "last_confidence": pct(m.last_conf for m in done),
        "earliness_first": pct(m.earliness_first for m in done),
        "earliness_first_correct": pct(m.earliness_first_correct for m in done),
        "edit_overhead": pct(m.edit_overhead for m in done),
        "non_commit_rate": 100.0 * (len(ms) - n) / len(ms),
    }


# -- training data ----------------------------------------------------------


@dataclass(frozen=True)
class UnrollConfig:
    K: int = 5

    def __post_init__(self):
        if self.K < 1:
            raise PreconditionError("K must be >= 1")


@dataclass(frozen=True)
class TrainingExample:
    input: str
    labels: tuple[str, ...]
    dialogue_id: str = ""
    prefix_len: int = 0

    def to_json(self) -> dict:
        return {"dialogue_id": self.dialogue_id, "prefix_len": self.prefix_len, "input": self.input, "labels": list(self.labels)}


def _require_labels(d: Dialogue) -> None:
    if not d.labels:
        raise PreconditionError(f"dialogue {d.dialogue_id} has no diagnosis labels")


def build_static_example(d: Dialogue) -> TrainingExample:
    _require_labels(d)
    return TrainingExample(serialize_dialogue(d), tuple(d.labels), d.dialogue_id, len(d.utterances))


def build_dynamic_examples(d: Dialogue, cfg: UnrollConfig = UnrollConfig()) -> list[TrainingExample]:
    """The ``K`` longest prefixes, longest first; fewer when the dialogue is shorter."""
    _require_labels(d)
    T = len(d.utterances)
    if T < 1:
        raise PreconditionError(f"dialogue {d.dialogue_id} is empty")
    return [
        TrainingExample(serialize_dialogue(d.prefix(n)), tuple(d.labels), d.dialogue_id, n)
        for n in range(T, max(T - cfg.K, 0), -1)
    ]


# -- checker validation -------------------------------------------------------


@dataclass(frozen=True)
class Corruption:
    corrupted: ConceptSet
    gt_fp: frozenset[str]
    gt_fn: frozenset[str]


def _synthetic_surface(rng: random.Random, taken: set[str]) -> str:
    while True:
        s = "zz" + "".join(rng.choice("bcdfghjklmnpqrstvwxz") for _ in range(8))
        if s not in taken:
            return s


def inject_concept_errors(
    cs: ConceptSet,
    n_fp: int,
    n_fn: int,
    seed: int,
    n_substitute: int = 0,
    vocabulary: Sequence[Concept | str] = (),
) -> Corruption:
    """Corrupt ``cs`` so that exactly ``n_fp`` concepts are spurious and ``n_fn`` are missing.

    ``n_substitute`` of those come in pairs: a concept is replaced in place by
    an incorrect alternative (one FN plus one FP). Inserted and substituted
    concepts are drawn from ``vocabulary`` when it has unused entries, else
    synthesized. Ground-truth sets hold concept keys.
    """
    if min(n_fp, n_fn, n_substitute) < 0:
        raise PreconditionError("injection counts must be >= 0")
    if n_substitute > min(n_fp, n_fn):
        raise PreconditionError("n_substitute cannot exceed n_fp or n_fn")
    items = list(cs)
    if n_fn > len(items):
        raise PreconditionError(f"cannot remove {n_fn} concepts from a set of {len(items)}")
    rng = random.Random(seed)
    picked = rng.sample(range(len(items)), n_fn)
    substituted = set(picked[:n_substitute])
    deleted = set(picked[n_substitute:])

    taken = {c.key for c in items} | {c.surface for c in items}
    pool = [v if isinstance(v, Concept) else Concept(v, None, frozenset(), "injected") for v in vocabulary]
    pool = [v for v in pool if v.key not in taken and v.surface not in taken]
    rng.shuffle(pool)

    def fresh() -> Concept:
        while pool:
            c = pool.pop()
            if c.key not in taken and c.surface not in taken:
                break
        else:
            c = Concept(_synthetic_surface(rng, taken), None, frozenset(), "injected")
        taken.update((c.key, c.surface))
        return c

    out: list[Concept] = []
    gt_fp: set[str] = set()
    gt_fn: set[str] = set()
    for i, c in enumerate(items):
        if i in deleted:
            gt_fn.add(c.key)
        elif i in substituted:
            gt_fn.add(c.key)
            alt = fresh()
            gt_fp.add(alt.key)
            out.append(alt)
        else:
            out.append(c)
    for _ in range(n_fp - n_substitute):
        alt = fresh()
        gt_fp.add(alt.key)
        out.insert(rng.randrange(len(out) + 1), alt)
    return Corruption(ConceptSet(out), frozenset(gt_fp), frozenset(gt_fn))


# -- readers ----------------------------------------------------------------


def read_trajectories(lines: Iterable[str], source: str = "<trajectories>") -> list[PredictionTrajectory]:
    out = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            if not isinstance(doc, dict):
                raise ValueError("expected an object")
            out.append(PredictionTrajectory.from_json(doc))
        except (ValueError, IngestError, PreconditionError) as exc:
            raise IngestError(f"{source}:{lineno}: {exc}", f"line {lineno}") from exc
    return out


def read_label_map(lines: Iterable[str], source: str = "<labels>") -> dict[str, frozenset[str]]:
    """``{dialogue_id, labels:[...]}`` per line."""
    out: dict[str, frozenset[str]] = {}
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            labels = doc["labels"]
            if isinstance(labels, str) or not all(isinstance(x, str) for x in labels):
                raise ValueError("labels must be a list of strings")
            out[str(doc["dialogue_id"])] = frozenset(labels)
        except (ValueError, KeyError, TypeError) as exc:
            raise IngestError(f"{source}:{lineno}: {exc}", f"line {lineno}") from exc
    return out


@dataclass
class ForecastReport:
    tau: float
    per_dialogue: list[TrajectoryMetrics] = field(default_factory=list)

    @property
    def summary(self) -> dict:
        return aggregate(self.per_dialogue)

    def to_json(self) -> dict:
        return {"tau": self.tau, "summary": self.summary, "dialogues": [m.to_json() for m in self.per_dialogue]}
