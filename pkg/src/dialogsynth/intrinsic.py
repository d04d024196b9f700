"""Intrinsic dialogue-quality metrics and the LLM-judge harness."""

from __future__ import annotations

import json
import math
import random
import re
from bisect import bisect_left
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Hashable, Iterable, Mapping, Sequence

import jsonschema

from .agents.prompts import PromptTemplates
from .corpus import Dialogue, PatientCareRecord, Utterance, serialize_dialogue
from .errors import JudgeParseError, PreconditionError
from .gateway import ChatBackend, ChatRequest

BLEU_EPSILON = 0.1
BLEU_MAX_ORDER = 4


def _tokens(d: Dialogue | str) -> list[str]:
    text = d if isinstance(d, str) else d.text()
    return text.lower().split()


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def self_bleu(corpus: Sequence[Dialogue | str]) -> float:
    """Mean sentence-BLEU of each dialogue against all the others, as a percentage.

    Lowercased whitespace tokens, uniform weights over orders 1..min(4, len(hyp)),
    zero clipped counts replaced by ``0.1 / total``, standard brevity penalty
    against the closest reference length (shorter wins ties).
    """
    if len(corpus) < 2:
        raise PreconditionError("self_bleu needs at least two dialogues")
    toks = [_tokens(d) for d in corpus]

    # per n-gram: the two largest per-document counts, so "max over the others" is O(1)
    top: list[dict[tuple, list]] = []
    for n in range(1, BLEU_MAX_ORDER + 1):
        best: dict[tuple, list] = {}
        for doc, t in enumerate(toks):
            for ng, cnt in _ngrams(t, n).items():
                slot = best.get(ng)
                if slot is None:
                    best[ng] = [cnt, doc, 0]
                elif cnt > slot[0]:
                    slot[2] = slot[0]
                    slot[0], slot[1] = cnt, doc
                elif cnt > slot[2]:
                    slot[2] = cnt
        top.append(best)

    lengths = Counter(len(t) for t in toks)
    uniq = sorted(lengths)

    def closest_ref(own: int) -> int:
        lengths[own] -= 1
        pos = bisect_left(uniq, own)
        best_len, best_gap = None, None
        for direction in (-1, 1):
            k = pos if direction == 1 else pos - 1
            while 0 <= k < len(uniq) and lengths[uniq[k]] == 0:
                k += direction
            if 0 <= k < len(uniq):
                gap = abs(uniq[k] - own)
                if best_gap is None or gap < best_gap or (gap == best_gap and uniq[k] < best_len):
                    best_len, best_gap = uniq[k], gap
        lengths[own] += 1
        return best_len

    scores = []
    for doc, hyp in enumerate(toks):
        c = len(hyp)
        if c == 0:
            scores.append(0.0)
            continue
        order = min(BLEU_MAX_ORDER, c)
        log_sum = 0.0
        for n in range(1, order + 1):
            counts = _ngrams(hyp, n)
            total = c - n + 1
            clipped = 0
            for ng, cnt in counts.items():
                slot = top[n - 1][ng]
                other = slot[2] if slot[1] == doc else slot[0]
                clipped += min(cnt, other)
            p = clipped / total if clipped else BLEU_EPSILON / total
            log_sum += math.log(p)
        r = closest_ref(c)
        bp = 1.0 if c > r else math.exp(1.0 - r / c)
        scores.append(bp * math.exp(log_sum / order))
    return 100.0 * sum(scores) / len(scores)


def mrr(ranks: Sequence[int]) -> float:
    if not ranks:
        raise PreconditionError("mrr needs at least one rank")
    if any(r < 1 for r in ranks):
        raise PreconditionError("ranks must be >= 1")
    return sum(1.0 / r for r in ranks) / len(ranks)


def _as_yes(v: Any) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s not in ("yes", "no"):
        raise PreconditionError(f"verdict must be yes or no, got {v!r}")
    return s == "yes"


def yes_rate(verdicts: Sequence[Any]) -> float:
    if not verdicts:
        raise PreconditionError("yes_rate needs at least one verdict")
    return 100.0 * sum(_as_yes(v) for v in verdicts) / len(verdicts)


def average_ranks(values: Sequence[float]) -> list[float]:
    """1-based ranks; tied values share the mean of the positions they span."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    if len(x) != len(y) or not x:
        raise PreconditionError("spearman needs two non-empty vectors of equal length")
    rx, ry = average_ranks(x), average_ranks(y)
    n = len(rx)
    mx, my = sum(rx) / n, sum(ry) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    sxx = sum((a - mx) ** 2 for a in rx)
    syy = sum((b - my) ** 2 for b in ry)
    if sxx == 0 or syy == 0:
        raise PreconditionError("spearman is undefined when either vector is constant")
    rho = sxy / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, rho))


@dataclass(frozen=True)
class RatingsMatrix:
    """``rows[item][rater]``; ``None`` marks a missing rating."""

    rows: tuple[tuple[Hashable | None, ...], ...]

    def __post_init__(self):
        if not self.rows:
            raise PreconditionError("ratings matrix has no items")
        width = {len(r) for r in self.rows}
        if len(width) != 1 or width.pop() < 2:
            raise PreconditionError("ratings matrix needs a consistent number (>= 2) of raters")

    @classmethod
    def from_rows(cls, rows: Iterable[Iterable[Hashable | None]]) -> "RatingsMatrix":
        return cls(tuple(tuple(r) for r in rows))

    def pairable_units(self) -> list[list[Hashable]]:
        units = [[v for v in row if v is not None] for row in self.rows]
        return [u for u in units if len(u) >= 2]


def krippendorff_alpha(m: RatingsMatrix, level: str = "nominal") -> float:
    """Coincidence-matrix alpha for nominal data.

    When every pairable value is the same category both disagreements are
    zero; that case is reported as 1.0 (no observed disagreement).
    """
    if level != "nominal":
        raise PreconditionError("only the nominal level is implemented")
    units = m.pairable_units()
    if not units:
        raise PreconditionError("no item has two or more ratings")
    coincidence: Counter = Counter()
    for u in units:
        w = 1.0 / (len(u) - 1)
        counts = Counter(u)
        for c, nc in counts.items():
            for k, nk in counts.items():
                pairs = nc * (nc - 1) if c == k else nc * nk
                coincidence[(c, k)] += pairs * w
    marg: Counter = Counter()
    for (c, _), v in coincidence.items():
        marg[c] += v
    n = sum(marg.values())
    d_o = sum(v for (c, k), v in coincidence.items() if c != k)
    expected = sum(marg[c] * marg[k] for c in marg for k in marg if c != k)
    if expected == 0:
        return 1.0
    return 1.0 - (n - 1) * d_o / expected


@dataclass(frozen=True)
class CorpusStats:
    dialogues: int
    utterances: int
    tokens: int
    vocab: int
    utterances_per_dialogue: float
    tokens_per_utterance: float

    def to_json(self) -> dict:
        return self.__dict__.copy()


def corpus_stats(corpus: Iterable[Dialogue]) -> CorpusStats:
    n_d = n_u = n_t = 0
    vocab: set[str] = set()
    for d in corpus:
        n_d += 1
        for u in d.utterances:
            n_u += 1
            toks = u.text.lower().split()
            n_t += len(toks)
            vocab.update(toks)
    return CorpusStats(n_d, n_u, n_t, len(vocab), n_u / n_d if n_d else 0.0, n_t / n_u if n_u else 0.0)


# -- judges ---------------------------------------------------------------

UTTERANCE_METRICS = ("realism", "safety", "role", "groundedness")
_YES_NO = {"type": "string", "enum": ["yes", "no"]}


def _utterance_schema(metric: str) -> dict:
    inner: dict[str, Any] = {
        "type": "object",
        "required": ["yes_no", "why"],
        "properties": {"yes_no": _YES_NO, "why": {"type": "string"}},
    }
    if metric == "groundedness":
        inner["properties"]["concepts"] = {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["concept", "support"],
                "properties": {
                    "concept": {"type": "string"},
                    "support": {"enum": ["exact", "semantic", "inferable", "none"]},
                },
            },
        }
    if metric == "realism":
        inner["properties"]["matched_criteria"] = {
            "type": "object",
            "additionalProperties": {"type": "array", "items": {"type": "string"}},
        }
    return {"type": "object", "required": ["utt_id", metric], "properties": {"utt_id": {"type": "integer"}, metric: inner}}


SCHEMAS: dict[str, dict] = {
    "logic": {
        "type": "object",
        "required": ["logic"],
        "properties": {
            "logic": {
                "type": "object",
                "required": ["score", "why"],
                "properties": {"score": {"type": "integer", "minimum": 1, "maximum": 5}, "why": {"type": "string"}},
            }
        },
    },
    "ranking": {
        "type": "object",
        "required": ["overall_ranking"],
        "properties": {"overall_ranking": {"type": "array", "items": {"type": "integer"}, "minItems": 1}},
    },
    **{m: _utterance_schema(m) for m in UTTERANCE_METRICS},
}

_FENCE = re.compile(r"^```[a-zA-Z]*\s*|\s*```$")
JSON_REMINDER = "Your reply did not satisfy the required JSON schema ({error}). Return JSON only, exactly matching the schema."


def _load_json(text: str) -> Any:
    body = _FENCE.sub("", text.strip()).strip()
    try:
        return json.loads(body)
    except json.JSONDecodeError:
        start, end = body.find("{"), body.rfind("}")
        if 0 <= start < end:
            return json.loads(body[start : end + 1])
        raise


@dataclass
class JudgeVerdict:
    metric: str
    value: Any
    why: str = ""
    subject: str = ""
    seed: int | None = None
    prompt_hash: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.metric == "logic" and (isinstance(self.value, bool) or self.value not in (1, 2, 3, 4, 5)):
            raise ValueError("logic score must be an integer in 1..5")
        if self.metric in UTTERANCE_METRICS and self.value not in ("yes", "no"):
            raise ValueError(f"{self.metric} verdict must be yes or no")
        if self.metric == "ranking" and sorted(self.value) != list(range(1, len(self.value) + 1)):
            raise ValueError("ranking must be a permutation of 1..N")

    def to_json(self) -> dict:
        doc = {
            "metric": self.metric,
            "subject": self.subject,
            "value": self.value,
            "why": self.why,
            "seed": self.seed,
            "prompt_hash": self.prompt_hash,
        }
        doc.update(self.extra)
        return doc


@dataclass
class RankingVerdict(JudgeVerdict):
    """``value`` is the judge's permutation over *presented* positions; ``presented[i]`` is the
    canonical index shown in position ``i + 1``."""

    presented: list[int] = field(default_factory=list)

    @property
    def canonical_ranking(self) -> list[int]:
        return [self.presented[p - 1] for p in self.value]

    def rank_of(self, canonical_index: int) -> int:
        return self.canonical_ranking.index(canonical_index) + 1

    def to_json(self) -> dict:
        doc = super().to_json()
        doc["presented"] = self.presented
        doc["canonical_ranking"] = self.canonical_ranking
        return doc


def presentation_order(n: int, seed: int) -> list[int]:
    order = list(range(n))
    random.Random(seed).shuffle(order)
    return order


class Judge:
    """Builds the judge prompts, calls the backend and validates each reply against its schema."""

    def __init__(self, backend: ChatBackend, templates: PromptTemplates | None = None, temperature: float = 0.0, model_id: str = "", max_tokens: int = 1024):
        self.backend = backend
        self.templates = templates or PromptTemplates()
        self.temperature = temperature
        self.model_id = model_id
        self.max_tokens = max_tokens

    def _call(self, metric: str, subject: str, user: str, extra_check=None) -> tuple[dict, str]:
        system = self.templates.render("judge_system")
        req = ChatRequest(system, user, self.temperature, self.max_tokens, self.model_id, (), f"judge_{metric}", subject)
        reply = self.backend.chat(req)
        error = self._validate(metric, reply, extra_check)
        if error is None:
            return _load_json(reply), req.prompt_hash()
        retry = ChatRequest(
            system, user, self.temperature, self.max_tokens, self.model_id,
            (JSON_REMINDER.format(error=error),), f"judge_{metric}", subject,
        )
        reply = self.backend.chat(retry)
        error = self._validate(metric, reply, extra_check)
        if error is not None:
            raise JudgeParseError(f"{metric} judge reply invalid after retry: {error}", reply)
        return _load_json(reply), req.prompt_hash()

    @staticmethod
    def _validate(metric: str, reply: str, extra_check) -> str | None:
        try:
            doc = _load_json(reply)
        except json.JSONDecodeError as exc:
            return f"not JSON ({exc.msg} at {exc.pos})"
        try:
            jsonschema.validate(doc, SCHEMAS[metric])
        except jsonschema.ValidationError as exc:
            path = "/".join(str(p) for p in exc.absolute_path) or "$"
            return f"{path}: {exc.message}"
        if extra_check is not None:
            return extra_check(doc)
        return None

    def judge_conversation(self, d: Dialogue, metric: str = "logic") -> JudgeVerdict:
        if metric != "logic":
            raise PreconditionError(f"unknown conversation metric {metric!r}")
        user = self.templates.render("judge_logic", dialogue_text=serialize_dialogue(d))
        doc, h = self._call("logic", d.dialogue_id, user)
        return JudgeVerdict("logic", doc["logic"]["score"], doc["logic"]["why"], d.dialogue_id, None, h)

    def judge_ranking(self, dialogues: Sequence[Dialogue], seed: int, subject: str = "") -> RankingVerdict:
        n = len(dialogues)
        if n < 2:
            raise PreconditionError("ranking needs at least two dialogues")
        order = presentation_order(n, seed)
        cards = "\n\n".join(
            f"Dialogue {pos}:\n{serialize_dialogue(dialogues[idx])}" for pos, idx in enumerate(order, 1)
        )
        user = self.templates.render("judge_ranking", dialogues=cards)

        def is_perm(doc):
            r = doc["overall_ranking"]
            return None if sorted(r) == list(range(1, n + 1)) else f"overall_ranking is not a permutation of 1..{n}"

        doc, h = self._call("ranking", subject, user, is_perm)
        return RankingVerdict("ranking", list(doc["overall_ranking"]), "", subject, seed, h, presented=order)

    def judge_utterance(
        self,
        u: Utterance,
        metric: str,
        *,
        dialogue: Dialogue | None = None,
        record: PatientCareRecord | None = None,
        rules: str = "",
        protocol_text: str = "",
        role_exemplar: str = "",
    ) -> JudgeVerdict:
        if metric not in UTTERANCE_METRICS:
            raise PreconditionError(f"unknown utterance metric {metric!r}")
        values = {"utt_id": u.turn, "role": u.role, "text": u.text}
        if metric == "realism":
            values["rules"] = rules
        elif metric == "safety":
            values["protocol_text"] = protocol_text
        elif metric == "role":
            values["role_exemplar"] = role_exemplar
            values["full_dialogue_text"] = serialize_dialogue(dialogue) if dialogue is not None else ""
        else:
            values["epcr_text"] = record.render() if record is not None else ""
        user = self.templates.render(f"judge_{metric}", **values)
        subject = f"{dialogue.dialogue_id if dialogue else ''}#{u.turn}"

        def same_id(doc):
            return None if doc["utt_id"] == u.turn else f"utt_id {doc['utt_id']} does not match {u.turn}"

        doc, h = self._call(metric, subject, user, same_id)
        body = doc[metric]
        extra = {"concepts": body["concepts"]} if "concepts" in body else {}
        return JudgeVerdict(metric, body["yes_no"], body["why"], subject, None, h, extra)


def verdict_summary(verdicts: Iterable[Mapping[str, Any]], ours: int = 0) -> dict[str, Any]:
    """Recompute Likert means, MRR and yes-rates from judgment-log entries."""
    by_metric: dict[str, list] = {}
    for v in verdicts:
        by_metric.setdefault(v["metric"], []).append(v)
    out: dict[str, Any] = {}
    if "logic" in by_metric:
        scores = [v["value"] for v in by_metric["logic"]]
        out["logic_mean"] = sum(scores) / len(scores)
    if "ranking" in by_metric:
        ranks = [v["canonical_ranking"].index(ours) + 1 for v in by_metric["ranking"]]
        out["mrr"] = mrr(ranks)
    for m in UTTERANCE_METRICS:
        if m in by_metric:
            out[f"{m}_yes_rate"] = yes_rate([v["value"] for v in by_metric[m]])
    return out
