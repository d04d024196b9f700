"""Deterministic concept extraction: structured record fields plus dictionary NER over free text."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .corpus import Dialogue, DialoguePlan, PatientCareRecord

log = logging.getLogger(__name__)

# Semantic-type allowlist (UMLS TUIs, treated as opaque tags).
DEFAULT_ALLOWED_TAGS = frozenset(
    "T058 T059 T060 T061 T184 T033 T034 T037 T019 T020 T046 T047 T048 T191 T049 T050 "
    "T074 T203 T200 T192 T075 T120 T121 T195 T122 T123 T125 T126 T127 T129 T130 T131 "
    "T104 T109 T114 T116 T197 T196 T168".split()
)
# Structured-field values carry this tag; it always passes the filter.
FIELD_TAG = "FIELD"

_TOKEN_RE = re.compile(r"\w+(?:['\-]\w+)*|[^\w\s]")


def normalize_term(text: str) -> str:
    return " ".join(text.lower().split())


def tokenize(text: str) -> list[tuple[str, int, int]]:
    return [(m.group().lower(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


@dataclass(frozen=True)
class Concept:
    surface: str
    canonical_id: str | None = None
    semantic_tags: frozenset[str] = frozenset()
    source: str = ""

    def __post_init__(self):
        if not self.surface:
            raise ValueError("concept surface must be non-empty")

    @property
    def key(self) -> str:
        return self.canonical_id or self.surface


class ConceptSet:
    """Insertion-ordered set of concepts deduplicated by canonical id (or surface)."""

    __slots__ = ("_items",)

    def __init__(self, concepts: Iterable[Concept] = ()):
        items: dict[str, Concept] = {}
        for c in concepts:
            items.setdefault(c.key, c)
        self._items = items

    def __iter__(self) -> Iterator[Concept]:
        return iter(self._items.values())

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, item: object) -> bool:
        if isinstance(item, Concept):
            return item.key in self._items
        return item in self._items

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ConceptSet) and set(self._items) == set(other._items)

    def __repr__(self) -> str:
        return f"ConceptSet({sorted(self.surfaces())})"

    def surfaces(self) -> set[str]:
        return {c.surface for c in self}

    def keys(self) -> set[str]:
        return set(self._items)


@dataclass(frozen=True)
class LexiconEntry:
    canonical_id: str | None
    tags: frozenset[str]


@dataclass(frozen=True)
class Lexicon:
    entries: Mapping[str, LexiconEntry]
    allowed_tags: frozenset[str] = DEFAULT_ALLOWED_TAGS
    _index: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.allowed_tags:
            raise ValueError("allowed_tags must be non-empty")
        max_len = 0
        for term, entry in self.entries.items():
            if not term or term != normalize_term(term):
                raise ValueError(f"lexicon term {term!r} is not normalized")
            toks = tuple(t for t, _, _ in tokenize(term))
            if not toks:
                raise ValueError(f"lexicon term {term!r} has no tokens")
            self._index[toks] = (term, entry)
            max_len = max(max_len, len(toks))
        object.__setattr__(self, "_max_len", max_len)

    def __len__(self) -> int:
        return len(self.entries)

    def with_field_terms(self, terms: Iterable[str]) -> "Lexicon":
        """Copy extended with structured-field values, which bypass the tag filter."""
        entries = dict(self.entries)
        for raw in terms:
            term = normalize_term(raw)
            if not term or not tokenize(term):
                continue
            base = entries.get(term)
            if base is None:
                entries[term] = LexiconEntry(None, frozenset({FIELD_TAG}))
            else:
                entries[term] = LexiconEntry(base.canonical_id, base.tags | {FIELD_TAG})
        return Lexicon(entries, self.allowed_tags | {FIELD_TAG})

    def scan(self, text: str, source: str = "text") -> list[Concept]:
        """Longest-span-first, then leftmost, non-overlapping dictionary matches."""
        toks = tokenize(text)
        candidates = []
        for i in range(len(toks)):
            for n in range(1, min(self._max_len, len(toks) - i) + 1):
                hit = self._index.get(tuple(t for t, _, _ in toks[i : i + n]))
                if hit is not None:
                    start, end = toks[i][1], toks[i + n - 1][2]
                    candidates.append((end - start, start, i, i + n, hit))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        taken = [False] * len(toks)
        accepted = []
        for _, start, a, b, (term, entry) in candidates:
            if any(taken[a:b]):
                continue
            if not (entry.tags & self.allowed_tags):
                continue
            for k in range(a, b):
                taken[k] = True
            accepted.append((start, Concept(term, entry.canonical_id, entry.tags, source)))
        accepted.sort(key=lambda x: x[0])
        return [c for _, c in accepted]


def load_lexicon(path: str | Path | None = None, allowed_tags: Iterable[str] | None = None) -> Lexicon:
    """Read ``term<TAB>canonical_id<TAB>tag[,tag...]`` lines; ``None`` loads the bundled starter set."""
    if path is None:
        text = resources.files("dialogsynth.data").joinpath("ems_lexicon.tsv").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    entries: dict[str, LexiconEntry] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"lexicon line {lineno}: expected 3 tab-separated columns")
        term, cid, tags = parts
        tagset = frozenset(t.strip() for t in tags.split(",") if t.strip())
        if not tagset:
            raise ValueError(f"lexicon line {lineno}: no semantic tags")
        entries[normalize_term(term)] = LexiconEntry(cid.strip() or None, tagset)
    allowed = DEFAULT_ALLOWED_TAGS if allowed_tags is None else frozenset(allowed_tags)
    return Lexicon(entries, allowed)


def structured_values(record: PatientCareRecord) -> list[tuple[str, str]]:
    """(field name, value) pairs that are ground-truth concepts by construction."""
    out = []
    if record.chief_complaint.strip():
        out.append(("chief_complaint", record.chief_complaint))
    out += [("current_medications", m) for m in record.current_medications if m.strip()]
    out += [("allergies", a) for a in record.allergies if a.strip()]
    out += [(f"vitals.{v.kind}", v.value) for v in record.vitals if v.value.strip()]
    out += [("interventions", iv.description) for iv in record.interventions if iv.description.strip()]
    return out


def record_lexicon(record: PatientCareRecord, lex: Lexicon) -> Lexicon:
    """Lexicon used to read generated text back against ``record``."""
    return lex.with_field_terms(v for _, v in structured_values(record))


def extract_concepts(source: PatientCareRecord | Dialogue | DialoguePlan | str, lex: Lexicon) -> ConceptSet:
    if isinstance(source, PatientCareRecord):
        found: list[Concept] = []
        for name, value in structured_values(source):
            term = normalize_term(value)
            entry = lex.entries.get(term)
            if entry is not None:
                found.append(Concept(term, entry.canonical_id, entry.tags, name))
            else:
                found.append(Concept(term, None, frozenset({FIELD_TAG}), name))
        found += lex.scan(source.medical_history, "medical_history")
        found += lex.scan(source.narrative, "narrative")
        return ConceptSet(found)
    if isinstance(source, Dialogue):
        return ConceptSet(c for u in source.utterances for c in lex.scan(u.text, f"turn {u.turn}"))
    if isinstance(source, DialoguePlan):
        return ConceptSet(
            c for i, step in enumerate(source.steps, 1) for e in step.evidence for c in lex.scan(e, f"plan step {i}")
        )
    return ConceptSet(lex.scan(source))


_GCS_RE = re.compile(r"\bGCS\b(?:\s*:\s*|\s+of\s+|\s+)(\d+)", re.IGNORECASE)


def extract_gcs(record: PatientCareRecord | str) -> int | None:
    text = record.render() if isinstance(record, PatientCareRecord) else record
    m = _GCS_RE.search(text)
    if m is None:
        return None
    value = int(m.group(1))
    if not 3 <= value <= 15:
        log.warning("discarding out-of-range GCS value %d", value)
        return None
    return value


def select_branch(gcs: int | None) -> str:
    if gcs is not None and gcs <= 8:
        return "comatose"
    return "conscious"
