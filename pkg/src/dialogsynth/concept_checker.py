"""Two-stage alignment of source and generated concept sets.

Stage one pairs identical normalized surfaces. Stage two embeds whatever is
left and greedily pairs the most similar remaining (src, tgt) pairs whose
cosine similarity clears the threshold. Unpaired source concepts are missing
(FN); unpaired target concepts are hallucinated (FP).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import CheckerError, ContractError
from .extractor import Concept, ConceptSet

Embedder = Callable[[Sequence[str]], Sequence[Sequence[float]]]


@dataclass(frozen=True)
class MatchConfig:
    similarity_threshold: float = 0.8
    pairing_policy: str = "greedy"

    def __post_init__(self):
        if not 0.0 < self.similarity_threshold <= 1.0:
            raise ValueError("similarity_threshold must lie in (0, 1]")
        if self.pairing_policy != "greedy":
            raise ValueError(f"unsupported pairing policy {self.pairing_policy!r}")


@dataclass(frozen=True)
class ConceptMatch:
    src: Concept
    tgt: Concept
    stage: str
    similarity: float = 1.0


@dataclass(frozen=True)
class ConceptReport:
    matched: tuple[ConceptMatch, ...] = ()
    missing: ConceptSet = field(default_factory=ConceptSet)
    hallucinated: ConceptSet = field(default_factory=ConceptSet)

    @property
    def ok(self) -> bool:
        return not len(self.missing) and not len(self.hallucinated)

    def to_json(self) -> dict:
        return {
            "matched": [
                {"src": m.src.surface, "tgt": m.tgt.surface, "stage": m.stage, "similarity": m.similarity}
                for m in self.matched
            ],
            "missing": sorted(self.missing.surfaces()),
            "hallucinated": sorted(self.hallucinated.surfaces()),
        }


def _embed_matrix(embed: Embedder, texts: list[str]) -> np.ndarray:
    try:
        vectors = embed(texts)
    except Exception as exc:  # provider failures surface uniformly; caller decides on retry
        raise CheckerError(f"embedding provider failed: {exc}") from exc
    if len(vectors) != len(texts):
        raise ContractError(f"embedder returned {len(vectors)} vectors for {len(texts)} texts")
    dims = {len(v) for v in vectors}
    if len(dims) != 1:
        raise ContractError(f"embedder returned vectors of mixed dimension {sorted(dims)}")
    mat = np.asarray(vectors, dtype=float)
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return mat / norms


def match_concepts(
    src: ConceptSet,
    tgt: ConceptSet,
    embed: Embedder | None = None,
    cfg: MatchConfig = MatchConfig(),
) -> ConceptReport:
    tgt_by_surface: dict[str, Concept] = {}
    for c in tgt:
        tgt_by_surface.setdefault(c.surface, c)

    matched: list[ConceptMatch] = []
    used_tgt: set[str] = set()
    rest_src: list[Concept] = []
    for c in src:
        t = tgt_by_surface.get(c.surface)
        if t is not None and t.key not in used_tgt:
            matched.append(ConceptMatch(c, t, "syntactic", 1.0))
            used_tgt.add(t.key)
        else:
            rest_src.append(c)
    rest_tgt = [c for c in tgt if c.key not in used_tgt]

    if rest_src and rest_tgt and embed is not None:
        mat = _embed_matrix(embed, [c.surface for c in rest_src] + [c.surface for c in rest_tgt])
        sims = mat[: len(rest_src)] @ mat[len(rest_src) :].T
        i_idx, j_idx = np.nonzero(sims >= cfg.similarity_threshold)
        pairs = sorted(
            zip(i_idx.tolist(), j_idx.tolist()),
            key=lambda ij: (-sims[ij], rest_src[ij[0]].surface, rest_tgt[ij[1]].surface),
        )
        free_src, free_tgt = set(range(len(rest_src))), set(range(len(rest_tgt)))
        for i, j in pairs:
            if i in free_src and j in free_tgt:
                free_src.discard(i)
                free_tgt.discard(j)
                matched.append(ConceptMatch(rest_src[i], rest_tgt[j], "semantic", float(sims[i, j])))
        rest_src = [c for k, c in enumerate(rest_src) if k in free_src]
        rest_tgt = [c for k, c in enumerate(rest_tgt) if k in free_tgt]

    return ConceptReport(tuple(matched), ConceptSet(rest_src), ConceptSet(rest_tgt))


def factuality_pr(rep: ConceptReport) -> tuple[float, float]:
    """Concept precision and recall; an empty denominator counts as perfect."""
    m = len(rep.matched)
    fp = len(rep.hallucinated)
    fn = len(rep.missing)
    precision = m / (m + fp) if m + fp else 1.0
    recall = m / (m + fn) if m + fn else 1.0
    return precision, recall


def render_feedback(rep: ConceptReport) -> str:
    if rep.ok:
        return "Concept check passed: no missing or hallucinated concepts."
    out = []
    if len(rep.missing):
        out.append("Missing concepts (present in the record but absent from your output):")
        out += [f"{i}. {s}" for i, s in enumerate(sorted(rep.missing.surfaces()), 1)]
    if len(rep.hallucinated):
        out.append("Hallucinated concepts (not supported by the record):")
        out += [f"{i}. {s}" for i, s in enumerate(sorted(rep.hallucinated.surfaces()), 1)]
    return "\n".join(out)
