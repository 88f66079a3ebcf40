"""Exact top-k cosine retrieval over exemplar embeddings, with caching.

Corpora stay small enough (at most a couple hundred thousand entries)
that one matrix-vector pass per query is fast and exact, keeping
component ablations attributable to the components themselves.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from . import client as llm

if TYPE_CHECKING:
    from .datasets import McqQuestion
    from .knowledge import KnowledgeEntry

logger = logging.getLogger(__name__)

NORMALIZED_TOL = 1e-6


class IndexingError(ValueError):
    """Bad vectors, misaligned inputs, or invalid retrieval arguments."""


@dataclass(frozen=True)
class EmbeddingVector:
    """Fixed-dimension real vector with finite components."""

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", tuple(float(x) for x in self.values))
        if not self.values:
            raise IndexingError("embedding vector must be non-empty")
        if not all(math.isfinite(x) for x in self.values):
            raise IndexingError("embedding vector has non-finite components")

    @property
    def dim(self) -> int:
        return len(self.values)

    @property
    def norm(self) -> float:
        return math.sqrt(sum(x * x for x in self.values))

    @property
    def normalized(self) -> bool:
        return abs(self.norm - 1.0) <= NORMALIZED_TOL


def normalize(vector: Sequence[float] | EmbeddingVector) -> EmbeddingVector:
    """Scale to unit L2 norm, preserving direction. Zero vectors are errors."""
    values = vector.values if isinstance(vector, EmbeddingVector) else tuple(vector)
    v = EmbeddingVector(values)
    n = v.norm
    if n == 0.0:
        raise IndexingError("cannot normalize a zero vector")
    return EmbeddingVector(tuple(x / n for x in v.values))


@dataclass(frozen=True)
class IndexedCorpus:
    """Entry-aligned matrix of unit vectors plus the recipe that built it."""

    entry_ids: tuple[str, ...]
    matrix: np.ndarray
    embed_model: str
    text_recipe: str

    @property
    def size(self) -> int:
        return len(self.entry_ids)

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])


@dataclass(frozen=True)
class RetrievalHit:
    entry_id: str
    score: float
    rank: int


# Recipes for turning a question into retrieval text. The default embeds
# the stem plus option texts so retrieval matches on the full item.
def _text_question_options(q: "McqQuestion") -> str:
    return q.stem + "\n" + "\n".join(o.text for o in q.options)


def _text_question(q: "McqQuestion") -> str:
    return q.stem


TEXT_RECIPES = {
    "question_options": _text_question_options,
    "question": _text_question,
}


def entry_text(q: "McqQuestion", recipe: str = "question_options") -> str:
    if recipe not in TEXT_RECIPES:
        raise IndexingError(f"unknown text recipe {recipe!r}, expected one of {sorted(TEXT_RECIPES)}")
    return TEXT_RECIPES[recipe](q)


def build_index(
    entries: Sequence["KnowledgeEntry | str"],
    vectors: Sequence[Sequence[float]] | np.ndarray,
    embed_model: str,
    text_recipe: str = "question_options",
) -> IndexedCorpus:
    """Assemble an aligned, row-normalized corpus from entries and vectors."""
    ids = tuple(e if isinstance(e, str) else e.id for e in entries)
    if len(ids) != len(set(ids)):
        raise IndexingError("duplicate entry ids in corpus")
    matrix = np.asarray(vectors, dtype=np.float64)
    if matrix.ndim != 2:
        raise IndexingError(f"vectors must be a uniform 2-d batch, got shape {matrix.shape}")
    if matrix.shape[0] != len(ids):
        raise IndexingError(f"{len(ids)} entries but {matrix.shape[0]} vectors")
    if matrix.shape[1] == 0:
        raise IndexingError("vectors must have at least one dimension")
    if not np.isfinite(matrix).all():
        raise IndexingError("vectors contain non-finite components")
    norms = np.linalg.norm(matrix, axis=1)
    if (norms == 0).any():
        raise IndexingError("vectors contain a zero row")
    return IndexedCorpus(
        entry_ids=ids,
        matrix=matrix / norms[:, None],
        embed_model=embed_model,
        text_recipe=text_recipe,
    )


def top_k(
    corpus: IndexedCorpus,
    query: Sequence[float] | EmbeddingVector,
    k: int,
    exclude_ids: Iterable[str] = (),
) -> list[RetrievalHit]:
    """The k most cosine-similar entries, ties broken by ascending id.

    Returns fewer than k hits only when the corpus (minus exclusions) is
    smaller than k. Deterministic for identical corpus and query.
    """
    if k < 1:
        raise IndexingError("k must be >= 1")
    q = normalize(query)
    if q.dim != corpus.dim:
        raise IndexingError(f"query dim {q.dim} does not match corpus dim {corpus.dim}")
    excluded = set(exclude_ids)
    scores = corpus.matrix @ np.asarray(q.values)
    ids = np.asarray(corpus.entry_ids)
    order = np.lexsort((ids, -scores))
    hits: list[RetrievalHit] = []
    for i in order:
        if corpus.entry_ids[i] in excluded:
            continue
        hits.append(RetrievalHit(corpus.entry_ids[i], float(scores[i]), len(hits) + 1))
        if len(hits) == k:
            break
    return hits


def rerank(
    hits: Sequence[RetrievalHit],
    query_text: str,
    candidate_texts: Sequence[str],
    endpoint: llm.Endpoint,
    policy: llm.RetryPolicy = llm.RetryPolicy(),
) -> list[RetrievalHit]:
    """Reorder hits by cross-encoder relevance, keeping cosine scores.

    Ties fall back to the original embedding rank. Optional stage; the
    optimized configuration runs without it, and on endpoint failure the
    caller is expected to fall back to the embedding order.
    """
    if not hits:
        raise IndexingError("hits must be non-empty")
    if len(candidate_texts) != len(hits):
        raise IndexingError(f"{len(hits)} hits but {len(candidate_texts)} candidate texts")
    scores = llm.rerank_scores(endpoint, endpoint.model, query_text, candidate_texts, policy)
    order = sorted(range(len(hits)), key=lambda i: (-scores[i], hits[i].rank))
    return [
        RetrievalHit(hits[i].entry_id, hits[i].score, new_rank)
        for new_rank, i in enumerate(order, start=1)
    ]


def _cache_key(entry_id: str, embed_model: str, text_recipe: str) -> tuple[str, str, str]:
    return (entry_id, embed_model, text_recipe)


def _load_cache(path: Path) -> dict[tuple[str, str, str], list[float]]:
    cache: dict[tuple[str, str, str], list[float]] = {}
    if not path.exists():
        return cache
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                key = _cache_key(rec["entry_id"], rec["embed_model"], rec["text_recipe"])
                vec = [float(x) for x in rec["vector"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                logger.warning("embedding cache %s line %d is invalid, ignoring", path, lineno)
                continue
            cache[key] = vec
    return cache


def embed_corpus_cached(
    entries: Sequence["KnowledgeEntry"],
    endpoint: llm.Endpoint,
    cache_path: str | Path,
    *,
    text_recipe: str = "question_options",
    policy: llm.RetryPolicy = llm.RetryPolicy(),
    batch_size: int = 64,
) -> np.ndarray:
    """Embeddings for all entries, fetching only uncached ones.

    The cache is keyed by (entry_id, embed_model, text_recipe), so a
    model or recipe change recomputes instead of reusing stale rows.
    New rows are appended after each fetched batch.
    """
    cache_path = Path(cache_path)
    cache_path.parent.mkdir(parents=True, exist_ok=True)
    model = endpoint.model
    cache = _load_cache(cache_path)
    missing = [
        e for e in entries if _cache_key(e.id, model, text_recipe) not in cache
    ]
    if missing:
        logger.info(
            "embedding %d of %d entries (cache %s)", len(missing), len(entries), cache_path
        )
    with cache_path.open("a", encoding="utf-8") as out:
        for start in range(0, len(missing), batch_size):
            batch = missing[start : start + batch_size]
            texts = [entry_text(e.question, text_recipe) for e in batch]
            vectors = llm.embed(endpoint, model, texts, policy)
            for e, vec in zip(batch, vectors):
                cache[_cache_key(e.id, model, text_recipe)] = vec
                out.write(
                    json.dumps(
                        {
                            "entry_id": e.id,
                            "embed_model": model,
                            "text_recipe": text_recipe,
                            "vector": vec,
                        }
                    )
                    + "\n"
                )
    rows = [cache[_cache_key(e.id, model, text_recipe)] for e in entries]
    dims = {len(r) for r in rows}
    if len(dims) > 1:
        raise IndexingError(f"cached embeddings have mixed dimensions: {sorted(dims)}")
    return np.asarray(rows, dtype=np.float64)
