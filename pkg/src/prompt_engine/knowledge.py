"""Build, persist, and load reasoning-augmented exemplar databases.

A database is one JSONL file of solved questions with full reasoning
traces. Static databases (cot, tot, thinking) are generated from
training splits with the gold answer shown to the generator; the runtime
variant answers a validation split cold and keeps only the entries it
got right. Retrieval excludes unverified entries by default so few-shot
context never argues for a wrong answer.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import client as llm
from .datasets import DatasetError, McqQuestion, DatasetSplit
from .engine import extract_answer
from .prompts import format_options, load_template

logger = logging.getLogger(__name__)

_THINK_OPEN = "<think>"
_THINK_CLOSE = "</think>"
_ANSWER_DECL = re.compile(r"(?:final\s+answer|answer\s+is|answer\s*:)", re.IGNORECASE)


class Strategy(str, Enum):
    COT = "cot"
    TOT = "tot"
    THINKING = "thinking"
    RUNTIME = "runtime"


class KnowledgeError(ValueError):
    """Invalid entry, corrupt database file, or bad build arguments."""


@dataclass(frozen=True)
class KnowledgeEntry:
    """One retrievable exemplar: a solved question with its trace.

    ``verified`` means the generation concluded the gold answer. Entries
    that produced no parseable letter carry parse_failed=True and an
    empty answer label; they are never retrievable.
    """

    id: str
    question: McqQuestion
    reasoning: str
    answer_label: str
    strategy: Strategy
    generator_model: str
    verified: bool
    parse_failed: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if not self.id:
            raise KnowledgeError("entry id must be non-empty")
        if not self.reasoning.strip():
            raise KnowledgeError(f"entry {self.id}: reasoning must be non-empty")
        if self.parse_failed:
            if self.answer_label:
                raise KnowledgeError(
                    f"entry {self.id}: parse-failed entries carry no answer label"
                )
            if self.verified:
                raise KnowledgeError(f"entry {self.id}: parse-failed entries cannot be verified")
            return
        if self.answer_label not in self.question.labels:
            raise KnowledgeError(
                f"entry {self.id}: answer label {self.answer_label!r} not among options "
                f"{''.join(self.question.labels)}"
            )
        if self.strategy is Strategy.THINKING:
            open_at = self.reasoning.find(_THINK_OPEN)
            close_at = self.reasoning.find(_THINK_CLOSE)
            if open_at < 0 or close_at < 0 or close_at <= open_at:
                raise KnowledgeError(
                    f"entry {self.id}: thinking entries need a {_THINK_OPEN}...{_THINK_CLOSE} trace segment"
                )
            if not self.reasoning[close_at + len(_THINK_CLOSE) :].strip():
                raise KnowledgeError(
                    f"entry {self.id}: thinking entries need a final-answer segment after {_THINK_CLOSE}"
                )

    def to_json_dict(self) -> dict:
        d = {
            "id": self.id,
            "question": self.question.to_json_dict(),
            "reasoning": self.reasoning,
            "answer": self.answer_label,
            "strategy": self.strategy.value,
            "generator_model": self.generator_model,
            "verified": self.verified,
        }
        if self.parse_failed:
            d["parse_failed"] = True
        return d

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "KnowledgeEntry":
        for key in ("id", "question", "reasoning", "answer", "strategy", "generator_model", "verified"):
            if key not in d:
                raise KnowledgeError(f"missing field {key!r}")
        try:
            question = McqQuestion.from_json_dict(d["question"])
        except DatasetError as e:
            raise KnowledgeError(f"invalid question: {e}") from e
        return cls(
            id=str(d["id"]),
            question=question,
            reasoning=d["reasoning"],
            answer_label=d["answer"],
            strategy=Strategy(d["strategy"]),
            generator_model=str(d["generator_model"]),
            verified=bool(d["verified"]),
            parse_failed=bool(d.get("parse_failed", False)),
        )


_DB_TEMPLATES = {
    Strategy.COT: "db_cot",
    Strategy.TOT: "db_tot",
    Strategy.THINKING: "db_thinking",
    Strategy.RUNTIME: "db_runtime",
}


def _build_db_prompt(q: McqQuestion, strategy: Strategy, model: str) -> llm.ChatRequest:
    template = load_template(_DB_TEMPLATES[strategy])
    if strategy is Strategy.RUNTIME:
        content = template.format(stem=q.stem, options=format_options(q))
    else:
        content = template.format(
            stem=q.stem,
            options=format_options(q),
            answer_label=q.gold_label,
            answer_text=q.gold_text,
        )
    return llm.ChatRequest(model=model, messages=(llm.Message("user", content.strip()),))


def build_cot_prompt(q: McqQuestion, model: str = "") -> llm.ChatRequest:
    """Option-by-option analysis prompt that shows the correct answer."""
    return _build_db_prompt(q, Strategy.COT, model)


def build_tot_prompt(q: McqQuestion, model: str = "") -> llm.ChatRequest:
    """Three collaborating experts framing, answer shown."""
    return _build_db_prompt(q, Strategy.TOT, model)


def build_thinking_prompt(q: McqQuestion, model: str = "") -> llm.ChatRequest:
    """Reasoning-model prompt; the response carries a think trace plus answer."""
    return _build_db_prompt(q, Strategy.THINKING, model)


def _normalize_thinking(text: str) -> str | None:
    """Ensure a think segment and a final-answer segment both exist.

    Models that emit <think> markers are stored as-is; otherwise the text
    before the final answer declaration becomes the trace. Returns None
    when no final-answer segment can be located.
    """
    if _THINK_OPEN in text and _THINK_CLOSE in text:
        close_at = text.find(_THINK_CLOSE)
        if text[close_at + len(_THINK_CLOSE) :].strip():
            return text
        return None
    last = None
    for m in _ANSWER_DECL.finditer(text):
        last = m
    if last is None:
        return None
    # cut at the start of the line holding the final declaration so the
    # whole answer sentence lands in the final-answer segment
    cut = text.rfind("\n", 0, last.start()) + 1
    trace = text[:cut].strip() or "(no separate trace)"
    return f"{_THINK_OPEN}\n{trace}\n{_THINK_CLOSE}\n{text[cut:].strip()}"


def generate_entries(
    split: DatasetSplit,
    strategy: Strategy | str,
    endpoint: llm.Endpoint,
    *,
    keep: str | None = None,
    retry_policy: llm.RetryPolicy = llm.RetryPolicy(),
    existing: Iterable[KnowledgeEntry] = (),
    concurrency: int = 4,
    max_tokens: int = 2048,
    temperature: float = 0.0,
) -> list[KnowledgeEntry]:
    """Generate one entry attempt per question not already in the store.

    ``keep`` is "all" (default for static strategies: unverified entries
    are stored but excluded from retrieval) or "verified_only" (default
    and forced sensible choice for runtime databases). Returns only the
    new entries; append them to the existing store to resume later.
    """
    strategy = Strategy(strategy)
    if not split.questions:
        raise KnowledgeError("cannot build a database from an empty split")
    if keep is None:
        keep = "verified_only" if strategy is Strategy.RUNTIME else "all"
    if keep not in ("all", "verified_only"):
        raise KnowledgeError(f"unknown keep policy {keep!r}")
    done = {e.id for e in existing}
    pending = [q for q in split.questions if q.id not in done]
    if not pending:
        logger.info("database already covers all %d questions", len(split.questions))
        return []
    requests = []
    for q in pending:
        req = _build_db_prompt(q, strategy, endpoint.model)
        requests.append(
            dataclasses.replace(req, max_tokens=max_tokens, temperature=temperature)
        )
    responses = llm.dispatch_bounded(endpoint, requests, concurrency, retry_policy)
    entries: list[KnowledgeEntry] = []
    for q, resp in zip(pending, responses):
        if isinstance(resp, Exception):
            logger.warning("question %s: generation failed, skipping: %s", q.id, resp)
            continue
        text = resp.text.strip()
        if not text:
            logger.warning("question %s: empty generation, skipping", q.id)
            continue
        label = extract_answer(text, q.labels)
        reasoning = text
        if label is not None and strategy is Strategy.THINKING:
            normalized = _normalize_thinking(text)
            if normalized is None:
                label = None
            else:
                reasoning = normalized
        if label is None:
            entry = KnowledgeEntry(
                id=q.id,
                question=q,
                reasoning=text,
                answer_label="",
                strategy=strategy,
                generator_model=endpoint.model,
                verified=False,
                parse_failed=True,
            )
        else:
            entry = KnowledgeEntry(
                id=q.id,
                question=q,
                reasoning=reasoning,
                answer_label=label,
                strategy=strategy,
                generator_model=endpoint.model,
                verified=label == q.gold_label,
            )
        if keep == "verified_only" and not entry.verified:
            continue
        entries.append(entry)
    return entries


def runtime_validation_db(
    split: DatasetSplit,
    endpoint: llm.Endpoint,
    **kwargs,
) -> list[KnowledgeEntry]:
    """Answer a validation split at runtime and keep the verified entries."""
    return generate_entries(split, Strategy.RUNTIME, endpoint, **kwargs)


def save_db(entries: Sequence[KnowledgeEntry], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for e in entries:
            f.write(json.dumps(e.to_json_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def append_db(entries: Sequence[KnowledgeEntry], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as f:
        for e in entries:
            f.write(json.dumps(e.to_json_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def load_db(path: str | Path) -> list[KnowledgeEntry]:
    """Load and re-validate a database; any bad line fails with its number."""
    path = Path(path)
    if not path.exists():
        raise KnowledgeError(f"database file does not exist: {path}")
    entries = []
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                entries.append(KnowledgeEntry.from_json_dict(json.loads(line)))
            except (json.JSONDecodeError, KnowledgeError, DatasetError, ValueError) as e:
                raise KnowledgeError(f"{path} line {lineno}: {e}") from e
    return entries


def retrieval_entries(
    entries: Iterable[KnowledgeEntry], include_unverified: bool = False
) -> list[KnowledgeEntry]:
    """The subset of a database that may be placed into prompts."""
    return [
        e
        for e in entries
        if not e.parse_failed and (e.verified or include_unverified)
    ]


# Evaluations on datasets without their own training split fall back to
# the MedMCQA-derived database.
_DB_SOURCES = {
    "MedQA": "MedQA",
    "MedMCQA": "MedMCQA",
    "CareQA": "MedMCQA",
    "MMLU-med": "MedMCQA",
    "Custom": "Custom",
}


def resolve_database(eval_dataset: str) -> str:
    """Which dataset's database serves an evaluation on ``eval_dataset``."""
    if eval_dataset not in _DB_SOURCES:
        raise KnowledgeError(
            f"unknown dataset {eval_dataset!r}, expected one of {sorted(_DB_SOURCES)}"
        )
    return _DB_SOURCES[eval_dataset]
