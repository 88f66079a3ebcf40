"""Open-ended benchmark construction and LLM-judge evaluation.

Multiple-choice items are rephrased into open-ended questions whose
reference answer is the gold option text, then free-text candidate
answers are graded by a judge model against that reference. The judge
must end with a strict verdict line; anything else is UNPARSEABLE and
scored incorrect but reported separately.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from . import client as llm
from .datasets import DatasetSplit, McqQuestion
from .metrics import RunRecord
from .prompts import load_template

logger = logging.getLogger(__name__)

# "A)", "(B)", "C." style option-letter markers that must not survive
# rephrasing.
_OPTION_LETTER = re.compile(r"(?<![A-Za-z])\(?[A-D][\).]")
_VERDICT = re.compile(r"verdict:\s*(correct|incorrect)", re.IGNORECASE)


class OpenQaError(ValueError):
    pass


@dataclass(frozen=True)
class OpenQuestion:
    """An open-ended item traceable to its multiple-choice source."""

    id: str
    prompt: str
    reference_answer: str
    source_dataset: str

    def __post_init__(self) -> None:
        if not self.prompt.strip():
            raise OpenQaError(f"open question {self.id}: empty prompt")
        if not self.reference_answer.strip():
            raise OpenQaError(f"open question {self.id}: empty reference answer")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "prompt": self.prompt,
            "reference": self.reference_answer,
            "source_dataset": self.source_dataset,
        }

    @classmethod
    def from_json_dict(cls, d: Mapping[str, Any]) -> "OpenQuestion":
        return cls(
            id=str(d["id"]),
            prompt=d["prompt"],
            reference_answer=d["reference"],
            source_dataset=d.get("source_dataset", "Custom"),
        )


class VerdictValue(str, Enum):
    CORRECT = "CORRECT"
    INCORRECT = "INCORRECT"
    UNPARSEABLE = "UNPARSEABLE"


@dataclass(frozen=True)
class Verdict:
    value: VerdictValue
    judge_rationale: str = ""


def build_rephrase_prompt(q: McqQuestion, model: str = "") -> llm.ChatRequest:
    """Ask the generator to restate the item open-endedly, options hidden."""
    content = load_template("open_rephrase").format(stem=q.stem).strip()
    return llm.ChatRequest(model=model, messages=(llm.Message("user", content),))


def rephrasal_leaks(text: str, q: McqQuestion) -> bool:
    """True when a rephrasal exposes option letters or the gold answer."""
    if _OPTION_LETTER.search(text):
        return True
    return q.gold_text.lower() in text.lower()


def rephrase_dataset(
    split: DatasetSplit,
    endpoint: llm.Endpoint,
    skip_ids: Iterable[str] = (),
    *,
    retry_policy: llm.RetryPolicy = llm.RetryPolicy(),
    concurrency: int = 4,
) -> tuple[list[OpenQuestion], list[str]]:
    """One open question per non-skipped source item, plus flagged ids.

    A rephrasal that leaks an option-letter pattern or the reference
    answer verbatim is retried once, then the item is flagged and
    dropped. Count conservation: len(open) + len(flagged) + len(skipped)
    equals the source split size.
    """
    skip = set(skip_ids)
    pending = [q for q in split.questions if q.id not in skip]
    open_questions: list[OpenQuestion] = []
    flagged: list[str] = []

    def _attempt(questions: Sequence[McqQuestion]) -> list[tuple[McqQuestion, str | None]]:
        requests = [build_rephrase_prompt(q, endpoint.model) for q in questions]
        responses = llm.dispatch_bounded(endpoint, requests, concurrency, retry_policy)
        out = []
        for q, resp in zip(questions, responses):
            out.append((q, None if isinstance(resp, Exception) else resp.text.strip()))
        return out

    retry_queue: list[McqQuestion] = []
    for q, text in _attempt(pending):
        if text is None:
            logger.warning("question %s: rephrasing failed, flagging", q.id)
            flagged.append(q.id)
        elif rephrasal_leaks(text, q):
            retry_queue.append(q)
        else:
            open_questions.append(
                OpenQuestion(q.id, text, q.gold_text, q.dataset)
            )
    if retry_queue:
        for q, text in _attempt(retry_queue):
            if text is None or rephrasal_leaks(text, q):
                logger.warning("question %s: rephrasal still leaks after retry, flagging", q.id)
                flagged.append(q.id)
            else:
                open_questions.append(
                    OpenQuestion(q.id, text, q.gold_text, q.dataset)
                )
    order = {q.id: i for i, q in enumerate(split.questions)}
    open_questions.sort(key=lambda oq: order[oq.id])
    flagged.sort(key=lambda qid: order[qid])
    return open_questions, flagged


def build_judge_prompt(oq: OpenQuestion, candidate: str, model: str = "") -> llm.ChatRequest:
    """Present question, reference, and candidate; demand a verdict line."""
    if not candidate.strip():
        raise OpenQaError("candidate answer must be non-empty")
    content = (
        load_template("open_judge")
        .format(question=oq.prompt, reference=oq.reference_answer, candidate=candidate)
        .strip()
    )
    return llm.ChatRequest(model=model, messages=(llm.Message("user", content),))


def parse_verdict(judge_text: str) -> Verdict:
    """Last VERDICT: line wins; anything else is UNPARSEABLE."""
    matches = _VERDICT.findall(judge_text)
    if not matches:
        return Verdict(VerdictValue.UNPARSEABLE, judge_text)
    return Verdict(VerdictValue(matches[-1].upper()), judge_text)


@dataclass(frozen=True)
class OpenEvalResult:
    open_accuracy: float
    unparseable_rate: float
    mc_accuracy: float
    mc_mode: str
    verdicts: Mapping[str, VerdictValue]

    @property
    def drop_pct(self) -> float:
        """Open-ended accuracy minus multiple-choice accuracy, in points."""
        return (self.open_accuracy - self.mc_accuracy) * 100.0

    def table_row(self, model: str) -> dict[str, Any]:
        return {
            "model": model,
            "mc_accuracy_pct": self.mc_accuracy * 100.0,
            "open_accuracy_pct": self.open_accuracy * 100.0,
            "drop_pct": self.drop_pct,
            "unparseable_pct": self.unparseable_rate * 100.0,
            "mc_mode": self.mc_mode,
        }


def evaluate_open(
    open_questions: Sequence[OpenQuestion],
    candidate_endpoint: llm.Endpoint,
    judge_endpoint: llm.Endpoint,
    mc_run: RunRecord,
    *,
    retry_policy: llm.RetryPolicy = llm.RetryPolicy(),
    concurrency: int = 4,
    transcript_path: str | Path | None = None,
) -> OpenEvalResult:
    """Generate free-text answers, judge each once, and compute the drop.

    UNPARSEABLE verdicts (including judge failures after retries) count
    as incorrect in the accuracy but are reported as their own rate.
    """
    if not open_questions:
        raise OpenQaError("open question set must be non-empty")
    answer_template = load_template("open_answer")
    gen_requests = [
        llm.ChatRequest(
            model=candidate_endpoint.model,
            messages=(llm.Message("user", answer_template.format(question=oq.prompt).strip()),),
        )
        for oq in open_questions
    ]
    answers = llm.dispatch_bounded(candidate_endpoint, gen_requests, concurrency, retry_policy)
    judged_ids: list[str] = []
    judge_requests: list[llm.ChatRequest] = []
    verdicts: dict[str, Verdict] = {}
    candidates: dict[str, str] = {}
    for oq, resp in zip(open_questions, answers):
        if isinstance(resp, Exception) or not resp.text.strip():
            verdicts[oq.id] = Verdict(VerdictValue.UNPARSEABLE, "candidate generation failed")
            continue
        candidates[oq.id] = resp.text.strip()
        judged_ids.append(oq.id)
        judge_requests.append(build_judge_prompt(oq, resp.text.strip(), judge_endpoint.model))
    judge_responses = llm.dispatch_bounded(
        judge_endpoint, judge_requests, concurrency, retry_policy
    )
    for qid, resp in zip(judged_ids, judge_responses):
        if isinstance(resp, Exception):
            verdicts[qid] = Verdict(VerdictValue.UNPARSEABLE, f"judge failed: {resp}")
        else:
            verdicts[qid] = parse_verdict(resp.text)
    if transcript_path is not None:
        transcript_path = Path(transcript_path)
        transcript_path.parent.mkdir(parents=True, exist_ok=True)
        with transcript_path.open("w", encoding="utf-8") as f:
            for oq in open_questions:
                v = verdicts[oq.id]
                f.write(
                    json.dumps(
                        {
                            "id": oq.id,
                            "candidate": candidates.get(oq.id, ""),
                            "verdict": v.value.value,
                            "judge_rationale": v.judge_rationale,
                        },
                        ensure_ascii=False,
                        sort_keys=True,
                    )
                    + "\n"
                )
    total = len(open_questions)
    correct = sum(1 for v in verdicts.values() if v.value is VerdictValue.CORRECT)
    unparseable = sum(1 for v in verdicts.values() if v.value is VerdictValue.UNPARSEABLE)
    return OpenEvalResult(
        open_accuracy=correct / total,
        unparseable_rate=unparseable / total,
        mc_accuracy=mc_run.accuracy,
        mc_mode=mc_run.mode,
        verdicts={qid: v.value for qid, v in verdicts.items()},
    )


def save_open_questions(questions: Sequence[OpenQuestion], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for oq in questions:
            f.write(json.dumps(oq.to_json_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def load_open_questions(path: str | Path) -> list[OpenQuestion]:
    path = Path(path)
    questions = []
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                questions.append(OpenQuestion.from_json_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, OpenQaError) as e:
                raise OpenQaError(f"{path} line {lineno}: {e}") from e
    return questions


def check_reference_integrity(
    open_questions: Sequence[OpenQuestion], split: DatasetSplit
) -> None:
    """Every reference answer must equal its source gold option verbatim."""
    by_id = split.by_id()
    for oq in open_questions:
        src = by_id.get(oq.id)
        if src is None:
            raise OpenQaError(f"open question {oq.id} has no source in split {split.name}")
        if oq.reference_answer != src.gold_text:
            raise OpenQaError(
                f"open question {oq.id}: reference differs from source gold option text"
            )
