"""Ensemble evaluation: N generations per question, extraction, voting.

Modes: zero_shot (single direct answer), cot (single reasoned answer),
sc_cot (self-consistency over N sampled reasoning paths), and sc_cot_cr
(sc_cot plus retrieved exemplars in the prompt). Votes are cast in each
member's shuffled option space and mapped back to canonical labels
before the majority is taken, so the aggregate is shuffle-invariant.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from . import client as llm
from .datasets import DatasetSplit, McqQuestion
from .index import IndexedCorpus, entry_text, rerank, top_k
from .metrics import EnergyProfile, PriceTable, RunRecord, compute_cost, estimate_energy
from .prompts import PromptBundle, PromptConfig, assemble_prompt, derive_seed, load_template

logger = logging.getLogger(__name__)

MODES = ("zero_shot", "cot", "sc_cot", "sc_cot_cr")

# Sentinel for votes that produced no parseable letter. Serialized as
# null in results files.
ABSTAIN = None

_DECLARATION = re.compile(r"final\s+answer|answer\s+is|answer\s*:", re.IGNORECASE)
_LETTER = re.compile(r"(?<![A-Za-z])\(?\s?([A-Za-z])\s?\)?(?![A-Za-z])")
_LETTER_LINE = re.compile(r"^\W*([A-Za-z])\W*$")


class EngineError(RuntimeError):
    pass


class QuestionTransportError(EngineError):
    """Every ensemble member failed at the transport level."""


@dataclass(frozen=True)
class GenerationParams:
    mode: str = "sc_cot"
    n_ensembles: int = 5
    temperature: float | None = None
    max_tokens: int = 2048
    k_exemplars: int = 5
    shuffle_choices: bool = True
    shuffle_exemplars: bool = True

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        if self.n_ensembles < 1:
            raise ValueError("n_ensembles must be >= 1")
        if self.mode == "zero_shot" and self.n_ensembles != 1:
            raise ValueError("zero_shot mode requires n_ensembles=1")
        if self.k_exemplars < 0:
            raise ValueError("k_exemplars must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")

    @property
    def resolved_temperature(self) -> float:
        """Sampling temperature: 1.0 for multi-sample runs, else greedy."""
        if self.temperature is not None:
            return self.temperature
        return 1.0 if self.n_ensembles > 1 else 0.0


@dataclass(frozen=True)
class EnsembleVote:
    ensemble_index: int
    raw_text: str
    extracted_label: str | None
    canonical_label: str | None
    usage: llm.TokenUsage
    error: str | None = None


@dataclass(frozen=True)
class QuestionResult:
    question_id: str
    gold_label: str
    votes: tuple[EnsembleVote, ...]
    final_label: str | None
    correct: bool
    usage_total: llm.TokenUsage

    @classmethod
    def from_votes(
        cls, question_id: str, gold_label: str, votes: Sequence[EnsembleVote]
    ) -> "QuestionResult":
        final = majority_vote(votes)
        usage = llm.TokenUsage()
        for v in votes:
            usage = usage + v.usage
        return cls(
            question_id=question_id,
            gold_label=gold_label,
            votes=tuple(votes),
            final_label=final,
            correct=final == gold_label,
            usage_total=usage,
        )

    def to_json_dict(self) -> dict[str, Any]:
        votes = []
        for v in self.votes:
            row: dict[str, Any] = {
                "idx": v.ensemble_index,
                "label": v.extracted_label,
                "canonical": v.canonical_label,
                "usage": {
                    "prompt_tokens": v.usage.prompt_tokens,
                    "completion_tokens": v.usage.completion_tokens,
                },
            }
            if v.error is not None:
                row["error"] = v.error
            votes.append(row)
        return {
            "question_id": self.question_id,
            "final": self.final_label,
            "gold": self.gold_label,
            "correct": self.correct,
            "votes": votes,
        }

    @classmethod
    def from_json_dict(cls, d: Mapping[str, Any]) -> "QuestionResult":
        votes = tuple(
            EnsembleVote(
                ensemble_index=int(v["idx"]),
                raw_text="",
                extracted_label=v["label"],
                canonical_label=v["canonical"],
                usage=llm.TokenUsage(
                    int(v["usage"]["prompt_tokens"]), int(v["usage"]["completion_tokens"])
                ),
                error=v.get("error"),
            )
            for v in d["votes"]
        )
        return cls.from_votes(str(d["question_id"]), str(d["gold"]), votes)


def extract_answer(text: str, labels: Iterable[str]) -> str | None:
    """Pull the chosen letter out of a generation, or ABSTAIN.

    Precedence: (1) the last explicit answer declaration ("answer is",
    "answer:", "final answer") followed within 10 characters by a valid
    letter, optionally parenthesized; (2) the last line consisting solely
    of a valid letter with optional punctuation; (3) ABSTAIN. Matching is
    case-insensitive.
    """
    valid = {l.upper() for l in labels}
    if not valid:
        raise ValueError("labels must be non-empty")
    best: str | None = None
    for decl in _DECLARATION.finditer(text):
        window = text[decl.end() : decl.end() + 10]
        for m in _LETTER.finditer(window):
            letter = m.group(1).upper()
            if letter in valid:
                best = letter
                break
    if best is not None:
        return best
    for line in reversed(text.splitlines()):
        m = _LETTER_LINE.match(line)
        if m and m.group(1).upper() in valid:
            return m.group(1).upper()
    return ABSTAIN


def majority_vote(votes: Sequence[EnsembleVote]) -> str | None:
    """Plurality over canonical non-abstain labels.

    Ties go to the tied label whose earliest supporting ensemble index is
    smallest. All-abstain returns None (scored incorrect upstream).
    """
    if not votes:
        raise ValueError("votes must be non-empty")
    counts: dict[str, int] = {}
    first_idx: dict[str, int] = {}
    for v in votes:
        if v.canonical_label is None:
            continue
        counts[v.canonical_label] = counts.get(v.canonical_label, 0) + 1
        first_idx.setdefault(v.canonical_label, v.ensemble_index)
    if not counts:
        return None
    return min(counts, key=lambda lab: (-counts[lab], first_idx[lab]))


@dataclass
class BenchmarkContext:
    """Everything run_question needs beyond the question itself."""

    generator: llm.Endpoint
    run_seed: int = 0
    retry_policy: llm.RetryPolicy = field(default_factory=llm.RetryPolicy)
    concurrency: int = 4
    dataset: str = "Custom"
    corpus: IndexedCorpus | None = None
    entries_by_id: Mapping[str, Any] | None = None
    embedder: llm.Endpoint | None = None
    reranker: llm.Endpoint | None = None
    rerank_candidates: int = 0  # 0 means 4x the exemplar count
    text_recipe: str = "question_options"
    price_table: PriceTable | None = None
    energy_profile: EnergyProfile | None = None
    out_dir: Path | None = None
    config_digest: str = ""


def _retrieve_exemplars(q: McqQuestion, k: int, ctx: BenchmarkContext) -> list[Any]:
    if ctx.corpus is None or ctx.entries_by_id is None or ctx.embedder is None:
        raise EngineError(
            "mode sc_cot_cr requires a knowledge database, an index, and an embedder endpoint"
        )
    if k == 0:
        return []
    text = entry_text(q, ctx.text_recipe)
    [vector] = llm.embed(ctx.embedder, ctx.embedder.model, [text], ctx.retry_policy)
    depth = k if ctx.reranker is None else max(k, ctx.rerank_candidates or 4 * k)
    hits = top_k(ctx.corpus, vector, depth, exclude_ids={q.id})
    if ctx.reranker is not None and hits:
        candidate_texts = [
            entry_text(ctx.entries_by_id[h.entry_id].question, ctx.text_recipe) for h in hits
        ]
        try:
            hits = rerank(hits, text, candidate_texts, ctx.reranker, ctx.retry_policy)
        except llm.ClientError as e:
            logger.warning(
                "question %s: reranker failed, falling back to embedding order: %s", q.id, e
            )
    return [ctx.entries_by_id[h.entry_id] for h in hits[:k]]


def run_question(
    q: McqQuestion, params: GenerationParams, ctx: BenchmarkContext
) -> QuestionResult:
    """Evaluate one question: retrieve once, generate N times, vote.

    Individual generation failures become abstain votes carrying an error
    marker; the question itself fails only when every member failed in
    transport.
    """
    exemplars = (
        _retrieve_exemplars(q, params.k_exemplars, ctx) if params.mode == "sc_cot_cr" else []
    )
    pcfg = PromptConfig(
        k_exemplars=params.k_exemplars if params.mode == "sc_cot_cr" else 0,
        shuffle_choices=params.shuffle_choices,
        shuffle_exemplars=params.shuffle_exemplars,
        instruction_style="direct" if params.mode == "zero_shot" else "cot",
    )
    bundles: list[PromptBundle] = []
    requests: list[llm.ChatRequest] = []
    for i in range(params.n_ensembles):
        member_seed = derive_seed(ctx.run_seed, q.id, i)
        bundle = assemble_prompt(q, exemplars, member_seed, pcfg, ensemble_index=i)
        bundles.append(bundle)
        requests.append(
            llm.ChatRequest(
                model=ctx.generator.model,
                messages=bundle.messages,
                temperature=params.resolved_temperature,
                max_tokens=params.max_tokens,
                seed=member_seed % (2**31),
            )
        )
    responses = llm.dispatch_bounded(ctx.generator, requests, ctx.concurrency, ctx.retry_policy)
    votes: list[EnsembleVote] = []
    failures = 0
    for bundle, resp in zip(bundles, responses):
        if isinstance(resp, Exception):
            failures += 1
            votes.append(
                EnsembleVote(
                    ensemble_index=bundle.ensemble_index,
                    raw_text="",
                    extracted_label=ABSTAIN,
                    canonical_label=ABSTAIN,
                    usage=llm.TokenUsage(),
                    error=str(resp),
                )
            )
            continue
        extracted = extract_answer(resp.text, q.labels)
        canonical = (
            bundle.target_permutation.remap_label(extracted) if extracted is not None else ABSTAIN
        )
        votes.append(
            EnsembleVote(
                ensemble_index=bundle.ensemble_index,
                raw_text=resp.text,
                extracted_label=extracted,
                canonical_label=canonical,
                usage=resp.usage,
            )
        )
    if failures == params.n_ensembles:
        raise QuestionTransportError(
            f"question {q.id}: all {failures} generations failed; last error: {votes[-1].error}"
        )
    return QuestionResult.from_votes(q.id, q.gold_label, votes)


def _load_existing_results(path: Path) -> dict[str, QuestionResult]:
    existing: dict[str, QuestionResult] = {}
    if not path.exists():
        return existing
    with path.open("r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            result = QuestionResult.from_json_dict(json.loads(line))
            existing[result.question_id] = result
    if existing:
        logger.info("resuming: %d questions already answered in %s", len(existing), path)
    return existing


def run_benchmark(
    split: DatasetSplit,
    params: GenerationParams,
    ctx: BenchmarkContext,
    run_id: str = "",
) -> tuple[RunRecord, list[QuestionResult]]:
    """Evaluate a whole split, persisting per-question progress.

    Fully resumable: questions whose ids already appear in the results
    file are not re-dispatched. On a partial failure the progress written
    so far is kept and the error propagates.
    """
    if not split.questions:
        raise EngineError("cannot run a benchmark on an empty split")
    results_path = ctx.out_dir / "results.jsonl" if ctx.out_dir else None
    existing = _load_existing_results(results_path) if results_path else {}
    results: list[QuestionResult] = []
    out_f = None
    if results_path:
        results_path.parent.mkdir(parents=True, exist_ok=True)
        out_f = results_path.open("a", encoding="utf-8")
    try:
        for q in split.questions:
            if q.id in existing:
                results.append(existing[q.id])
                continue
            result = run_question(q, params, ctx)
            results.append(result)
            if out_f:
                out_f.write(json.dumps(result.to_json_dict(), sort_keys=True) + "\n")
                out_f.flush()
    finally:
        if out_f:
            out_f.close()
    record = build_run_record(results, split, params, ctx, run_id=run_id)
    if ctx.out_dir:
        record_path = ctx.out_dir / "run_record.json"
        record_path.write_text(
            json.dumps(record.to_json_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return record, results


def build_run_record(
    results: Sequence[QuestionResult],
    split: DatasetSplit,
    params: GenerationParams,
    ctx: BenchmarkContext,
    run_id: str = "",
) -> RunRecord:
    usage = llm.TokenUsage()
    for r in results:
        usage = usage + r.usage_total
    accuracy = sum(r.correct for r in results) / len(results)
    model = ctx.generator.model
    cost = compute_cost(usage, model, ctx.price_table) if ctx.price_table else 0.0
    energy = estimate_energy(usage, model, ctx.energy_profile) if ctx.energy_profile else 0.0
    if not run_id:
        slug = model.replace("/", "-") or "model"
        run_id = f"{ctx.dataset}_{split.name}_{params.mode}_n{params.n_ensembles}_{slug}_seed{ctx.run_seed}"
    return RunRecord(
        run_id=run_id,
        model=model,
        dataset=ctx.dataset,
        mode=params.mode,
        n_ensembles=params.n_ensembles,
        accuracy=accuracy,
        prompt_tokens_total=usage.prompt_tokens,
        completion_tokens_total=usage.completion_tokens,
        cost_usd=cost,
        energy_kwh=energy,
        config_digest=ctx.config_digest,
    )


def reaggregate_prefix(result: QuestionResult, n_prime: int) -> QuestionResult:
    """Re-vote using only the first n_prime ensemble members.

    Votes are prefix-aggregable because member seeds depend only on
    (run_seed, question_id, ensemble_index): a shorter independent run
    produces exactly the first n_prime votes of a longer one.
    """
    if n_prime < 1:
        raise ValueError("n_prime must be >= 1")
    prefix = tuple(v for v in result.votes if v.ensemble_index < n_prime)
    return QuestionResult.from_votes(result.question_id, result.gold_label, prefix)


def sweep_accuracies(
    results: Sequence[QuestionResult], ns: Sequence[int]
) -> list[dict[str, Any]]:
    """Accuracy and completion-token totals at each prefix ensemble size."""
    rows = []
    for n in ns:
        prefixed = [reaggregate_prefix(r, n) for r in results]
        completion = sum(p.usage_total.completion_tokens for p in prefixed)
        rows.append(
            {
                "n_ensembles": n,
                "accuracy": sum(p.correct for p in prefixed) / len(prefixed),
                "completion_tokens": completion,
            }
        )
    return rows


def loglik_answer(
    q: McqQuestion,
    endpoint: llm.Endpoint,
    policy: llm.RetryPolicy = llm.RetryPolicy(),
) -> str:
    """Pick the option whose text scores the highest total log-likelihood.

    Requires a backend exposing per-token logprobs through the echo
    trick on the completions endpoint; otherwise raises
    LogprobsUnavailableError. Ties go to the smallest label.
    """
    prefix = (
        load_template("mcqa_direct_user").format(
            stem=q.stem, options="\n".join(f"{o.label}) {o.text}" for o in q.options)
        )
        + "\nThe answer is: "
    )
    scores: list[tuple[float, str]] = []
    for option in q.options:
        lp = llm.completion_logprobs(endpoint, endpoint.model, prefix + option.text, policy)
        total = sum(
            logprob
            for logprob, offset in zip(lp.token_logprobs, lp.text_offsets)
            if logprob is not None and offset >= len(prefix)
        )
        scores.append((total, option.label))
    best_score = max(s for s, _ in scores)
    return min(label for score, label in scores if score == best_score)
