from __future__ import annotations

import json
from pathlib import Path

import pytest

from prompt_engine.client import Endpoint, RetryPolicy
from prompt_engine.datasets import DatasetSplit, McqQuestion
from prompt_engine.knowledge import KnowledgeEntry, Strategy
from prompt_engine.mockserver import MockScript, MockServer

FAST_RETRY = RetryPolicy(max_attempts=3, base_backoff=0.01, backoff_multiplier=2.0)


def make_question(
    i: int,
    n_options: int = 4,
    gold: str = "A",
    dataset: str = "Custom",
    stem: str | None = None,
    tag: str = "",
) -> McqQuestion:
    texts = [f"distinct option text {tag}{i}-{j}" for j in range(n_options)]
    return McqQuestion(
        id=f"{tag}q{i:03d}",
        stem=stem or f"Synthetic {tag or 'test '}clinical vignette number {i} asking about finding {i}?",
        options=tuple(("ABCDEFGHIJ"[j], texts[j]) for j in range(n_options)),
        gold_label=gold,
        dataset=dataset,
    )


def make_split(n: int, name: str = "test", n_options: int = 4) -> DatasetSplit:
    # distinct ids and stems per split name so train fixtures never
    # collide with evaluation fixtures
    tag = "" if name == "test" else f"{name}-"
    golds = "ABCD"
    return DatasetSplit(
        name=name,
        questions=tuple(
            make_question(i, n_options=n_options, gold=golds[i % n_options], tag=tag)
            for i in range(n)
        ),
    )


def make_entry(
    q: McqQuestion,
    strategy: Strategy = Strategy.COT,
    verified: bool = True,
    answer: str | None = None,
) -> KnowledgeEntry:
    label = answer or q.gold_label
    if strategy is Strategy.THINKING:
        reasoning = f"<think>\nweighing the options for {q.id}\n</think>\nThe answer is ({label})."
    else:
        reasoning = f"Worked reasoning for {q.id}: option {label} fits the presentation."
    return KnowledgeEntry(
        id=q.id,
        question=q,
        reasoning=reasoning,
        answer_label=label,
        strategy=strategy,
        generator_model="mock-gen",
        verified=verified,
    )


def gold_answers(split: DatasetSplit) -> dict[str, str]:
    """stem -> gold option text map for the gold_position mock responder."""
    return {q.stem: q.gold_text for q in split.questions}


def gold_position_script(split: DatasetSplit, wrong_stems: tuple[str, ...] = ()) -> MockScript:
    """Answer the shuffled position of gold; off-by-one for wrong_stems."""
    answers = gold_answers(split)
    rules = []
    for stem in wrong_stems:
        rules.append(
            {
                "name": f"wrong:{stem[:20]}",
                "match": {"contains": stem},
                "respond": {"type": "gold_position", "answers": answers, "offset": 1},
            }
        )
    rules.append(
        {
            "name": "gold",
            "match": {"always": True},
            "respond": {"type": "gold_position", "answers": answers},
        }
    )
    return MockScript.from_dict({"chat": rules})


def literal_letter_script(letter: str = "A") -> MockScript:
    return MockScript.from_dict(
        {
            "chat": [
                {
                    "name": "literal",
                    "match": {"always": True},
                    "respond": {"type": "literal_letter", "letter": letter},
                }
            ]
        }
    )


def echo_gold_script(style: str = "plain") -> MockScript:
    """For database builds: echo whatever answer the prompt states."""
    return MockScript.from_dict(
        {
            "chat": [
                {
                    "name": "echo",
                    "match": {"always": True},
                    "respond": {"type": "echo_stated_answer", "style": style},
                }
            ]
        }
    )


@pytest.fixture
def retry_fast() -> RetryPolicy:
    return FAST_RETRY


@pytest.fixture
def tiny_split() -> DatasetSplit:
    return make_split(6)


def run_server(script: MockScript) -> MockServer:
    return MockServer(script)


def endpoint_for(server: MockServer, model: str = "mock-model") -> Endpoint:
    return Endpoint(base_url=server.base_url, model=model, timeout=30.0)


def write_canonical_jsonl(split: DatasetSplit, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for q in split.questions:
            f.write(json.dumps(q.to_json_dict()) + "\n")
    return path
