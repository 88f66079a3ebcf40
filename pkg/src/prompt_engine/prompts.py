"""Choice shuffling, permutation bookkeeping, and few-shot prompt assembly.

Each ensemble member sees its own random permutation of the answer
options (and of each exemplar's options), which cancels the positional
bias of letter answers once votes are mapped back to canonical labels.
Everything here is a pure function of its inputs, so identical seeds
reproduce byte-identical prompts.
"""

from __future__ import annotations

import functools
import hashlib
import random
from dataclasses import dataclass, replace
from importlib import resources
from typing import TYPE_CHECKING, Sequence

from .client import Message
from .datasets import LABELS, McqQuestion

if TYPE_CHECKING:
    from .knowledge import KnowledgeEntry

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def stable_hash64(text: str) -> int:
    """Process-independent 64-bit hash (unlike the builtin hash)."""
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "big")


def derive_seed(run_seed: int, question_id: str, ensemble_index: int) -> int:
    """Per-(question, ensemble) seed: SplitMix64 finalizer over the XOR mix."""
    return _splitmix64((run_seed ^ stable_hash64(question_id) ^ ensemble_index) & _MASK64)


class PermutationError(ValueError):
    pass


@dataclass(frozen=True)
class Permutation:
    """Bijection on option positions; order[new_pos] gives the old position."""

    order: tuple[int, ...]
    seed_trace: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "order", tuple(int(i) for i in self.order))
        if sorted(self.order) != list(range(len(self.order))):
            raise PermutationError(f"not a bijection on 0..{len(self.order) - 1}: {self.order}")

    @classmethod
    def identity(cls, size: int, seed_trace: int = 0) -> "Permutation":
        return cls(order=tuple(range(size)), seed_trace=seed_trace)

    @property
    def size(self) -> int:
        return len(self.order)

    @property
    def is_identity(self) -> bool:
        return self.order == tuple(range(self.size))

    def _check(self, label: str) -> int:
        pos = LABELS.find(label.upper())
        if pos < 0 or pos >= self.size:
            raise PermutationError(
                f"label {label!r} out of range for a {self.size}-option permutation"
            )
        return pos

    def map_label(self, label: str) -> str:
        """Canonical-space letter to its position in the shuffled layout."""
        return LABELS[self.order.index(self._check(label))]

    def remap_label(self, label: str) -> str:
        """Shuffled-space letter back to the canonical layout."""
        return LABELS[self.order[self._check(label)]]


def remap_label(label: str, p: Permutation) -> str:
    """Module-level alias: map a shuffled-space letter to canonical space."""
    return p.remap_label(label)


def shuffle_options(q: McqQuestion, seed: int) -> tuple[McqQuestion, Permutation]:
    """Uniformly permute option texts under ``seed`` and relabel from A.

    The shuffled question's gold label points at the same option text as
    the original; the returned permutation records the move.
    """
    n = len(q.options)
    order = list(range(n))
    random.Random(seed).shuffle(order)
    perm = Permutation(order=tuple(order), seed_trace=seed)
    options = tuple((LABELS[i], q.options[order[i]].text) for i in range(n))
    shuffled = replace(q, options=options, gold_label=perm.map_label(q.gold_label))
    return shuffled, perm


@dataclass(frozen=True)
class PromptConfig:
    k_exemplars: int = 5
    shuffle_choices: bool = True
    shuffle_exemplars: bool = True
    instruction_style: str = "cot"
    max_prompt_chars: int | None = None

    def __post_init__(self) -> None:
        if self.k_exemplars < 0:
            raise ValueError("k_exemplars must be >= 0")
        if self.instruction_style not in ("cot", "direct"):
            raise ValueError(f"unknown instruction style {self.instruction_style!r}")


@dataclass(frozen=True)
class PromptBundle:
    """Assembled messages for one ensemble member plus its bookkeeping."""

    messages: tuple[Message, ...]
    target_permutation: Permutation
    exemplar_permutations: tuple[Permutation, ...]
    exemplar_ids: tuple[str, ...]
    question_id: str
    ensemble_index: int

    def __post_init__(self) -> None:
        if len(set(self.exemplar_ids)) != len(self.exemplar_ids):
            raise ValueError("exemplar ids must be distinct")
        if self.question_id in self.exemplar_ids:
            raise ValueError(f"target question {self.question_id!r} leaked into exemplars")


class PromptTooLongError(ValueError):
    pass


@functools.lru_cache(maxsize=None)
def load_template(name: str) -> str:
    return (resources.files(__package__) / "templates" / f"{name}.txt").read_text(
        encoding="utf-8"
    )


def format_options(q: McqQuestion) -> str:
    return "\n".join(f"{o.label}) {o.text}" for o in q.options)


def assemble_prompt(
    q: McqQuestion,
    exemplars: Sequence["KnowledgeEntry"],
    seed: int,
    config: PromptConfig = PromptConfig(),
    ensemble_index: int = 0,
) -> PromptBundle:
    """Build one ensemble member's chat messages.

    System instruction, then one user/assistant exchange per exemplar
    (options shuffled, reasoning trace, answer letter remapped into the
    exemplar's shuffled layout), then the target question with shuffled
    options and the answer-format instruction. With no exemplars this
    degenerates to the zero-shot prompt.
    """
    if any(e.id == q.id for e in exemplars):
        raise ValueError(f"target question {q.id!r} must not appear among its exemplars")
    messages: list[Message] = [Message("system", load_template("mcqa_system").strip())]
    q_template = load_template("exemplar_question")
    a_template = load_template("exemplar_answer")
    ex_perms: list[Permutation] = []
    for i, e in enumerate(exemplars):
        if e.answer_label not in e.question.labels:
            raise ValueError(
                f"exemplar {e.id!r} has answer label {e.answer_label!r} "
                f"outside its options; knowledge database is corrupt"
            )
        if config.shuffle_exemplars:
            ex_seed = derive_seed(seed, f"exemplar:{e.id}", i + 1)
            shuffled_ex, perm = shuffle_options(e.question, ex_seed)
        else:
            shuffled_ex = e.question
            perm = Permutation.identity(len(e.question.options))
        ex_perms.append(perm)
        messages.append(
            Message(
                "user",
                q_template.format(stem=shuffled_ex.stem, options=format_options(shuffled_ex)).strip(),
            )
        )
        messages.append(
            Message(
                "assistant",
                a_template.format(
                    reasoning=e.reasoning.strip(), answer=perm.map_label(e.answer_label)
                ).strip(),
            )
        )
    if config.shuffle_choices:
        target_seed = derive_seed(seed, f"target:{q.id}", 0)
        shuffled_q, target_perm = shuffle_options(q, target_seed)
    else:
        shuffled_q = q
        target_perm = Permutation.identity(len(q.options))
    style = "mcqa_direct_user" if config.instruction_style == "direct" else "mcqa_cot_user"
    messages.append(
        Message(
            "user",
            load_template(style)
            .format(stem=shuffled_q.stem, options=format_options(shuffled_q))
            .strip(),
        )
    )
    total_chars = sum(len(m.content) for m in messages)
    if config.max_prompt_chars is not None and total_chars > config.max_prompt_chars:
        raise PromptTooLongError(
            f"assembled prompt is {total_chars} chars, limit is {config.max_prompt_chars}"
        )
    return PromptBundle(
        messages=tuple(messages),
        target_permutation=target_perm,
        exemplar_permutations=tuple(ex_perms),
        exemplar_ids=tuple(e.id for e in exemplars),
        question_id=q.id,
        ensemble_index=ensemble_index,
    )
