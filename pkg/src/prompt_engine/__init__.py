"""Context-retrieval and self-consistency evaluation engine for MCQA.

Retrieval-augmented few-shot prompting over OpenAI-compatible endpoints:
reasoning-augmented exemplar databases, exact cosine retrieval, choice
shuffled self-consistency ensembles, cost and energy accounting, and an
LLM-judged open-ended evaluation protocol.
"""

__version__ = "0.1.0"

from .client import ChatRequest, ChatResponse, Endpoint, RetryPolicy, TokenUsage
from .datasets import DatasetSplit, McqQuestion, load_mcqa_dataset
from .engine import GenerationParams, QuestionResult, extract_answer, majority_vote
from .index import IndexedCorpus, RetrievalHit, build_index, top_k
from .knowledge import KnowledgeEntry, Strategy, load_db, save_db
from .metrics import ParetoPoint, PriceTable, RunRecord, compute_cost, pareto_frontier
from .openqa import OpenQuestion, Verdict, parse_verdict
from .prompts import Permutation, PromptBundle, derive_seed, shuffle_options

__all__ = [
    "ChatRequest",
    "ChatResponse",
    "DatasetSplit",
    "Endpoint",
    "GenerationParams",
    "IndexedCorpus",
    "KnowledgeEntry",
    "McqQuestion",
    "OpenQuestion",
    "ParetoPoint",
    "Permutation",
    "PriceTable",
    "PromptBundle",
    "QuestionResult",
    "RetrievalHit",
    "RetryPolicy",
    "RunRecord",
    "Strategy",
    "TokenUsage",
    "Verdict",
    "build_index",
    "compute_cost",
    "derive_seed",
    "extract_answer",
    "load_db",
    "load_mcqa_dataset",
    "majority_vote",
    "pareto_frontier",
    "parse_verdict",
    "save_db",
    "shuffle_options",
    "top_k",
]
