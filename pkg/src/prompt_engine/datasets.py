"""Loaders and canonical question model for multiple-choice QA benchmarks.

Every supported source layout is converted into one canonical question
shape so the rest of the pipeline never sees upstream format drift.
The canonical on-disk form is JSONL, one question per line:

    {"id": str, "stem": str, "options": [{"label": str, "text": str}],
     "gold": str, "dataset": str, "metadata": {str: str}}
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, NamedTuple, Sequence

logger = logging.getLogger(__name__)

LABELS = "ABCDEFGHIJ"
MIN_OPTIONS = 2
MAX_OPTIONS = 10

DATASETS = ("MedQA", "MedMCQA", "CareQA", "MMLU-med", "Custom")
SPLITS = ("train", "validation", "test")

# Published sizes of the full benchmark splits. Checked by
# check_expected_count only; small fixture files never trip it.
EXPECTED_FULL_COUNTS = {
    ("MedQA", "test"): 1273,
    ("MedMCQA", "validation"): 4183,
    ("CareQA", "test"): 5621,
    ("MMLU-med", "test"): 1089,
}

# Medical subtasks of the 57-task MMLU benchmark. These six total 1089
# test questions. Override via the mmlu_subtasks argument or config.
MMLU_MEDICAL_SUBTASKS = (
    "anatomy",
    "clinical_knowledge",
    "college_biology",
    "college_medicine",
    "medical_genetics",
    "professional_medicine",
)

_IMAGE_KEYS = ("image", "image_path", "img_paths", "media")


class DatasetError(ValueError):
    """Malformed record, unknown format, or broken split invariant."""


class Option(NamedTuple):
    label: str
    text: str


@dataclass(frozen=True)
class McqQuestion:
    """One multiple-choice item with consecutively lettered options."""

    id: str
    stem: str
    options: tuple[Option, ...]
    gold_label: str
    dataset: str = "Custom"
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "options", tuple(Option(label, text) for label, text in self.options)
        )
        object.__setattr__(self, "metadata", dict(self.metadata))
        if not self.id:
            raise DatasetError("question id must be non-empty")
        if not self.stem.strip():
            raise DatasetError(f"question {self.id}: empty stem")
        n = len(self.options)
        if not MIN_OPTIONS <= n <= MAX_OPTIONS:
            raise DatasetError(
                f"question {self.id}: {n} options, expected {MIN_OPTIONS}-{MAX_OPTIONS}"
            )
        expected = tuple(LABELS[:n])
        got = tuple(o.label for o in self.options)
        if got != expected:
            raise DatasetError(
                f"question {self.id}: labels {got} are not consecutive letters from A"
            )
        for o in self.options:
            if not o.text.strip():
                raise DatasetError(f"question {self.id}: empty text for option {o.label}")
        if self.gold_label not in got:
            raise DatasetError(
                f"question {self.id}: gold label {self.gold_label!r} not among options {''.join(got)}"
            )
        if self.dataset not in DATASETS:
            raise DatasetError(
                f"question {self.id}: unknown dataset {self.dataset!r}, expected one of {DATASETS}"
            )

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(o.label for o in self.options)

    @property
    def gold_text(self) -> str:
        return self.option_text(self.gold_label)

    def option_text(self, label: str) -> str:
        for o in self.options:
            if o.label == label:
                return o.text
        raise KeyError(label)

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "stem": self.stem,
            "options": [{"label": o.label, "text": o.text} for o in self.options],
            "gold": self.gold_label,
            "dataset": self.dataset,
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_json_dict(cls, d: Mapping[str, Any]) -> "McqQuestion":
        for key in ("id", "stem", "options", "gold"):
            if key not in d:
                raise DatasetError(f"missing field {key!r}")
        options = [(o["label"], o["text"]) for o in d["options"]]
        return cls(
            id=str(d["id"]),
            stem=d["stem"],
            options=tuple(options),
            gold_label=d["gold"],
            dataset=d.get("dataset", "Custom"),
            metadata={str(k): str(v) for k, v in d.get("metadata", {}).items()},
        )


@dataclass(frozen=True)
class DatasetSplit:
    """A named split with unique question ids, in on-disk order."""

    name: str
    questions: tuple[McqQuestion, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "questions", tuple(self.questions))
        if self.name not in SPLITS:
            raise DatasetError(f"unknown split name {self.name!r}, expected one of {SPLITS}")
        seen: set[str] = set()
        for q in self.questions:
            if q.id in seen:
                raise DatasetError(f"duplicate question id {q.id!r} in split {self.name!r}")
            seen.add(q.id)

    def __len__(self) -> int:
        return len(self.questions)

    def by_id(self) -> dict[str, McqQuestion]:
        return {q.id: q for q in self.questions}


def canonicalize_labels(raw: Mapping[str, Any]) -> McqQuestion:
    """Relabel arbitrarily keyed options to A, B, C, ... preserving order.

    ``raw`` carries: id, stem, options (mapping or sequence of (key, text)
    pairs, in presentation order), gold (a key into options), and optional
    dataset and metadata entries. The gold key is remapped consistently.
    """
    qid = str(raw.get("id", ""))
    stem = raw.get("stem", "")
    opts = raw.get("options")
    if isinstance(opts, Mapping):
        pairs = list(opts.items())
    elif isinstance(opts, Sequence):
        pairs = [(k, t) for k, t in opts]
    else:
        raise DatasetError(f"question {qid or '?'}: options must be a mapping or sequence of pairs")
    n = len(pairs)
    if not MIN_OPTIONS <= n <= MAX_OPTIONS:
        raise DatasetError(f"question {qid or '?'}: {n} options, expected {MIN_OPTIONS}-{MAX_OPTIONS}")
    gold_key = raw.get("gold")
    keys = [k for k, _ in pairs]
    if gold_key not in keys:
        raise DatasetError(f"question {qid or '?'}: gold key {gold_key!r} not among option keys {keys}")
    gold_pos = keys.index(gold_key)
    options = tuple((LABELS[i], str(text)) for i, (_, text) in enumerate(pairs))
    return McqQuestion(
        id=qid,
        stem=stem,
        options=options,
        gold_label=LABELS[gold_pos],
        dataset=raw.get("dataset", "Custom"),
        metadata=raw.get("metadata", {}),
    )


def load_mcqa_dataset(
    path: str | Path,
    format: str,
    split: str = "test",
    *,
    mmlu_subtasks: Sequence[str] | None = None,
) -> DatasetSplit:
    """Load and validate one benchmark split into the canonical model.

    ``format`` is one of the dataset names; "Custom" reads the canonical
    JSONL schema directly. On-disk record order is preserved. Any
    malformed record fails the whole load with its index and field named.
    """
    path = Path(path)
    if format not in DATASETS:
        raise DatasetError(f"unknown dataset format {format!r}, expected one of {DATASETS}")
    if not path.exists():
        raise DatasetError(f"dataset path does not exist: {path}")
    if format == "MMLU-med":
        questions = _load_mmlu(path, split, tuple(mmlu_subtasks or MMLU_MEDICAL_SUBTASKS))
    elif format == "MedQA":
        questions = _load_medqa(path, split)
    elif format == "MedMCQA":
        questions = _load_medmcqa(path, split)
    elif format == "CareQA":
        questions = _load_careqa(path, split)
    else:
        questions = _load_canonical(path)
    if not questions:
        raise DatasetError(f"no records in {path}")
    ds = DatasetSplit(name=split, questions=tuple(questions))
    logger.info("loaded %d questions from %s (%s/%s)", len(ds), path, format, split)
    return ds


def check_expected_count(split: DatasetSplit) -> bool:
    """True when the split matches its published full-benchmark size.

    Only meaningful for fully configured benchmark files; fixture-size
    splits simply return False and a warning is logged.
    """
    dataset = split.questions[0].dataset if split.questions else "Custom"
    expected = EXPECTED_FULL_COUNTS.get((dataset, split.name))
    if expected is None:
        return True
    if len(split) != expected:
        logger.warning(
            "%s %s has %d questions, full benchmark has %d",
            dataset,
            split.name,
            len(split),
            expected,
        )
        return False
    return True


def save_dataset(split: DatasetSplit, path: str | Path) -> None:
    """Write a split as canonical JSONL; round-trips through format Custom."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for q in split.questions:
            f.write(json.dumps(q.to_json_dict(), ensure_ascii=False, sort_keys=True))
            f.write("\n")


def _iter_jsonl(path: Path) -> Iterator[tuple[int, dict[str, Any]]]:
    with path.open("r", encoding="utf-8") as f:
        index = 0
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"record {index} (line {lineno}): invalid JSON: {e}") from e
            if not isinstance(rec, dict):
                raise DatasetError(f"record {index} (line {lineno}): expected a JSON object")
            yield index, rec
            index += 1


def _reject_images(rec: Mapping[str, Any], index: int) -> None:
    for key in _IMAGE_KEYS:
        if rec.get(key):
            raise DatasetError(
                f"record {index}: field {key!r} present, image-based questions are not supported"
            )


def _require(rec: Mapping[str, Any], key: str, index: int) -> Any:
    if key not in rec or rec[key] in (None, ""):
        raise DatasetError(f"record {index}: missing field {key!r}")
    return rec[key]


def _wrap_record_error(index: int, fn, *args):
    try:
        return fn(*args)
    except DatasetError as e:
        raise DatasetError(f"record {index}: {e}") from e


def _load_canonical(path: Path) -> list[McqQuestion]:
    questions = []
    for index, rec in _iter_jsonl(path):
        _reject_images(rec, index)
        try:
            questions.append(McqQuestion.from_json_dict(rec))
        except DatasetError as e:
            raise DatasetError(f"record {index}: {e}") from e
    return questions


def _load_medqa(path: Path, split: str) -> list[McqQuestion]:
    # USMLE-style JSONL: {"question", "options": {"A": ...}, "answer_idx",
    # "answer", "meta_info"}. Ids are synthesized from file order.
    questions = []
    for index, rec in _iter_jsonl(path):
        _reject_images(rec, index)
        stem = _require(rec, "question", index)
        options = _require(rec, "options", index)
        if not isinstance(options, Mapping):
            raise DatasetError(f"record {index}: field 'options' must be an object")
        pairs = sorted(options.items())
        gold = _require(rec, "answer_idx", index)
        metadata = {}
        if rec.get("meta_info"):
            metadata["meta_info"] = str(rec["meta_info"])
        raw = {
            "id": rec.get("id") or _synth_id("MedQA", split, index),
            "stem": stem,
            "options": pairs,
            "gold": gold,
            "dataset": "MedQA",
            "metadata": metadata,
        }
        questions.append(_wrap_record_error(index, canonicalize_labels, raw))
    return questions


def _load_medmcqa(path: Path, split: str) -> list[McqQuestion]:
    # JSONL with opa..opd and a 0-based integer "cop" (HF layout).
    questions = []
    for index, rec in _iter_jsonl(path):
        _reject_images(rec, index)
        stem = _require(rec, "question", index)
        pairs = []
        for key in ("opa", "opb", "opc", "opd"):
            pairs.append((key, _require(rec, key, index)))
        cop = rec.get("cop")
        if cop is None:
            raise DatasetError(f"record {index}: missing field 'cop'")
        if not isinstance(cop, int) or not 0 <= cop <= 3:
            raise DatasetError(f"record {index}: field 'cop' must be an integer in 0..3, got {cop!r}")
        metadata = {}
        for k_src, k_dst in (("subject_name", "subject"), ("topic_name", "topic")):
            if rec.get(k_src):
                metadata[k_dst] = str(rec[k_src])
        raw = {
            "id": str(rec.get("id") or _synth_id("MedMCQA", split, index)),
            "stem": stem,
            "options": pairs,
            "gold": ("opa", "opb", "opc", "opd")[cop],
            "dataset": "MedMCQA",
            "metadata": metadata,
        }
        questions.append(_wrap_record_error(index, canonicalize_labels, raw))
    return questions


def _load_careqa(path: Path, split: str) -> list[McqQuestion]:
    # JSON array or JSONL with op1..op4 and a 1-based integer "cop".
    if path.suffix == ".json":
        try:
            records = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise DatasetError(f"invalid JSON in {path}: {e}") from e
        if not isinstance(records, list):
            raise DatasetError(f"{path}: expected a JSON array")
        indexed = list(enumerate(records))
    else:
        indexed = list(_iter_jsonl(path))
    questions = []
    for index, rec in indexed:
        _reject_images(rec, index)
        stem = _require(rec, "question", index)
        pairs = []
        for key in ("op1", "op2", "op3", "op4"):
            pairs.append((key, _require(rec, key, index)))
        cop = rec.get("cop")
        if not isinstance(cop, int) or not 1 <= cop <= 4:
            raise DatasetError(f"record {index}: field 'cop' must be an integer in 1..4, got {cop!r}")
        metadata = {}
        if rec.get("category"):
            metadata["category"] = str(rec["category"])
        raw = {
            "id": str(rec.get("id") or _synth_id("CareQA", split, index)),
            "stem": stem,
            "options": pairs,
            "gold": ("op1", "op2", "op3", "op4")[cop - 1],
            "dataset": "CareQA",
            "metadata": metadata,
        }
        questions.append(_wrap_record_error(index, canonicalize_labels, raw))
    return questions


_MMLU_SUFFIX = {"test": "test", "validation": "val", "train": "dev"}


def _load_mmlu(path: Path, split: str, subtasks: tuple[str, ...]) -> list[McqQuestion]:
    # Directory of headerless CSVs, one per subtask:
    # question, A, B, C, D, answer-letter.
    if not path.is_dir():
        raise DatasetError(f"MMLU-med expects a directory of per-subtask CSVs, got {path}")
    suffix = _MMLU_SUFFIX[split]
    questions = []
    found = []
    for task in subtasks:
        csv_path = path / f"{task}_{suffix}.csv"
        if not csv_path.exists():
            logger.warning("MMLU subtask file missing: %s", csv_path)
            continue
        found.append(task)
        with csv_path.open("r", encoding="utf-8", newline="") as f:
            for row_idx, row in enumerate(csv.reader(f)):
                index = len(questions)
                if len(row) != 6:
                    raise DatasetError(
                        f"record {index}: {csv_path.name} row {row_idx} has {len(row)} columns, expected 6"
                    )
                stem, a, b, c, d, answer = row
                raw = {
                    "id": f"mmlu-med-{split}-{task}-{row_idx:05d}",
                    "stem": stem,
                    "options": [("A", a), ("B", b), ("C", c), ("D", d)],
                    "gold": answer.strip(),
                    "dataset": "MMLU-med",
                    "metadata": {"subtask": task},
                }
                questions.append(_wrap_record_error(index, canonicalize_labels, raw))
    logger.info(
        "MMLU-med: %d of %d configured subtasks found, %d questions realized",
        len(found),
        len(subtasks),
        len(questions),
    )
    return questions


def _synth_id(dataset: str, split: str, index: int) -> str:
    slug = dataset.lower().replace(" ", "-")
    return f"{slug}-{split}-{index:05d}"
