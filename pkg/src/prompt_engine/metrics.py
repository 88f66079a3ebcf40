"""Cost, energy, and accuracy accounting plus Pareto-frontier analysis.

Costs are token-linear against a versioned price table; energy is a
throughput model over completion tokens. Both are pure recomputations
from persisted token totals, so every stored record can be audited.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .client import TokenUsage

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


class MetricsError(ValueError):
    """Unknown model, malformed table, or invalid analysis input."""


@dataclass(frozen=True)
class ModelPrice:
    input_usd_per_1m: float
    output_usd_per_1m: float

    def __post_init__(self) -> None:
        for v in (self.input_usd_per_1m, self.output_usd_per_1m):
            if not math.isfinite(v) or v < 0:
                raise MetricsError(f"prices must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class PriceTable:
    """Per-model USD prices per million tokens, pinned to a snapshot date."""

    prices: Mapping[str, ModelPrice]
    snapshot_date: str
    source: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "prices", dict(self.prices))
        if not self.snapshot_date:
            raise MetricsError("price table requires a snapshot_date")

    def for_model(self, model: str) -> ModelPrice:
        if model not in self.prices:
            raise MetricsError(
                f"model {model!r} not in price table; available: {sorted(self.prices)}"
            )
        return self.prices[model]

    def scaled(self, factor: float) -> "PriceTable":
        return PriceTable(
            prices={
                m: ModelPrice(p.input_usd_per_1m * factor, p.output_usd_per_1m * factor)
                for m, p in self.prices.items()
            },
            snapshot_date=self.snapshot_date,
            source=self.source,
        )

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PriceTable":
        prices = {}
        for model, spec in d.get("prices", {}).items():
            if "usd_per_1m" in spec:
                # single-price tariff: same rate both directions
                rate = float(spec["usd_per_1m"])
                prices[model] = ModelPrice(rate, rate)
            else:
                prices[model] = ModelPrice(
                    float(spec["input_usd_per_1m"]), float(spec["output_usd_per_1m"])
                )
        return cls(
            prices=prices,
            snapshot_date=str(d.get("snapshot_date", "")),
            source=str(d.get("source", "")),
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "PriceTable":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class ModelEnergy:
    throughput_tokens_per_s: float
    gpu_power_watts: float
    n_gpus: int = 1

    def __post_init__(self) -> None:
        if self.throughput_tokens_per_s <= 0:
            raise MetricsError("throughput must be > 0")
        if self.gpu_power_watts <= 0:
            raise MetricsError("gpu power must be > 0")
        if self.n_gpus < 1:
            raise MetricsError("n_gpus must be >= 1")


@dataclass(frozen=True)
class EnergyProfile:
    """Per-model inference throughput and GPU power assumptions."""

    models: Mapping[str, ModelEnergy]
    source: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "models", dict(self.models))

    def for_model(self, model: str) -> ModelEnergy:
        if model not in self.models:
            raise MetricsError(
                f"model {model!r} not in energy profile; available: {sorted(self.models)}"
            )
        return self.models[model]

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EnergyProfile":
        models = {
            m: ModelEnergy(
                throughput_tokens_per_s=float(spec["throughput_tokens_per_s"]),
                gpu_power_watts=float(spec["gpu_power_watts"]),
                n_gpus=int(spec.get("n_gpus", 1)),
            )
            for m, spec in d.get("models", {}).items()
        }
        return cls(models=models, source=str(d.get("source", "")))

    @classmethod
    def from_json(cls, path: str | Path) -> "EnergyProfile":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class RunRecord:
    """One (model, config, dataset) evaluation; the unit of Pareto analysis."""

    run_id: str
    model: str
    dataset: str
    mode: str
    n_ensembles: int
    accuracy: float
    prompt_tokens_total: int
    completion_tokens_total: int
    cost_usd: float = 0.0
    energy_kwh: float = 0.0
    config_digest: str = ""

    def __post_init__(self) -> None:
        if not 0.0 <= self.accuracy <= 1.0:
            raise MetricsError(f"accuracy must be in [0, 1], got {self.accuracy}")
        if self.prompt_tokens_total < 0 or self.completion_tokens_total < 0:
            raise MetricsError("token totals must be >= 0")

    @property
    def usage(self) -> TokenUsage:
        return TokenUsage(self.prompt_tokens_total, self.completion_tokens_total)

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "model": self.model,
            "dataset": self.dataset,
            "mode": self.mode,
            "n_ensembles": self.n_ensembles,
            "accuracy": self.accuracy,
            "prompt_tokens_total": self.prompt_tokens_total,
            "completion_tokens_total": self.completion_tokens_total,
            "cost_usd": self.cost_usd,
            "energy_kwh": self.energy_kwh,
            "config_digest": self.config_digest,
        }

    @classmethod
    def from_json_dict(cls, d: Mapping[str, Any]) -> "RunRecord":
        return cls(
            run_id=str(d["run_id"]),
            model=str(d["model"]),
            dataset=str(d["dataset"]),
            mode=str(d["mode"]),
            n_ensembles=int(d["n_ensembles"]),
            accuracy=float(d["accuracy"]),
            prompt_tokens_total=int(d["prompt_tokens_total"]),
            completion_tokens_total=int(d["completion_tokens_total"]),
            cost_usd=float(d.get("cost_usd", 0.0)),
            energy_kwh=float(d.get("energy_kwh", 0.0)),
            config_digest=str(d.get("config_digest", "")),
        )


def compute_cost(usage: TokenUsage, model: str, prices: PriceTable) -> float:
    """USD cost of a run: tokens times per-million rates, split by direction."""
    p = prices.for_model(model)
    return (
        usage.prompt_tokens * p.input_usd_per_1m / 1e6
        + usage.completion_tokens * p.output_usd_per_1m / 1e6
    )


def estimate_energy(usage: TokenUsage, model: str, profile: EnergyProfile) -> float:
    """Estimated kWh for generating the completion tokens of a run.

    Generation time is completion_tokens / throughput; energy is that
    time at the model's total GPU power draw (3.6e6 joules per kWh).
    """
    e = profile.for_model(model)
    seconds = usage.completion_tokens / e.throughput_tokens_per_s
    return seconds * e.gpu_power_watts * e.n_gpus / 3.6e6


@dataclass(frozen=True)
class ParetoPoint:
    label: str
    cost_usd: float
    accuracy: float
    open_source: bool = True

    def __post_init__(self) -> None:
        if not math.isfinite(self.cost_usd) or self.cost_usd <= 0:
            raise MetricsError(f"cost must be finite and > 0, got {self.cost_usd}")
        if not 0.0 <= self.accuracy <= 1.0:
            raise MetricsError(f"accuracy must be in [0, 1], got {self.accuracy}")


def dominates(p: ParetoPoint, q: ParetoPoint) -> bool:
    """True when p is at least as cheap and accurate, and better on one axis."""
    return (
        p.cost_usd <= q.cost_usd
        and p.accuracy >= q.accuracy
        and (p.cost_usd < q.cost_usd or p.accuracy > q.accuracy)
    )


def pareto_frontier(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """All non-dominated points, sorted by cost ascending.

    Equal-(cost, accuracy) duplicates are all retained, in input order.
    Single sweep over the cost-sorted points, so O(n log n).
    """
    if not points:
        raise MetricsError("points must be non-empty")
    ordered = sorted(points, key=lambda p: p.cost_usd)
    frontier: list[ParetoPoint] = []
    best_acc = -math.inf
    i = 0
    while i < len(ordered):
        j = i
        while j < len(ordered) and ordered[j].cost_usd == ordered[i].cost_usd:
            j += 1
        group = ordered[i:j]
        group_max = max(p.accuracy for p in group)
        if group_max > best_acc:
            frontier.extend(p for p in group if p.accuracy == group_max)
            best_acc = group_max
        i = j
    return frontier


def _step_accuracy(frontier: Sequence[ParetoPoint], cost: float) -> float:
    """Best accuracy among frontier points with cost <= cost."""
    best = -math.inf
    for p in frontier:
        if p.cost_usd <= cost:
            best = max(best, p.accuracy)
    return best


def frontier_gain_area(
    old: Sequence[ParetoPoint],
    new: Sequence[ParetoPoint],
    *,
    log_domain: bool = True,
) -> float:
    """Area where the new frontier exceeds the old one.

    Integrates max(0, stepNew(c) - stepOld(c)) over the shared cost
    interval, with cost on a log10 axis by default since frontiers span
    orders of magnitude. Disjoint cost ranges yield 0 with a warning.
    """
    if not old or not new:
        raise MetricsError("both frontiers must be non-empty")
    lo = max(min(p.cost_usd for p in old), min(p.cost_usd for p in new))
    hi = min(max(p.cost_usd for p in old), max(p.cost_usd for p in new))
    if lo > hi:
        logger.warning("frontier cost ranges are disjoint; gain area is 0")
        return 0.0
    breakpoints = sorted(
        {lo, hi}
        | {p.cost_usd for p in old if lo <= p.cost_usd <= hi}
        | {p.cost_usd for p in new if lo <= p.cost_usd <= hi}
    )
    xform = math.log10 if log_domain else (lambda c: c)
    area = 0.0
    for a, b in zip(breakpoints, breakpoints[1:]):
        gain = max(0.0, _step_accuracy(new, a) - _step_accuracy(old, a))
        area += gain * (xform(b) - xform(a))
    return area


@dataclass(frozen=True)
class DeltaRow:
    """One model's baseline accuracies and per-dataset deltas, in percent."""

    model: str
    baseline_pct: Mapping[str, float]
    delta_pct: Mapping[str, float]
    baseline_avg_pct: float
    delta_avg_pct: float
    incomplete: bool = False


def aggregate_table(
    records: Iterable[RunRecord],
    *,
    baseline_mode: str,
    treatment_mode: str,
    datasets: Sequence[str] | None = None,
) -> list[DeltaRow]:
    """Baseline-plus-delta rows per model across datasets, with averages.

    Pairs baseline and treatment runs on (model, dataset). A model
    missing either side of a pair for some dataset is flagged incomplete
    and that dataset is left out of its averages.
    """
    by_key: dict[tuple[str, str, str], RunRecord] = {}
    models: list[str] = []
    seen_datasets: list[str] = []
    for r in records:
        by_key[(r.model, r.dataset, r.mode)] = r
        if r.model not in models:
            models.append(r.model)
        if r.dataset not in seen_datasets:
            seen_datasets.append(r.dataset)
    cols = list(datasets) if datasets is not None else seen_datasets
    rows = []
    for model in models:
        baseline: dict[str, float] = {}
        delta: dict[str, float] = {}
        incomplete = False
        for ds in cols:
            b = by_key.get((model, ds, baseline_mode))
            t = by_key.get((model, ds, treatment_mode))
            if b is None or t is None:
                incomplete = True
                continue
            baseline[ds] = b.accuracy * 100.0
            delta[ds] = (t.accuracy - b.accuracy) * 100.0
        rows.append(
            DeltaRow(
                model=model,
                baseline_pct=baseline,
                delta_pct=delta,
                baseline_avg_pct=sum(baseline.values()) / len(baseline) if baseline else math.nan,
                delta_avg_pct=sum(delta.values()) / len(delta) if delta else math.nan,
                incomplete=incomplete,
            )
        )
    return rows


_CSV_COLUMNS = (
    "run_id",
    "model",
    "dataset",
    "mode",
    "n_ensembles",
    "accuracy",
    "prompt_tokens_total",
    "completion_tokens_total",
    "cost_usd",
    "energy_kwh",
    "config_digest",
)


def emit_report(
    records: Sequence[RunRecord],
    out_dir: str | Path,
    formats: Sequence[str] = ("json", "csv"),
) -> list[Path]:
    """Write runs.json and/or runs.csv; both round-trip losslessly."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "json":
            path = out_dir / "runs.json"
            payload = {
                "schema_version": REPORT_SCHEMA_VERSION,
                "records": [r.to_json_dict() for r in records],
            }
            path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        elif fmt == "csv":
            path = out_dir / "runs.csv"
            with path.open("w", encoding="utf-8", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=_CSV_COLUMNS)
                writer.writeheader()
                for r in records:
                    writer.writerow(r.to_json_dict())
        else:
            raise MetricsError(f"unknown report format {fmt!r}, expected json or csv")
        written.append(path)
    return written


def load_report(path: str | Path) -> list[RunRecord]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return [RunRecord.from_json_dict(d) for d in payload["records"]]


def emit_frontier_plot_data(
    points: Sequence[ParetoPoint], path: str | Path
) -> list[ParetoPoint]:
    """Write accuracy-vs-cost plot rows with frontier and marker flags.

    Columns: label, cost_usd, accuracy, marker (open/closed source),
    on_frontier. Returns the frontier subset.
    """
    frontier = pareto_frontier(points)
    frontier_ids = {id(p) for p in frontier}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["label", "cost_usd", "accuracy", "marker", "on_frontier"])
        for p in sorted(points, key=lambda p: p.cost_usd):
            writer.writerow(
                [
                    p.label,
                    repr(p.cost_usd),
                    repr(p.accuracy),
                    "open" if p.open_source else "closed",
                    "1" if id(p) in frontier_ids else "0",
                ]
            )
    return frontier


def emit_sweep_plot_data(
    rows: Sequence[Mapping[str, Any]], path: str | Path
) -> Path:
    """Write ensemble-size sweep rows (x, y, series plus energy columns)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = ["series", "n_ensembles", "accuracy", "completion_tokens", "energy_kwh"]
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in columns})
    return path
