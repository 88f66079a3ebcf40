from __future__ import annotations

import json
import math
import random

import pytest

from prompt_engine.client import TokenUsage
from prompt_engine.metrics import (
    EnergyProfile,
    MetricsError,
    ModelEnergy,
    ModelPrice,
    ParetoPoint,
    PriceTable,
    RunRecord,
    aggregate_table,
    compute_cost,
    dominates,
    emit_frontier_plot_data,
    emit_report,
    estimate_energy,
    frontier_gain_area,
    load_report,
    pareto_frontier,
)

PRICES = PriceTable(
    prices={"m": ModelPrice(0.2, 0.6), "cheap": ModelPrice(0.1, 0.4)},
    snapshot_date="2025-03-01",
    source="unit fixture",
)

ENERGY = EnergyProfile(
    models={
        "m": ModelEnergy(throughput_tokens_per_s=1000, gpu_power_watts=1000, n_gpus=1),
        "big": ModelEnergy(throughput_tokens_per_s=250, gpu_power_watts=700, n_gpus=4),
    }
)


class TestComputeCost:
    def test_zero_tokens(self):
        assert compute_cost(TokenUsage(0, 0), "m", PRICES) == 0.0

    def test_unit_arithmetic(self):
        assert compute_cost(TokenUsage(1_000_000, 1_000_000), "m", PRICES) == pytest.approx(0.8, rel=1e-12)

    def test_hand_computed_mixed(self):
        # 2.5M * 0.1/1e6 + 0.4M * 0.4/1e6 = 0.25 + 0.16 = 0.41
        assert compute_cost(TokenUsage(2_500_000, 400_000), "cheap", PRICES) == pytest.approx(0.41, rel=1e-12)

    def test_unknown_model_lists_available(self):
        with pytest.raises(MetricsError, match="cheap"):
            compute_cost(TokenUsage(1, 1), "mystery", PRICES)

    def test_single_price_tariff(self):
        table = PriceTable.from_dict(
            {"snapshot_date": "2025-01-01", "prices": {"x": {"usd_per_1m": 0.5}}}
        )
        assert compute_cost(TokenUsage(1_000_000, 1_000_000), "x", table) == pytest.approx(1.0)


class TestEstimateEnergy:
    def test_zero_completion_tokens(self):
        assert estimate_energy(TokenUsage(999, 0), "m", ENERGY) == 0.0

    def test_unit_cancellation(self):
        # 3.6M tokens at 1000 tok/s is 3600 s at 1 kW: exactly 1 kWh
        assert estimate_energy(TokenUsage(0, 3_600_000), "m", ENERGY) == pytest.approx(1.0, rel=1e-12)

    def test_hand_computed_multi_gpu(self):
        # 500k / 250 = 2000 s at 2800 W = 5.6e6 J = 1.5556 kWh
        assert estimate_energy(TokenUsage(0, 500_000), "big", ENERGY) == pytest.approx(1.5556, abs=1e-4)

    def test_unknown_model(self):
        with pytest.raises(MetricsError, match="energy profile"):
            estimate_energy(TokenUsage(0, 1), "mystery", ENERGY)


def oracle_frontier(points):
    """O(n^2) pairwise dominance filter plus stable cost sort."""
    survivors = [p for p in points if not any(dominates(q, p) for q in points)]
    return sorted(survivors, key=lambda p: p.cost_usd)


def random_points(rng, n):
    out = []
    for i in range(n):
        out.append(
            ParetoPoint(
                label=f"p{i}",
                cost_usd=rng.choice([rng.uniform(0.1, 100), round(rng.uniform(0.1, 10), 1)]),
                accuracy=rng.choice([rng.random(), round(rng.random(), 2)]),
            )
        )
    return out


class TestParetoFrontier:
    def test_single_point(self):
        p = ParetoPoint("only", 1.0, 0.5)
        assert pareto_frontier([p]) == [p]

    def test_three_point_example(self):
        pts = [ParetoPoint("a", 1, 0.70), ParetoPoint("b", 2, 0.60), ParetoPoint("c", 3, 0.80)]
        assert [p.label for p in pareto_frontier(pts)] == ["a", "c"]

    def test_equal_duplicates_all_retained(self):
        pts = [ParetoPoint("a", 1, 0.7), ParetoPoint("b", 1, 0.7), ParetoPoint("c", 2, 0.6)]
        assert [p.label for p in pareto_frontier(pts)] == ["a", "b"]

    def test_matches_oracle_500_random(self):
        rng = random.Random(99)
        pts = random_points(rng, 500)
        assert pareto_frontier(pts) == oracle_frontier(pts)

    def test_matches_oracle_many_seeds(self):
        for seed in range(10):
            rng = random.Random(seed)
            pts = random_points(rng, 120)
            assert pareto_frontier(pts) == oracle_frontier(pts)

    def test_idempotence(self):
        rng = random.Random(7)
        pts = random_points(rng, 200)
        frontier = pareto_frontier(pts)
        assert pareto_frontier(frontier) == frontier

    def test_membership_invariant_under_price_scaling(self):
        rng = random.Random(13)
        pts = random_points(rng, 150)
        base = {p.label for p in pareto_frontier(pts)}
        for lam in (0.5, 3.0, 1e-3):
            scaled = [
                ParetoPoint(p.label, p.cost_usd * lam, p.accuracy, p.open_source) for p in pts
            ]
            assert {p.label for p in pareto_frontier(scaled)} == base

    def test_empty_rejected(self):
        with pytest.raises(MetricsError):
            pareto_frontier([])


def riemann_gain_area(old, new, lo, hi, steps=200_000):
    """Fine-grid quadrature oracle over log10 cost."""
    import math as m

    def step_acc(frontier, cost):
        vals = [p.accuracy for p in frontier if p.cost_usd <= cost]
        return max(vals) if vals else -m.inf

    a, b = m.log10(lo), m.log10(hi)
    total = 0.0
    width = (b - a) / steps
    for i in range(steps):
        c = 10 ** (a + (i + 0.5) * width)
        total += max(0.0, step_acc(new, c) - step_acc(old, c)) * width
    return total


class TestFrontierGainArea:
    def test_identical_frontiers_zero(self):
        pts = [ParetoPoint("a", 1, 0.5), ParetoPoint("b", 10, 0.7)]
        assert frontier_gain_area(pts, pts) == 0.0

    def test_uniform_gain_over_one_decade(self):
        old = [ParetoPoint("o1", 1, 0.50), ParetoPoint("o2", 10, 0.55)]
        new = [ParetoPoint("n1", 1, 0.60), ParetoPoint("n2", 10, 0.65)]
        assert frontier_gain_area(old, new) == pytest.approx(0.1, rel=1e-12)

    def test_two_step_case_matches_quadrature_oracle(self):
        old = [ParetoPoint("o1", 1, 0.40), ParetoPoint("o2", 5, 0.55), ParetoPoint("o3", 50, 0.60)]
        new = [ParetoPoint("n1", 2, 0.50), ParetoPoint("n2", 20, 0.75), ParetoPoint("n3", 40, 0.80)]
        got = frontier_gain_area(old, new)
        # shared interval is [max(mins), min(maxes)] = [2, 40]
        expected = riemann_gain_area(old, new, 2, 40)
        assert got == pytest.approx(expected, abs=1e-4)
        # exact hand computation over the same breakpoints:
        # [2,5): new 0.50 vs old 0.40 -> 0.10 over log10(5/2)
        # [5,20): new 0.50 vs old 0.55 -> 0
        # [20,40]: new 0.75 vs old 0.55 -> 0.20 over log10(40/20)
        exact = 0.10 * math.log10(5 / 2) + 0.20 * math.log10(40 / 20)
        assert got == pytest.approx(exact, abs=1e-9)

    def test_disjoint_ranges_zero_with_warning(self, caplog):
        old = [ParetoPoint("o", 1, 0.5), ParetoPoint("o2", 2, 0.6)]
        new = [ParetoPoint("n", 100, 0.9), ParetoPoint("n2", 200, 0.95)]
        with caplog.at_level("WARNING"):
            assert frontier_gain_area(old, new) == 0.0
        assert any("disjoint" in rec.message for rec in caplog.records)

    def test_linear_domain_flag(self):
        old = [ParetoPoint("o1", 1, 0.5), ParetoPoint("o2", 3, 0.5)]
        new = [ParetoPoint("n1", 1, 0.6), ParetoPoint("n2", 3, 0.6)]
        assert frontier_gain_area(old, new, log_domain=False) == pytest.approx(0.2, rel=1e-12)


def run_record(model, dataset, mode, accuracy, run_id=""):
    return RunRecord(
        run_id=run_id or f"{model}-{dataset}-{mode}",
        model=model,
        dataset=dataset,
        mode=mode,
        n_ensembles=20 if mode == "sc_cot_cr" else 1,
        accuracy=accuracy,
        prompt_tokens_total=1000,
        completion_tokens_total=500,
    )


class TestAggregateTable:
    def test_published_benchmark_row_deltas(self):
        # Llama-3.1-8B row: baselines and CR deltas across the four sets
        baselines = {"CareQA": 0.6995, "MedMCQA": 0.5922, "MedQA": 0.6371, "MMLU-med": 0.7572}
        deltas = {"CareQA": 0.0607, "MedMCQA": 0.1279, "MedQA": 0.1736, "MMLU-med": 0.0933}
        records = []
        for ds, acc in baselines.items():
            records.append(run_record("llama-8b", ds, "zero_shot", acc))
            records.append(run_record("llama-8b", ds, "sc_cot_cr", acc + deltas[ds]))
        [row] = aggregate_table(
            records,
            baseline_mode="zero_shot",
            treatment_mode="sc_cot_cr",
            datasets=("CareQA", "MedMCQA", "MedQA", "MMLU-med"),
        )
        assert row.baseline_pct["MedQA"] == pytest.approx(63.71, abs=0.01)
        assert row.delta_pct["MedQA"] == pytest.approx(17.36, abs=0.01)
        assert row.baseline_avg_pct == pytest.approx(67.15, abs=0.01)
        assert row.delta_avg_pct == pytest.approx(11.39, abs=0.01)
        assert row.incomplete is False

    def test_equal_runs_zero_delta(self):
        records = [
            run_record("m", "MedQA", "zero_shot", 0.5, run_id="a"),
            run_record("m", "MedQA", "sc_cot_cr", 0.5, run_id="b"),
        ]
        [row] = aggregate_table(records, baseline_mode="zero_shot", treatment_mode="sc_cot_cr")
        assert row.delta_pct["MedQA"] == pytest.approx(0.0, abs=1e-12)

    def test_four_dataset_synthetic_averages(self):
        datasets = ("d1", "d2", "d3", "d4")
        base = (0.40, 0.50, 0.60, 0.70)
        treat = (0.45, 0.58, 0.61, 0.78)
        records = []
        for ds, b, t in zip(datasets, base, treat):
            records.append(run_record("syn", ds, "cot", b))
            records.append(run_record("syn", ds, "sc_cot_cr", t))
        [row] = aggregate_table(records, baseline_mode="cot", treatment_mode="sc_cot_cr", datasets=datasets)
        assert row.baseline_avg_pct == pytest.approx(100 * sum(base) / 4)
        assert row.delta_avg_pct == pytest.approx(100 * (sum(treat) - sum(base)) / 4)

    def test_missing_pair_flagged_incomplete(self):
        records = [
            run_record("m", "MedQA", "zero_shot", 0.5),
            run_record("m", "MedQA", "sc_cot_cr", 0.6),
            run_record("m", "CareQA", "zero_shot", 0.5),
        ]
        [row] = aggregate_table(
            records, baseline_mode="zero_shot", treatment_mode="sc_cot_cr",
            datasets=("MedQA", "CareQA"),
        )
        assert row.incomplete is True
        assert "CareQA" not in row.delta_pct


class TestReports:
    def _records(self):
        return [
            run_record("m1", "MedQA", "sc_cot_cr", 0.8107, run_id="r1"),
            run_record("m2", "MedQA", "zero_shot", 0.6371, run_id="r2"),
        ]

    def test_csv_has_header_and_rows(self, tmp_path):
        emit_report(self._records(), tmp_path, formats=("csv",))
        lines = (tmp_path / "runs.csv").read_text().strip().splitlines()
        assert len(lines) == 3
        assert lines[0].startswith("run_id,model,dataset")

    def test_json_round_trip(self, tmp_path):
        records = self._records()
        emit_report(records, tmp_path, formats=("json",))
        assert load_report(tmp_path / "runs.json") == records

    def test_unknown_format(self, tmp_path):
        with pytest.raises(MetricsError, match="format"):
            emit_report(self._records(), tmp_path, formats=("xml",))

    def test_frontier_plot_data_flags(self, tmp_path):
        pts = [ParetoPoint("a", 1, 0.70), ParetoPoint("b", 2, 0.60), ParetoPoint("c", 3, 0.80)]
        frontier = emit_frontier_plot_data(pts, tmp_path / "frontier.csv")
        assert [p.label for p in frontier] == ["a", "c"]
        rows = (tmp_path / "frontier.csv").read_text().strip().splitlines()
        assert rows[0] == "label,cost_usd,accuracy,marker,on_frontier"
        flags = {line.split(",")[0]: line.split(",")[-1] for line in rows[1:]}
        assert flags == {"a": "1", "b": "0", "c": "1"}

    def test_records_recomputable(self):
        usage = TokenUsage(2_500_000, 400_000)
        record = RunRecord(
            run_id="r",
            model="cheap",
            dataset="MedQA",
            mode="sc_cot",
            n_ensembles=5,
            accuracy=0.7,
            prompt_tokens_total=usage.prompt_tokens,
            completion_tokens_total=usage.completion_tokens,
            cost_usd=compute_cost(usage, "cheap", PRICES),
        )
        recomputed = compute_cost(record.usage, "cheap", PRICES)
        assert abs(recomputed - record.cost_usd) <= 1e-12 * max(1.0, abs(record.cost_usd))


class TestValidation:
    def test_accuracy_bounds(self):
        with pytest.raises(MetricsError):
            run_record("m", "d", "cot", 1.2)

    def test_negative_price_rejected(self):
        with pytest.raises(MetricsError):
            ModelPrice(-0.1, 0.2)

    def test_pareto_point_cost_positive(self):
        with pytest.raises(MetricsError):
            ParetoPoint("x", 0.0, 0.5)

    def test_price_table_needs_snapshot_date(self):
        with pytest.raises(MetricsError, match="snapshot_date"):
            PriceTable(prices={}, snapshot_date="")

    def test_energy_validation(self):
        with pytest.raises(MetricsError):
            ModelEnergy(throughput_tokens_per_s=0, gpu_power_watts=100)
