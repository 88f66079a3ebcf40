"""Command-line entry point: prompt-engine {build-db,embed,run,judge,pareto,report,mock}.

Every run-producing command writes a manifest.json beside its outputs
with the config digest, seed, and versions, which is enough to re-run
the job bit-identically against the same backend script.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from importlib import metadata
from pathlib import Path
from typing import Any, Sequence

from . import config as cfg
from . import engine, index, knowledge, metrics, openqa
from .datasets import load_mcqa_dataset, check_expected_count
from .mockserver import MockScript, MockServer

logger = logging.getLogger(__name__)


def _package_version() -> str:
    try:
        return metadata.version("prompt-engine")
    except metadata.PackageNotFoundError:
        return "0.0.0-dev"


def _write_manifest(out_dir: Path, command: str, config: cfg.RunConfig | None, extra: dict[str, Any]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_digest": config.config_digest if config else "",
        "config": cfg.canonical_dict(config) if config else None,
        "seed": config.run.seed if config else None,
        "package_version": _package_version(),
        "python_version": platform.python_version(),
        "started_at": extra.pop("started_at", ""),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        **extra,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _load_split(config: cfg.RunConfig, dataset_name: str):
    dconf = config.dataset(dataset_name)
    split = load_mcqa_dataset(
        dconf.path, dconf.format, dconf.split, mmlu_subtasks=dconf.mmlu_subtasks
    )
    check_expected_count(split)
    return split, dconf


def cmd_build_db(args: argparse.Namespace) -> int:
    config = cfg.parse_config(args.config, lax=args.lax)
    started = _now()
    dataset_name = args.dataset or config.run.dataset
    if not dataset_name:
        raise cfg.ConfigError("build-db needs --dataset or run.dataset in the config")
    split, _ = _load_split(config, dataset_name)
    endpoint = config.endpoint("generator")
    out_path = Path(args.out)
    existing = knowledge.load_db(out_path) if out_path.exists() else []
    new_entries = knowledge.generate_entries(
        split,
        args.strategy,
        endpoint,
        retry_policy=config.retry,
        existing=existing,
        concurrency=config.concurrency,
        max_tokens=config.run.max_tokens,
    )
    knowledge.append_db(new_entries, out_path)
    _write_manifest(
        out_path.parent,
        "build-db",
        config,
        {
            "started_at": started,
            "strategy": args.strategy,
            "dataset": dataset_name,
            "new_entries": len(new_entries),
            "total_entries": len(existing) + len(new_entries),
            "db_path": str(out_path),
        },
    )
    print(f"build-db: {len(new_entries)} new entries, {len(existing) + len(new_entries)} total -> {out_path}")
    return 0


def cmd_embed(args: argparse.Namespace) -> int:
    config = cfg.parse_config(args.config, lax=args.lax)
    started = _now()
    db_path = args.db or config.run.db_path
    if not db_path:
        raise cfg.ConfigError("embed needs --db or run.db_path in the config")
    entries = knowledge.retrieval_entries(
        knowledge.load_db(db_path), config.run.include_unverified
    )
    if not entries:
        raise cfg.ConfigError(f"database {db_path} has no retrievable entries")
    endpoint = config.endpoint("embedder")
    cache_path = args.out or config.run.embedding_cache or str(Path(db_path).with_suffix(".cache.jsonl"))
    vectors = index.embed_corpus_cached(
        entries,
        endpoint,
        cache_path,
        text_recipe=config.run.text_recipe,
        policy=config.retry,
    )
    corpus = index.build_index(entries, vectors, endpoint.model, config.run.text_recipe)
    _write_manifest(
        Path(cache_path).parent,
        "embed",
        config,
        {
            "started_at": started,
            "db_path": str(db_path),
            "cache_path": str(cache_path),
            "entries": corpus.size,
            "dim": corpus.dim,
        },
    )
    print(f"embed: {corpus.size} entries, dim {corpus.dim}, cache -> {cache_path}")
    return 0


def _build_context(config: cfg.RunConfig, params: engine.GenerationParams, out_dir: Path) -> engine.BenchmarkContext:
    dconf = config.dataset(config.run.dataset)
    ctx = engine.BenchmarkContext(
        generator=config.endpoint("generator"),
        run_seed=config.run.seed,
        retry_policy=config.retry,
        concurrency=config.concurrency,
        dataset=dconf.format,
        text_recipe=config.run.text_recipe,
        out_dir=out_dir,
        config_digest=config.config_digest,
    )
    if config.price_table_path:
        ctx.price_table = metrics.PriceTable.from_json(config.price_table_path)
    if config.energy_profile_path:
        ctx.energy_profile = metrics.EnergyProfile.from_json(config.energy_profile_path)
    if params.mode == "sc_cot_cr":
        if not config.run.db_path:
            raise cfg.ConfigError("mode sc_cot_cr requires run.db_path in the config")
        entries = knowledge.retrieval_entries(
            knowledge.load_db(config.run.db_path), config.run.include_unverified
        )
        if not entries:
            raise cfg.ConfigError(f"database {config.run.db_path} has no retrievable entries")
        embedder = config.endpoint("embedder")
        cache_path = config.run.embedding_cache or str(
            Path(config.run.db_path).with_suffix(".cache.jsonl")
        )
        vectors = index.embed_corpus_cached(
            entries, embedder, cache_path, text_recipe=config.run.text_recipe, policy=config.retry
        )
        ctx.corpus = index.build_index(entries, vectors, embedder.model, config.run.text_recipe)
        ctx.entries_by_id = {e.id: e for e in entries}
        ctx.embedder = embedder
        if config.run.use_reranker:
            ctx.reranker = config.endpoint("reranker")
    return ctx


def cmd_run(args: argparse.Namespace) -> int:
    config = cfg.parse_config(args.config, lax=args.lax)
    started = _now()
    overrides = {}
    if args.dataset:
        overrides["dataset"] = args.dataset
    if args.mode:
        overrides["mode"] = args.mode
    if args.n is not None:
        overrides["n_ensembles"] = args.n
    if args.k is not None:
        overrides["k_exemplars"] = args.k
    if args.db:
        overrides["db_path"] = args.db
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        raw = cfg.canonical_dict(config)
        raw["run"].update(overrides)
        config = cfg.parse_config_dict(raw, lax=args.lax)
    if not config.run.dataset:
        raise cfg.ConfigError("run needs --dataset or run.dataset in the config")
    params = engine.GenerationParams(
        mode=config.run.mode,
        n_ensembles=config.run.n_ensembles,
        temperature=config.run.temperature,
        max_tokens=config.run.max_tokens,
        k_exemplars=config.run.k_exemplars,
        shuffle_choices=config.run.shuffle_choices,
        shuffle_exemplars=config.run.shuffle_exemplars,
    )
    out_dir = Path(args.out or config.out_dir)
    split, _ = _load_split(config, config.run.dataset)
    ctx = _build_context(config, params, out_dir)
    try:
        record, results = engine.run_benchmark(split, params, ctx)
    except engine.EngineError as e:
        print(
            f"run failed: {e}\npartial results kept in {out_dir / 'results.jsonl'}; "
            "rerun the same command to resume",
            file=sys.stderr,
        )
        return 1
    if params.n_ensembles > 1:
        rows = engine.sweep_accuracies(results, list(range(1, params.n_ensembles + 1)))
        for row in rows:
            row["series"] = record.dataset
            if ctx.energy_profile is not None:
                from .client import TokenUsage

                row["energy_kwh"] = metrics.estimate_energy(
                    TokenUsage(0, row["completion_tokens"]), record.model, ctx.energy_profile
                )
        metrics.emit_sweep_plot_data(rows, out_dir / "ensemble_sweep.csv")
    _write_manifest(
        out_dir,
        "run",
        config,
        {
            "started_at": started,
            "run_id": record.run_id,
            "questions": len(results),
            "accuracy": record.accuracy,
        },
    )
    print(
        f"run {record.run_id}: accuracy {record.accuracy:.4f} over {len(results)} questions, "
        f"tokens {record.prompt_tokens_total}/{record.completion_tokens_total}, "
        f"cost ${record.cost_usd:.4f}, energy {record.energy_kwh:.6f} kWh"
    )
    return 0


def cmd_judge(args: argparse.Namespace) -> int:
    config = cfg.parse_config(args.config, lax=args.lax)
    started = _now()
    out_dir = Path(args.out or config.out_dir)
    if args.rephrase_out:
        dataset_name = args.dataset or config.run.dataset
        if not dataset_name:
            raise cfg.ConfigError("judge --rephrase-out needs --dataset or run.dataset")
        split, _ = _load_split(config, dataset_name)
        skip_ids = set(args.skip_id or [])
        open_qs, flagged = openqa.rephrase_dataset(
            split,
            config.endpoint("generator"),
            skip_ids,
            retry_policy=config.retry,
            concurrency=config.concurrency,
        )
        openqa.check_reference_integrity(open_qs, split)
        openqa.save_open_questions(open_qs, args.rephrase_out)
        _write_manifest(
            Path(args.rephrase_out).parent,
            "judge.rephrase",
            config,
            {
                "started_at": started,
                "source_questions": len(split),
                "open_questions": len(open_qs),
                "skipped": len(skip_ids),
                "flagged": flagged,
            },
        )
        print(
            f"rephrase: {len(open_qs)} open questions "
            f"({len(skip_ids)} skipped, {len(flagged)} flagged) -> {args.rephrase_out}"
        )
        return 0
    if not args.open or not args.mc_run:
        raise cfg.ConfigError("judge needs either --rephrase-out or both --open and --mc-run")
    open_qs = openqa.load_open_questions(args.open)
    mc_record = metrics.RunRecord.from_json_dict(
        json.loads(Path(args.mc_run).read_text(encoding="utf-8"))
    )
    result = openqa.evaluate_open(
        open_qs,
        config.endpoint("generator"),
        config.endpoint("judge"),
        mc_record,
        retry_policy=config.retry,
        concurrency=config.concurrency,
        transcript_path=out_dir / "judge_transcript.jsonl",
    )
    row = result.table_row(mc_record.model)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "open_eval.json").write_text(
        json.dumps(row, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _write_manifest(out_dir, "judge.evaluate", config, {"started_at": started, **row})
    print(
        f"open eval: mc {row['mc_accuracy_pct']:.2f} open {row['open_accuracy_pct']:.2f} "
        f"drop {row['drop_pct']:+.2f} (unparseable {row['unparseable_pct']:.2f}%)"
    )
    return 0


def cmd_pareto(args: argparse.Namespace) -> int:
    points: list[metrics.ParetoPoint] = []
    for records_path in args.records:
        for record in metrics.load_report(records_path):
            points.append(
                metrics.ParetoPoint(
                    label=record.run_id,
                    cost_usd=record.cost_usd,
                    accuracy=record.accuracy,
                    open_source=True,
                )
            )
    if args.reference:
        for ref in json.loads(Path(args.reference).read_text(encoding="utf-8")):
            points.append(
                metrics.ParetoPoint(
                    label=ref["label"],
                    cost_usd=float(ref["cost_usd"]),
                    accuracy=float(ref["accuracy"]),
                    open_source=bool(ref.get("open_source", False)),
                )
            )
    if not points:
        print("pareto: no points found in the given records", file=sys.stderr)
        return 1
    out_dir = Path(args.out)
    frontier = metrics.emit_frontier_plot_data(points, out_dir / "frontier.csv")
    summary: dict[str, Any] = {
        "points": len(points),
        "frontier_size": len(frontier),
        "frontier_labels": [p.label for p in frontier],
    }
    if args.baseline:
        base_points = [
            metrics.ParetoPoint(
                label=ref["label"],
                cost_usd=float(ref["cost_usd"]),
                accuracy=float(ref["accuracy"]),
                open_source=bool(ref.get("open_source", False)),
            )
            for ref in json.loads(Path(args.baseline).read_text(encoding="utf-8"))
        ]
        old_frontier = metrics.pareto_frontier(base_points)
        summary["gain_area_log10"] = metrics.frontier_gain_area(old_frontier, frontier)
    (out_dir / "pareto_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"pareto: {summary['frontier_size']} of {summary['points']} points on the frontier -> {out_dir}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    records = []
    for records_path in args.records:
        records.extend(metrics.load_report(records_path))
    if args.run_record:
        for p in args.run_record:
            records.append(
                metrics.RunRecord.from_json_dict(json.loads(Path(p).read_text(encoding="utf-8")))
            )
    if not records:
        print("report: no records given", file=sys.stderr)
        return 1
    written = metrics.emit_report(records, args.out, formats=args.format.split(","))
    if args.baseline_mode and args.treatment_mode:
        rows = metrics.aggregate_table(
            records, baseline_mode=args.baseline_mode, treatment_mode=args.treatment_mode
        )
        table_path = Path(args.out) / "delta_table.json"
        table_path.write_text(
            json.dumps(
                [
                    {
                        "model": r.model,
                        "baseline_pct": dict(r.baseline_pct),
                        "delta_pct": dict(r.delta_pct),
                        "baseline_avg_pct": r.baseline_avg_pct,
                        "delta_avg_pct": r.delta_avg_pct,
                        "incomplete": r.incomplete,
                    }
                    for r in rows
                ],
                indent=2,
                sort_keys=True,
            )
            + "\n",
            encoding="utf-8",
        )
        written.append(table_path)
    print(f"report: wrote {', '.join(str(p) for p in written)}")
    return 0


def cmd_mock(args: argparse.Namespace) -> int:
    script = MockScript.from_json(args.script)
    server = MockServer(script, port=args.port)
    server.start()
    print(f"mock server listening on {server.base_url} (Ctrl-C to stop)")
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        server.stop()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prompt-engine",
        description="Context-retrieval and self-consistency evaluation engine for MCQA benchmarks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--lax", action="store_true", help="log unknown config keys instead of failing")

    p = sub.add_parser("build-db", help="generate a reasoning-augmented exemplar database")
    add_common(p)
    p.add_argument("--dataset", help="dataset name from the config (default: run.dataset)")
    p.add_argument("--strategy", required=True, choices=[s.value for s in knowledge.Strategy])
    p.add_argument("--out", required=True, help="database JSONL to create or resume")
    p.set_defaults(func=cmd_build_db)

    p = sub.add_parser("embed", help="build or refresh the embedding cache for a database")
    add_common(p)
    p.add_argument("--db", help="database JSONL (default: run.db_path)")
    p.add_argument("--out", help="cache path (default: run.embedding_cache)")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("run", help="evaluate a dataset split")
    add_common(p)
    p.add_argument("--dataset", help="dataset name from the config")
    p.add_argument("--mode", choices=engine.MODES)
    p.add_argument("--n", type=int, help="ensemble size")
    p.add_argument("--k", type=int, help="few-shot exemplar count")
    p.add_argument("--db", help="knowledge database path")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--out", help="output directory (default: out_dir)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("judge", help="build or evaluate the open-ended benchmark")
    add_common(p)
    p.add_argument("--rephrase-out", help="write rephrased open questions here")
    p.add_argument("--dataset", help="dataset name to rephrase")
    p.add_argument("--skip-id", action="append", help="question id to skip (repeatable)")
    p.add_argument("--open", help="open-question JSONL to evaluate")
    p.add_argument("--mc-run", help="run_record.json of the paired multiple-choice run")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_judge)

    p = sub.add_parser("pareto", help="compute the cost-accuracy frontier")
    p.add_argument("--records", nargs="*", default=[], help="runs.json report files")
    p.add_argument("--reference", help="JSON list of external reference points")
    p.add_argument("--baseline", help="JSON list of points forming the old frontier")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("report", help="emit run-record reports and delta tables")
    p.add_argument("--records", nargs="*", default=[], help="runs.json report files")
    p.add_argument("--run-record", action="append", help="individual run_record.json (repeatable)")
    p.add_argument("--format", default="json,csv")
    p.add_argument("--baseline-mode", help="mode of baseline rows for the delta table")
    p.add_argument("--treatment-mode", help="mode of treatment rows for the delta table")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("mock", help="serve the deterministic mock backend")
    p.add_argument("--script", required=True, help="mock script JSON")
    p.add_argument("--port", type=int, default=8080)
    p.set_defaults(func=cmd_mock)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (cfg.ConfigError, knowledge.KnowledgeError, metrics.MetricsError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # surface anything else with a nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
