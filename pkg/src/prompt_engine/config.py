"""Run configuration: strict JSON parsing, defaults, and a stable digest.

Unknown keys are rejected so ablation runs stay honest; pass lax=True to
log them instead. The digest is a SHA-256 over the canonicalized config
with defaults applied, so semantically equal files hash identically
regardless of key order.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .client import DEFAULT_API_KEY_ENV, Endpoint, RetryPolicy
from .datasets import DATASETS, SPLITS

logger = logging.getLogger(__name__)

ENDPOINT_ROLES = ("generator", "embedder", "reranker", "judge")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str = ""
    api_key_env: str = DEFAULT_API_KEY_ENV
    timeout: float = 120.0

    def to_endpoint(self) -> Endpoint:
        return Endpoint(
            base_url=self.base_url,
            model=self.model,
            api_key_env=self.api_key_env,
            timeout=self.timeout,
        )


@dataclass(frozen=True)
class DatasetConfig:
    path: str
    format: str
    split: str = "test"
    mmlu_subtasks: tuple[str, ...] | None = None


@dataclass(frozen=True)
class RunSection:
    dataset: str = ""
    mode: str = "sc_cot"
    n_ensembles: int = 5
    k_exemplars: int = 5
    seed: int = 0
    temperature: float | None = None
    max_tokens: int = 2048
    shuffle_choices: bool = True
    shuffle_exemplars: bool = True
    db_path: str = ""
    embedding_cache: str = ""
    text_recipe: str = "question_options"
    include_unverified: bool = False
    use_reranker: bool = False


@dataclass(frozen=True)
class RunConfig:
    endpoints: Mapping[str, EndpointConfig]
    datasets: Mapping[str, DatasetConfig]
    run: RunSection
    price_table_path: str = ""
    energy_profile_path: str = ""
    concurrency: int = 4
    out_dir: str = "runs/out"
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    config_digest: str = ""

    def endpoint(self, role: str) -> Endpoint:
        if role not in self.endpoints:
            raise ConfigError(
                f"config has no endpoints.{role} section; configured roles: "
                f"{sorted(self.endpoints) or 'none'}"
            )
        return self.endpoints[role].to_endpoint()

    def dataset(self, name: str) -> DatasetConfig:
        if name not in self.datasets:
            raise ConfigError(
                f"config has no datasets.{name!r} entry; configured: {sorted(self.datasets)}"
            )
        return self.datasets[name]


_SCHEMA: dict[str, Any] = {
    "endpoints": {role: {"base_url", "model", "api_key_env", "timeout"} for role in ENDPOINT_ROLES},
    "datasets": None,  # free-form names, fixed per-entry keys
    "run": {
        "dataset",
        "mode",
        "n_ensembles",
        "k_exemplars",
        "seed",
        "temperature",
        "max_tokens",
        "shuffle_choices",
        "shuffle_exemplars",
        "db_path",
        "embedding_cache",
        "text_recipe",
        "include_unverified",
        "use_reranker",
    },
    "pricing": {"price_table", "energy_profile"},
    "retry": {"max_attempts", "base_backoff", "backoff_multiplier", "retryable_statuses"},
    "concurrency": None,
    "out_dir": None,
}

_DATASET_KEYS = {"path", "format", "split", "mmlu_subtasks"}


def _reject_unknown(found: Mapping[str, Any], allowed: set[str], where: str, lax: bool) -> None:
    unknown = sorted(set(found) - allowed)
    if not unknown:
        return
    message = f"unknown config key{'s' if len(unknown) > 1 else ''} in {where}: {', '.join(unknown)}"
    if lax:
        logger.warning("%s (lax mode, ignoring)", message)
    else:
        raise ConfigError(message)


def parse_config(path: str | Path, lax: bool = False) -> RunConfig:
    """Load, validate, default-fill, and digest a JSON config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file does not exist: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return parse_config_dict(raw, lax=lax, base_dir=path.parent)


def parse_config_dict(
    raw: Mapping[str, Any], lax: bool = False, base_dir: Path | None = None
) -> RunConfig:
    _reject_unknown(raw, set(_SCHEMA), "top level", lax)

    endpoints_raw = raw.get("endpoints", {})
    _reject_unknown(endpoints_raw, set(ENDPOINT_ROLES), "endpoints", lax)
    endpoints = {}
    for role, spec in endpoints_raw.items():
        if role not in ENDPOINT_ROLES:
            continue
        _reject_unknown(spec, _SCHEMA["endpoints"][role], f"endpoints.{role}", lax)
        if "base_url" not in spec:
            raise ConfigError(f"endpoints.{role}: missing required key base_url")
        endpoints[role] = EndpointConfig(
            base_url=spec["base_url"],
            model=spec.get("model", ""),
            api_key_env=spec.get("api_key_env", DEFAULT_API_KEY_ENV),
            timeout=float(spec.get("timeout", 120.0)),
        )

    datasets = {}
    for name, spec in raw.get("datasets", {}).items():
        _reject_unknown(spec, _DATASET_KEYS, f"datasets.{name}", lax)
        missing = [k for k in ("path", "format") if k not in spec]
        if missing:
            raise ConfigError(f"datasets.{name}: missing required keys: {', '.join(missing)}")
        if spec["format"] not in DATASETS:
            raise ConfigError(
                f"datasets.{name}: unknown format {spec['format']!r}, expected one of {DATASETS}"
            )
        split = spec.get("split", "test")
        if split not in SPLITS:
            raise ConfigError(f"datasets.{name}: unknown split {split!r}")
        dpath = _resolve(spec["path"], base_dir)
        if not Path(dpath).exists():
            raise ConfigError(f"datasets.{name}: path does not exist: {dpath}")
        subtasks = spec.get("mmlu_subtasks")
        datasets[name] = DatasetConfig(
            path=dpath,
            format=spec["format"],
            split=split,
            mmlu_subtasks=tuple(subtasks) if subtasks else None,
        )

    run_raw = raw.get("run", {})
    _reject_unknown(run_raw, _SCHEMA["run"], "run", lax)
    run = RunSection(
        dataset=run_raw.get("dataset", ""),
        mode=run_raw.get("mode", "sc_cot"),
        n_ensembles=int(run_raw.get("n_ensembles", 5)),
        k_exemplars=int(run_raw.get("k_exemplars", 5)),
        seed=int(run_raw.get("seed", 0)),
        temperature=(
            None if run_raw.get("temperature") is None else float(run_raw["temperature"])
        ),
        max_tokens=int(run_raw.get("max_tokens", 2048)),
        shuffle_choices=bool(run_raw.get("shuffle_choices", True)),
        shuffle_exemplars=bool(run_raw.get("shuffle_exemplars", True)),
        db_path=_resolve(run_raw.get("db_path", ""), base_dir),
        embedding_cache=_resolve(run_raw.get("embedding_cache", ""), base_dir),
        text_recipe=run_raw.get("text_recipe", "question_options"),
        include_unverified=bool(run_raw.get("include_unverified", False)),
        use_reranker=bool(run_raw.get("use_reranker", False)),
    )
    if run.db_path and not Path(run.db_path).exists():
        raise ConfigError(f"run.db_path does not exist: {run.db_path}")

    pricing_raw = raw.get("pricing", {})
    _reject_unknown(pricing_raw, _SCHEMA["pricing"], "pricing", lax)
    price_table_path = _resolve(pricing_raw.get("price_table", ""), base_dir)
    energy_profile_path = _resolve(pricing_raw.get("energy_profile", ""), base_dir)
    for label, p in (("price_table", price_table_path), ("energy_profile", energy_profile_path)):
        if p and not Path(p).exists():
            raise ConfigError(f"pricing.{label} does not exist: {p}")

    retry_raw = raw.get("retry", {})
    _reject_unknown(retry_raw, _SCHEMA["retry"], "retry", lax)
    retry = RetryPolicy(
        max_attempts=int(retry_raw.get("max_attempts", 3)),
        base_backoff=float(retry_raw.get("base_backoff", 0.5)),
        backoff_multiplier=float(retry_raw.get("backoff_multiplier", 2.0)),
        retryable_statuses=frozenset(
            int(s) for s in retry_raw.get("retryable_statuses", (408, 429, 500, 502, 503, 504))
        ),
    )

    config = RunConfig(
        endpoints=endpoints,
        datasets=datasets,
        run=run,
        price_table_path=price_table_path,
        energy_profile_path=energy_profile_path,
        concurrency=int(raw.get("concurrency", 4)),
        out_dir=_resolve(raw.get("out_dir", "runs/out"), base_dir),
        retry=retry,
    )
    object.__setattr__(config, "config_digest", config_digest(config))
    return config


def _resolve(p: str, base_dir: Path | None) -> str:
    if not p:
        return ""
    path = Path(p)
    if base_dir is not None and not path.is_absolute():
        return str(base_dir / path)
    return str(path)


def canonical_dict(config: RunConfig) -> dict[str, Any]:
    """Fully defaulted, order-independent view of a config."""
    return {
        "endpoints": {
            role: {
                "base_url": e.base_url,
                "model": e.model,
                "api_key_env": e.api_key_env,
                "timeout": e.timeout,
            }
            for role, e in sorted(config.endpoints.items())
        },
        "datasets": {
            name: {
                "path": d.path,
                "format": d.format,
                "split": d.split,
                "mmlu_subtasks": list(d.mmlu_subtasks) if d.mmlu_subtasks else None,
            }
            for name, d in sorted(config.datasets.items())
        },
        "run": {
            "dataset": config.run.dataset,
            "mode": config.run.mode,
            "n_ensembles": config.run.n_ensembles,
            "k_exemplars": config.run.k_exemplars,
            "seed": config.run.seed,
            "temperature": config.run.temperature,
            "max_tokens": config.run.max_tokens,
            "shuffle_choices": config.run.shuffle_choices,
            "shuffle_exemplars": config.run.shuffle_exemplars,
            "db_path": config.run.db_path,
            "embedding_cache": config.run.embedding_cache,
            "text_recipe": config.run.text_recipe,
            "include_unverified": config.run.include_unverified,
            "use_reranker": config.run.use_reranker,
        },
        "pricing": {
            "price_table": config.price_table_path,
            "energy_profile": config.energy_profile_path,
        },
        "retry": {
            "max_attempts": config.retry.max_attempts,
            "base_backoff": config.retry.base_backoff,
            "backoff_multiplier": config.retry.backoff_multiplier,
            "retryable_statuses": sorted(config.retry.retryable_statuses),
        },
        "concurrency": config.concurrency,
        "out_dir": config.out_dir,
    }


def config_digest(config: RunConfig) -> str:
    canon = json.dumps(canonical_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()
